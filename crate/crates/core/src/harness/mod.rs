//! Experiment engine: receding-horizon planning, disturbed execution, metrics and trial aggregation.

pub mod config;
pub mod disturbance;
pub mod execute;
pub mod intersection;
pub mod metrics;
pub mod monte_carlo;
pub mod output;
pub mod planner;
pub mod scenario;
pub mod sweep;

pub use disturbance::sample_disturbance;
pub use execute::{execute_tracked, Executed};
pub use intersection::intersection_scenario;
pub use metrics::{compute_metrics, Metrics};
pub use monte_carlo::{ablation_euclidean, monte_carlo, run_scenario, run_trial, Aggregate, ExecutionRecord, MonteCarloReport};
pub use planner::{plan_nominal, prepare_trial, NominalPlan, TrialSetup};
pub use scenario::{antipodal_scenario, jittered_antipodal, random_scenario, scenario_for_seed, state_at, AgentSpec, Bounds, Layout, RandomLayout, Scenario};
pub use sweep::{grid_sweep, SweepReport};
