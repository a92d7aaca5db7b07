use rayon::prelude::*;
use serde::Serialize;

use crate::costs::CouplingPenalty;
use crate::error::Result;

use super::execute::{execute_tracked, Executed};
use super::metrics::{compute_metrics, Metrics};
use super::planner::{plan_nominal, prepare_trial, NominalPlan, TrialSetup};
use super::scenario::{scenario_for_seed, Scenario};

/// Everything produced by one trial.
#[derive(Debug, Clone)]
pub struct ExecutionRecord {
    pub scenario: Scenario,
    pub setup: TrialSetup,
    pub nominal: NominalPlan,
    pub executed: Executed,
    pub metrics: Metrics,
}

/// Plan, execute and score one scenario.
pub fn run_scenario(scenario: &Scenario) -> Result<ExecutionRecord> {
    let setup = prepare_trial(scenario)?;
    let nominal = plan_nominal(scenario, &setup)?;
    let executed = execute_tracked(scenario, &setup, &nominal)?;
    let iterations = nominal.certificates.iter().map(|c| c.iterations_used).collect();
    let metrics = compute_metrics(
        &scenario.model,
        &setup.references,
        &executed.states,
        &executed.controls,
        &nominal.neighbor_counts,
        iterations,
        scenario.d_col,
    );
    Ok(ExecutionRecord {
        scenario: scenario.clone(),
        setup,
        nominal,
        executed,
        metrics,
    })
}

pub fn run_trial(template: &Scenario, seed: u64) -> Result<ExecutionRecord> {
    run_scenario(&scenario_for_seed(template, seed)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Sample mean and (n−1) standard deviation, summed in the given order.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub tracking_cost: Stat,
    #[serde(rename = "dist_to_goal_at_Tm5")]
    pub dist_to_goal_at_tm5: Stat,
    pub collision_ratio: Stat,
    pub min_pairwise_distance: Stat,
    pub near_collision_count: Stat,
    pub avg_neighbors: Stat,
    /// Per-trial mean equilibrium iterations per planning step.
    pub ne_iterations: Stat,
}

impl Aggregate {
    pub fn of(metrics: &[&Metrics]) -> Self {
        let col = |f: &dyn Fn(&Metrics) -> f64| Stat::of(&metrics.iter().map(|m| f(m)).collect::<Vec<_>>());
        Self {
            tracking_cost: col(&|m| m.tracking_cost),
            dist_to_goal_at_tm5: col(&|m| m.dist_to_goal_at_tm5),
            collision_ratio: col(&|m| m.collision_ratio),
            min_pairwise_distance: col(&|m| m.min_pairwise_distance),
            near_collision_count: col(&|m| m.near_collision_count as f64),
            avg_neighbors: col(&|m| m.avg_neighbors),
            ne_iterations: col(&|m| {
                let it = &m.ne_iterations;
                if it.is_empty() {
                    0.0
                } else {
                    it.iter().sum::<usize>() as f64 / it.len() as f64
                }
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub seed: u64,
    pub result: std::result::Result<ExecutionRecord, String>,
}

impl TrialOutcome {
    pub fn metrics(&self) -> Option<&Metrics> {
        self.result.as_ref().ok().map(|r| &r.metrics)
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloReport {
    pub base_seed: u64,
    pub trials: Vec<TrialOutcome>,
    /// Over successful trials only.
    pub aggregate: Aggregate,
    pub failed: usize,
}

/// Trials with seeds `base_seed..base_seed + trials`. Results keep seed order, so the
/// aggregate does not depend on `parallel`.
pub fn monte_carlo(template: &Scenario, trials: usize, base_seed: u64, parallel: bool) -> Result<MonteCarloReport> {
    if trials == 0 {
        return Err(crate::Error::input("at least one trial is required"));
    }
    template.validate()?;
    let run = |k: u64| {
        let seed = base_seed + k;
        TrialOutcome {
            seed,
            result: run_trial(template, seed).map_err(|e| e.to_string()),
        }
    };
    let outcomes: Vec<TrialOutcome> = if parallel {
        (0..trials as u64).into_par_iter().map(run).collect()
    } else {
        (0..trials as u64).map(run).collect()
    };
    let ok: Vec<&Metrics> = outcomes.iter().filter_map(|o| o.metrics()).collect();
    let aggregate = Aggregate::of(&ok);
    let failed = outcomes.len() - ok.len();
    Ok(MonteCarloReport {
        base_seed,
        trials: outcomes,
        aggregate,
        failed,
    })
}

/// The same template with the reachability penalty replaced by a distance-only barrier at d_col.
pub fn ablation_euclidean(template: &Scenario) -> Scenario {
    let mut sc = template.clone();
    sc.penalty = CouplingPenalty::Euclidean { d_col: template.d_col };
    sc
}
