use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::step;
use crate::error::Result;

use super::disturbance::sample_disturbance;
use super::planner::{NominalPlan, TrialSetup};
use super::scenario::Scenario;

/// Disturbed closed-loop execution of a nominal plan.
#[derive(Debug, Clone)]
pub struct Executed {
    /// `states[i][t]`, `t = 0..=T`.
    pub states: Vec<Vec<DVector<f64>>>,
    /// Applied controls `ū + K(x − x̄)`, `t = 0..T`.
    pub controls: Vec<Vec<DVector<f64>>>,
    pub disturbances: Vec<Vec<DVector<f64>>>,
}

/// Track the nominal plan with the gain used for the reachable sets, injecting truncated
/// Gaussian disturbances held over each step. Draws are ordered by step, then agent.
/// The error is taken in the nominal heading frame (see [`crate::dynamics::AgentModel::tracking_error`]).
pub fn execute_tracked(scenario: &Scenario, setup: &TrialSetup, plan: &NominalPlan) -> Result<Executed> {
    let model = &scenario.model;
    let n = scenario.n_agents();
    let t_total = scenario.steps;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(2);
    let mut states: Vec<Vec<DVector<f64>>> = plan.states.iter().map(|s| vec![s[0].clone()]).collect();
    let mut controls = vec![Vec::with_capacity(t_total); n];
    let mut disturbances = vec![Vec::with_capacity(t_total); n];
    let heading_ref: Vec<f64> = setup
        .frs
        .iter()
        .map(|f| model.heading_index().map(|h| f.linearization.reference_state[h]).unwrap_or(0.0))
        .collect();
    for t in 0..t_total {
        for i in 0..n {
            let w = sample_disturbance(scenario.sigma, model.disturbance_dim, &mut rng);
            let x = &states[i][t];
            let e = model.tracking_error(x, &plan.states[i][t], heading_ref[i]);
            let u = &plan.controls[i][t] + &setup.frs[i].gain.k * e;
            let next = step(model, x, &u, &w, scenario.dt)?;
            states[i].push(next);
            controls[i].push(u);
            disturbances[i].push(w);
        }
    }
    Ok(Executed {
        states,
        controls,
        disturbances,
    })
}
