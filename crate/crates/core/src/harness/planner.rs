use nalgebra::{DMatrix, DVector};

use crate::costs::{occupancy_shape, reference_trajectory, GameProblem, PairShapes, ReferenceTrajectory};
use crate::dynamics::{step, AgentModel};
use crate::error::{Error, Result};
use crate::game::{neighbor_sets, neighbor_sets_anisotropic, solve_epsilon_ne, NeCertificate, NeOptions, NeighborMode, NeighborSchedule, StrategyProfile};
use crate::optimizer::rollout_flat;
use crate::reachability::{calibrate_eta, compute_frs_sequence, linearization_control, FrsSequence};

use super::scenario::Scenario;

/// Containment target used when calibrating η.
pub const CONTAINMENT_TARGET: f64 = 0.99;

/// Per-trial quantities computed once before planning.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub references: Vec<ReferenceTrajectory>,
    pub frs: Vec<FrsSequence>,
    /// `(η, containment ratio)` per agent when calibration ran.
    pub calibration: Vec<Option<(f64, f64)>>,
    pub pair_shapes: PairShapes,
    /// `occupancy[i][t]`: position shape grown by the body radius, `t = 0..=T`.
    pub occupancy: Vec<Vec<DMatrix<f64>>>,
}

/// Linearization point with the positions removed. Agents with equal keys share a sequence
/// because every model here is translation invariant.
fn share_key(model: &AgentModel, x0: &DVector<f64>, ubar: &DVector<f64>) -> Vec<u64> {
    let mut k: Vec<u64> = Vec::with_capacity(x0.len() + ubar.len());
    for (i, v) in x0.iter().enumerate() {
        k.push(if model.position_indices.contains(&i) { 0 } else { v.to_bits() });
    }
    k.extend(ubar.iter().map(|v| v.to_bits()));
    k
}

pub fn prepare_trial(scenario: &Scenario) -> Result<TrialSetup> {
    scenario.validate()?;
    let model = &scenario.model;
    let t_total = scenario.steps;
    let horizon_time = t_total as f64 * scenario.dt;
    let mut references = Vec::with_capacity(scenario.n_agents());
    let mut frs: Vec<FrsSequence> = Vec::with_capacity(scenario.n_agents());
    let mut calibration = Vec::with_capacity(scenario.n_agents());
    let mut cache: Vec<(Vec<u64>, FrsSequence, Option<(f64, f64)>)> = Vec::new();
    for a in &scenario.agents {
        references.push(reference_trajectory(model, &a.start, &a.goal, t_total, scenario.dt)?);
        let v_ref = DVector::from_iterator(
            model.position_dim(),
            model.position_indices.iter().map(|&i| (a.goal[i] - a.start[i]) / horizon_time),
        );
        let ubar = linearization_control(model, &a.start, &v_ref)?;
        let key = share_key(model, &a.start, &ubar);
        if let Some((_, f, c)) = cache.iter().find(|(k, _, _)| *k == key) {
            frs.push(f.clone());
            calibration.push(*c);
            continue;
        }
        let (f, c) = if scenario.calibrate_eta && scenario.frs.disturbance_bound > 0.0 {
            let cal = calibrate_eta(
                model,
                &a.start,
                &ubar,
                t_total,
                &scenario.frs,
                scenario.dt,
                scenario.calibration_samples.max(100),
                0,
                CONTAINMENT_TARGET,
            )?;
            let c = Some((cal.eta, cal.report.ratio));
            (cal.frs, c)
        } else {
            (compute_frs_sequence(model, &a.start, &ubar, t_total, &scenario.frs, scenario.dt)?, None)
        };
        cache.push((key, f.clone(), c));
        frs.push(f);
        calibration.push(c);
    }
    let occupancy: Vec<Vec<DMatrix<f64>>> = frs
        .iter()
        .map(|f| (0..=t_total).map(|t| occupancy_shape(f.position_shape(t), scenario.body_radius)).collect())
        .collect();
    let pair_shapes = PairShapes::from_occupancy(&occupancy, model.position_dim())?;
    Ok(TrialSetup {
        references,
        frs,
        calibration,
        pair_shapes,
        occupancy,
    })
}

/// Nominal part of an execution record.
#[derive(Debug, Clone)]
pub struct NominalPlan {
    /// `states[i][t]`, `t = 0..=T`.
    pub states: Vec<Vec<DVector<f64>>>,
    /// `controls[i][t]`, `t = 0..T`.
    pub controls: Vec<Vec<DVector<f64>>>,
    pub certificates: Vec<NeCertificate>,
    /// `neighbor_counts[t][i]`: neighborhood size at offset 0 of the window solved at step `t`.
    pub neighbor_counts: Vec<Vec<usize>>,
    /// Equilibrium profile of every window.
    pub profiles: Vec<StrategyProfile>,
}

fn shift(profile: &StrategyProfile, nu: usize) -> StrategyProfile {
    let controls = profile
        .controls
        .iter()
        .map(|c| {
            let n = c.len();
            DVector::from_fn(n, |k, _| if k + nu < n { c[k + nu] } else { c[n - nu + (k % nu)] })
        })
        .collect();
    StrategyProfile {
        controls,
        horizon: profile.horizon,
    }
}

fn window_schedule(
    scenario: &Scenario,
    setup: &TrialSetup,
    states: &[DVector<f64>],
    warm: &StrategyProfile,
    offset: usize,
) -> Result<NeighborSchedule> {
    let model = &scenario.model;
    let h = scenario.mpc_horizon;
    let nx = model.state_dim;
    let n = states.len();
    if scenario.neighbor_mode == NeighborMode::Full {
        return Ok(NeighborSchedule::full(n, h + 1));
    }
    let mut positions = Vec::with_capacity(n);
    for (x0, u) in states.iter().zip(&warm.controls) {
        let traj = rollout_flat(model, x0.as_slice(), u.as_slice(), h, scenario.dt)?;
        positions.push(
            (0..=h)
                .map(|k| DVector::from_iterator(model.position_dim(), model.position_indices.iter().map(|&i| traj[k * nx + i])))
                .collect::<Vec<_>>(),
        );
    }
    match scenario.neighbor_mode {
        NeighborMode::Euclidean => Ok(neighbor_sets(&positions, scenario.d_prox)),
        _ => {
            let t_max = scenario.steps;
            let shapes: Vec<Vec<DMatrix<f64>>> = setup
                .occupancy
                .iter()
                .map(|o| (0..=h).map(|k| o[(offset + k).min(t_max)].clone()).collect())
                .collect();
            neighbor_sets_anisotropic(&positions, &shapes)
        }
    }
}

/// Receding-horizon planning over the whole trial with disturbance-free nominal states.
pub fn plan_nominal(scenario: &Scenario, setup: &TrialSetup) -> Result<NominalPlan> {
    let model = &scenario.model;
    let n = scenario.n_agents();
    let h = scenario.mpc_horizon;
    let nu = model.control_dim;
    let t_total = scenario.steps;
    let opts = NeOptions {
        epsilon: scenario.epsilon,
        k_max: scenario.k_max,
        solver: scenario.solver,
        parallel: scenario.parallel,
    };
    let mut states: Vec<Vec<DVector<f64>>> = scenario.agents.iter().map(|a| vec![a.start.clone()]).collect();
    let mut controls: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(t_total); n];
    let mut certificates = Vec::with_capacity(t_total);
    let mut neighbor_counts = Vec::with_capacity(t_total);
    let mut profiles: Vec<StrategyProfile> = Vec::with_capacity(t_total);
    let zero_w = DVector::zeros(model.disturbance_dim);
    for s in 0..t_total {
        let current: Vec<DVector<f64>> = states.iter().map(|x| x[s].clone()).collect();
        let warm = match profiles.last() {
            Some(p) => shift(p, nu),
            None => StrategyProfile::constant(n, h, &scenario.weights.control_ref),
        };
        let schedule = window_schedule(scenario, setup, &current, &warm, s)?;
        neighbor_counts.push(schedule.sets[0].iter().map(|ns| ns.len()).collect());
        let references = setup
            .references
            .iter()
            .map(|r| (0..=h).map(|k| r.at(s + k).clone()).collect())
            .collect();
        let problem = GameProblem {
            model,
            dt: scenario.dt,
            horizon: h,
            initial_states: current.clone(),
            references,
            weights: &scenario.weights,
            penalty: scenario.penalty,
            pair_shapes: &setup.pair_shapes,
            time_offset: s,
            schedule,
        };
        let (profile, cert) = solve_epsilon_ne(&problem, warm, &opts)
            .map_err(|e| Error::solver(format!("planning step {s}: {e}"), f64::NAN))?;
        for i in 0..n {
            let u = DVector::from_column_slice(&profile.controls[i].as_slice()[..nu]);
            let next = step(model, &current[i], &u, &zero_w, scenario.dt)?;
            states[i].push(next);
            controls[i].push(u);
        }
        certificates.push(cert);
        profiles.push(profile);
    }
    Ok(NominalPlan {
        states,
        controls,
        certificates,
        neighbor_counts,
        profiles,
    })
}
