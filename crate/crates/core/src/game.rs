//! Iterated ε-best response over the localized game, with neighbor screening.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::GameProblem;
use crate::ellipsoid::combined_inverse;
use crate::error::{Error, Result};
use crate::optimizer::{minimize, AgentObjective, SolveReport, SolverOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyProfile {
    /// One flat decision vector `u_i^(0..H−1)` per agent.
    pub controls: Vec<DVector<f64>>,
    pub horizon: usize,
}

impl StrategyProfile {
    /// Every agent holds `control` over the whole horizon.
    pub fn constant(n_agents: usize, horizon: usize, control: &DVector<f64>) -> Self {
        let nu = control.len();
        let v = DVector::from_fn(horizon * nu, |r, _| control[r % nu]);
        Self {
            controls: vec![v; n_agents],
            horizon,
        }
    }

    pub fn with_agent(&self, i: usize, controls: DVector<f64>) -> Self {
        let mut p = self.clone();
        p.controls[i] = controls;
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    #[default]
    Euclidean,
    Anisotropic,
    /// Every other agent is a neighbor.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSchedule {
    /// `sets[t][i]`: sorted neighbor indices of agent `i` at step `t`.
    pub sets: Vec<Vec<Vec<usize>>>,
    pub mode: NeighborMode,
    pub d_prox: f64,
}

impl NeighborSchedule {
    pub fn full(n_agents: usize, steps: usize) -> Self {
        let sets = (0..steps)
            .map(|_| (0..n_agents).map(|i| (0..n_agents).filter(|&j| j != i).collect()).collect())
            .collect();
        Self {
            sets,
            mode: NeighborMode::Full,
            d_prox: f64::INFINITY,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.sets.iter().all(|s| {
            s.iter()
                .enumerate()
                .all(|(i, ns)| !ns.contains(&i) && ns.iter().all(|&j| s[j].contains(&i)))
        })
    }

    /// Whether agent `j` appears among `i`'s neighbors at any step.
    pub fn ever_neighbors(&self, i: usize, j: usize) -> bool {
        self.sets.iter().any(|s| s[i].contains(&j))
    }
}

/// Smallest proximity threshold that still catches a worst-case one-step closing.
pub fn min_proximity(v_max: f64, dt: f64) -> f64 {
    2.0 * v_max * dt
}

/// `positions[i][t]` → neighbors within `d_prox` (strict inequality).
pub fn neighbor_sets(positions: &[Vec<DVector<f64>>], d_prox: f64) -> NeighborSchedule {
    let n = positions.len();
    let steps = positions.iter().map(|p| p.len()).min().unwrap_or(0);
    let mut sets = vec![vec![Vec::new(); n]; steps];
    for (t, st) in sets.iter_mut().enumerate() {
        for i in 0..n {
            for j in i + 1..n {
                if (&positions[i][t] - &positions[j][t]).norm() < d_prox {
                    st[i].push(j);
                    st[j].push(i);
                }
            }
        }
        for s in st.iter_mut() {
            s.sort_unstable();
        }
    }
    NeighborSchedule {
        sets,
        mode: NeighborMode::Euclidean,
        d_prox,
    }
}

/// Neighbors whose position reachable sets overlap under the combined shape.
/// `shapes[i][t]` is agent `i`'s position shape at step `t`.
pub fn neighbor_sets_anisotropic(positions: &[Vec<DVector<f64>>], shapes: &[Vec<DMatrix<f64>>]) -> Result<NeighborSchedule> {
    let n = positions.len();
    if shapes.len() != n {
        return Err(Error::input("one shape sequence per agent is required"));
    }
    let steps = positions.iter().map(|p| p.len()).min().unwrap_or(0);
    let mut sets = vec![vec![Vec::new(); n]; steps];
    for (t, st) in sets.iter_mut().enumerate() {
        for i in 0..n {
            for j in i + 1..n {
                let si = &shapes[i][t.min(shapes[i].len() - 1)];
                let sj = &shapes[j][t.min(shapes[j].len() - 1)];
                let inv = combined_inverse(si, sj)?;
                let d = &positions[i][t] - &positions[j][t];
                if d.dot(&(inv * &d)) <= 1.0 {
                    st[i].push(j);
                    st[j].push(i);
                }
            }
        }
    }
    Ok(NeighborSchedule {
        sets,
        mode: NeighborMode::Anisotropic,
        d_prox: f64::NAN,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Epsilon,
    IterationCap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeCertificate {
    pub epsilon: f64,
    pub iterations_used: usize,
    /// Full-coupling potential before the first and after every accepted update.
    pub potential_trace: Vec<f64>,
    /// `(agent, improvement)` of each accepted update.
    pub accepted: Vec<(usize, f64)>,
    pub max_residual_improvement: f64,
    pub terminated_by: Termination,
    /// Accepted updates after which the recorded potential went up.
    pub monotonicity_violations: usize,
}

#[derive(Debug, Clone)]
pub struct BestResponse {
    pub controls: DVector<f64>,
    pub improvement: f64,
    pub report: SolveReport,
}

/// Minimize agent `i`'s localized cost with everyone else frozen, warm-started from its current controls.
pub fn best_response(problem: &GameProblem, i: usize, profile: &StrategyProfile, opts: &SolverOptions) -> Result<BestResponse> {
    let trajs = problem.rollout_all(profile)?;
    best_response_with(problem, i, profile, &trajs, opts)
}

fn best_response_with(
    problem: &GameProblem,
    i: usize,
    profile: &StrategyProfile,
    trajs: &[Vec<f64>],
    opts: &SolverOptions,
) -> Result<BestResponse> {
    let obj = AgentObjective::new(problem, i, trajs);
    let init = profile.controls[i].as_slice();
    let old = obj.value(init);
    if !old.is_finite() {
        return Err(Error::numerical(format!("agent {i} cost is not finite at the current profile")));
    }
    let project = |u: &mut [f64]| problem.model.project_controls(u);
    let proj: Option<&dyn Fn(&mut [f64])> = if problem.model.control_bounds.is_some() { Some(&project) } else { None };
    let (x, report) = minimize(|u| obj.value(u), |u, g| obj.value_grad(u, g), init, opts, proj);
    let new = obj.value(&x);
    if new.is_finite() && new < old {
        Ok(BestResponse {
            controls: DVector::from_vec(x),
            improvement: old - new,
            report,
        })
    } else {
        Ok(BestResponse {
            controls: profile.controls[i].clone(),
            improvement: 0.0,
            report,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeOptions {
    pub epsilon: f64,
    pub k_max: usize,
    pub solver: SolverOptions,
    /// Compute candidate best responses on the rayon pool.
    pub parallel: bool,
}

impl Default for NeOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            k_max: 50,
            solver: SolverOptions::default(),
            parallel: true,
        }
    }
}

/// Algorithm: compute every agent's best-response improvement; stop if all are below ε,
/// otherwise accept the largest (lowest index on ties) and repeat.
///
/// Candidates are cached between iterations: after agent `a` moves, only `a` and the
/// agents that ever see `a` as a neighbor are re-solved. The rest face an unchanged
/// subproblem and would reproduce the same candidate.
pub fn solve_epsilon_ne(problem: &GameProblem, init: StrategyProfile, opts: &NeOptions) -> Result<(StrategyProfile, NeCertificate)> {
    problem.validate()?;
    if !(opts.epsilon > 0.0) {
        return Err(Error::input("epsilon must be positive"));
    }
    let n = problem.n_agents();
    if init.controls.len() != n || init.controls.iter().any(|c| c.len() != problem.decision_dim()) {
        return Err(Error::input("initial profile does not match the problem"));
    }
    let mut profile = init;
    let mut trajs = problem.rollout_all(&profile)?;
    let mut trace = vec![problem.potential_full_with(&trajs, &profile)];
    let mut accepted = Vec::new();
    let mut candidates: Vec<Option<BestResponse>> = vec![None; n];
    let mut violations = 0;

    loop {
        let stale: Vec<usize> = (0..n).filter(|&i| candidates[i].is_none()).collect();
        let solve = |&i: &usize| best_response_with(problem, i, &profile, &trajs, &opts.solver).map(|b| (i, b));
        let fresh: Vec<(usize, BestResponse)> = if opts.parallel {
            stale.par_iter().map(solve).collect::<Result<_>>()?
        } else {
            stale.iter().map(solve).collect::<Result<_>>()?
        };
        for (i, b) in fresh {
            candidates[i] = Some(b);
        }
        let mut best = 0;
        let mut best_r = f64::NEG_INFINITY;
        for (i, c) in candidates.iter().enumerate() {
            let r = c.as_ref().map(|b| b.improvement).unwrap_or(0.0);
            if r > best_r {
                best = i;
                best_r = r;
            }
        }
        if best_r < opts.epsilon {
            let cert = NeCertificate {
                epsilon: opts.epsilon,
                iterations_used: accepted.len(),
                potential_trace: trace,
                accepted,
                max_residual_improvement: best_r.max(0.0),
                terminated_by: Termination::Epsilon,
                monotonicity_violations: violations,
            };
            return Ok((profile, cert));
        }
        if accepted.len() >= opts.k_max {
            let cert = NeCertificate {
                epsilon: opts.epsilon,
                iterations_used: accepted.len(),
                potential_trace: trace,
                accepted,
                max_residual_improvement: best_r,
                terminated_by: Termination::IterationCap,
                monotonicity_violations: violations,
            };
            return Ok((profile, cert));
        }
        let chosen = candidates[best].take().expect("candidate exists");
        profile.controls[best] = chosen.controls;
        trajs[best] = problem.rollout(best, profile.controls[best].as_slice())?;
        accepted.push((best, best_r));
        let phi = problem.potential_full_with(&trajs, &profile);
        if phi > *trace.last().expect("trace starts non-empty") {
            violations += 1;
        }
        trace.push(phi);
        for (j, c) in candidates.iter_mut().enumerate() {
            if j != best && problem.schedule.ever_neighbors(j, best) {
                *c = None;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(xs: &[(f64, f64)]) -> Vec<Vec<DVector<f64>>> {
        xs.iter().map(|&(a, b)| vec![DVector::from_vec(vec![a, b])]).collect()
    }

    #[test]
    fn euclidean_sets() {
        let s = neighbor_sets(&pts(&[(0.0, 0.0), (1.0, 0.0), (5.0, 0.0)]), 2.0);
        assert_eq!(s.sets[0], vec![vec![1], vec![0], vec![]]);
        let s = neighbor_sets(&pts(&[(0.0, 0.0), (1.0, 0.0), (5.0, 0.0)]), f64::INFINITY);
        assert_eq!(s.sets[0], vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
        assert!(s.is_symmetric());
    }

    #[test]
    fn anisotropic_sets() {
        let r = 0.5;
        let ball = DMatrix::identity(2, 2) * (r * r);
        let shapes = vec![vec![ball.clone()]; 3];
        let s = neighbor_sets_anisotropic(&pts(&[(0.0, 0.0), (0.0, 0.0), (2.0 * r + 0.01, 0.0)]), &shapes).unwrap();
        assert_eq!(s.sets[0], vec![vec![1], vec![0], vec![]]);
        let s = neighbor_sets_anisotropic(&pts(&[(0.0, 0.0), (2.0 * r - 0.01, 0.0)]), &shapes[..2]).unwrap();
        assert_eq!(s.sets[0], vec![vec![1], vec![0]]);
        assert!(s.is_symmetric());
    }
}
