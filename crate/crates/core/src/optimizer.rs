//! Single-shooting best-response solver: Euler rollouts, reverse-mode gradients, L-BFGS.

use std::collections::VecDeque;

use crate::costs::{coupling_value_grad, GameProblem};
use crate::dynamics::AgentModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Gradient-norm tolerance.
    pub tol: f64,
    pub max_iter: usize,
    /// L-BFGS history length.
    pub memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            memory: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SolveReport {
    pub final_objective: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub line_search_failures: usize,
}

/// Euler rollout `x⁺ = x + dt·f(x, u, 0)`, returned flat as `(horizon+1)·n_x` values.
pub fn rollout_flat(model: &AgentModel, x0: &[f64], controls: &[f64], horizon: usize, dt: f64) -> Result<Vec<f64>> {
    let nx = model.state_dim;
    let nu = model.control_dim;
    if x0.len() != nx || controls.len() != horizon * nu {
        return Err(Error::input("rollout dimensions do not match the model"));
    }
    let mut traj = vec![0.0; (horizon + 1) * nx];
    traj[..nx].copy_from_slice(x0);
    let mut f = vec![0.0; nx];
    for k in 0..horizon {
        let (done, rest) = traj.split_at_mut((k + 1) * nx);
        let x = &done[k * nx..];
        model.deriv_into(x, &controls[k * nu..(k + 1) * nu], &[], &mut f);
        for i in 0..nx {
            rest[i] = x[i] + dt * f[i];
        }
    }
    if traj.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("rollout diverged"));
    }
    Ok(traj)
}

/// Agent `i`'s localized cost as a function of its own controls, everyone else frozen.
pub struct AgentObjective<'p, 'a> {
    pub problem: &'p GameProblem<'a>,
    pub agent: usize,
    /// Rolled-out trajectories of all agents; entry `agent` is ignored.
    pub trajectories: &'p [Vec<f64>],
}

impl<'p, 'a> AgentObjective<'p, 'a> {
    pub fn new(problem: &'p GameProblem<'a>, agent: usize, trajectories: &'p [Vec<f64>]) -> Self {
        Self {
            problem,
            agent,
            trajectories,
        }
    }

    fn cost_of(&self, own: &[f64], controls: &[f64]) -> f64 {
        let p = self.problem;
        let i = self.agent;
        let mut c = 0.0;
        for k in 0..=p.horizon {
            c += p.own_stage(i, k, own, controls);
            for &j in &p.schedule.sets[k][i] {
                c += p.pair_term(k, i, j, own, &self.trajectories[j]);
            }
        }
        c
    }

    /// Objective value; `+∞` if the rollout diverges.
    pub fn value(&self, controls: &[f64]) -> f64 {
        let p = self.problem;
        match rollout_flat(p.model, p.initial_states[self.agent].as_slice(), controls, p.horizon, p.dt) {
            Ok(own) => self.cost_of(&own, controls),
            Err(_) => f64::INFINITY,
        }
    }

    /// Objective value and gradient by the adjoint recursion through the Euler rollout.
    pub fn value_grad(&self, controls: &[f64], grad: &mut [f64]) -> f64 {
        let p = self.problem;
        let m = p.model;
        let (nx, nu, h, dt) = (m.state_dim, m.control_dim, p.horizon, p.dt);
        let own = match rollout_flat(m, p.initial_states[self.agent].as_slice(), controls, h, dt) {
            Ok(t) => t,
            Err(_) => {
                grad.iter_mut().for_each(|g| *g = 0.0);
                return f64::INFINITY;
            }
        };
        let value = self.cost_of(&own, controls);
        grad.iter_mut().for_each(|g| *g = 0.0);

        let mut a = vec![0.0; nx * nx];
        let mut b = vec![0.0; nx * nu];
        let mut gx = vec![0.0; nx];
        let mut gu = vec![0.0; nu];

        // terminal step: the velocity barrier may read the last control
        let uk_last = &controls[(h - 1) * nu..h * nu];
        self.stage_grad(h, &own, uk_last, &mut gx, &mut gu, &mut a, &mut b);
        let mut lam = gx.clone();
        for c in 0..nu {
            grad[(h - 1) * nu + c] += gu[c];
        }

        for k in (0..h).rev() {
            let uk = &controls[k * nu..(k + 1) * nu];
            self.stage_grad(k, &own, uk, &mut gx, &mut gu, &mut a, &mut b);
            // a, b now hold the Jacobians at (x_k, u_k)
            for c in 0..nu {
                let mut s = 0.0;
                for r in 0..nx {
                    s += b[r * nu + c] * lam[r];
                }
                grad[k * nu + c] += gu[c] + dt * s;
            }
            if k > 0 {
                let mut next = vec![0.0; nx];
                for c in 0..nx {
                    let mut s = 0.0;
                    for r in 0..nx {
                        s += a[r * nx + c] * lam[r];
                    }
                    next[c] = gx[c] + lam[c] + dt * s;
                }
                lam = next;
            }
        }
        value
    }

    /// Partial derivatives of the step-`k` cost with respect to `x_k` and the control it reads.
    /// Leaves the model Jacobians at `(x_k, u)` in `a` and `b`.
    #[allow(clippy::too_many_arguments)]
    fn stage_grad(&self, k: usize, own: &[f64], u: &[f64], gx: &mut [f64], gu: &mut [f64], a: &mut [f64], b: &mut [f64]) {
        let p = self.problem;
        let m = p.model;
        let w = p.weights;
        let (nx, nu) = (m.state_dim, m.control_dim);
        let x = &own[k * nx..(k + 1) * nx];
        let r = &p.references[self.agent][k];
        gx.iter_mut().for_each(|g| *g = 0.0);
        gu.iter_mut().for_each(|g| *g = 0.0);
        a.iter_mut().for_each(|v| *v = 0.0);
        b.iter_mut().for_each(|v| *v = 0.0);
        m.jacobians_into(x, u, a, b);

        let q = if k < p.horizon { &w.q_track } else { &w.q_terminal };
        for i in 0..nx {
            let mut s = 0.0;
            for j in 0..nx {
                s += (q[(i, j)] + q[(j, i)]) * (x[j] - r[j]);
            }
            gx[i] += s;
        }
        if k < p.horizon {
            for i in 0..nu {
                let mut s = 0.0;
                for j in 0..nu {
                    s += (w.r_control[(i, j)] + w.r_control[(j, i)]) * (u[j] - w.control_ref[j]);
                }
                gu[i] += s;
            }
        }

        let nv = m.speed_dim();
        let mut v = vec![0.0; nv];
        m.speed_vector(x, u, &mut v);
        let speed = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if speed > 0.0 {
            let bval = (-w.lambda_v * (w.v_max - speed)).exp();
            let scale = w.lambda_v * bval / speed;
            if !m.velocity_indices.is_empty() {
                for (c, &idx) in m.velocity_indices.iter().enumerate() {
                    gx[idx] += scale * v[c];
                }
            } else {
                for (c, &row) in m.position_indices.iter().enumerate() {
                    let g = scale * v[c];
                    for j in 0..nx {
                        gx[j] += g * a[row * nx + j];
                    }
                    for j in 0..nu {
                        gu[j] += g * b[row * nu + j];
                    }
                }
            }
        }

        let n_p = m.position_dim();
        let mut pi = [0.0; 3];
        let mut pj = [0.0; 3];
        let mut gp = [0.0; 3];
        p.position(own, k, &mut pi[..n_p]);
        for &j in &p.schedule.sets[k][self.agent] {
            p.position(&self.trajectories[j], k, &mut pj[..n_p]);
            let d: Vec<f64> = (0..n_p).map(|c| pi[c] - pj[c]).collect();
            let inv = p.pair_shapes.inverse(p.time_offset + k, self.agent, j);
            coupling_value_grad(p.penalty, w.lambda_frs, inv, &d, Some(&mut gp[..n_p]));
        }
        for (c, &idx) in m.position_indices.iter().enumerate() {
            gx[idx] += gp[c];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// L-BFGS with Armijo backtracking (c = 1e-4, halving). The objective sequence is
/// non-increasing across accepted steps; the result is never worse than `init`.
pub fn minimize<F, G>(
    mut value: F,
    mut value_grad: G,
    init: &[f64],
    opts: &SolverOptions,
    project: Option<&dyn Fn(&mut [f64])>,
) -> (Vec<f64>, SolveReport)
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = init.len();
    let mut x = init.to_vec();
    if let Some(pr) = project {
        pr(&mut x);
    }
    let mut g = vec![0.0; n];
    let mut fx = value_grad(&x, &mut g);
    let mut report = SolveReport {
        final_objective: fx,
        iterations: 0,
        gradient_norm: norm(&g),
        converged: false,
        line_search_failures: 0,
    };
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        report.line_search_failures = 1;
        return (init.to_vec(), report);
    }
    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut trial = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    while report.iterations < opts.max_iter {
        let gnorm = norm(&g);
        report.gradient_norm = gnorm;
        if gnorm <= opts.tol {
            report.converged = true;
            break;
        }
        let mut d = two_loop(&g, &s_hist, &y_hist);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut alpha = if s_hist.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..50 {
            for c in 0..n {
                trial[c] = x[c] + alpha * d[c];
            }
            if let Some(pr) = project {
                pr(&mut trial);
            }
            let dir: f64 = (0..n).map(|c| g[c] * (trial[c] - x[c])).sum();
            let ft = value(&trial);
            if ft.is_finite() && ft <= fx + 1e-4 * dir.min(0.0) {
                accepted = Some(ft);
                break;
            }
            alpha *= 0.5;
        }
        if accepted.is_none() {
            report.line_search_failures += 1;
            if !s_hist.is_empty() {
                s_hist.clear();
                y_hist.clear();
                continue;
            }
            break;
        }
        let f_new = value_grad(&trial, &mut g_new);
        if !f_new.is_finite() || f_new > fx {
            report.line_search_failures += 1;
            break;
        }
        let s: Vec<f64> = (0..n).map(|c| trial[c] - x[c]).collect();
        let y: Vec<f64> = (0..n).map(|c| g_new[c] - g[c]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if s_hist.len() == opts.memory.max(1) {
                s_hist.pop_front();
                y_hist.pop_front();
            }
            s_hist.push_back(s);
            y_hist.push_back(y);
        }
        let decrease = fx - f_new;
        x.copy_from_slice(&trial);
        g.copy_from_slice(&g_new);
        fx = f_new;
        report.iterations += 1;
        if decrease <= 1e-12 * fx.abs().max(1.0) {
            report.gradient_norm = norm(&g);
            report.converged = report.gradient_norm <= opts.tol;
            break;
        }
    }
    report.final_objective = fx;
    report.gradient_norm = norm(&g);
    if report.gradient_norm <= opts.tol {
        report.converged = true;
    }
    (x, report)
}

fn two_loop(g: &[f64], s_hist: &VecDeque<Vec<f64>>, y_hist: &VecDeque<Vec<f64>>) -> Vec<f64> {
    let mut q = g.to_vec();
    let k = s_hist.len();
    let mut alphas = vec![0.0; k];
    for idx in (0..k).rev() {
        let rho = 1.0 / dot(&y_hist[idx], &s_hist[idx]);
        let a = rho * dot(&s_hist[idx], &q);
        alphas[idx] = a;
        for (qc, yc) in q.iter_mut().zip(&y_hist[idx]) {
            *qc -= a * yc;
        }
    }
    if k > 0 {
        let gamma = dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for idx in 0..k {
        let rho = 1.0 / dot(&y_hist[idx], &s_hist[idx]);
        let b = rho * dot(&y_hist[idx], &q);
        for (qc, sc) in q.iter_mut().zip(&s_hist[idx]) {
            *qc += (alphas[idx] - b) * sc;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
