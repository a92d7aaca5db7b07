//! Per-agent cost terms, reference generation, localized agent costs and the game potential.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::AgentModel;
use crate::ellipsoid::combined_inverse;
use crate::error::{Error, Result};
use crate::game::{NeighborSchedule, StrategyProfile};
use crate::linalg::{is_psd, is_spd};
use crate::reachability::FrsSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q_track: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    pub r_control: DMatrix<f64>,
    /// Control about which effort is measured (hover thrust for the quadrotor).
    pub control_ref: DVector<f64>,
    pub lambda_v: f64,
    pub lambda_frs: f64,
    pub v_max: f64,
}

impl CostWeights {
    /// Position weight 10, unit control weight, `λ^V = λ^FRS = 10`, `v_max = 5`.
    pub fn for_model(model: &AgentModel) -> Self {
        let nx = model.state_dim;
        let mut q = DMatrix::zeros(nx, nx);
        for &i in &model.position_indices {
            q[(i, i)] = 10.0;
        }
        Self {
            q_terminal: q.clone(),
            q_track: q,
            r_control: DMatrix::identity(model.control_dim, model.control_dim),
            control_ref: model.trim_control(),
            lambda_v: 10.0,
            lambda_frs: 10.0,
            v_max: 5.0,
        }
    }

    /// Identity state, terminal and control weights; used for reported tracking cost.
    pub fn identity(model: &AgentModel) -> Self {
        Self {
            q_track: DMatrix::identity(model.state_dim, model.state_dim),
            q_terminal: DMatrix::identity(model.state_dim, model.state_dim),
            r_control: DMatrix::identity(model.control_dim, model.control_dim),
            control_ref: model.trim_control(),
            lambda_v: 10.0,
            lambda_frs: 10.0,
            v_max: 5.0,
        }
    }

    pub fn validate(&self, model: &AgentModel) -> Result<()> {
        let (nx, nu) = (model.state_dim, model.control_dim);
        if self.q_track.shape() != (nx, nx) || self.q_terminal.shape() != (nx, nx) || self.r_control.shape() != (nu, nu) {
            return Err(Error::input("weight matrix dimensions do not match the model"));
        }
        if self.control_ref.len() != nu {
            return Err(Error::input("control reference has the wrong length"));
        }
        for (name, m) in [("q_track", &self.q_track), ("q_terminal", &self.q_terminal)] {
            if !is_psd(m, 1e-10) {
                return Err(Error::input(format!("{name} must be positive semidefinite")));
            }
        }
        if !is_spd(&self.r_control, 1e-10) && !is_psd(&self.r_control, 1e-10) {
            return Err(Error::input("r_control must be positive semidefinite"));
        }
        for (name, v) in [("lambda_v", self.lambda_v), ("lambda_frs", self.lambda_frs), ("v_max", self.v_max)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::input(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub points: Vec<DVector<f64>>,
    pub terminal: DVector<f64>,
}

impl ReferenceTrajectory {
    /// Reference at step `t`, holding the terminal state past the end.
    pub fn at(&self, t: usize) -> &DVector<f64> {
        self.points.get(t).unwrap_or(&self.terminal)
    }
}

/// Straight line from `x0` to `goal` over `steps` intervals with constant segment velocity.
pub fn reference_trajectory(
    model: &AgentModel,
    x0: &DVector<f64>,
    goal: &DVector<f64>,
    steps: usize,
    dt: f64,
) -> Result<ReferenceTrajectory> {
    if steps == 0 {
        return Err(Error::input("reference needs at least one interval"));
    }
    if x0.len() != model.state_dim || goal.len() != model.state_dim {
        return Err(Error::input("reference endpoints have the wrong dimension"));
    }
    let pos = &model.position_indices;
    let vel = &model.velocity_indices;
    let total = steps as f64 * dt;
    let mut points = Vec::with_capacity(steps + 1);
    points.push(x0.clone());
    for t in 1..steps {
        let s = t as f64 / steps as f64;
        let mut r = goal.clone();
        for &i in pos {
            r[i] = x0[i] + s * (goal[i] - x0[i]);
        }
        for (k, &i) in vel.iter().enumerate() {
            r[i] = (goal[pos[k]] - x0[pos[k]]) / total;
        }
        points.push(r);
    }
    points.push(goal.clone());
    Ok(ReferenceTrajectory {
        points,
        terminal: goal.clone(),
    })
}

fn quad(m: &DMatrix<f64>, e: &[f64]) -> f64 {
    let n = e.len();
    let mut s = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * e[j];
        }
        s += e[i] * row;
    }
    s
}

/// `(x−r)ᵀQ(x−r) + (u−u_ref)ᵀR(u−u_ref)`.
pub fn tracking_stage(x: &DVector<f64>, u: &DVector<f64>, r: &DVector<f64>, w: &CostWeights) -> f64 {
    let e: Vec<f64> = x.iter().zip(r.iter()).map(|(a, b)| a - b).collect();
    let du: Vec<f64> = u.iter().zip(w.control_ref.iter()).map(|(a, b)| a - b).collect();
    quad(&w.q_track, &e) + quad(&w.r_control, &du)
}

pub fn tracking_terminal(x: &DVector<f64>, r: &DVector<f64>, w: &CostWeights) -> f64 {
    let e: Vec<f64> = x.iter().zip(r.iter()).map(|(a, b)| a - b).collect();
    quad(&w.q_terminal, &e)
}

/// `exp(−λ^V(v_max − ‖v‖))`.
pub fn velocity_penalty(v: &[f64], w: &CostWeights) -> f64 {
    let speed = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (-w.lambda_v * (w.v_max - speed)).exp()
}

/// `exp(−λ^FRS·ξ)`.
pub fn frs_penalty(xi: f64, w: &CostWeights) -> f64 {
    (-w.lambda_frs * xi).exp()
}

/// Pairwise collision penalty.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CouplingPenalty {
    /// Barrier on the separation margin of the combined reachable sets.
    #[default]
    Frs,
    /// `exp(−λ(‖pᵢ−pⱼ‖ − d_col))`: distance-only barrier without reachability.
    Euclidean { d_col: f64 },
}

/// Occupancy shape of one agent: position reachable set grown by the body radius.
pub fn occupancy_shape(position_shape: &DMatrix<f64>, body_radius: f64) -> DMatrix<f64> {
    let n = position_shape.nrows();
    if body_radius <= 0.0 {
        return position_shape.clone();
    }
    let ball = DMatrix::identity(n, n) * (body_radius * body_radius);
    crate::ellipsoid::boxplus_psd(&[position_shape, &ball])
}

/// Inverse combined shapes `(Oᵢ(t) ⊞ Oⱼ(t) + 1e-9·I)⁻¹` for every unordered pair and step.
#[derive(Debug, Clone)]
pub struct PairShapes {
    n_agents: usize,
    n_p: usize,
    steps: usize,
    data: Vec<f64>,
}

pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    a * n - a * (a + 1) / 2 + (b - a - 1)
}

impl PairShapes {
    pub fn from_frs(frs: &[FrsSequence], body_radius: f64) -> Result<Self> {
        let steps = frs.iter().map(|f| f.steps()).max().unwrap_or(0);
        let n_p = frs.first().map(|f| f.position_shapes[0].nrows()).unwrap_or(0);
        let occ: Vec<Vec<DMatrix<f64>>> = frs
            .iter()
            .map(|f| (0..=steps).map(|t| occupancy_shape(f.position_shape(t), body_radius)).collect())
            .collect();
        Self::from_occupancy(&occ, n_p)
    }

    /// `occupancy[i][t]` is agent i's position shape at step t.
    pub fn from_occupancy(occupancy: &[Vec<DMatrix<f64>>], n_p: usize) -> Result<Self> {
        let n_agents = occupancy.len();
        let steps = occupancy.iter().map(|o| o.len()).min().unwrap_or(1).saturating_sub(1);
        let pairs = n_agents * n_agents.saturating_sub(1) / 2;
        let stride = n_p * n_p;
        let mut data = vec![0.0; (steps + 1) * pairs * stride];
        for t in 0..=steps {
            for i in 0..n_agents {
                for j in i + 1..n_agents {
                    let inv = combined_inverse(&occupancy[i][t], &occupancy[j][t])?;
                    let off = (t * pairs + pair_index(n_agents, i, j)) * stride;
                    for r in 0..n_p {
                        for c in 0..n_p {
                            data[off + r * n_p + c] = inv[(r, c)];
                        }
                    }
                }
            }
        }
        Ok(Self {
            n_agents,
            n_p,
            steps,
            data,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Row-major inverse combined shape for pair `(i, j)` at step `t` (clamped).
    pub fn inverse(&self, t: usize, i: usize, j: usize) -> &[f64] {
        let t = t.min(self.steps);
        let pairs = self.n_agents * (self.n_agents - 1) / 2;
        let stride = self.n_p * self.n_p;
        let off = (t * pairs + pair_index(self.n_agents, i, j)) * stride;
        &self.data[off..off + stride]
    }
}

/// Penalty value for displacement `d = pᵢ − pⱼ` and its gradient with respect to `pᵢ`.
pub fn coupling_value_grad(
    penalty: CouplingPenalty,
    lambda: f64,
    inv: &[f64],
    d: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    let n = d.len();
    match penalty {
        CouplingPenalty::Frs => {
            let mut sd = [0.0f64; 3];
            let mut q = 0.0;
            for r in 0..n {
                let mut s = 0.0;
                for c in 0..n {
                    s += inv[r * n + c] * d[c];
                }
                sd[r] = s;
                q += d[r] * s;
            }
            let p = (-lambda * (q - 1.0)).exp();
            if let Some(g) = grad {
                for r in 0..n {
                    g[r] += -2.0 * lambda * p * sd[r];
                }
            }
            p
        }
        CouplingPenalty::Euclidean { d_col } => {
            let dist = d.iter().map(|a| a * a).sum::<f64>().sqrt();
            let p = (-lambda * (dist - d_col)).exp();
            if let Some(g) = grad {
                if dist > 0.0 {
                    for r in 0..n {
                        g[r] += -lambda * p * d[r] / dist;
                    }
                }
            }
            p
        }
    }
}

/// One receding-horizon window of the game: everything an agent cost needs besides the controls.
#[derive(Debug, Clone)]
pub struct GameProblem<'a> {
    pub model: &'a AgentModel,
    pub dt: f64,
    pub horizon: usize,
    pub initial_states: Vec<DVector<f64>>,
    /// `references[i][k]` for `k = 0..=horizon`; the last entry is the terminal reference.
    pub references: Vec<Vec<DVector<f64>>>,
    pub weights: &'a CostWeights,
    pub penalty: CouplingPenalty,
    pub pair_shapes: &'a PairShapes,
    /// Absolute step of window offset 0, used to index the pair shapes.
    pub time_offset: usize,
    pub schedule: NeighborSchedule,
}

impl<'a> GameProblem<'a> {
    pub fn n_agents(&self) -> usize {
        self.initial_states.len()
    }

    pub fn decision_dim(&self) -> usize {
        self.horizon * self.model.control_dim
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_agents();
        if self.references.len() != n || self.references.iter().any(|r| r.len() != self.horizon + 1) {
            return Err(Error::input("window references must cover horizon + 1 steps for every agent"));
        }
        if self.schedule.sets.len() != self.horizon + 1 || self.schedule.sets.iter().any(|s| s.len() != n) {
            return Err(Error::input("neighbor schedule does not match the window"));
        }
        if self.horizon == 0 {
            return Err(Error::input("horizon must be at least one step"));
        }
        Ok(())
    }

    /// Euler rollout of one agent's controls, flattened `(horizon+1)·n_x`.
    pub fn rollout(&self, i: usize, controls: &[f64]) -> Result<Vec<f64>> {
        crate::optimizer::rollout_flat(self.model, self.initial_states[i].as_slice(), controls, self.horizon, self.dt)
    }

    pub fn rollout_all(&self, profile: &StrategyProfile) -> Result<Vec<Vec<f64>>> {
        (0..self.n_agents()).map(|i| self.rollout(i, profile.controls[i].as_slice())).collect()
    }

    pub(crate) fn position(&self, traj: &[f64], k: usize, out: &mut [f64]) {
        let nx = self.model.state_dim;
        for (a, &idx) in self.model.position_indices.iter().enumerate() {
            out[a] = traj[k * nx + idx];
        }
    }

    /// Agent `i`'s own terms at window step `k` (tracking and velocity barrier).
    pub(crate) fn own_stage(&self, i: usize, k: usize, traj: &[f64], controls: &[f64]) -> f64 {
        let nx = self.model.state_dim;
        let nu = self.model.control_dim;
        let x = &traj[k * nx..(k + 1) * nx];
        let r = &self.references[i][k];
        let e: Vec<f64> = x.iter().zip(r.iter()).map(|(a, b)| a - b).collect();
        let mut v = vec![0.0; self.model.speed_dim()];
        if k < self.horizon {
            let u = &controls[k * nu..(k + 1) * nu];
            let du: Vec<f64> = u.iter().zip(self.weights.control_ref.iter()).map(|(a, b)| a - b).collect();
            self.model.speed_vector(x, u, &mut v);
            quad(&self.weights.q_track, &e) + quad(&self.weights.r_control, &du) + velocity_penalty(&v, self.weights)
        } else {
            let u = &controls[(k - 1) * nu..k * nu];
            self.model.speed_vector(x, u, &mut v);
            quad(&self.weights.q_terminal, &e) + velocity_penalty(&v, self.weights)
        }
    }

    pub(crate) fn pair_term(&self, k: usize, i: usize, j: usize, ti: &[f64], tj: &[f64]) -> f64 {
        let n_p = self.model.position_dim();
        let mut pi = [0.0; 3];
        let mut pj = [0.0; 3];
        self.position(ti, k, &mut pi[..n_p]);
        self.position(tj, k, &mut pj[..n_p]);
        let d: Vec<f64> = (0..n_p).map(|a| pi[a] - pj[a]).collect();
        let inv = self.pair_shapes.inverse(self.time_offset + k, i, j);
        coupling_value_grad(self.penalty, self.weights.lambda_frs, inv, &d, None)
    }

    /// Separation margin between agents at window step `k` under the combined occupancy shape.
    pub fn margin(&self, k: usize, i: usize, j: usize, ti: &[f64], tj: &[f64]) -> f64 {
        let n_p = self.model.position_dim();
        let mut pi = [0.0; 3];
        let mut pj = [0.0; 3];
        self.position(ti, k, &mut pi[..n_p]);
        self.position(tj, k, &mut pj[..n_p]);
        let inv = self.pair_shapes.inverse(self.time_offset + k, i, j);
        let mut q = 0.0;
        for r in 0..n_p {
            for c in 0..n_p {
                q += (pi[r] - pj[r]) * inv[r * n_p + c] * (pi[c] - pj[c]);
            }
        }
        q - 1.0
    }

    /// Stage cost of agent `i` at window step `k` given everyone's rolled-out trajectories.
    pub fn stage_cost(&self, i: usize, k: usize, trajs: &[Vec<f64>], controls_i: &[f64]) -> f64 {
        let mut c = self.own_stage(i, k, &trajs[i], controls_i);
        for &j in &self.schedule.sets[k][i] {
            c += self.pair_term(k, i, j, &trajs[i], &trajs[j]);
        }
        c
    }

    /// Localized cost `J̃ᵢ` over the window, including the terminal step.
    pub fn agent_cost_with(&self, i: usize, trajs: &[Vec<f64>], controls_i: &[f64]) -> f64 {
        (0..=self.horizon).map(|k| self.stage_cost(i, k, trajs, controls_i)).sum()
    }

    pub fn agent_cost(&self, i: usize, profile: &StrategyProfile) -> Result<f64> {
        let trajs = self.rollout_all(profile)?;
        Ok(self.agent_cost_with(i, &trajs, profile.controls[i].as_slice()))
    }

    /// Potential with every unordered pair coupled once.
    pub fn potential_full_with(&self, trajs: &[Vec<f64>], profile: &StrategyProfile) -> f64 {
        let n = self.n_agents();
        let mut phi = 0.0;
        for k in 0..=self.horizon {
            for i in 0..n {
                phi += self.own_stage(i, k, &trajs[i], profile.controls[i].as_slice());
            }
            for i in 0..n {
                for j in i + 1..n {
                    phi += self.pair_term(k, i, j, &trajs[i], &trajs[j]);
                }
            }
        }
        phi
    }

    /// Potential restricted to the pairs present in the neighbor schedule.
    pub fn potential_scheduled_with(&self, trajs: &[Vec<f64>], profile: &StrategyProfile) -> f64 {
        let n = self.n_agents();
        let mut phi = 0.0;
        for k in 0..=self.horizon {
            for i in 0..n {
                phi += self.own_stage(i, k, &trajs[i], profile.controls[i].as_slice());
                for &j in &self.schedule.sets[k][i] {
                    if j > i {
                        phi += self.pair_term(k, i, j, &trajs[i], &trajs[j]);
                    }
                }
            }
        }
        phi
    }

    pub fn potential_value(&self, profile: &StrategyProfile) -> Result<f64> {
        let trajs = self.rollout_all(profile)?;
        Ok(self.potential_full_with(&trajs, profile))
    }
}
