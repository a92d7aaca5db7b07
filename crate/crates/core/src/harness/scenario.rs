use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::costs::{CostWeights, CouplingPenalty};
use crate::dynamics::{AgentModel, ModelKind};
use crate::error::{Error, Result};
use crate::game::{min_proximity, NeighborMode};
use crate::optimizer::SolverOptions;
use crate::reachability::FrsConfig;

/// Axis-aligned box over the position coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::input("bounds need matching lengths and lo ≤ hi"));
        }
        Ok(Self { lo, hi })
    }

    /// The 30 m × 30 m × 10 m flight volume.
    pub fn flight_volume() -> Self {
        Self {
            lo: vec![0.0, 0.0, 0.0],
            hi: vec![30.0, 30.0, 10.0],
        }
    }
}

/// Extra radius per agent beyond d_col/2, so that two occupancy sets touch at
/// d_col + 0.05 m, the edge of the near-collision band.
pub const BODY_CLEARANCE: f64 = 0.025;

/// Default body radius for a collision distance.
pub fn body_radius_for(d_col: f64) -> f64 {
    0.5 * d_col + BODY_CLEARANCE
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub start: DVector<f64>,
    pub goal: DVector<f64>,
}

/// Random start/goal generation for Monte Carlo templates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomLayout {
    pub n_agents: usize,
    pub min_sep: f64,
}

/// Per-trial layout generator of a scenario template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    Random(RandomLayout),
    /// Antipodal swap on a horizontal circle around the center of the bounds, with starts and
    /// goals shifted by up to `jitter` per horizontal axis.
    Antipodal { n_agents: usize, radius: f64, jitter: f64 },
}

impl Layout {
    pub fn n_agents(&self) -> usize {
        match *self {
            Layout::Random(r) => r.n_agents,
            Layout::Antipodal { n_agents, .. } => n_agents,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: AgentModel,
    pub agents: Vec<AgentSpec>,
    /// Total steps T.
    pub steps: usize,
    pub dt: f64,
    pub mpc_horizon: usize,
    pub weights: CostWeights,
    pub frs: FrsConfig,
    pub sigma: f64,
    pub d_col: f64,
    pub d_prox: f64,
    pub neighbor_mode: NeighborMode,
    pub epsilon: f64,
    /// Iteration cap of the equilibrium solve at each planning step.
    pub k_max: usize,
    pub solver: SolverOptions,
    pub seed: u64,
    pub bounds: Bounds,
    /// Radius added to each agent's position reachable set in the coupling penalty.
    pub body_radius: f64,
    pub penalty: CouplingPenalty,
    /// Double η until the containment check passes (at most five times).
    pub calibrate_eta: bool,
    pub calibration_samples: usize,
    /// Layout regenerated per trial; `None` keeps `agents` fixed.
    pub layout: Option<Layout>,
    /// Solve candidate best responses on the rayon pool.
    pub parallel: bool,
}

/// Full state at rest at `position`. The heading is used by the differential-drive model only.
pub fn state_at(model: &AgentModel, position: &[f64], heading: f64) -> Result<DVector<f64>> {
    if position.len() != model.position_dim() {
        return Err(Error::input(format!(
            "position has {} coordinates, model expects {}",
            position.len(),
            model.position_dim()
        )));
    }
    let mut x = DVector::zeros(model.state_dim);
    for (k, &i) in model.position_indices.iter().enumerate() {
        x[i] = position[k];
    }
    if let ModelKind::FourWd { .. } = model.kind {
        x[2] = heading;
    }
    Ok(x)
}

impl Scenario {
    /// Paper-style defaults for `model`: T = 50, dt = 0.2 s, 20-step horizon,
    /// d_col = 0.5 m, d_prox = 2 m, ε = 1e-2, λ's = 10.
    pub fn defaults(model: AgentModel, sigma: f64) -> Self {
        let weights = CostWeights::for_model(&model);
        let frs = FrsConfig::for_model(&model, sigma);
        let bounds = match model.position_dim() {
            3 => Bounds::flight_volume(),
            n => Bounds {
                lo: vec![0.0; n],
                hi: vec![30.0; n],
            },
        };
        Self {
            model,
            agents: Vec::new(),
            steps: 50,
            dt: 0.2,
            mpc_horizon: 20,
            weights,
            frs,
            sigma,
            d_col: 0.5,
            d_prox: 2.0,
            neighbor_mode: NeighborMode::Euclidean,
            epsilon: 1e-2,
            k_max: 10,
            solver: SolverOptions::default(),
            seed: 0,
            bounds,
            body_radius: body_radius_for(0.5),
            penalty: CouplingPenalty::Frs,
            calibrate_eta: true,
            calibration_samples: 200,
            layout: None,
            parallel: true,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", "must be positive");
        }
        if self.mpc_horizon == 0 {
            return bad("mpc_horizon", "must be at least 1");
        }
        if self.steps < self.mpc_horizon {
            return bad("steps", "must be at least mpc_horizon");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma", "must be non-negative");
        }
        if !(self.d_col > 0.0) {
            return bad("d_col", "must be positive");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        if !(self.body_radius >= 0.0) {
            return bad("body_radius", "must be non-negative");
        }
        if self.neighbor_mode == NeighborMode::Euclidean && !(self.d_prox >= min_proximity(self.weights.v_max, self.dt)) {
            return bad("d_prox", "must be at least 2·v_max·dt");
        }
        if self.bounds.lo.len() != self.model.position_dim() {
            return bad("bounds", "dimension must match the model's position dimension");
        }
        if self.layout.is_none() && self.agents.is_empty() {
            return bad("agents", "no agents and no random layout");
        }
        if let Some(l) = self.layout {
            if l.n_agents() == 0 {
                return bad("random.agents", "must be at least 1");
            }
        }
        for (k, a) in self.agents.iter().enumerate() {
            if a.start.len() != self.model.state_dim || a.goal.len() != self.model.state_dim {
                return Err(Error::Config(format!("agents[{k}]: state dimension mismatch")));
            }
        }
        self.weights.validate(&self.model).map_err(|e| Error::Config(format!("weights: {e}")))?;
        self.frs.validate(&self.model).map_err(|e| Error::Config(format!("frs: {e}")))?;
        Ok(())
    }
}

fn far_enough(points: &[Vec<f64>], p: &[f64], min_sep: f64) -> bool {
    points.iter().all(|q| {
        let d2: f64 = q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        d2.sqrt() >= min_sep
    })
}

fn draw_points(rng: &mut ChaCha8Rng, n: usize, bounds: &Bounds, min_sep: f64, budget: &mut usize) -> Result<Vec<Vec<f64>>> {
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n);
    while pts.len() < n {
        if *budget == 0 {
            return Err(Error::Generation(format!(
                "could not place {n} points {min_sep} m apart within the bounds"
            )));
        }
        *budget -= 1;
        let p: Vec<f64> = bounds
            .lo
            .iter()
            .zip(&bounds.hi)
            .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
            .collect();
        if far_enough(&pts, &p, min_sep) {
            pts.push(p);
        }
    }
    Ok(pts)
}

/// Uniform starts and goals in the bounds, each set pairwise at least `min_sep` apart.
pub fn random_scenario(template: &Scenario, layout: RandomLayout, seed: u64) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut budget = 100_000usize;
    let starts = draw_points(&mut rng, layout.n_agents, &template.bounds, layout.min_sep, &mut budget)?;
    let goals = draw_points(&mut rng, layout.n_agents, &template.bounds, layout.min_sep, &mut budget)?;
    let mut agents = Vec::with_capacity(layout.n_agents);
    for (s, g) in starts.iter().zip(&goals) {
        let heading = if s.len() >= 2 { (g[1] - s[1]).atan2(g[0] - s[0]) } else { 0.0 };
        agents.push(AgentSpec {
            start: state_at(&template.model, s, heading)?,
            goal: state_at(&template.model, g, heading)?,
        });
    }
    let mut sc = template.clone();
    sc.agents = agents;
    sc.seed = seed;
    Ok(sc)
}

/// `n` agents evenly spaced on a horizontal circle, each heading to the antipodal point.
/// Every reference passes through the center at mid-trial, so all agents must negotiate.
pub fn antipodal_scenario(template: &Scenario, n: usize, radius: f64, center: &[f64]) -> Result<Scenario> {
    if n == 0 || !(radius > 0.0) {
        return Err(Error::input("antipodal layout needs at least one agent and a positive radius"));
    }
    let mut agents = Vec::with_capacity(n);
    for k in 0..n {
        let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        let mut s = center.to_vec();
        let mut g = center.to_vec();
        s[0] += radius * a.cos();
        s[1] += radius * a.sin();
        g[0] -= radius * a.cos();
        g[1] -= radius * a.sin();
        let heading = a + std::f64::consts::PI;
        agents.push(AgentSpec {
            start: state_at(&template.model, &s, heading)?,
            goal: state_at(&template.model, &g, heading)?,
        });
    }
    let mut sc = template.clone();
    sc.agents = agents;
    sc.layout = None;
    Ok(sc)
}

/// [`antipodal_scenario`] centered in the bounds with seeded horizontal jitter on every start and goal.
pub fn jittered_antipodal(template: &Scenario, n: usize, radius: f64, jitter: f64, seed: u64) -> Result<Scenario> {
    let center: Vec<f64> = template.bounds.lo.iter().zip(&template.bounds.hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let mut sc = antipodal_scenario(template, n, radius, &center)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    if jitter > 0.0 {
        let idx = &template.model.position_indices;
        for a in sc.agents.iter_mut() {
            for x in [&mut a.start, &mut a.goal] {
                for &i in idx.iter().take(2) {
                    x[i] += rng.random_range(-jitter..jitter);
                }
            }
        }
    }
    sc.seed = seed;
    Ok(sc)
}

/// The scenario a template produces for `seed`.
pub fn scenario_for_seed(template: &Scenario, seed: u64) -> Result<Scenario> {
    let mut sc = match template.layout {
        Some(Layout::Random(layout)) => random_scenario(template, layout, seed)?,
        Some(Layout::Antipodal { n_agents, radius, jitter }) => jittered_antipodal(template, n_agents, radius, jitter, seed)?,
        None => template.clone(),
    };
    sc.seed = seed;
    Ok(sc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::quadrotor_model;

    #[test]
    fn random_layout_respects_separation_and_seed() {
        let base = Scenario::defaults(quadrotor_model(), 0.02);
        let layout = RandomLayout {
            n_agents: 15,
            min_sep: 1.0,
        };
        for seed in 0..100 {
            let sc = random_scenario(&base, layout, seed).unwrap();
            let pos: Vec<Vec<f64>> = sc.agents.iter().map(|a| sc.model.positions(a.start.as_slice())).collect();
            for i in 0..pos.len() {
                for j in i + 1..pos.len() {
                    let d: f64 = pos[i].iter().zip(&pos[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!(d >= 1.0);
                }
            }
        }
        let a = random_scenario(&base, layout, 42).unwrap();
        let b = random_scenario(&base, layout, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn packing_failure_is_reported() {
        let mut base = Scenario::defaults(quadrotor_model(), 0.02);
        base.bounds = Bounds::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let err = random_scenario(&base, RandomLayout { n_agents: 50, min_sep: 1.0 }, 1).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn single_agent_needs_no_separation() {
        let base = Scenario::defaults(quadrotor_model(), 0.02);
        let sc = random_scenario(&base, RandomLayout { n_agents: 1, min_sep: 100.0 }, 3).unwrap();
        assert_eq!(sc.agents.len(), 1);
    }
}
