use crate::error::{Error, Result};

use super::monte_carlo::{monte_carlo, Aggregate};
use super::scenario::Scenario;

/// Hyperparameters a sweep may vary.
pub const SWEEP_KEYS: &[&str] = &[
    "lambda_frs",
    "lambda_v",
    "epsilon",
    "d_prox",
    "d_col",
    "body_radius",
    "eta",
    "sigma",
    "mpc_horizon",
    "k_max",
];

fn as_count(key: &str, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{key}: expected a non-negative integer, got {v}")))
    }
}

pub fn set_param(sc: &mut Scenario, key: &str, v: f64) -> Result<()> {
    match key {
        "lambda_frs" => sc.weights.lambda_frs = v,
        "lambda_v" => sc.weights.lambda_v = v,
        "epsilon" => sc.epsilon = v,
        "d_prox" => sc.d_prox = v,
        "d_col" => sc.d_col = v,
        "body_radius" => sc.body_radius = v,
        "eta" => sc.frs.eta = v,
        "sigma" => {
            sc.sigma = v;
            sc.frs.disturbance_bound = v;
        }
        "mpc_horizon" => sc.mpc_horizon = as_count(key, v)?,
        "k_max" => sc.k_max = as_count(key, v)?,
        _ => {
            return Err(Error::Config(format!(
                "unknown sweep key `{key}`; expected one of {}",
                SWEEP_KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub params: Vec<(String, f64)>,
    pub aggregate: Aggregate,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    /// Index of the winning cell; `None` when every cell collides.
    pub winner: Option<usize>,
}

/// Safety first: drop cells with any collision (or failed trials), then minimize tracking
/// cost, then distance to goal. Earlier cells win exact ties.
pub fn select_winner(cells: &[SweepCell]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, c) in cells.iter().enumerate() {
        if c.failed > 0 || !(c.aggregate.collision_ratio.mean == 0.0) {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let a = &c.aggregate;
                let o = &cells[b].aggregate;
                (a.tracking_cost.mean, a.dist_to_goal_at_tm5.mean) < (o.tracking_cost.mean, o.dist_to_goal_at_tm5.mean)
            }
        };
        if better {
            best = Some(k);
        }
    }
    best
}

/// Cartesian product of the grid, first key varying slowest. Every cell reuses the same seeds.
pub fn grid_sweep(template: &Scenario, grid: &[(String, Vec<f64>)], trials: usize, base_seed: u64, parallel: bool) -> Result<SweepReport> {
    if grid.is_empty() || grid.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::input("sweep grid must name at least one key with at least one value"));
    }
    let mut combos: Vec<Vec<(String, f64)>> = vec![Vec::new()];
    for (key, values) in grid {
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for c in &combos {
            for &v in values {
                let mut c = c.clone();
                c.push((key.clone(), v));
                next.push(c);
            }
        }
        combos = next;
    }
    let mut cells = Vec::with_capacity(combos.len());
    for params in combos {
        let mut sc = template.clone();
        for (k, v) in &params {
            set_param(&mut sc, k, *v)?;
        }
        let rep = monte_carlo(&sc, trials, base_seed, parallel)?;
        cells.push(SweepCell {
            params,
            aggregate: rep.aggregate,
            failed: rep.failed,
        });
    }
    let winner = select_winner(&cells);
    Ok(SweepReport { cells, winner })
}
