use nalgebra::DVector;
use serde::Serialize;

use crate::costs::ReferenceTrajectory;
use crate::dynamics::AgentModel;

/// Margin above d_col counted as a near collision.
pub const NEAR_COLLISION_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub tracking_cost: f64,
    #[serde(rename = "dist_to_goal_at_Tm5")]
    pub dist_to_goal_at_tm5: f64,
    pub collision_ratio: f64,
    pub min_pairwise_distance: f64,
    pub near_collision_count: usize,
    pub avg_neighbors: f64,
    /// Equilibrium iterations per planning step.
    pub ne_iterations: Vec<usize>,
}

fn pairwise_min(model: &AgentModel, states: &[Vec<DVector<f64>>], t: usize) -> f64 {
    let pos: Vec<Vec<f64>> = states.iter().map(|s| model.positions(s[t].as_slice())).collect();
    let mut best = f64::INFINITY;
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let d = pos[i].iter().zip(&pos[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Metrics of executed trajectories. Tracking cost uses identity weights on the state error
/// and on the control offset from trim.
pub fn compute_metrics(
    model: &AgentModel,
    references: &[ReferenceTrajectory],
    states: &[Vec<DVector<f64>>],
    controls: &[Vec<DVector<f64>>],
    neighbor_counts: &[Vec<usize>],
    ne_iterations: Vec<usize>,
    d_col: f64,
) -> Metrics {
    let steps = states.first().map(|s| s.len() - 1).unwrap_or(0);
    let trim = model.trim_control();
    let mut tracking_cost = 0.0;
    for ((xs, us), r) in states.iter().zip(controls).zip(references) {
        for t in 0..steps {
            tracking_cost += (&xs[t] - r.at(t)).norm_squared() + (&us[t] - &trim).norm_squared();
        }
        tracking_cost += (&xs[steps] - &r.terminal).norm_squared();
    }
    let t_eff = steps.saturating_sub(5);
    let n = states.len();
    let dist_to_goal_at_tm5 = if n == 0 {
        0.0
    } else {
        states
            .iter()
            .zip(references)
            .map(|(xs, r)| {
                let p = model.positions(xs[t_eff].as_slice());
                let g = model.positions(r.terminal.as_slice());
                p.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / n as f64
    };
    let mut collisions = 0usize;
    let mut near = 0usize;
    let mut min_d = f64::INFINITY;
    for t in 0..=steps {
        let d = pairwise_min(model, states, t);
        min_d = min_d.min(d);
        if d < d_col {
            collisions += 1;
        }
        if d < d_col + NEAR_COLLISION_MARGIN {
            near += 1;
        }
    }
    let total: usize = neighbor_counts.iter().flatten().sum();
    let slots = neighbor_counts.len() * n;
    Metrics {
        tracking_cost,
        dist_to_goal_at_tm5,
        collision_ratio: collisions as f64 / (steps + 1) as f64,
        min_pairwise_distance: min_d,
        near_collision_count: near,
        avg_neighbors: if slots == 0 { 0.0 } else { total as f64 / slots as f64 },
        ne_iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::reference_trajectory;
    use crate::dynamics::double_integrator_model;

    fn di_state(p: (f64, f64)) -> DVector<f64> {
        DVector::from_vec(vec![p.0, p.1, 0.0, 0.0])
    }

    #[test]
    fn static_agents_far_apart() {
        let m = double_integrator_model(2).unwrap();
        let a = di_state((0.0, 0.0));
        let b = di_state((10.0, 0.0));
        let refs = vec![
            reference_trajectory(&m, &a, &a, 4, 0.2).unwrap(),
            reference_trajectory(&m, &b, &b, 4, 0.2).unwrap(),
        ];
        let states = vec![vec![a.clone(); 5], vec![b.clone(); 5]];
        let controls = vec![vec![DVector::zeros(2); 4]; 2];
        let met = compute_metrics(&m, &refs, &states, &controls, &vec![vec![0, 0]; 4], vec![0; 4], 0.5);
        assert_eq!(met.collision_ratio, 0.0);
        assert_eq!(met.min_pairwise_distance, 10.0);
        assert_eq!(met.near_collision_count, 0);
        assert_eq!(met.tracking_cost, 0.0);
        assert_eq!(met.dist_to_goal_at_tm5, 0.0);
    }

    #[test]
    fn collision_steps_are_counted() {
        let m = double_integrator_model(2).unwrap();
        let a = di_state((0.0, 0.0));
        let refs = vec![reference_trajectory(&m, &a, &a, 3, 0.2).unwrap(); 2];
        let states = vec![
            vec![a.clone(); 4],
            vec![di_state((1.0, 0.0)), di_state((0.3, 0.0)), di_state((0.52, 0.0)), di_state((1.0, 0.0))],
        ];
        let controls = vec![vec![DVector::zeros(2); 3]; 2];
        let met = compute_metrics(&m, &refs, &states, &controls, &vec![vec![1, 1]; 3], vec![1; 3], 0.5);
        assert_eq!(met.collision_ratio, 0.25);
        assert_eq!(met.near_collision_count, 2);
        assert!((met.min_pairwise_distance - 0.3).abs() < 1e-15);
        assert_eq!(met.avg_neighbors, 1.0);
    }
}
