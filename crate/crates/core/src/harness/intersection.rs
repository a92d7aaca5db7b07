use crate::dynamics::fourwd_model;
use crate::error::{Error, Result};
use crate::reachability::FrsConfig;

use super::scenario::{body_radius_for, state_at, AgentSpec, Bounds, Scenario};

/// Lateral lane offset from the road centerline, meters.
pub const LANE_OFFSET: f64 = 0.15;
/// Wheel-speed disturbance level used for the intersection runs.
pub const INTERSECTION_SIGMA: f64 = 0.02;

fn agent(start: (f64, f64), goal: (f64, f64), model: &crate::dynamics::AgentModel) -> Result<AgentSpec> {
    let heading = (goal.1 - start.1).atan2(goal.0 - start.0);
    Ok(AgentSpec {
        start: state_at(model, &[start.0, start.1], heading)?,
        goal: state_at(model, &[goal.0, goal.1], heading)?,
    })
}

/// Four-way intersection with 2 m approach legs and right-hand lanes.
///
/// Variant 1: one vehicle drives straight west to east, one turns left from the east arm
/// into the south arm, one turns right from the south arm into the east arm. Their
/// straight-line references pass within 0.06 m and 0.26 m of each other, so they must
/// negotiate. Variant 2 adds a fourth vehicle driving well outside the intersection.
pub fn intersection_scenario(variant: u8) -> Result<Scenario> {
    let model = fourwd_model(0.16)?;
    let l = LANE_OFFSET;
    let mut agents = vec![
        agent((-2.0, -l), (2.0, -l), &model)?,
        agent((1.0, l), (-l, -1.5), &model)?,
        agent((l, -1.0), (1.0, -l), &model)?,
    ];
    match variant {
        1 => {}
        2 => agents.push(agent((8.0, 8.0), (8.0, 4.0), &model)?),
        v => return Err(Error::input(format!("intersection variant must be 1 or 2, got {v}"))),
    }
    let mut sc = Scenario::defaults(model.clone(), INTERSECTION_SIGMA);
    sc.frs = FrsConfig::for_model(&model, INTERSECTION_SIGMA);
    sc.agents = agents;
    sc.steps = 75;
    sc.dt = 0.2;
    sc.mpc_horizon = 10;
    sc.d_col = 0.3;
    sc.body_radius = body_radius_for(sc.d_col);
    sc.bounds = Bounds::new(vec![-3.0, -3.0], vec![10.0, 10.0])?;
    Ok(sc)
}
