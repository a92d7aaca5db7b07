//! TOML scenario files.
//!
//! ```toml
//! schema_version = 1
//! seed = 7                      # optional; a command-line seed overrides it
//!
//! [scenario]
//! model = "quadrotor"           # quadrotor | fourwd | double_integrator_2d | double_integrator_3d
//! steps = 50                    # T, planning steps
//! dt = 0.2                      # s
//! mpc_horizon = 20              # steps
//! sigma = 0.02                  # disturbance scale and truncation bound
//! d_col = 0.5                   # m
//! body_radius = 0.275           # m, defaults to d_col/2 + 0.025
//! d_prox = 2.0                  # m, `inf` couples everyone
//! bounds_lo = [0.0, 0.0, 0.0]   # m
//! bounds_hi = [30.0, 30.0, 10.0]
//!
//! [scenario.random]             # either this table or [[scenario.agents]]
//! agents = 7
//! min_sep = 1.0                 # m
//!
//! [weights]
//! lambda_frs = 10.0
//!
//! [frs]
//! eta = 1e-3
//!
//! [solver]
//! tol = 1e-6
//! ```
//!
//! Every table and key is optional apart from `schema_version`, `scenario.model` and the
//! agent layout. Unknown keys are rejected.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::costs::{CostWeights, CouplingPenalty};
use crate::dynamics::model_from_tag;
use crate::error::{Error, Result};
use crate::game::NeighborMode;
use crate::optimizer::SolverOptions;
use crate::reachability::{ChannelOrder, FrsConfig};

use super::scenario::{body_radius_for, state_at, AgentSpec, Bounds, Layout, RandomLayout, Scenario};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    schema_version: u32,
    seed: Option<u64>,
    scenario: ScenarioSection,
    #[serde(default)]
    weights: WeightsSection,
    #[serde(default)]
    frs: FrsSection,
    solver: Option<SolverOptions>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    model: String,
    /// m
    wheelbase: Option<f64>,
    steps: Option<usize>,
    /// s
    dt: Option<f64>,
    mpc_horizon: Option<usize>,
    sigma: Option<f64>,
    /// m
    d_col: Option<f64>,
    /// m
    d_prox: Option<f64>,
    neighbor_mode: Option<NeighborMode>,
    epsilon: Option<f64>,
    k_max: Option<usize>,
    /// m
    body_radius: Option<f64>,
    penalty: Option<PenaltyKind>,
    bounds_lo: Option<Vec<f64>>,
    bounds_hi: Option<Vec<f64>>,
    parallel: Option<bool>,
    random: Option<RandomSection>,
    agents: Option<Vec<AgentSection>>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum PenaltyKind {
    Frs,
    Euclidean,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RandomSection {
    agents: usize,
    /// m
    min_sep: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentSection {
    /// Position, m.
    start: Vec<f64>,
    goal: Vec<f64>,
    /// rad, differential drive only; defaults to the start-to-goal bearing.
    heading: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsSection {
    q_position: Option<f64>,
    q_terminal_position: Option<f64>,
    /// Weight on the non-position states.
    q_other: Option<f64>,
    r_control: Option<f64>,
    lambda_v: Option<f64>,
    lambda_frs: Option<f64>,
    /// m/s
    v_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrsSection {
    /// Q0 = initial_scale · I
    initial_scale: Option<f64>,
    eta: Option<f64>,
    disturbance_bound: Option<f64>,
    order: Option<ChannelOrder>,
    calibrate: Option<bool>,
    calibration_samples: Option<usize>,
    lqr_q: Option<f64>,
    lqr_r: Option<f64>,
}

/// A parsed scenario and the seed named in the file, if any.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub scenario: Scenario,
    pub seed: Option<u64>,
}

/// 1-based line of the first `key = ...` assignment in `text`, searching from `[section]` on.
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut in_section = section.is_empty();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            let name = t.trim_matches(|c| c == '[' || c == ']').trim();
            in_section = name == section || (!section.is_empty() && name.starts_with(&format!("{section}.")));
            continue;
        }
        if in_section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(n + 1);
                }
            }
        }
    }
    None
}

fn config_error(text: &str, section: &str, key: &str, why: impl std::fmt::Display) -> Error {
    let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
    match key_line(text, section, key) {
        Some(line) => Error::Config(format!("{full} (line {line}): {why}")),
        None => Error::Config(format!("{full}: {why}")),
    }
}

pub fn parse_config(text: &str) -> Result<LoadedConfig> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(config_error(
            text,
            "",
            "schema_version",
            format!("unsupported version {}, expected {SCHEMA_VERSION}", file.schema_version),
        ));
    }
    let s = &file.scenario;
    let model = model_from_tag(&s.model, s.wheelbase).map_err(|e| config_error(text, "scenario", "model", e))?;
    let sigma = s.sigma.unwrap_or(0.02);
    let mut sc = Scenario::defaults(model.clone(), sigma);
    if let Some(v) = s.steps {
        sc.steps = v;
    }
    if let Some(v) = s.dt {
        sc.dt = v;
    }
    if let Some(v) = s.mpc_horizon {
        sc.mpc_horizon = v;
    }
    if let Some(v) = s.d_col {
        sc.d_col = v;
        sc.body_radius = body_radius_for(v);
    }
    if let Some(v) = s.d_prox {
        sc.d_prox = v;
    }
    if let Some(v) = s.neighbor_mode {
        sc.neighbor_mode = v;
    }
    if let Some(v) = s.epsilon {
        sc.epsilon = v;
    }
    if let Some(v) = s.k_max {
        sc.k_max = v;
    }
    if let Some(v) = s.body_radius {
        sc.body_radius = v;
    }
    if let Some(p) = s.penalty {
        sc.penalty = match p {
            PenaltyKind::Frs => CouplingPenalty::Frs,
            PenaltyKind::Euclidean => CouplingPenalty::Euclidean { d_col: sc.d_col },
        };
    }
    if let Some(v) = s.parallel {
        sc.parallel = v;
    }
    match (&s.bounds_lo, &s.bounds_hi) {
        (Some(lo), Some(hi)) => {
            sc.bounds = Bounds::new(lo.clone(), hi.clone()).map_err(|e| config_error(text, "scenario", "bounds_lo", e))?
        }
        (None, None) => {}
        _ => return Err(config_error(text, "scenario", "bounds_lo", "bounds_lo and bounds_hi must be given together")),
    }
    match (&s.random, &s.agents) {
        (Some(_), Some(_)) => {
            return Err(config_error(text, "scenario", "random", "give either [scenario.random] or [[scenario.agents]], not both"))
        }
        (Some(r), None) => {
            sc.layout = Some(Layout::Random(RandomLayout {
                n_agents: r.agents,
                min_sep: r.min_sep,
            }))
        }
        (None, Some(list)) => {
            for (k, a) in list.iter().enumerate() {
                let heading = a.heading.unwrap_or_else(|| {
                    if a.start.len() >= 2 && a.goal.len() >= 2 {
                        (a.goal[1] - a.start[1]).atan2(a.goal[0] - a.start[0])
                    } else {
                        0.0
                    }
                });
                let mk = |p: &[f64]| state_at(&model, p, heading).map_err(|e| Error::Config(format!("scenario.agents[{k}]: {e}")));
                sc.agents.push(AgentSpec {
                    start: mk(&a.start)?,
                    goal: mk(&a.goal)?,
                });
            }
        }
        (None, None) => return Err(Error::Config("scenario: needs [scenario.random] or [[scenario.agents]]".into())),
    }

    let w = &file.weights;
    let mut weights = CostWeights::for_model(&model);
    let nx = model.state_dim;
    let diag = |pos: f64, other: f64| {
        DMatrix::from_diagonal(&DVector::from_fn(nx, |i, _| if model.position_indices.contains(&i) { pos } else { other }))
    };
    let other = w.q_other.unwrap_or(0.0);
    if w.q_position.is_some() || w.q_other.is_some() {
        weights.q_track = diag(w.q_position.unwrap_or(10.0), other);
    }
    if w.q_terminal_position.is_some() || w.q_other.is_some() {
        weights.q_terminal = diag(w.q_terminal_position.unwrap_or(10.0), other);
    }
    if let Some(r) = w.r_control {
        weights.r_control = DMatrix::identity(model.control_dim, model.control_dim) * r;
    }
    if let Some(v) = w.lambda_v {
        weights.lambda_v = v;
    }
    if let Some(v) = w.lambda_frs {
        weights.lambda_frs = v;
    }
    if let Some(v) = w.v_max {
        weights.v_max = v;
    }
    sc.weights = weights;

    let f = &file.frs;
    let mut frs = FrsConfig::for_model(&model, f.disturbance_bound.unwrap_or(sigma));
    if let Some(v) = f.initial_scale {
        frs.initial_shape = DMatrix::identity(nx, nx) * v;
    }
    if let Some(v) = f.eta {
        frs.eta = v;
    }
    if let Some(v) = f.order {
        frs.order = v;
    }
    if let Some(v) = f.lqr_q {
        frs.lqr_q = DMatrix::identity(nx, nx) * v;
    }
    if let Some(v) = f.lqr_r {
        frs.lqr_r = DMatrix::identity(model.control_dim, model.control_dim) * v;
    }
    sc.frs = frs;
    if let Some(v) = f.calibrate {
        sc.calibrate_eta = v;
    }
    if let Some(v) = f.calibration_samples {
        sc.calibration_samples = v;
    }
    if let Some(v) = file.solver {
        sc.solver = v;
    }

    if let Err(Error::Config(msg)) = sc.validate() {
        let (key, why) = msg.split_once(": ").unwrap_or((msg.as_str(), ""));
        let (section, leaf) = match key {
            k if k.starts_with("weights") || k.starts_with("frs") => (k.split(':').next().unwrap_or(k), ""),
            "random.agents" => ("scenario.random", "agents"),
            k => ("scenario", k),
        };
        return Err(if leaf.is_empty() && section != "scenario" {
            Error::Config(msg.clone())
        } else {
            config_error(text, section, leaf, why)
        });
    }
    Ok(LoadedConfig { scenario: sc, seed: file.seed })
}

pub fn load_config(path: &std::path::Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
schema_version = 1
seed = 3

[scenario]
model = "double_integrator_2d"
steps = 10
dt = 0.2
mpc_horizon = 5

[[scenario.agents]]
start = [0.0, 0.0]
goal = [2.0, 0.0]
"#;

    #[test]
    fn minimal_config_parses() {
        let c = parse_config(BASE).unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.scenario.n_agents(), 1);
        assert_eq!(c.scenario.steps, 10);
    }

    #[test]
    fn negative_dt_names_key_and_line() {
        let text = BASE.replace("dt = 0.2", "dt = -0.2");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("dt") && err.contains("line 8"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = BASE.replace("mpc_horizon = 5", "mpc_horizon = 5\nhorizn = 3");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("horizn") && err.contains("line 10"), "{err}");
    }

    #[test]
    fn wrong_schema_version() {
        let text = BASE.replace("schema_version = 1", "schema_version = 9");
        assert!(parse_config(&text).unwrap_err().to_string().contains("schema_version"));
    }

    #[test]
    fn infinite_proximity_is_accepted() {
        let text = BASE.replace("mpc_horizon = 5", "mpc_horizon = 5\nd_prox = inf");
        assert!(parse_config(&text).unwrap().scenario.d_prox.is_infinite());
    }
}
