use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use redpg::harness::config::load_config;
use redpg::harness::output::{fmt_f64, to_json, trajectory_header, trajectory_rows};
use redpg::harness::sweep::{grid_sweep, SWEEP_KEYS};
use redpg::harness::{monte_carlo, plan_nominal, prepare_trial, scenario_for_seed, Metrics, Scenario};
use redpg::reachability::{containment_check, ContainmentOptions};

#[derive(Parser)]
#[command(name = "redpg", version, about = "Multi-agent planning with reachability-aware potential games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for trial-level parallelism (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Plan the nominal trajectories of one scenario.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo: plan, execute under disturbances, and score.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// Grid search over hyperparameters, e.g. `lambda_frs=1,5,10,15`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// One `key=v1,v2,...` per swept parameter.
        #[arg(required = true)]
        grid: Vec<String>,
    },
    /// Containment of the first agent's reachable sets, after η calibration.
    FrsCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Write the shapes (row-major, one row per step) to `frs_shapes.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type CmdResult = Result<(), String>;

fn setup(common: &Common) -> Result<(Scenario, u64), String> {
    let loaded = load_config(&common.config).map_err(|e| e.to_string())?;
    let seed = common
        .seed
        .or(loaded.seed)
        .ok_or("no seed: pass --seed or set `seed` in the config file")?;
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err("--jobs must be at least 1".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok((loaded.scenario, seed))
}

fn write_file(dir: &Path, name: &str, body: &str) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| format!("{}: {e}", path.display()))
}

fn plan(common: &Common, out: &Path) -> CmdResult {
    let (template, seed) = setup(common)?;
    let sc = scenario_for_seed(&template, seed).map_err(|e| e.to_string())?;
    let trial = prepare_trial(&sc).map_err(|e| e.to_string())?;
    let nominal = plan_nominal(&sc, &trial).map_err(|e| e.to_string())?;
    let mut csv = trajectory_header(sc.model.state_dim, sc.model.control_dim);
    trajectory_rows(&mut csv, seed, &nominal.states, &nominal.controls, sc.model.control_dim);
    write_file(out, "nominal.csv", &csv)?;
    write_file(out, "certificates.json", &to_json(&nominal.certificates))?;
    println!("planned {} agents over {} steps; wrote {}", sc.n_agents(), sc.steps, out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrialEntry<'a> {
    seed: u64,
    metrics: Option<&'a Metrics>,
    error: Option<&'a str>,
}

fn simulate(common: &Common, out: &Path, trials: usize) -> CmdResult {
    let (template, seed) = setup(common)?;
    let parallel = template.parallel;
    let rep = monte_carlo(&template, trials, seed, parallel).map_err(|e| e.to_string())?;
    let mut csv = trajectory_header(template.model.state_dim, template.model.control_dim);
    for t in &rep.trials {
        if let Ok(r) = &t.result {
            trajectory_rows(&mut csv, t.seed, &r.executed.states, &r.executed.controls, template.model.control_dim);
        }
    }
    write_file(out, "trajectories.csv", &csv)?;
    let entries: Vec<TrialEntry> = rep
        .trials
        .iter()
        .map(|t| TrialEntry {
            seed: t.seed,
            metrics: t.metrics(),
            error: t.result.as_ref().err().map(|s| s.as_str()),
        })
        .collect();
    #[derive(Serialize)]
    struct Report<'a> {
        base_seed: u64,
        failed: usize,
        aggregate: &'a redpg::harness::Aggregate,
        trials: Vec<TrialEntry<'a>>,
    }
    let report = Report {
        base_seed: rep.base_seed,
        failed: rep.failed,
        aggregate: &rep.aggregate,
        trials: entries,
    };
    write_file(out, "report.json", &to_json(&report))?;
    let a = &rep.aggregate;
    println!(
        "{trials} trials ({} failed): collision_ratio {} tracking_cost {} min_pairwise_distance {}",
        rep.failed,
        fmt_f64(a.collision_ratio.mean),
        fmt_f64(a.tracking_cost.mean),
        fmt_f64(a.min_pairwise_distance.mean)
    );
    Ok(())
}

fn parse_grid(specs: &[String]) -> Result<Vec<(String, Vec<f64>)>, String> {
    specs
        .iter()
        .map(|s| {
            let (key, values) = s
                .split_once('=')
                .ok_or_else(|| format!("grid entry `{s}`: expected key=v1,v2,..."))?;
            let key = key.trim();
            if !SWEEP_KEYS.contains(&key) {
                return Err(format!("grid entry `{s}`: unknown key, expected one of {}", SWEEP_KEYS.join(", ")));
            }
            let vals = values
                .split(',')
                .filter(|v| !v.trim().is_empty())
                .map(|v| v.trim().parse::<f64>().map_err(|e| format!("grid entry `{s}`: {e}")))
                .collect::<Result<Vec<_>, _>>()?;
            if vals.is_empty() {
                return Err(format!("grid entry `{s}`: no values"));
            }
            Ok((key.to_string(), vals))
        })
        .collect()
}

fn sweep(common: &Common, out: &Path, trials: usize, grid: &[(String, Vec<f64>)]) -> CmdResult {
    let (template, seed) = setup(common)?;
    let rep = grid_sweep(&template, grid, trials, seed, template.parallel).map_err(|e| e.to_string())?;
    let mut csv = String::new();
    for (k, _) in grid {
        let _ = write!(csv, "{k},");
    }
    let stats = [
        "tracking_cost",
        "dist_to_goal_at_Tm5",
        "collision_ratio",
        "min_pairwise_distance",
        "near_collision_count",
        "avg_neighbors",
        "ne_iterations",
    ];
    for s in stats {
        let _ = write!(csv, "{s}_mean,{s}_std,");
    }
    csv.push_str("failed\n");
    for c in &rep.cells {
        for (_, v) in &c.params {
            let _ = write!(csv, "{},", fmt_f64(*v));
        }
        let a = &c.aggregate;
        for st in [
            a.tracking_cost,
            a.dist_to_goal_at_tm5,
            a.collision_ratio,
            a.min_pairwise_distance,
            a.near_collision_count,
            a.avg_neighbors,
            a.ne_iterations,
        ] {
            let _ = write!(csv, "{},{},", fmt_f64(st.mean), fmt_f64(st.std));
        }
        let _ = writeln!(csv, "{}", c.failed);
    }
    write_file(out, "sweep.csv", &csv)?;
    match rep.winner {
        Some(k) => {
            let p: Vec<String> = rep.cells[k].params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("winner: {}", p.join(" "));
        }
        None => println!("no safe cell: every cell collided or had failed trials"),
    }
    Ok(())
}

fn frs_check(common: &Common, samples: usize, out: Option<&Path>) -> CmdResult {
    let (template, seed) = setup(common)?;
    let sc = scenario_for_seed(&template, seed).map_err(|e| e.to_string())?;
    let trial = prepare_trial(&sc).map_err(|e| e.to_string())?;
    let frs = &trial.frs[0];
    let report = containment_check(frs, &sc.frs.initial_shape, samples, seed, ContainmentOptions::default())
        .map_err(|e| e.to_string())?;
    let eta = trial.calibration[0].map_or(sc.frs.eta, |(eta, _)| eta);
    println!("containment_ratio {}", fmt_f64(report.ratio));
    println!("eta {}", fmt_f64(eta));
    println!("disturbance_bound {}", fmt_f64(sc.frs.disturbance_bound));
    println!("{:>4}  max_quad_form", "t");
    for (t, q) in report.max_quad_form.iter().enumerate() {
        println!("{t:>4}  {}", fmt_f64(*q));
    }
    if let Some(dir) = out {
        let mut csv = String::new();
        for q in &frs.shapes {
            let row: Vec<String> = (0..q.nrows())
                .flat_map(|r| (0..q.ncols()).map(move |c| (r, c)))
                .map(|(r, c)| fmt_f64(q[(r, c)]))
                .collect();
            let _ = writeln!(csv, "{}", row.join(","));
        }
        write_file(dir, "frs_shapes.csv", &csv)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan { common, out } => plan(common, out),
        Command::Simulate { common, out, trials } => simulate(common, out, *trials),
        Command::Sweep {
            common,
            out,
            trials,
            grid,
        } => match parse_grid(grid) {
            Ok(g) => sweep(common, out, *trials, &g),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        Command::FrsCheck { common, samples, out } => frs_check(common, *samples, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
