//! Command-line front end: list built-in scenarios, run them (or scenario
//! config files) with parameter overrides, and compare controllers on the
//! same obstacle scripts.
//!
//! Exit codes: 0 run completed and stayed safe, 1 usage or configuration
//! error, 2 run completed but the true scaling factor dipped below 1,
//! 3 solver hard failure during the run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tvcbf::sim::{
    builtin, builtin_names, metrics, run, Metrics, SafetyController, Scenario, Trace,
};

#[derive(Parser)]
#[command(
    name = "tvcbf",
    about = "Safe-control scenarios with time-varying differentiable-optimization CBFs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List built-in scenarios.
    List,
    /// Run one scenario and write its trace, metrics, and figure series.
    Run(RunArgs),
    /// Run several controllers on identical obstacle scripts and compare.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Built-in scenario name.
    #[arg(long)]
    scenario: Option<String>,
    /// Scenario config file (TOML mirror of the scenario type).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; each run writes into <out>/<scenario-name>/.
    #[arg(long, env = "TVCBF_OUT", default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Mahalanobis bound of the noise-robust barrier.
    #[arg(long)]
    k: Option<f64>,
    /// Actuation-inflation gain.
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, value_parser = parse_switch)]
    time_varying: Option<bool>,
    #[arg(long, value_parser = parse_switch)]
    noise_robust: Option<bool>,
    #[arg(long, value_parser = parse_switch)]
    actuation_inflated: Option<bool>,
    #[arg(long, value_parser = parse_switch)]
    rhs_only: Option<bool>,
}

#[derive(Args)]
struct CompareArgs {
    /// Built-in scenario name.
    #[arg(long)]
    scenario: String,
    /// Controllers to run: tvcbfqp, mpc.
    #[arg(long, value_delimiter = ',', default_value = "tvcbfqp,mpc")]
    controllers: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, env = "TVCBF_OUT", default_value = "out")]
    out: PathBuf,
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(format!("expected on/off, got `{other}`")),
    }
}

/// 9 significant digits for all floating-point output.
fn g9(x: f64) -> String {
    tvcbf::sim::trace::fmt_g9(x)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code is 2; the contract reserves 1 for usage.
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let code = match cli.command {
        Command::List => cmd_list(),
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match code {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn cmd_list() -> Result<ExitCode, String> {
    for (name, description) in builtin_names() {
        println!("{name:26} {description}");
    }
    Ok(ExitCode::SUCCESS)
}

fn load_scenario(args: &RunArgs) -> Result<Scenario, String> {
    match (&args.scenario, &args.config) {
        (Some(_), Some(_)) => Err("pass either --scenario or --config, not both".into()),
        (None, None) => Err("one of --scenario or --config is required".into()),
        (Some(name), None) => builtin(name).map_err(|e| e.to_string()),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("reading {}: {e}", path.display()))?;
            toml::from_str(&text).map_err(|e| format!("parsing {}: {e}", path.display()))
        }
    }
}

fn apply_overrides(sc: &mut Scenario, args: &RunArgs) -> Result<(), String> {
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    if let Some(duration) = args.duration {
        sc.duration = duration;
    }
    if let Some(dt) = args.dt {
        sc.dt = dt;
        if let SafetyController::TvcbfQp(cfg) = &mut sc.safety {
            cfg.dt = dt;
        }
    }
    let wants_cbf = args.gamma.is_some()
        || args.beta.is_some()
        || args.k.is_some()
        || args.b.is_some()
        || args.time_varying.is_some()
        || args.noise_robust.is_some()
        || args.actuation_inflated.is_some()
        || args.rhs_only.is_some();
    if wants_cbf {
        let SafetyController::TvcbfQp(cfg) = &mut sc.safety else {
            return Err("barrier overrides apply only to TVCBFQP scenarios".into());
        };
        if let Some(v) = args.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = args.beta {
            cfg.beta = v;
        }
        if let Some(v) = args.k {
            cfg.k = v;
        }
        if let Some(v) = args.b {
            cfg.b = v;
        }
        if let Some(v) = args.time_varying {
            cfg.time_varying = v;
        }
        if let Some(v) = args.noise_robust {
            cfg.noise_robust = v;
        }
        if let Some(v) = args.actuation_inflated {
            cfg.actuation_inflated = v;
        }
        if let Some(v) = args.rhs_only {
            cfg.rhs_only = v;
        }
        cfg.validate().map_err(|e| e.to_string())?;
    }
    sc.validate().map_err(|e| e.to_string())?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, String> {
    let mut sc = load_scenario(&args)?;
    apply_overrides(&mut sc, &args)?;
    let dir = args.out.join(&sc.name);
    std::fs::create_dir_all(&dir).map_err(|e| format!("creating {}: {e}", dir.display()))?;

    let trace = run(&sc).map_err(|e| e.to_string())?;
    let m = metrics(&trace, sc.target).map_err(|e| e.to_string());

    write_artifacts(&dir, &sc, &trace)?;
    match m {
        Ok(m) => {
            let text = metrics_text(&sc, &m);
            std::fs::write(dir.join("metrics.txt"), &text)
                .map_err(|e| format!("writing metrics: {e}"))?;
            print!("{text}");
            if m.hard_failure_ticks > 0 {
                Ok(ExitCode::from(3))
            } else if m.safe {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
        // Empty trace (zero duration): artifacts written, nothing to judge.
        Err(_) if trace.ticks.is_empty() => Ok(ExitCode::SUCCESS),
        Err(e) => Err(e),
    }
}

fn metrics_text(sc: &Scenario, m: &Metrics) -> String {
    let mut out = String::new();
    out.push_str(&format!("scenario = {}\n", sc.name));
    out.push_str(&format!("seed = {}\n", sc.seed));
    out.push_str(&format!("min_h = {}\n", g9(m.min_h)));
    out.push_str(&format!("min_alpha = {}\n", g9(m.min_alpha)));
    out.push_str(&format!("min_distance = {}\n", g9(m.min_distance)));
    out.push_str(&format!(
        "max_lateral_deviation = {}\n",
        g9(m.max_lateral_deviation)
    ));
    out.push_str(&format!("target_reached = {}\n", m.target_reached));
    out.push_str(&format!("mean_solve_time = {}\n", g9(m.mean_solve_time)));
    out.push_str(&format!("max_solve_time = {}\n", g9(m.max_solve_time)));
    out.push_str(&format!("fallback_ticks = {}\n", m.fallback_ticks));
    out.push_str(&format!("hard_failure_ticks = {}\n", m.hard_failure_ticks));
    out.push_str(&format!("safe = {}\n", m.safe));
    out
}

/// Writes the trace, the scenario config mirror, and the figure-ready series.
fn write_artifacts(dir: &Path, sc: &Scenario, trace: &Trace) -> Result<(), String> {
    trace
        .write_csv(&dir.join("trace.csv"))
        .map_err(|e| format!("writing trace: {e}"))?;
    let config =
        toml::to_string_pretty(sc).map_err(|e| format!("serializing scenario: {e}"))?;
    std::fs::write(dir.join("scenario.toml"), config)
        .map_err(|e| format!("writing scenario config: {e}"))?;

    // Barrier series: time and h per pair.
    let mut h_series = String::from("time");
    for i in 0..trace.robot_bodies {
        for j in 0..trace.obstacles {
            h_series.push_str(&format!(",h_{i}_{j}"));
        }
    }
    h_series.push('\n');
    for t in &trace.ticks {
        h_series.push_str(&g9(t.time));
        for h in &t.pair_h {
            h_series.push(',');
            h_series.push_str(&g9(*h));
        }
        h_series.push('\n');
    }
    std::fs::write(dir.join("h_series.csv"), h_series)
        .map_err(|e| format!("writing h series: {e}"))?;

    // Paths: robot state and scripted obstacle positions.
    let mut path = String::from("time");
    for i in 0..trace.state_dim {
        path.push_str(&format!(",state_{i}"));
    }
    for j in 0..trace.obstacles {
        path.push_str(&format!(",obs{j}_x,obs{j}_y,obs{j}_z"));
    }
    path.push('\n');
    for t in &trace.ticks {
        path.push_str(&g9(t.time));
        for s in &t.state {
            path.push(',');
            path.push_str(&g9(*s));
        }
        for obs in &sc.obstacles {
            let p = obs.motion.pose_at(t.time).position;
            for d in 0..3 {
                path.push(',');
                path.push_str(&g9(p[d]));
            }
        }
        path.push('\n');
    }
    std::fs::write(dir.join("path.csv"), path).map_err(|e| format!("writing paths: {e}"))?;

    // Minimum oracle distance over pairs.
    let mut dist = String::from("time,min_distance\n");
    for t in &trace.ticks {
        let dmin = t
            .pair_distance
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        dist.push_str(&format!("{},{}\n", g9(t.time), g9(dmin)));
    }
    std::fs::write(dir.join("min_distance.csv"), dist)
        .map_err(|e| format!("writing distances: {e}"))?;
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<ExitCode, String> {
    if args.controllers.is_empty() {
        return Err("at least one controller is required".into());
    }
    let base = builtin(&args.scenario).map_err(|e| e.to_string())?;
    let mut rows: Vec<(String, Metrics)> = Vec::new();
    let mut worst = ExitCode::SUCCESS;
    for controller in &args.controllers {
        let mut sc = match controller.as_str() {
            "tvcbfqp" => {
                // The scenario pair shares obstacle scripts; pick whichever
                // variant of the base runs the TVCBFQP.
                match &base.safety {
                    SafetyController::TvcbfQp(_) => base.clone(),
                    _ => swap_controller(&base, false)?,
                }
            }
            "mpc" => match &base.safety {
                SafetyController::Mpc(_) => base.clone(),
                _ => swap_controller(&base, true)?,
            },
            other => return Err(format!("unknown controller `{other}`")),
        };
        if let Some(seed) = args.seed {
            sc.seed = seed;
        }
        if let Some(duration) = args.duration {
            sc.duration = duration;
        }
        sc.validate().map_err(|e| e.to_string())?;
        let dir = args.out.join(format!("{}_compare", base.name)).join(controller);
        std::fs::create_dir_all(&dir).map_err(|e| format!("creating {}: {e}", dir.display()))?;
        let trace = run(&sc).map_err(|e| e.to_string())?;
        let m = metrics(&trace, sc.target).map_err(|e| e.to_string())?;
        write_artifacts(&dir, &sc, &trace)?;
        std::fs::write(dir.join("metrics.txt"), metrics_text(&sc, &m))
            .map_err(|e| format!("writing metrics: {e}"))?;
        let code = if m.hard_failure_ticks > 0 {
            ExitCode::from(3)
        } else if m.safe {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(2)
        };
        if code != ExitCode::SUCCESS && worst == ExitCode::SUCCESS {
            worst = code;
        }
        rows.push((controller.clone(), m));
    }

    println!(
        "{:10} {:>15} {:>16} {:>16} {:>9}",
        "controller", "min_alpha", "max_lateral_dev", "mean_solve_ms", "reached"
    );
    for (name, m) in &rows {
        println!(
            "{:10} {:>15} {:>16} {:>16} {:>9}",
            name,
            g9(m.min_alpha),
            g9(m.max_lateral_deviation),
            g9(m.mean_solve_time * 1e3),
            m.target_reached
        );
    }
    Ok(worst)
}

/// Builds the counterpart scenario with the other controller family, reusing
/// the registry's parameterization when one exists.
fn swap_controller(base: &Scenario, to_mpc: bool) -> Result<Scenario, String> {
    let twin_name = if to_mpc {
        format!("{}_mpc", base.name)
    } else {
        base.name.trim_end_matches("_mpc").to_string()
    };
    if let Ok(mut twin) = builtin(&twin_name) {
        // Identical obstacle scripts by construction in the registry; keep
        // the base's seed for matched randomness.
        twin.seed = base.seed;
        return Ok(twin);
    }
    if to_mpc {
        Err(format!(
            "scenario `{}` has no MPC twin in the registry",
            base.name
        ))
    } else {
        let mut sc = base.clone();
        sc.safety = SafetyController::TvcbfQp(Default::default());
        Ok(sc)
    }
}
