//! `jumpfilter` command line: simulate, filter, solve, evaluate and verify.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use jumpfilter::control::ControlPath;
use jumpfilter::filter::{h_update, run_filter, FilterControl, FlowCache, NonnegMeasure};
use jumpfilter::io::{beliefs_csv, parse_y_path, pdmp_path_json, signal_path_json, summary_line, values_csv, y_path_json};
use jumpfilter::model::{ModelSpec, ValidateOptions};
use jumpfilter::pdmp::{draw_index, pdmp_cost_estimate, simulate_pdmp};
use jumpfilter::rng::stream;
use jumpfilter::signal::{derive_y, mc_cost, simulate_signal, ConstantControl, PolicyControl};
use jumpfilter::solver::{solve, Mode, Solution, SolverConfig};
use jumpfilter::verify::{run_suite, SuiteOptions};

#[derive(Parser)]
#[command(name = "jumpfilter", version, about = "Noise-free filtering and separated control of finite jump processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Model file (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Machine-readable summary on stdout.
    #[arg(long)]
    json: bool,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Accept an injective or constant observation map.
    #[arg(long)]
    allow_degenerate_h: bool,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct InitialLaw {
    /// Initial law as comma-separated weights over the states.
    #[arg(long, conflicts_with = "x0")]
    mu: Option<String>,
    /// Initial state label (point mass).
    #[arg(long)]
    x0: Option<String>,
}

#[derive(Args, Clone)]
struct SolveArgs {
    /// Grid resolution.
    #[arg(long, default_value_t = 16)]
    k: u32,
    /// Time discretization: A (constant control per sojourn) or B (semi-Lagrangian).
    #[arg(long, default_value = "A")]
    mode: Mode,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Mode B time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Mode A truncation time.
    #[arg(long)]
    t_max: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file and print its constants.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate the hidden signal and its observations under a constant control.
    SimulateSignal {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        law: InitialLaw,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        /// Control label.
        #[arg(long)]
        control: Option<String>,
    },
    /// Run the filter along an observed trajectory.
    Filter {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        law: InitialLaw,
        /// Observation file `{"y0": .., "jumps": [{"t": .., "y": ..}]}`.
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        horizon: Option<f64>,
        /// Control label (constant).
        #[arg(long)]
        control: Option<String>,
        /// Sampling interval of the belief table.
        #[arg(long, default_value_t = 0.1)]
        sample_dt: f64,
    },
    /// Simulate the filter process directly under a constant control.
    SimulatePdmp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        law: InitialLaw,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        #[arg(long)]
        control: Option<String>,
    },
    /// Solve the separated problem on a grid.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solver: SolveArgs,
    },
    /// Solve, then estimate the cost of the extracted policy by Monte Carlo.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solver: SolveArgs,
        #[command(flatten)]
        law: InitialLaw,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
        #[arg(long, default_value_t = 10_000)]
        n_paths: usize,
    },
    /// Run the verification suite and write the report array.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        n_paths: usize,
        #[arg(long, default_value_t = 1_000_000)]
        consistency_paths: usize,
        #[arg(long, default_value_t = 16)]
        k: u32,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
    },
}

enum Failure {
    /// Bad flag value; exit code 2.
    Usage(String),
    /// Invalid input or failed check; exit code 1.
    Run(String),
}

type Res<T> = Result<T, Failure>;

fn run_err(e: impl std::fmt::Display) -> Failure {
    Failure::Run(e.to_string())
}

fn usage(flag: &str, msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("--{flag}: {msg}"))
}

fn load(common: &Common) -> Res<ModelSpec> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(usage("threads", "must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(run_err)?;
    }
    let opts = ValidateOptions {
        allow_degenerate_h: common.allow_degenerate_h,
    };
    ModelSpec::load(&common.model, opts).map_err(|e| Failure::Run(format!("{}: {e}", common.model.display())))
}

fn positive(flag: &str, x: f64) -> Res<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(usage(flag, format!("must be positive and finite, got {x}")))
    }
}

fn control(model: &ModelSpec, label: Option<&str>) -> Res<usize> {
    match label {
        None => Ok(0),
        Some(l) => model
            .control_index(l)
            .ok_or_else(|| usage("control", format!("unknown control `{l}`"))),
    }
}

fn initial_law(model: &ModelSpec, law: &InitialLaw) -> Res<Vec<f64>> {
    let n = model.n_states();
    if let Some(x) = &law.x0 {
        let i = model
            .state_index(x)
            .ok_or_else(|| usage("x0", format!("unknown state `{x}`")))?;
        let mut mu = vec![0.0; n];
        mu[i] = 1.0;
        return Ok(mu);
    }
    match &law.mu {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(s) => {
            let mu = s
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| usage("mu", e))?;
            if mu.len() != n || mu.iter().any(|w| !(*w >= 0.0)) || (mu.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(usage("mu", format!("need {n} nonnegative weights summing to 1")));
            }
            Ok(mu)
        }
    }
}

fn solver_config(a: &SolveArgs) -> Res<SolverConfig> {
    if a.k == 0 {
        return Err(usage("k", "must be at least 1"));
    }
    let mut cfg = SolverConfig::new(a.mode, positive("tol", a.tol)?);
    cfg.dt = a.dt.map(|x| positive("dt", x)).transpose()?;
    cfg.t_max = a.t_max.map(|x| positive("t-max", x)).transpose()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, content: &str) -> Res<PathBuf> {
    fs::create_dir_all(dir).map_err(run_err)?;
    let path = dir.join(name);
    fs::write(&path, content).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn report(common: &Common, summary: serde_json::Value) {
    if common.json {
        println!("{summary}");
    } else {
        let pairs: Vec<(String, String)> = summary
            .as_object()
            .map(|o| {
                o.iter()
                    .map(|(k, v)| (k.clone(), v.as_str().map_or_else(|| v.to_string(), str::to_string)))
                    .collect()
            })
            .unwrap_or_default();
        let refs: Vec<(&str, String)> = pairs.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        println!("{}", summary_line(&refs));
    }
}

fn solve_and_write(model: &ModelSpec, common: &Common, args: &SolveArgs) -> Res<Solution> {
    let cfg = solver_config(args)?;
    let sol = solve(model, args.k, &cfg).map_err(run_err)?;
    write(&common.out, "values.csv", &values_csv(model, &sol.grid, &sol.field, &sol.policy))?;
    let report = json!({
        "k": args.k,
        "mode": args.mode.to_string(),
        "tol": cfg.tol,
        "vertices": sol.grid.len(),
        "report": sol.report,
    });
    write(&common.out, "report.json", &serde_json::to_string_pretty(&report).map_err(run_err)?)?;
    Ok(sol)
}

fn execute(cli: Cli) -> Res<()> {
    match cli.command {
        Command::Validate { common } => {
            let m = load(&common)?;
            report(
                &common,
                json!({
                    "states": m.n_states(),
                    "observations": m.n_obs(),
                    "controls": m.n_controls(),
                    "beta": m.beta(),
                    "C_lambda": m.c_lambda(),
                    "C_f": m.c_f(),
                }),
            );
        }
        Command::SimulateSignal {
            common,
            law,
            seed,
            horizon,
            control: label,
        } => {
            let m = load(&common)?;
            let mu = initial_law(&m, &law)?;
            let u = control(&m, label.as_deref())?;
            let horizon = positive("horizon", horizon)?;
            let path = simulate_signal(&m, &mu, &mut ConstantControl(u), horizon, &mut stream(seed, 0))
                .map_err(run_err)?;
            let y = derive_y(&m, &path);
            write(&common.out, "signal.json", &signal_path_json(&m, &path))?;
            write(&common.out, "observations.json", &y_path_json(&m, &y))?;
            report(
                &common,
                json!({"state_jumps": path.jumps.len(), "observation_jumps": y.jumps.len(), "horizon": horizon}),
            );
        }
        Command::Filter {
            common,
            law,
            obs,
            horizon,
            control: label,
            sample_dt,
        } => {
            let m = load(&common)?;
            let mu = initial_law(&m, &law)?;
            let u = control(&m, label.as_deref())?;
            let text = fs::read_to_string(&obs).map_err(|e| usage("obs", e))?;
            let y = parse_y_path(&m, &text, horizon).map_err(|e| usage("obs", e))?;
            let path = ControlPath::constant(u);
            let beliefs = run_filter(
                &m,
                &mu,
                &y,
                FilterControl::Record(&path),
                Some(positive("sample-dt", sample_dt)?),
                m.default_step(),
                None,
            )
            .map_err(run_err)?;
            write(&common.out, "beliefs.csv", &beliefs_csv(&m, &beliefs))?;
            let degenerate = beliefs.jumps.iter().filter(|j| j.degenerate_update).count()
                + usize::from(beliefs.initial_degenerate);
            report(
                &common,
                json!({
                    "jumps": beliefs.jumps.len(),
                    "rows": beliefs.rows().len(),
                    "degenerate_updates": degenerate,
                    "max_mass_error": beliefs.stats.max_mass_error,
                }),
            );
        }
        Command::SimulatePdmp {
            common,
            law,
            seed,
            horizon,
            control: label,
        } => {
            let m = load(&common)?;
            let mu = initial_law(&m, &law)?;
            let u = control(&m, label.as_deref())?;
            let horizon = positive("horizon", horizon)?;
            let mut rng = stream(seed, 0);
            let masses: Vec<f64> = (0..m.n_obs())
                .map(|y| m.face_states(y).iter().map(|&x| mu[x]).sum())
                .collect();
            let y0 = draw_index(&masses, &mut rng);
            let nu0 = h_update(&m, &NonnegMeasure(mu.clone()), y0);
            let policy = jumpfilter::control::ConstantPolicy(u);
            let (path, cost) =
                simulate_pdmp(&m, &nu0, &policy, horizon, &mut rng, Some(&mut FlowCache::new())).map_err(run_err)?;
            write(&common.out, "pdmp.json", &pdmp_path_json(&m, &path, cost))?;
            report(&common, json!({"jumps": path.jumps.len(), "cost_sample": cost, "horizon": horizon}));
        }
        Command::Solve { common, solver } => {
            let m = load(&common)?;
            let sol = solve_and_write(&m, &common, &solver)?;
            report(
                &common,
                json!({
                    "vertices": sol.grid.len(),
                    "iterations": sol.report.iterations,
                    "residual": sol.report.residual,
                    "grid_bias_estimate": sol.report.grid_bias_estimate,
                }),
            );
        }
        Command::Evaluate {
            common,
            solver,
            law,
            seed,
            horizon,
            n_paths,
        } => {
            let m = load(&common)?;
            let mu = initial_law(&m, &law)?;
            let horizon = positive("horizon", horizon)?;
            if n_paths < 2 {
                return Err(usage("n-paths", "need at least 2"));
            }
            let sol = solve_and_write(&m, &common, &solver)?;
            let lift = sol.lift(&m, &mu).map_err(run_err)?;
            let mc = mc_cost(&m, &mu, || PolicyControl::new(&m, &sol.policy, &mu), horizon, n_paths, seed)
                .map_err(run_err)?;
            let masses: Vec<f64> = (0..m.n_obs())
                .map(|y| m.face_states(y).iter().map(|&x| mu[x]).sum())
                .collect();
            let mut pdmp = 0.0;
            for (y, &w) in masses.iter().enumerate() {
                if w > 0.0 {
                    let nu = h_update(&m, &NonnegMeasure(mu.clone()), y);
                    let (mean, _) = pdmp_cost_estimate(&m, &nu, &sol.policy, horizon, n_paths, seed ^ y as u64)
                        .map_err(run_err)?;
                    pdmp += w * mean;
                }
            }
            let doc = json!({
                "lift_value": lift,
                "mc_cost": mc,
                "pdmp_cost": pdmp,
                "grid_bias_estimate": sol.report.grid_bias_estimate,
            });
            write(&common.out, "evaluation.json", &serde_json::to_string_pretty(&doc).map_err(run_err)?)?;
            report(
                &common,
                json!({"lift_value": lift, "mc_mean": mc.mean, "mc_stderr": mc.stderr, "pdmp_mean": pdmp}),
            );
        }
        Command::Verify {
            common,
            seed,
            n_paths,
            consistency_paths,
            k,
            tol,
            dt,
            horizon,
        } => {
            let m = load(&common)?;
            if k == 0 {
                return Err(usage("k", "must be at least 1"));
            }
            if n_paths < 2 {
                return Err(usage("n-paths", "need at least 2"));
            }
            let opts = SuiteOptions {
                seed,
                n_paths,
                consistency_paths,
                n_pairs: 10_000,
                k,
                tol: positive("tol", tol)?,
                dt: dt.map(|x| positive("dt", x)).transpose()?,
                horizon: positive("horizon", horizon)?,
            };
            let reports = run_suite(&m, &opts).map_err(run_err)?;
            write(&common.out, "verify.json", &serde_json::to_string_pretty(&reports).map_err(run_err)?)?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if common.json {
                println!("{}", serde_json::to_string(&reports).map_err(run_err)?);
            } else {
                for r in &reports {
                    println!("{}", r.line());
                }
                println!("{}/{} checks passed", reports.len() - failed.len(), reports.len());
            }
            if !failed.is_empty() {
                return Err(Failure::Run(format!("failed checks: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
