//! Batch front-end for communication-aware trajectory planning: config
//! template generation, rate quantization, planning, Monte-Carlo simulation
//! sweeps and nonlinear validation, all deterministic for a given config and
//! master seed.

mod artifacts;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commtraj::channel::{quantize_expected_rate, sample_rate_curve};
use commtraj::dynamics::{
    build_linear_model, simulate_nonlinear_validated, DynamicsError, FullNonlinearState,
    NonlinearOptions,
};
use commtraj::mincontrol::{GramianCache, MinControlConfig};
use commtraj::planner::{PlanError, Planner};
use commtraj::simulate::lambda_sweep;

use artifacts::{PlanArtifact, RateMapArtifact, ValidationArtifact};
use config::RunConfig;

/// Exit codes: 0 ok, 2 config, 3 numeric, 4 planning, 5 validation.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl ToString) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    pub fn numeric(message: impl ToString) -> Self {
        Self {
            code: 3,
            message: message.to_string(),
        }
    }

    pub fn planning(message: impl ToString) -> Self {
        Self {
            code: 4,
            message: message.to_string(),
        }
    }

    pub fn validation(message: impl ToString) -> Self {
        Self {
            code: 5,
            message: message.to_string(),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::InvalidProblem(_) => CliError::config(e),
            PlanError::Conditioning(_) | PlanError::MinControl(_) | PlanError::Dynamics(_) => {
                CliError::numeric(e)
            }
            _ => CliError::planning(e),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "commtraj",
    about = "Plan drone trajectories that trade motion energy against expected bits to an access point",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Master seed; overrides COMMTRAJ_SEED, defaults to 0.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a documented configuration template.
    Init {
        /// Target directory for commtraj.json.
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Optimize the radial quantization of the expected-rate curve.
    Quantize {
        #[command(flatten)]
        common: CommonArgs,
        /// Quantization level count; overrides the config.
        #[arg(long, value_name = "Q")]
        levels: Option<usize>,
    },
    /// Plan one trajectory.
    Plan {
        #[command(flatten)]
        common: CommonArgs,
        /// Energy weight; overrides the config.
        #[arg(long, value_name = "X")]
        lambda: Option<f64>,
    },
    /// Plan and simulate a list of weights; writes the trade-off table.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated weights; overrides the config list.
        #[arg(long, value_name = "X,Y,..", value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Monte-Carlo trials per row; overrides the config.
        #[arg(long, value_name = "N")]
        trials: Option<usize>,
    },
    /// Re-check a planned control against the full nonlinear model.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
        /// Plan artifact; defaults to plan.json in the output directory.
        #[arg(long, value_name = "PATH")]
        plan: Option<PathBuf>,
    },
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    if let Some(seed) = flag {
        return seed;
    }
    if let Ok(env) = std::env::var("COMMTRAJ_SEED") {
        if let Ok(seed) = env.parse() {
            return seed;
        }
    }
    0
}

fn out_dir(common: &CommonArgs, config: &RunConfig) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.output_dir))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))
}

/// Runs a closure inside a rayon pool of the requested size so `--workers`
/// bounds the fan-out without affecting results.
fn with_workers<T>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

fn cmd_init(out: &Path, force: bool) -> Result<(), CliError> {
    ensure_dir(out)?;
    let path = out.join("commtraj.json");
    if path.exists() && !force {
        return Err(CliError::config(format!(
            "{} already exists (use --force to overwrite)",
            path.display()
        )));
    }
    artifacts::write_json(&path, &RunConfig::template())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_quantize(common: &CommonArgs, levels: Option<usize>) -> Result<(), CliError> {
    let config = RunConfig::load(&common.config)?;
    let seed = resolve_seed(common.seed);
    let levels = levels.unwrap_or(config.quantizer.levels);
    if levels < 2 {
        return Err(CliError::config(format!(
            "need at least 2 quantization levels, got {levels}"
        )));
    }
    let ladder = config.ladder.build()?;
    let map = quantize_expected_rate(
        &config.channel,
        &ladder,
        levels,
        config.domain_radius(),
        seed,
    )
    .map_err(CliError::numeric)?;
    let dir = out_dir(common, &config);
    ensure_dir(&dir)?;
    artifacts::write_json(
        &dir.join("ratemap.json"),
        &RateMapArtifact {
            levels,
            master_seed: seed,
            map: map.clone(),
        },
    )?;
    let samples = sample_rate_curve(&config.channel, &ladder, &map, 800);
    artifacts::write_rate_curve_csv(&dir.join("ratecurve.csv"), &samples)?;
    if !common.quiet {
        println!(
            "quantized {} levels, error {:.6e}; wrote ratemap.json and ratecurve.csv in {}",
            levels,
            map.error,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_plan(common: &CommonArgs, lambda: Option<f64>) -> Result<(), CliError> {
    let mut config = RunConfig::load(&common.config)?;
    let seed = resolve_seed(common.seed);
    if let Some(l) = lambda {
        config.problem.lambda = l;
    }
    config.problem.validate().map_err(CliError::config)?;
    config.sa.seed = seed;

    let ladder = config.ladder.build()?;
    let model = build_linear_model(&config.quadrotor).map_err(CliError::config)?;
    let cache = GramianCache::new(model, MinControlConfig::default());
    let map = quantize_expected_rate(
        &config.channel,
        &ladder,
        config.quantizer.levels,
        config.domain_radius(),
        seed,
    )
    .map_err(CliError::numeric)?;

    let result = with_workers(common.workers, || -> Result<_, CliError> {
        let planner = Planner::new(&config.problem, &cache, &map, &ladder)?;
        Ok(planner.plan(&config.sa)?)
    })?;

    let dir = out_dir(common, &config);
    ensure_dir(&dir)?;
    let law = result.build_law(&cache)?;
    artifacts::write_path_csv(&dir.join("path.csv"), &law, config.sim.dt_sample)?;
    artifacts::write_json(
        &dir.join("plan.json"),
        &PlanArtifact {
            lambda: config.problem.lambda,
            master_seed: seed,
            map,
            result: result.clone(),
        },
    )?;
    if !common.quiet {
        println!(
            "lambda {}: depth {}, cost {:.6}, energy ratio {:.6}, expected bits {:.4}; wrote plan.json and path.csv in {}",
            config.problem.lambda,
            result.waypoints.depth,
            result.cost,
            result.energy_ratio,
            result.bits_approx,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_sweep(
    common: &CommonArgs,
    lambdas: Option<Vec<f64>>,
    trials: Option<usize>,
) -> Result<(), CliError> {
    let mut config = RunConfig::load(&common.config)?;
    let seed = resolve_seed(common.seed);
    config.sa.seed = seed;
    config.sim.seed = seed;
    if let Some(t) = trials {
        config.sim.n_trials = t;
    }
    let lambdas = lambdas.unwrap_or_else(|| config.lambdas.clone());
    if lambdas.is_empty() {
        return Err(CliError::config("empty lambda list"));
    }
    if config.sim.n_trials == 0 {
        return Err(CliError::config("need at least one trial"));
    }

    let ladder = config.ladder.build()?;
    let model = build_linear_model(&config.quadrotor).map_err(CliError::config)?;
    let cache = GramianCache::new(model, MinControlConfig::default());
    let map = quantize_expected_rate(
        &config.channel,
        &ladder,
        config.quantizer.levels,
        config.domain_radius(),
        seed,
    )
    .map_err(CliError::numeric)?;

    let outcome = with_workers(common.workers, || {
        lambda_sweep(
            &config.problem,
            &lambdas,
            &cache,
            &config.channel,
            &map,
            &ladder,
            &config.sa,
            &config.sim,
        )
    })
    .map_err(|e| CliError::planning(e.to_string()))?;

    let dir = out_dir(common, &config);
    ensure_dir(&dir)?;
    artifacts::write_sweep_csv(&dir.join("table1.csv"), &outcome.rows)?;
    if !common.quiet {
        for row in &outcome.rows {
            match &row.error {
                None => println!(
                    "lambda {}: energy ratio {:.4}, bits approx {:.3} / measured {:.3} (stderr {:.3})",
                    row.lambda,
                    row.energy_ratio,
                    row.bits_approx_norm,
                    row.bits_measured_norm,
                    row.bits_stderr_norm
                ),
                Some(e) => println!("lambda {}: failed: {e}", row.lambda),
            }
        }
        println!("wrote table1.csv in {}", dir.display());
    }
    Ok(())
}

fn cmd_validate(common: &CommonArgs, plan_path: &Option<PathBuf>) -> Result<(), CliError> {
    let config = RunConfig::load(&common.config)?;
    let dir = out_dir(common, &config);
    let plan_path = plan_path.clone().unwrap_or_else(|| dir.join("plan.json"));
    let text = std::fs::read_to_string(&plan_path)
        .map_err(|e| CliError::config(format!("cannot read plan {}: {e}", plan_path.display())))?;
    let artifact: PlanArtifact = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("cannot parse plan {}: {e}", plan_path.display())))?;

    let model = build_linear_model(&config.quadrotor).map_err(CliError::config)?;
    let cache = GramianCache::new(model.clone(), MinControlConfig::default());
    let law = artifact.result.build_law(&cache)?;
    let duration = law.duration();
    let initial = FullNonlinearState::at_rest(config.problem.start);
    let outcome = simulate_nonlinear_validated(
        &config.quadrotor,
        &model,
        |t| law.control_at(t),
        (0.0, duration),
        initial,
        NonlinearOptions::default(),
    );
    let report = match outcome {
        Ok(report) => report,
        Err(e @ DynamicsError::AngleBoundExceeded { .. })
        | Err(e @ DynamicsError::NonFiniteState { .. }) => {
            return Err(CliError::validation(e));
        }
        Err(e) => return Err(CliError::numeric(e)),
    };
    // Pass when the nonlinear track stays within 1% of the path length.
    let bound = 0.01;
    let passed = report.deviation_fraction < bound;
    ensure_dir(&dir)?;
    artifacts::write_json(
        &dir.join("validation.json"),
        &ValidationArtifact {
            lambda: artifact.lambda,
            deviation_bound_fraction: bound,
            passed,
            report: report.clone(),
        },
    )?;
    if !common.quiet {
        println!(
            "max planar deviation {:.4} m over {:.1} m path ({:.4}%); wrote validation.json in {}",
            report.max_planar_deviation,
            report.path_length,
            100.0 * report.deviation_fraction,
            dir.display()
        );
    }
    if !passed {
        return Err(CliError::validation(format!(
            "nonlinear deviation fraction {:.6} exceeds {bound}",
            report.deviation_fraction
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Init { out, force } => cmd_init(out, *force),
        Command::Quantize { common, levels } => cmd_quantize(common, *levels),
        Command::Plan { common, lambda } => cmd_plan(common, *lambda),
        Command::Sweep {
            common,
            lambda,
            trials,
        } => cmd_sweep(common, lambda.clone(), *trials),
        Command::Validate { common, plan } => cmd_validate(common, plan),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
