use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrrec_cli::config::{ConfigError, ExperimentConfig};
use mrrec_cli::report::{emit_report, ReportFormat};
use mrrec_cli::runner::{run_experiment, run_sweep, RunError};
use mrrec_core::data::{generate_semi_synthetic, save_synthetic_dir};
use mrrec_core::estimators::{monte_carlo_bias, CellData, EstimatorSpec};
use mrrec_core::rng::derive_seed;
use mrrec_core::{BiasLevelSpec, ErrorConvention};

#[derive(Parser)]
#[command(name = "mrrec", version, about = "Debiased recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key overrides, e.g. --set train.lambda=0.5 (repeatable).
    #[arg(long = "set")]
    set: Vec<String>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed list override, e.g. --seeds 1,2,3.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Report format.
    #[arg(long, default_value = "json")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method across its seeds and write a report.
    Run(CommonArgs),
    /// Expand the sweep axes (methods, bias levels, lambdas) and report
    /// every grid point.
    Sweep(CommonArgs),
    /// Generate a semi-synthetic dataset directory with ground truth.
    Synthesize(CommonArgs),
    /// Monte-Carlo bias of the configured estimator on synthetic data.
    BiasOracle(CommonArgs),
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn load(common: &CommonArgs) -> Result<ExperimentConfig, RunError> {
    let mut overrides = common.set.clone();
    if !common.seeds.is_empty() {
        let list = common
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        overrides.push(format!("seeds=[{list}]"));
    }
    Ok(ExperimentConfig::load(&common.config, &overrides)?)
}

fn out_dir(common: &CommonArgs, config: &ExperimentConfig) -> Result<PathBuf, RunError> {
    common
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| {
            RunError::Config(ConfigError::Invalid(
                "no output directory: set out_dir in the config or pass --out".into(),
            ))
        })
}

fn format(common: &CommonArgs) -> Result<ReportFormat, RunError> {
    ReportFormat::parse(&common.format).ok_or_else(|| {
        RunError::Config(ConfigError::Invalid(format!(
            "unknown report format {:?} (expected json or csv)",
            common.format
        )))
    })
}

fn dispatch(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run(common) => {
            let config = load(&common)?;
            let dir = out_dir(&common, &config)?;
            let fmt = format(&common)?;
            let report = run_experiment(&config)?;
            for path in emit_report(&report, fmt, &dir)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Sweep(common) => {
            let config = load(&common)?;
            let dir = out_dir(&common, &config)?;
            let fmt = format(&common)?;
            let report = run_sweep(&config)?;
            for path in emit_report(&report, fmt, &dir)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Synthesize(common) => {
            let config = load(&common)?;
            let dir = out_dir(&common, &config)?;
            let mrrec_cli::config::DatasetSpec::Synthetic {
                num_users,
                num_items,
                base_density,
                bias_level,
                exposure_rate,
                base_seed,
                ..
            } = config.dataset
            else {
                return Err(RunError::Config(ConfigError::Invalid(
                    "synthesize needs a synthetic dataset spec".into(),
                )));
            };
            let base =
                mrrec_cli::runner::synthetic_base(num_users, num_items, base_density, base_seed);
            let spec = BiasLevelSpec::for_level(bias_level, exposure_rate)
                .map_err(|e| RunError::Runtime(e.to_string()))?;
            let synth = generate_semi_synthetic(&base, &spec, derive_seed(base_seed, 0xda7a))
                .map_err(|e| RunError::Runtime(e.to_string()))?;
            save_synthetic_dir(&synth, &dir).map_err(|e| RunError::Runtime(e.to_string()))?;
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::BiasOracle(common) => {
            let config = load(&common)?;
            let dir = out_dir(&common, &config)?;
            let data = mrrec_cli::runner::load_dataset(&config)?;
            if data.train.full_ratings.is_none() {
                return Err(RunError::Runtime(
                    "bias-oracle needs synthetic ground truth".into(),
                ));
            }
            // fixed reference models: first propensity estimator, constant
            // imputation, untrained prediction backbone
            let props = vec![mrrec_core::propensity::fit_naive_bayes_uniform(
                &data.train,
                config.ensemble.clip_floor,
            )
            .map_err(|e| RunError::Runtime(e.to_string()))?];
            let mut imp_backbone = mrrec_core::Backbone::new_mf(
                data.train.num_users,
                data.train.num_items,
                0,
                1,
            );
            imp_backbone.params_mut()[0] = 1.0;
            let ensemble = mrrec_core::ModelEnsemble::new(
                props,
                vec![mrrec_core::ImputationModel::new(imp_backbone, 0.01)],
                mrrec_core::Backbone::new_mf(data.train.num_users, data.train.num_items, 0, 2),
                0.01,
            )
            .map_err(|e| RunError::Runtime(e.to_string()))?;
            let cells = CellData::from_models(&data.train, &ensemble, ErrorConvention::Squared)
                .map_err(|e| RunError::Runtime(e.to_string()))?;
            let specs = [
                EstimatorSpec::Naive,
                EstimatorSpec::Ips { j: 0 },
                EstimatorSpec::Snips { j: 0 },
                EstimatorSpec::Dr { j: 0, k: 0 },
                EstimatorSpec::Mr { lambda: config.train.lambda, eta_fraction: 0.5 },
            ];
            std::fs::create_dir_all(&dir)
                .map_err(|e| RunError::Runtime(format!("create {}: {e}", dir.display())))?;
            let mut lines = String::new();
            for spec in &specs {
                let report = monte_carlo_bias(
                    spec,
                    &cells,
                    config.bias_trials.max(100),
                    derive_seed(config.seeds[0], 0xb1a5),
                )
                .map_err(|e| RunError::Runtime(e.to_string()))?;
                lines.push_str(&serde_json::to_string(&report).expect("report serializes"));
                lines.push('\n');
            }
            let path = dir.join("bias_oracle.jsonl");
            std::fs::write(&path, lines)
                .map_err(|e| RunError::Runtime(format!("write {}: {e}", path.display())))?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}
