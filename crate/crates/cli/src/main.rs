use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eventscore_cli::commands::SynthSource;
use eventscore_cli::{cmd_evaluate, cmd_fit, cmd_report, cmd_score, cmd_synth, CliError, Overrides, RunConfig};

/// Interpretable early warning scores from clinical time series.
#[derive(Parser)]
#[command(name = "eventscore", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated feature ids the model may use.
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    /// Leave out manually assessed features (GCS, AVPU).
    #[arg(long)]
    exclude_manual: bool,
    /// Rule table JSON; repeatable.
    #[arg(long = "table")]
    tables: Vec<PathBuf>,
    /// Model JSON; repeatable for `evaluate`.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort from a spec file or a preset.
    Synth {
        /// Synthetic spec (JSON).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["ushaped", "early-event"])]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Fit a model: writes model.json and path.csv.
    Fit(Common),
    /// Per-bin scores of a saved model: writes scores.csv.
    Score(Common),
    /// Compare saved models with rule tables on the test split.
    Evaluate(Common),
    /// Coefficient table of a saved model, plus importance and traces with --config.
    Report(Common),
}

fn run_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        out: c.out.clone(),
        features: c.features.clone(),
        exclude_manual: c.exclude_manual,
        tables: c.tables.clone(),
        models: c.models.clone(),
    });
    Ok(cfg)
}

fn one_model(c: &Common, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    match (c.models.as_slice(), cfg.paths.models.as_slice()) {
        ([m], _) | ([], [m]) => Ok(m.clone()),
        _ => Err(CliError::Usage("exactly one --model is required".into())),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            config,
            preset,
            seed,
            out,
        } => {
            let source = match (config, preset.as_deref()) {
                (Some(p), _) => SynthSource::File(p),
                (None, Some("early-event")) => SynthSource::EarlyEvent,
                (None, _) => SynthSource::UShaped,
            };
            for p in cmd_synth(&source, seed, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Fit(c) => {
            let cfg = run_config(&c)?;
            let a = cmd_fit(&cfg)?;
            println!("{}\n{}", a.model_path.display(), a.path_csv.display());
        }
        Command::Score(c) => {
            let cfg = run_config(&c)?;
            println!("{}", cmd_score(&cfg, &one_model(&c, &cfg)?)?.display());
        }
        Command::Evaluate(c) => {
            let cfg = run_config(&c)?;
            let (ev, paths) = cmd_evaluate(&cfg)?;
            for s in &ev.report.scorers {
                println!("{:<24} AUC {:.4}", s.name, s.auc);
            }
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Report(c) => {
            let cfg = run_config(&c)?;
            let model = one_model(&c, &cfg)?;
            let with_data = c.config.is_some().then_some(&cfg);
            for p in cmd_report(&model, with_data, &cfg.out_dir())? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
