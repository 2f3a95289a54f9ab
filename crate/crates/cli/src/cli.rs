//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use codtox_encoder::{ReportFormat, DEFAULT_STEPS};
use serde_json::json;

use crate::config::{FamilyConfig, LoadedConfig};
use crate::error::{AppError, Result, EXIT_OK, EXIT_USAGE};
use crate::manifest::RunManifest;
use crate::report::summary_table;
use crate::run::{load_reports, run_experiment, ExplainRequest, RunOptions, RunOutcome, Runner, Until};

#[derive(Debug, Parser)]
#[command(name = "codtox", version, about = "Drug-involvement classification experiments over cause-of-death text")]
pub struct Cli {
    /// Log level for the stderr log (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start a new timestamped subrun instead of resuming.
    #[arg(long)]
    pub fresh: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directory root; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only these models (repeatable).
    #[arg(long = "model")]
    pub models: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TableFormat {
    Tsv,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExplainFormat {
    Html,
    Text,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read and label the dataset(s).
    Ingest(RunArgs),
    /// Ingest, then partition.
    Split(RunArgs),
    /// Run through model training.
    Train(RunArgs),
    /// Run through evaluation and write the summary table.
    Evaluate(RunArgs),
    /// Label a record file with a trained model.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Delimited record file.
        #[arg(long = "in")]
        input: PathBuf,
        /// Prediction CSV, inside the run directory.
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the first model in the config.
        #[arg(long)]
        model: Option<String>,
    },
    /// Token attributions for an encoder model on internal test cases.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        /// Case keys (repeatable); defaults to the first `--n` test cases.
        #[arg(long = "case")]
        cases: Vec<String>,
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Target class; defaults to each case's top predicted class.
        #[arg(long)]
        class: Option<String>,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, value_enum, default_value = "html")]
        format: ExplainFormat,
        /// Report path, inside the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the metric table of a finished run, or run a config to the end
    /// and print it.
    Report {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        run: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tsv")]
        format: TableFormat,
        /// Round to `point (low-high)` cells with this many decimals.
        #[arg(long)]
        precision: Option<usize>,
    },
    /// Run and evaluate only the config's llm models.
    LlmEval(RunArgs),
}

fn load_config(config: &std::path::Path, seed: Option<u64>, out: Option<&PathBuf>) -> Result<LoadedConfig> {
    let mut loaded = LoadedConfig::load(config)?;
    if let Some(s) = seed {
        loaded.set_seed(s);
    }
    if let Some(o) = out {
        loaded.set_output_dir(o.clone());
    }
    Ok(loaded)
}

fn print_outcome(out: &mut dyn Write, o: &RunOutcome) {
    let v = json!({
        "run_dir": o.dir.display().to_string(),
        "status": o.manifest.status,
        "reused": o.manifest.reused,
        "split_fingerprint": o.manifest.split_fingerprint,
        "reports": o.manifest.reports,
    });
    let _ = writeln!(out, "{v}");
}

fn run_stages(args: &RunArgs, until: Until, llm_only: bool, out: &mut dyn Write) -> Result<()> {
    let loaded = load_config(&args.common.config, args.common.seed, args.out.as_ref())?;
    let mut models = (!args.models.is_empty()).then(|| args.models.clone());
    if llm_only {
        let llm: Vec<String> = loaded
            .config
            .models
            .iter()
            .filter(|m| matches!(m.family, FamilyConfig::Llm { .. }))
            .filter(|m| models.as_ref().is_none_or(|sel| sel.contains(&m.name)))
            .map(|m| m.name.clone())
            .collect();
        if llm.is_empty() {
            return Err(AppError::Usage("no llm models selected".into()));
        }
        models = Some(llm);
    }
    let outcome = run_experiment(&loaded, &RunOptions { until, models, fresh: args.common.fresh })?;
    print_outcome(out, &outcome);
    Ok(())
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => run_stages(&a, Until::Ingest, false, out),
        Command::Split(a) => run_stages(&a, Until::Split, false, out),
        Command::Train(a) => run_stages(&a, Until::Train, false, out),
        Command::Evaluate(a) => run_stages(&a, Until::Report, false, out),
        Command::LlmEval(a) => run_stages(&a, Until::Report, true, out),
        Command::Predict { common, input, out: dest, model } => {
            let loaded = load_config(&common.config, common.seed, None)?;
            let mut runner = Runner::open(&loaded, common.fresh)?;
            let result = runner.predict_file(model.as_deref(), &input, &dest);
            let outcome = runner.finish();
            let (path, n) = result?;
            let _ = writeln!(
                out,
                "{}",
                json!({"run_dir": outcome.dir.display().to_string(), "predictions": path.display().to_string(), "rows": n})
            );
            Ok(())
        }
        Command::Explain { common, model, cases, n, class, steps, format, out: dest } => {
            let loaded = load_config(&common.config, common.seed, None)?;
            let format = match format {
                ExplainFormat::Html => ReportFormat::Html,
                ExplainFormat::Text => ReportFormat::Text,
            };
            let dest = dest.unwrap_or_else(|| {
                let name = model.clone().unwrap_or_else(|| loaded.config.models[0].name.clone());
                let ext = if matches!(format, ReportFormat::Html) { "html" } else { "txt" };
                PathBuf::from(format!("explanations/{name}.{ext}"))
            });
            let mut runner = Runner::open(&loaded, common.fresh)?;
            let request = ExplainRequest { model, cases, n, class, steps, format, out: dest };
            let result = runner.explain(&request);
            let outcome = runner.finish();
            let path = result?;
            let _ = writeln!(
                out,
                "{}",
                json!({"run_dir": outcome.dir.display().to_string(), "report": path.display().to_string()})
            );
            Ok(())
        }
        Command::Report { run, config, seed, out: root, format, precision } => {
            let delimiter = match format {
                TableFormat::Tsv => b'\t',
                TableFormat::Csv => b',',
            };
            let dir = match (run, config) {
                (Some(dir), _) => dir,
                (None, Some(c)) => {
                    let loaded = load_config(&c, seed, root.as_ref())?;
                    run_experiment(&loaded, &RunOptions::default())?.dir
                }
                (None, None) => return Err(AppError::Usage("report needs --run or --config".into())),
            };
            let manifest = RunManifest::load(&dir)?;
            manifest.verify(&dir)?;
            let reports = load_reports(&dir, &manifest)?;
            let _ = write!(out, "{}", summary_table(&reports, delimiter, precision));
            Ok(())
        }
    }
}

fn init_logging(level: &str) {
    let level = level.parse::<tracing::Level>().unwrap_or(tracing::Level::WARN);
    let _ = tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).try_init();
}

/// Parses `argv`, runs the subcommand and returns the process exit code:
/// 0 success, 1 usage, 2 data, 3 stage failure.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    init_logging(&cli.log_level);
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "codtox: {e}");
            if let AppError::Usage(_) = e {
                let _ = writeln!(err, "run `codtox --help` for usage");
            }
            e.exit_code()
        }
    }
}
