//! Command-line driver: `generate`, `train`, `compare` and `report`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{
    run_comparison, scenario_clients, summary_from_csv, train_centralized_logged, write_summary_json, Summary,
};
use crate::federation::{
    encode_checkpoint, federated_step_budget, run_round, write_round_log, FedState, RoundRecord,
};
use crate::format::sig9;
use crate::meta::{meta_fed_round, LocalTaskSampler};
use crate::traffic::{gen_scenario, write_dataset_csv, TrafficSample};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const REPORT_CSV_FILE: &str = "comparison.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "metafed", version, about = "Meta-federated learning traffic simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the scenario's per-node traffic streams as CSV.
    Generate(CommonArgs),
    /// Train one model and write its checkpoint and round log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Run the centralized / standard FL / meta FL comparison.
    Compare(CommonArgs),
    /// Re-render the summary from an existing comparison CSV.
    Report(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON) or a run manifest written by a previous run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Centralized,
    Fedavg,
    Metafl,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Centralized => "centralized",
            Mode::Fedavg => "fedavg",
            Mode::Metafl => "metafl",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<Mode>,
    config: ExperimentConfig,
}

/// Process exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig { .. } => 2,
        _ => 1,
    }
}

fn resolve(args: &CommonArgs) -> Result<(ExperimentConfig, Option<Mode>)> {
    let (mut cfg, manifest_mode) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::invalid("--config", format!("{}: {e}", path.display())))?;
            let mode = serde_json::from_str::<Manifest>(&text).ok().and_then(|m| m.mode);
            (ExperimentConfig::from_json(&text)?, mode)
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok((cfg, manifest_mode))
}

fn write_manifest(cfg: &ExperimentConfig, command: &str, mode: Option<Mode>) -> Result<()> {
    let manifest = Manifest {
        command: command.to_string(),
        mode,
        config: cfg.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(cfg.output_dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let (cfg, _) = resolve(&args)?;
            cmd_generate(&cfg).map(|_| ())
        }
        Command::Train { common, mode } => {
            let (cfg, manifest_mode) = resolve(&common)?;
            let mode = mode.or(manifest_mode).unwrap_or(Mode::Fedavg);
            cmd_train(&cfg, mode).map(|_| ())
        }
        Command::Compare(args) => {
            let (cfg, _) = resolve(&args)?;
            cmd_compare(&cfg).map(|_| ())
        }
        Command::Report(args) => {
            let (cfg, _) = resolve(&args)?;
            cmd_report(&cfg.output_dir).map(|_| ())
        }
    }
}

/// Writes `dataset_<regime>.csv` for the configured scenario and first seed.
/// Returns the path and number of data rows.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<(PathBuf, usize)> {
    fs::create_dir_all(&cfg.output_dir)?;
    let spec = &cfg.scenario;
    let clients = gen_scenario(spec, cfg.seeds[0])?;
    let path = cfg
        .output_dir
        .join(format!("dataset_{}.csv", spec.density_regime.name()));
    let rows = write_dataset_csv(&clients, create(&path)?)?;
    write_manifest(cfg, "generate", None)?;
    println!("{}: {rows} rows", path.display());
    Ok((path, rows))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub round_log: PathBuf,
    pub final_mean_loss: f64,
    pub history: Vec<RoundRecord>,
}

/// Trains with the first seed and writes `checkpoint_<mode>.bin`,
/// `rounds_<mode>.csv` and, for federated modes, `events_<mode>.jsonl`.
pub fn cmd_train(cfg: &ExperimentConfig, mode: Mode) -> Result<TrainOutcome> {
    fs::create_dir_all(&cfg.output_dir)?;
    let seed = cfg.seeds[0];
    let clients = scenario_clients(&cfg.scenario, cfg.comparison.label_skew, seed)?;
    let tag = mode.name();

    let (params, history) = match mode {
        Mode::Centralized => {
            let budget = federated_step_budget(&cfg.hyper, &clients);
            let pool: Vec<TrafficSample> = clients.into_iter().flat_map(|c| c.samples).collect();
            train_centralized_logged(&pool, &cfg.hyper, budget, &cfg.cost, seed)?
        }
        Mode::Fedavg | Mode::Metafl => {
            cfg.meta.validate()?;
            let mut state = FedState::new(&cfg.hyper, clients, &cfg.cost, seed)?;
            let sampler = LocalTaskSampler {
                regime: cfg.scenario.density_regime,
            };
            for _ in 0..cfg.hyper.rounds {
                if mode == Mode::Fedavg {
                    run_round(&mut state)?;
                } else {
                    meta_fed_round(&mut state, &cfg.meta, &sampler)?;
                }
            }
            state
                .network
                .write_jsonl(create(&cfg.output_dir.join(format!("events_{tag}.jsonl")))?)?;
            (state.global_params, state.history)
        }
    };

    let checkpoint = cfg.output_dir.join(format!("checkpoint_{tag}.bin"));
    fs::write(&checkpoint, encode_checkpoint(&params, history.len()))?;
    let round_log = cfg.output_dir.join(format!("rounds_{tag}.csv"));
    write_round_log(&history, create(&round_log)?)?;
    write_manifest(cfg, "train", Some(mode))?;

    let final_mean_loss = history
        .last()
        .map(|r| r.mean_client_loss_after)
        .ok_or_else(|| Error::Assertion("training produced no rounds".into()))?;
    println!("mode {tag}: {} rounds, final mean loss {}", history.len(), sig9(final_mean_loss));
    Ok(TrainOutcome {
        checkpoint,
        round_log,
        final_mean_loss,
        history,
    })
}

/// Runs the comparison and writes the CSV, the JSON summary and the manifest.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<Summary> {
    fs::create_dir_all(&cfg.output_dir)?;
    let report = run_comparison(cfg)?;
    report.write_csv(create(&cfg.output_dir.join(REPORT_CSV_FILE))?)?;
    let summary = report.summary();
    write_summary_json(&summary, create(&cfg.output_dir.join(SUMMARY_FILE))?)?;
    write_manifest(cfg, "compare", None)?;
    print_summary(&summary);
    Ok(summary)
}

/// Rebuilds `summary.json` from `comparison.csv` in `dir`.
pub fn cmd_report(dir: &Path) -> Result<Summary> {
    let summary = summary_from_csv(File::open(dir.join(REPORT_CSV_FILE))?)?;
    write_summary_json(&summary, create(&dir.join(SUMMARY_FILE))?)?;
    print_summary(&summary);
    Ok(summary)
}

/// Prints the summary table; a closed stdout is not an error worth failing on.
fn print_summary(summary: &Summary) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{:<12} {:<9} {:>3} {:>18} {:>22} {:>16}",
        "variant", "regime", "n", "accuracy", "response_time_s", "steps"
    );
    for row in &summary.rows {
        let _ = writeln!(
            out,
            "{:<12} {:<9} {:>3} {:>8.4} ± {:<7.4} {:>10.4} ± {:<9.4} {:>6.1} ± {:<6.1}",
            row.variant.name(),
            row.regime.name(),
            row.n,
            row.accuracy.mean,
            row.accuracy.sd,
            row.response_time_s.mean,
            row.response_time_s.sd,
            row.steps_to_threshold.mean,
            row.steps_to_threshold.sd,
        );
    }
}
