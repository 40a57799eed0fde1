//! Command-line entry point: one subcommand per pipeline stage plus the
//! evaluation and simulation harnesses.
//!
//! Exit codes are uniform: 0 success (per-item failures are nonfatal and
//! only reported in the summary), 1 fatal runtime error, 2 usage or
//! configuration error. Logs go to stderr; every subcommand ends by
//! writing its run summary to stdout as the final block, as text or JSON
//! per `--format`.

use crate::bench::{self, BenchError, ReportFormat};
use crate::config::{ConfigError, PipelineConfig, PipelineSetup};
use crate::endpoints::ChatClient;
use crate::fusion::{fuse_consensus, render_template_narrative, FusedDescription};
use crate::pipeline::{self, DatasetRecord, ImageTile, PipelineError, RunOptions};
use crate::refine::refine_expert;
use crate::schema::{parse_structured_caption, StructuredCaption};
use crate::simulate::{fused_accuracy_oracle, run_fusion_trial, TrialConfig};
use crate::transforms::{self, InstructionSample, ReplaySource, TransformError};
use clap::{Parser, Subcommand, ValueEnum};
use futures::StreamExt;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "cytoscribe",
    version,
    about = "Ensemble annotation pipeline and evaluation harness for cytology image-description datasets"
)]
pub struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Log filter directive (e.g. `info`, `cytoscribe=debug`); logs go to stderr.
    #[arg(long, global = true, default_value = "info", value_name = "FILTER")]
    pub log_level: String,
    /// Output format for reports and the run summary.
    #[arg(long, global = true, value_enum, default_value = "text")]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchArg {
    Morpho,
    Tbs,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the annotation pipeline: weak annotators, consensus fusion,
    /// expert refinement, dataset shards.
    Annotate {
        /// Tile manifest (line-delimited JSON).
        #[arg(long)]
        manifest: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop gracefully after this many shard flushes (staged backfills).
        #[arg(long, value_name = "N")]
        stop_after_shards: Option<u64>,
    },
    /// Re-run consensus fusion offline from the Stage-1 raw replies saved
    /// in a dataset (template narratives; no endpoints contacted).
    Fuse {
        #[arg(long)]
        dataset_dir: PathBuf,
        /// Output file for the re-fused descriptions (line-delimited JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run expert refinement over a dataset's fused descriptions.
    Refine {
        #[arg(long)]
        dataset_dir: PathBuf,
        /// Tile manifest supplying the image for each record.
        #[arg(long)]
        manifest: PathBuf,
        /// Output dataset directory (re-sharded).
        #[arg(long)]
        out: PathBuf,
    },
    /// Reformat dataset records into instruction-following dialogues.
    Reformat {
        #[arg(long)]
        dataset_dir: PathBuf,
        /// Dialogue template file (one JSON object per line); omit to use
        /// the built-in templates.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output sample file (line-delimited JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate knowledge-replay QA streams and mix them.
    Replay {
        /// Dataset directory for the text-only domain stream.
        #[arg(long)]
        domain: Option<PathBuf>,
        /// General-image manifest for the vision stream.
        #[arg(long)]
        general: Option<PathBuf>,
        /// Comma-separated stream weights, one per present stream, domain
        /// first (default: equal weights).
        #[arg(long)]
        weights: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output sample file (line-delimited JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the configured model on a benchmark manifest.
    Eval {
        #[arg(long, value_enum)]
        bench: BenchArg,
        /// Benchmark item manifest (line-delimited JSON).
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise inter-rater agreement over morphology annotations.
    Agreement {
        /// Benchmark manifest the rater files annotate.
        #[arg(long)]
        manifest: PathBuf,
        /// Rater files, one per rater (line-delimited JSON; the file stem
        /// is the rater id).
        #[arg(required = true)]
        raters: Vec<PathBuf>,
    },
    /// Run a seeded fusion-simulation trial from a TOML trial config.
    Simulate { trial_config: PathBuf },
}

// ---------------------------------------------------------------------------
// error classification

enum CmdError {
    /// Exit 2: bad flags, files, or configuration.
    Usage(String),
    /// Exit 1: runtime failure after valid inputs.
    Fatal(String),
}

impl CmdError {
    fn code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 2,
            CmdError::Fatal(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CmdError::Usage(message) | CmdError::Fatal(message) => message,
        }
    }
}

impl From<ConfigError> for CmdError {
    fn from(err: ConfigError) -> CmdError {
        CmdError::Usage(err.to_string())
    }
}

impl From<PipelineError> for CmdError {
    fn from(err: PipelineError) -> CmdError {
        match err {
            PipelineError::Io { .. } | PipelineError::ShardWrite { .. } => {
                CmdError::Fatal(err.to_string())
            }
            _ => CmdError::Usage(err.to_string()),
        }
    }
}

impl From<TransformError> for CmdError {
    fn from(err: TransformError) -> CmdError {
        CmdError::Usage(err.to_string())
    }
}

impl From<BenchError> for CmdError {
    fn from(err: BenchError) -> CmdError {
        CmdError::Usage(err.to_string())
    }
}

// ---------------------------------------------------------------------------
// run summary

/// The final block every subcommand writes to stdout.
#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub started_at: String,
    pub finished_at: String,
    pub counts: BTreeMap<&'static str, u64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    pub output_paths: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub exit_code: i32,
}

impl RunSummary {
    fn new(command: &str) -> RunSummary {
        RunSummary {
            command: command.to_string(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: String::new(),
            counts: BTreeMap::new(),
            metrics: BTreeMap::new(),
            output_paths: Vec::new(),
            notes: Vec::new(),
            config_hash: None,
            exit_code: 0,
        }
    }

    fn render(&self, format: Format) -> String {
        match format {
            Format::Json => {
                let mut text =
                    serde_json::to_string_pretty(self).expect("summary serializes");
                text.push('\n');
                text
            }
            Format::Text => {
                let mut out = String::new();
                out.push_str("--- run summary ---\n");
                out.push_str(&format!("command: {}\n", self.command));
                out.push_str(&format!("started_at: {}\n", self.started_at));
                out.push_str(&format!("finished_at: {}\n", self.finished_at));
                for (key, value) in &self.counts {
                    out.push_str(&format!("{key}: {value}\n"));
                }
                for (key, value) in &self.metrics {
                    out.push_str(&format!("{key}: {value:.4}\n"));
                }
                for path in &self.output_paths {
                    out.push_str(&format!("output: {path}\n"));
                }
                for note in &self.notes {
                    out.push_str(&format!("note: {note}\n"));
                }
                if let Some(hash) = &self.config_hash {
                    out.push_str(&format!("config_hash: {hash}\n"));
                }
                out.push_str(&format!("exit_code: {}\n", self.exit_code));
                out
            }
        }
    }
}

// ---------------------------------------------------------------------------
// entry point

/// Parses argv, runs the selected subcommand, prints the run summary, and
/// returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    init_logging(&cli.log_level);

    let runtime = match tokio::runtime::Runtime::new() {
        Ok(runtime) => runtime,
        Err(err) => {
            eprintln!("error: failed to start async runtime: {err}");
            return 1;
        }
    };

    let format = cli.format;
    let mut summary = RunSummary::new(command_name(&cli.command));
    let result = runtime.block_on(dispatch(cli.command, cli.config, format, &mut summary));
    summary.finished_at = chrono::Utc::now().to_rfc3339();
    let code = match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {}", err.message());
            err.code()
        }
    };
    summary.exit_code = code;
    print!("{}", summary.render(format));
    code
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Annotate { .. } => "annotate",
        Command::Fuse { .. } => "fuse",
        Command::Refine { .. } => "refine",
        Command::Reformat { .. } => "reformat",
        Command::Replay { .. } => "replay",
        Command::Eval { .. } => "eval",
        Command::Agreement { .. } => "agreement",
        Command::Simulate { .. } => "simulate",
    }
}

fn init_logging(directive: &str) {
    use tracing_subscriber::EnvFilter;
    let filter = EnvFilter::try_new(directive).unwrap_or_else(|_| EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Maps an input-loading failure to a usage error: at argument-handling
/// time every failure is a bad path or bad file named by the user, unlike
/// mid-run I/O errors which stay fatal.
fn usage<E: std::fmt::Display>(err: E) -> CmdError {
    CmdError::Usage(err.to_string())
}

fn load_setup(config: &Option<PathBuf>) -> Result<PipelineSetup, CmdError> {
    match config {
        Some(path) => Ok(PipelineSetup::load(path)?),
        None => Ok(PipelineSetup::from_config(
            PipelineConfig::default(),
            Path::new("."),
        )?),
    }
}

fn write_output_file(path: &Path, content: &str) -> Result<(), CmdError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|err| {
                CmdError::Fatal(format!("creating {}: {err}", parent.display()))
            })?;
        }
    }
    std::fs::write(path, content)
        .map_err(|err| CmdError::Fatal(format!("writing {}: {err}", path.display())))
}

async fn dispatch(
    command: Command,
    config: Option<PathBuf>,
    format: Format,
    summary: &mut RunSummary,
) -> Result<i32, CmdError> {
    // An explicitly passed config that cannot be loaded is a usage error for
    // every subcommand, including those that never consult it; silently
    // falling back to defaults would mask a typo in the path.
    if let Some(path) = &config {
        PipelineSetup::load(path)?;
    }
    match command {
        Command::Annotate {
            manifest,
            out,
            resume,
            stop_after_shards,
        } => cmd_annotate(&config, manifest, out, resume, stop_after_shards, summary).await,
        Command::Fuse { dataset_dir, out } => cmd_fuse(&config, dataset_dir, out, summary),
        Command::Refine {
            dataset_dir,
            manifest,
            out,
        } => cmd_refine(&config, dataset_dir, manifest, out, summary).await,
        Command::Reformat {
            dataset_dir,
            templates,
            seed,
            out,
        } => cmd_reformat(dataset_dir, templates, seed, out, summary),
        Command::Replay {
            domain,
            general,
            weights,
            seed,
            out,
        } => cmd_replay(&config, domain, general, weights, seed, out, summary).await,
        Command::Eval {
            bench,
            manifest,
            out,
        } => cmd_eval(&config, bench, manifest, out, format, summary).await,
        Command::Agreement { manifest, raters } => {
            cmd_agreement(manifest, &raters, format, summary)
        }
        Command::Simulate { trial_config } => cmd_simulate(&trial_config, format, summary),
    }
}

// ---------------------------------------------------------------------------
// subcommands

async fn cmd_annotate(
    config: &Option<PathBuf>,
    manifest: PathBuf,
    out: PathBuf,
    resume: bool,
    stop_after_shards: Option<u64>,
    summary: &mut RunSummary,
) -> Result<i32, CmdError> {
    let setup = load_setup(config)?;
    let tiles = pipeline::load_tile_manifest(&manifest).map_err(usage)?;
    let client = ChatClient::new();

    let (cancel_tx, cancel_rx) = tokio::sync::watch::channel(false);
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            tracing::info!("interrupt received; finishing in-flight tiles");
            let _ = cancel_tx.send(true);
        }
    });

    let options = RunOptions {
        output_dir: out.clone(),
        resume,
        stop_after_shards,
        cancel: Some(cancel_rx.clone()),
    };
    let run = pipeline::run_pipeline(&tiles, &setup, &client, options).await?;

    summary.counts.insert("succeeded", run.succeeded);
    summary.counts.insert("failed", run.failed);
    summary.counts.insert("skipped", run.skipped);
    summary
        .counts
        .insert("interrupted", u64::from(run.interrupted));
    summary.config_hash = Some(run.config_hash.clone());
    for path in &run.shard_paths {
        summary.output_paths.push(path.display().to_string());
    }
    summary
        .output_paths
        .push(out.join(pipeline::DATASET_MANIFEST_FILE).display().to_string());
    for (tile_id, reason) in &run.failed_tiles {
        summary.notes.push(format!("tile `{tile_id}` failed: {reason}"));
    }

    // A Ctrl-C interrupt is an abnormal end; a requested shard-count stop
    // is a successful staged run.
    let canceled = *cancel_rx.borrow();
    Ok(if run.interrupted && canceled { 1 } else { 0 })
}

#[derive(Serialize)]
struct FusedLine<'a> {
    tile_id: &'a str,
    fused: &'a FusedDescription,
}

fn cmd_fuse(
    config: &Option<PathBuf>,
    dataset_dir: PathBuf,
    out: PathBuf,
    summary: &mut RunSummary,
) -> Result<i32, CmdError> {
    let setup = load_setup(config)?;
    let records = pipeline::load_dataset_records(&dataset_dir).map_err(usage)?;

    let mut lines = String::new();
    let mut fused_count = 0u64;
    let mut failed = 0u64;
    for record in &records {
        let captions: Vec<(String, StructuredCaption)> = record
            .stage1_raw
            .iter()
            .filter_map(|raw| {
                parse_structured_caption(&raw.text, &setup.lexicon)
                    .ok()
                    .map(|caption| (raw.endpoint_id.clone(), caption))
            })
            .collect();
        if captions.is_empty() {
            failed += 1;
            summary.notes.push(format!(
                "tile `{}`: no usable stage-1 replies",
                record.tile_id
            ));
            continue;
        }
        match fuse_consensus(&captions, &setup.config.fusion) {
            Ok(mut fused) => {
                fused.narrative = render_template_narrative(&fused);
                let line = FusedLine {
                    tile_id: &record.tile_id,
                    fused: &fused,
                };
                lines.push_str(&serde_json::to_string(&line).expect("fused serializes"));
                lines.push('\n');
                fused_count += 1;
            }
            Err(err) => {
                failed += 1;
                summary
                    .notes
                    .push(format!("tile `{}`: {err}", record.tile_id));
            }
        }
    }
    write_output_file(&out, &lines)?;

    summary.counts.insert("records", records.len() as u64);
    summary.counts.insert("fused", fused_count);
    summary.counts.insert("failed", failed);
    summary.config_hash = Some(setup.config_hash.clone());
    summary.output_paths.push(out.display().to_string());
    Ok(0)
}

async fn cmd_refine(
    config: &Option<PathBuf>,
    dataset_dir: PathBuf,
    manifest: PathBuf,
    out: PathBuf,
    summary: &mut RunSummary,
) -> Result<i32, CmdError> {
    let setup = load_setup(config)?;
    let expert = setup
        .config
        .expert
        .as_ref()
        .ok_or_else(|| CmdError::Usage("config has no [expert] endpoint".into()))?;
    let records = pipeline::load_dataset_records(&dataset_dir).map_err(usage)?;
    let tiles = pipeline::load_tile_manifest(&manifest).map_err(usage)?;
    let tiles_by_id: BTreeMap<&str, &ImageTile> =
        tiles.iter().map(|tile| (tile.tile_id.as_str(), tile)).collect();
    let client = ChatClient::new();

    enum Outcome {
        Refined,
        MissingTile,
        Failed(String),
    }

    let setup_ref = &setup;
    let client_ref = &client;
    let tiles_ref = &tiles_by_id;
    let jobs = records.into_iter().map(|mut record| async move {
        let Some(tile) = tiles_ref.get(record.tile_id.as_str()) else {
            return (record, Outcome::MissingTile);
        };
        let bytes = match pipeline::fetch_uri_bytes(client_ref, &tile.uri).await {
            Ok(bytes) => bytes,
            Err(err) => return (record, Outcome::Failed(err)),
        };
        match refine_expert(
            &bytes,
            &tile.media_type,
            &record.fused,
            expert,
            client_ref,
            &setup_ref.lexicon,
            &setup_ref.prompts.expert,
        )
        .await
        {
            Ok(final_description) => {
                record.final_description = final_description;
                (record, Outcome::Refined)
            }
            Err(err) => (record, Outcome::Failed(err.to_string())),
        }
    });
    let results: Vec<(DatasetRecord, Outcome)> = futures::stream::iter(jobs)
        .buffered(expert.max_in_flight.max(1))
        .collect()
        .await;

    let mut refined = 0u64;
    let mut failed = 0u64;
    let mut updated = Vec::with_capacity(results.len());
    for (record, outcome) in results {
        match outcome {
            Outcome::Refined => refined += 1,
            Outcome::MissingTile => {
                failed += 1;
                summary.notes.push(format!(
                    "tile `{}` not in manifest; record kept unrefined",
                    record.tile_id
                ));
            }
            Outcome::Failed(err) => {
                failed += 1;
                summary
                    .notes
                    .push(format!("tile `{}`: {err}; record kept unrefined", record.tile_id));
            }
        }
        updated.push(record);
    }

    let manifest_out = pipeline::write_shards(updated.iter(), setup.config.shard_size, &out)?;
    summary.counts.insert("records", updated.len() as u64);
    summary.counts.insert("refined", refined);
    summary.counts.insert("failed", failed);
    summary.config_hash = Some(setup.config_hash.clone());
    for shard in &manifest_out.shards {
        summary
            .output_paths
            .push(out.join(&shard.file).display().to_string());
    }
    Ok(0)
}

fn cmd_reformat(
    dataset_dir: PathBuf,
    templates: Option<PathBuf>,
    seed: u64,
    out: PathBuf,
    summary: &mut RunSummary,
) -> Result<i32, CmdError> {
    let records = pipeline::load_dataset_records(&dataset_dir).map_err(usage)?;
    let templates = match &templates {
        Some(path) => transforms::load_templates(path)?,
        None => transforms::default_templates(),
    };
    let (samples, reformat) = transforms::reformat_instructions(&records, &templates, seed)?;
    write_output_file(&out, &transforms::samples_to_jsonl(&samples))?;

    summary.counts.insert("records", records.len() as u64);
    summary.counts.insert("samples", reformat.samples_emitted);
    summary.counts.insert("skipped", reformat.records_skipped);
    summary
        .counts
        .insert("warnings", reformat.warnings.len() as u64);
    summary.notes.extend(reformat.warnings);
    summary.output_paths.push(out.display().to_string());
    Ok(0)
}

async fn cmd_replay(
    config: &Option<PathBuf>,
    domain: Option<PathBuf>,
    general: Option<PathBuf>,
    weights: Option<String>,
    seed: u64,
    out: PathBuf,
    summary: &mut RunSummary,
) -> Result<i32, CmdError> {
    if domain.is_none() && general.is_none() {
        return Err(CmdError::Usage(
            "pass at least one of --domain or --general".into(),
        ));
    }
    let setup = load_setup(config)?;
    let generator = setup
        .config
        .generator
        .as_ref()
        .ok_or_else(|| CmdError::Usage("config has no [generator] endpoint".into()))?;
    let client = ChatClient::new();

    let mut streams: Vec<Vec<InstructionSample>> = Vec::new();
    if let Some(dir) = &domain {
        let records = pipeline::load_dataset_records(dir).map_err(usage)?;
        let (samples, stats) = transforms::generate_replay(
            ReplaySource::Domain(&records),
            generator,
            &client,
            &setup.prompts.domain_generator,
            &setup.prompts.general_generator,
        )
        .await?;
        summary.counts.insert("domain_items", stats.items_processed);
        summary.counts.insert("domain_skipped", stats.items_skipped);
        streams.push(samples);
    }
    if let Some(path) = &general {
        let tiles = pipeline::load_tile_manifest(path).map_err(usage)?;
        let (samples, stats) = transforms::generate_replay(
            ReplaySource::General(&tiles),
            generator,
            &client,
            &setup.prompts.domain_generator,
            &setup.prompts.general_generator,
        )
        .await?;
        summary.counts.insert("general_items", stats.items_processed);
        summary.counts.insert("general_skipped", stats.items_skipped);
        streams.push(samples);
    }

    let weights: Vec<f64> = match &weights {
        None => vec![1.0; streams.len()],
        Some(raw) => {
            let parsed: Result<Vec<f64>, _> =
                raw.split(',').map(|w| w.trim().parse::<f64>()).collect();
            let parsed = parsed
                .map_err(|err| CmdError::Usage(format!("bad --weights `{raw}`: {err}")))?;
            if parsed.len() != streams.len() {
                return Err(CmdError::Usage(format!(
                    "--weights lists {} values but {} stream(s) are present",
                    parsed.len(),
                    streams.len()
                )));
            }
            parsed
        }
    };
    if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(CmdError::Usage(
            "--weights must be non-negative and sum to more than zero".into(),
        ));
    }

    let mixed = if streams.iter().all(|s| s.is_empty()) {
        summary
            .notes
            .push("all replay streams came back empty; wrote an empty sample file".into());
        Vec::new()
    } else {
        transforms::mix_replay(streams.into_iter().zip(weights).collect(), seed)?
    };
    write_output_file(&out, &transforms::samples_to_jsonl(&mixed))?;

    summary.counts.insert("samples", mixed.len() as u64);
    summary.config_hash = Some(setup.config_hash.clone());
    summary.output_paths.push(out.display().to_string());
    Ok(0)
}

async fn cmd_eval(
    config: &Option<PathBuf>,
    bench_kind: BenchArg,
    manifest: PathBuf,
    out: Option<PathBuf>,
    format: Format,
    summary: &mut RunSummary,
) -> Result<i32, CmdError> {
    let setup = load_setup(config)?;
    let model = setup
        .config
        .model
        .as_ref()
        .ok_or_else(|| CmdError::Usage("config has no [model] endpoint".into()))?;
    let client = ChatClient::new();

    let report = match bench_kind {
        BenchArg::Morpho => {
            let items = bench::load_morpho_items(&manifest)?;
            bench::evaluate_morpho(
                &items,
                model,
                &client,
                &setup.prompts.bench_morpho,
                &setup.lexicon,
            )
            .await?
        }
        BenchArg::Tbs => {
            let items = bench::load_tbs_items(&manifest)?;
            bench::evaluate_tbs(&items, model, &client, &setup.prompts.bench_tbs).await?
        }
    };

    let report_format = match format {
        Format::Text => ReportFormat::Table,
        Format::Json => ReportFormat::Json,
    };
    print!("{}", bench::render_report(&report, report_format));
    println!();
    if let Some(path) = &out {
        write_output_file(path, &bench::render_report(&report, ReportFormat::Json))?;
        summary.output_paths.push(path.display().to_string());
    }

    summary.counts.insert("items", report.n_items);
    summary.counts.insert("unparseable", report.n_unparseable);
    summary
        .metrics
        .insert("macro_average".into(), report.macro_average);
    for (code, score) in &report.per_group {
        summary
            .metrics
            .insert(format!("accuracy.{code}"), score.accuracy());
    }
    summary.config_hash = Some(report.run_config_hash.clone());
    Ok(0)
}

fn cmd_agreement(
    manifest: PathBuf,
    raters: &[PathBuf],
    format: Format,
    summary: &mut RunSummary,
) -> Result<i32, CmdError> {
    let items = bench::load_morpho_items(&manifest)?;
    let mut annotations = Vec::new();
    for path in raters {
        annotations.push(bench::load_rater_file(path)?);
    }
    let report = bench::inter_rater_agreement(&annotations, &items)?;

    let report_format = match format {
        Format::Text => ReportFormat::Table,
        Format::Json => ReportFormat::Json,
    };
    print!("{}", bench::render_agreement(&report, report_format));
    println!();

    summary.counts.insert("raters", report.n_raters);
    summary.counts.insert("pairs", report.n_pairs);
    summary.metrics.insert("average".into(), report.average);
    for (code, pct) in &report.per_dimension {
        summary.metrics.insert(format!("agreement.{code}"), *pct);
    }
    Ok(0)
}

fn cmd_simulate(
    trial_config: &Path,
    format: Format,
    summary: &mut RunSummary,
) -> Result<i32, CmdError> {
    let config = TrialConfig::load(trial_config)?;
    let lexicon = crate::schema::Lexicon::default();
    let result = run_fusion_trial(
        config.cases,
        &config.profiles,
        &config.policy,
        config.seed,
        &lexicon,
    );

    match format {
        Format::Json => {
            println!(
                "{}",
                serde_json::to_string_pretty(&result).expect("trial result serializes")
            );
        }
        Format::Text => {
            println!(
                "Fusion trial: {} cases, {} annotators, seed {}",
                result.n_cases,
                result.per_annotator.len(),
                config.seed
            );
            for (dimension, accuracy) in &result.fused_per_dimension {
                println!("  fused {}: {accuracy:.4}", dimension.code());
            }
            println!("  fused overall: {:.4}", result.fused_overall);
            for annotator in &result.per_annotator {
                println!(
                    "  annotator {}: {:.4} over {} assertions",
                    annotator.profile_id, annotator.accuracy, annotator.assertions
                );
            }
        }
    }

    summary.counts.insert("cases", result.n_cases);
    summary
        .metrics
        .insert("fused_overall".into(), result.fused_overall);
    if let Some(accuracy) = config.uniform_accuracy() {
        let oracle =
            fused_accuracy_oracle(config.profiles.len() as u32, accuracy, &config.policy);
        if format == Format::Text {
            println!(
                "  closed-form expectation (i.i.d. p={accuracy}): {oracle:.4}"
            );
        }
        summary.metrics.insert("oracle_expectation".into(), oracle);
    }
    Ok(0)
}
