//! Command-line frontend for the evidence pipeline.
//!
//! Exit codes: 0 success, 1 partial failure (quarantined samples or failed
//! pairs), 2 configuration error.

mod config;
mod runs;

use clap::{Args, Parser, Subcommand};
use config::{build_setup, FileConfig, Overrides, Setup};
use ooc_engine::data::{load_dataset, Dataset};
use ooc_engine::detector::ParseStatus;
use ooc_engine::error::ConfigError;
use ooc_engine::eval::{
    default_ablation_rows, distance_report, percent_1dp, run_ablation, score, score_outcomes,
    sweep_topk, write_ablation_csv, write_distance_csv, write_sweep_csv, AblationFlags,
    MetricsReport,
};
use ooc_engine::instruct::{
    build_dataset as build_instruction_dataset, emit_training_config, write_instruction_jsonl,
    TrainingConfig, VerifyConfig,
};
use ooc_engine::pipeline::{load_run_records, write_run_records, PairOutcome};
use ooc_engine::rerank::Strategy;
use runs::RunDir;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ooc",
    version,
    about = "Evidence pipeline for out-of-context image-text detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Configuration file (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset JSONL path.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evidence cache directory override.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Mock script (JSON); activates the in-process mock backend.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker pool size override.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Selection strategy: llm, cosine, or random.
    #[arg(long, global = true)]
    strategy: Option<String>,
    /// Evidence items passed downstream (1..=3).
    #[arg(long, global = true)]
    top_k: Option<usize>,
    /// Selection parse retries.
    #[arg(long, global = true)]
    max_retries: Option<u32>,
    /// Chat backend base URL override.
    #[arg(long, global = true)]
    backend_url: Option<String>,
    /// Embedding backend base URL override.
    #[arg(long, global = true)]
    embed_url: Option<String>,
    /// Environment variable holding the chat API key.
    #[arg(long, global = true)]
    api_key_env: Option<String>,

    /// Enable evidence retrieval.
    #[arg(long, conflicts_with = "no_er", global = true)]
    er: bool,
    #[arg(long, conflicts_with = "er", global = true, hide = true)]
    no_er: bool,
    /// Enable evidence selection.
    #[arg(long, conflicts_with = "no_aesp", global = true)]
    aesp: bool,
    #[arg(long, conflicts_with = "aesp", global = true, hide = true)]
    no_aesp: bool,
    /// Enable evidence rewriting.
    #[arg(long, conflicts_with = "no_aegp", global = true)]
    aegp: bool,
    #[arg(long, conflicts_with = "aegp", global = true, hide = true)]
    no_aegp: bool,
    /// Ask the judge for a rationale on negative verdicts.
    #[arg(long, conflicts_with = "no_re", global = true)]
    re: bool,
    #[arg(long, conflicts_with = "re", global = true, hide = true)]
    no_re: bool,
}

impl CommonArgs {
    fn overrides(&self) -> Result<Overrides, ConfigError> {
        let strategy = match &self.strategy {
            Some(s) => Some(
                s.parse::<Strategy>()
                    .map_err(|e| ConfigError::new("strategy", e))?,
            ),
            None => None,
        };
        let toggle = |on: bool, off: bool| {
            if on {
                Some(true)
            } else if off {
                Some(false)
            } else {
                None
            }
        };
        Ok(Overrides {
            seed: self.seed,
            workers: self.workers,
            strategy,
            top_k: self.top_k,
            max_parse_retries: self.max_retries,
            er: toggle(self.er, self.no_er),
            aesp: toggle(self.aesp, self.no_aesp),
            aegp: toggle(self.aegp, self.no_aegp),
            re: toggle(self.re, self.no_re),
            backend_url: self.backend_url.clone(),
            embed_url: self.embed_url.clone(),
            api_key_env: self.api_key_env.clone(),
            mock_script: self.mock_script.clone(),
            out: self.out.clone(),
            cache_dir: self.cache_dir.clone(),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Retrieve and cache evidence for every pair in the dataset.
    Retrieve {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run detection over the dataset and write run records (+ metrics when
    /// ground truth is present).
    Detect {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Build the verified instruction dataset and emit the training config.
    BuildDataset {
        #[command(flatten)]
        common: CommonArgs,
        /// LoRA rank recorded in the emitted training config.
        #[arg(long)]
        lora_rank: Option<u32>,
        /// Epoch count recorded in the emitted training config.
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// Score an existing run-record file against dataset ground truth.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Run-record JSONL produced by `detect`.
        #[arg(long)]
        records: PathBuf,
    },
    /// Run the stage-flag ablation matrix.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// "default" for the standard seven rows, or a JSON file of rows.
        #[arg(long, default_value = "default")]
        rows: String,
    },
    /// Run the strategy x top-k sweep.
    SweepTopk {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated strategies.
        #[arg(long, default_value = "llm,cosine,random")]
        strategies: String,
        /// Comma-separated k values.
        #[arg(long, default_value = "1,2,3")]
        ks: String,
    },
    /// Report embedding distances between pairs and their cached evidence.
    DistanceReport {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_setup(common: &CommonArgs) -> Result<Setup, ConfigError> {
    let cfg = match &common.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    build_setup(cfg, &common.overrides()?)
}

fn require_dataset(common: &CommonArgs) -> Result<(PathBuf, Dataset), ConfigError> {
    let path = common
        .dataset
        .clone()
        .ok_or_else(|| ConfigError::new("dataset", "--dataset is required"))?;
    let load = load_dataset(&path).map_err(|e| ConfigError::new("dataset", e.to_string()))?;
    for issue in &load.issues {
        log::warn!("dataset issue: {issue:?}");
    }
    Ok((path, load.dataset))
}

fn print_metrics(metrics: &MetricsReport) {
    println!(
        "n={} acc_all={} acc_falsified={} acc_pristine={} parse_failed={}",
        metrics.n_total,
        percent_1dp(metrics.acc_all()),
        percent_1dp(metrics.acc_falsified()),
        percent_1dp(metrics.acc_pristine()),
        metrics.n_parse_failed
    );
}

fn write_metrics_csv(path: &Path, metrics: &MetricsReport) -> std::io::Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_to_io)?;
    writer
        .write_record([
            "n_total",
            "acc_all",
            "acc_falsified",
            "acc_pristine",
            "n_parse_failed",
        ])
        .map_err(csv_to_io)?;
    writer
        .write_record([
            metrics.n_total.to_string(),
            percent_1dp(metrics.acc_all()),
            percent_1dp(metrics.acc_falsified()),
            percent_1dp(metrics.acc_pristine()),
            metrics.n_parse_failed.to_string(),
        ])
        .map_err(csv_to_io)?;
    writer.flush()
}

fn csv_to_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

fn outcome_failures(outcomes: &[PairOutcome]) -> usize {
    outcomes.iter().filter(|o| o.error.is_some()).count()
}

fn io_err<T>(r: std::io::Result<T>) -> Result<T, ConfigError> {
    r.map_err(|e| ConfigError::new("io", e.to_string()))
}

fn run(cli: Cli) -> Result<ExitCode, ConfigError> {
    match cli.command {
        Command::Retrieve { common } => {
            let setup = load_setup(&common)?;
            let (dataset_path, dataset) = require_dataset(&common)?;
            let run_dir = io_err(RunDir::create(&setup.output_dir))?;
            io_err(run_dir.write_manifest(
                "retrieve",
                &setup.cfg,
                &setup.pipeline,
                Some(&dataset_path),
            ))?;
            cmd_retrieve(&setup, &dataset, &run_dir)
        }
        Command::Detect { common } => {
            let setup = load_setup(&common)?;
            let (dataset_path, dataset) = require_dataset(&common)?;
            let run_dir = io_err(RunDir::create(&setup.output_dir))?;
            io_err(run_dir.write_manifest(
                "detect",
                &setup.cfg,
                &setup.pipeline,
                Some(&dataset_path),
            ))?;
            cmd_detect(&setup, &dataset, &run_dir)
        }
        Command::BuildDataset {
            common,
            lora_rank,
            epochs,
        } => {
            let setup = load_setup(&common)?;
            let (dataset_path, dataset) = require_dataset(&common)?;
            let run_dir = io_err(RunDir::create(&setup.output_dir))?;
            io_err(run_dir.write_manifest(
                "build-dataset",
                &setup.cfg,
                &setup.pipeline,
                Some(&dataset_path),
            ))?;
            cmd_build_dataset(&setup, &dataset, &run_dir, lora_rank, epochs)
        }
        Command::Eval { common, records } => {
            let setup = load_setup(&common)?;
            let (dataset_path, dataset) = require_dataset(&common)?;
            let run_dir = io_err(RunDir::create(&setup.output_dir))?;
            io_err(run_dir.write_manifest(
                "eval",
                &setup.cfg,
                &setup.pipeline,
                Some(&dataset_path),
            ))?;
            cmd_eval(&dataset, &records, &run_dir)
        }
        Command::Ablate { common, rows } => {
            let setup = load_setup(&common)?;
            let (dataset_path, dataset) = require_dataset(&common)?;
            let rows = parse_rows(&rows)?;
            let run_dir = io_err(RunDir::create(&setup.output_dir))?;
            io_err(run_dir.write_manifest(
                "ablate",
                &setup.cfg,
                &setup.pipeline,
                Some(&dataset_path),
            ))?;
            cmd_ablate(&setup, &dataset, &rows, &run_dir)
        }
        Command::SweepTopk {
            common,
            strategies,
            ks,
        } => {
            let setup = load_setup(&common)?;
            let (dataset_path, dataset) = require_dataset(&common)?;
            let strategies = parse_strategies(&strategies)?;
            let ks = parse_ks(&ks)?;
            let run_dir = io_err(RunDir::create(&setup.output_dir))?;
            io_err(run_dir.write_manifest(
                "sweep-topk",
                &setup.cfg,
                &setup.pipeline,
                Some(&dataset_path),
            ))?;
            cmd_sweep(&setup, &dataset, &strategies, &ks, &run_dir)
        }
        Command::DistanceReport { common } => {
            let setup = load_setup(&common)?;
            let (dataset_path, dataset) = require_dataset(&common)?;
            let run_dir = io_err(RunDir::create(&setup.output_dir))?;
            io_err(run_dir.write_manifest(
                "distance-report",
                &setup.cfg,
                &setup.pipeline,
                Some(&dataset_path),
            ))?;
            cmd_distance(&setup, &dataset, &run_dir)
        }
    }
}

fn parse_rows(spec: &str) -> Result<Vec<AblationFlags>, ConfigError> {
    if spec == "default" {
        return Ok(default_ablation_rows());
    }
    let raw = std::fs::read_to_string(spec)
        .map_err(|e| ConfigError::new("rows", format!("{spec}: {e}")))?;
    serde_json::from_str(&raw).map_err(|e| ConfigError::new("rows", e.to_string()))
}

fn parse_strategies(spec: &str) -> Result<Vec<Strategy>, ConfigError> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<Strategy>()
                .map_err(|e| ConfigError::new("strategies", e))
        })
        .collect()
}

fn parse_ks(spec: &str) -> Result<Vec<usize>, ConfigError> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| ConfigError::new("ks", e.to_string()))
        })
        .collect()
}

fn cmd_retrieve(
    setup: &Setup,
    dataset: &Dataset,
    run_dir: &RunDir,
) -> Result<ExitCode, ConfigError> {
    let mut cached = 0usize;
    let mut fetched = 0usize;
    let mut fallbacks = 0usize;
    let mut failures: Vec<(String, String)> = Vec::new();
    // sequential: per-host politeness dominates runtime anyway
    for pair in &dataset.pairs {
        match setup.pipeline.retrieve_for(pair) {
            Ok((set, trace)) => {
                if trace.cache_hit {
                    cached += 1;
                } else {
                    fetched += 1;
                }
                if set.fallback_description.is_some() {
                    fallbacks += 1;
                }
            }
            Err(e) => failures.push((pair.pair_id.clone(), e.to_string())),
        }
    }
    let summary = serde_json::json!({
        "pairs": dataset.len(),
        "cache_hits": cached,
        "fetched": fetched,
        "fallback_descriptions": fallbacks,
        "failures": failures,
    });
    io_err(std::fs::write(
        run_dir.path("retrieval_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    ))?;
    println!(
        "retrieved evidence for {} pairs ({} cached, {} fetched, {} fallbacks, {} failures) -> {}",
        dataset.len(),
        cached,
        fetched,
        fallbacks,
        failures.len(),
        run_dir.dir.display()
    );
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_detect(setup: &Setup, dataset: &Dataset, run_dir: &RunDir) -> Result<ExitCode, ConfigError> {
    let outcomes = setup.pipeline.run_dataset(dataset);
    io_err(write_run_records(
        &run_dir.path("run_records.jsonl"),
        &outcomes,
    ))?;
    let failures = outcome_failures(&outcomes);
    if outcomes.iter().any(|o| o.truth.is_some()) {
        let metrics =
            score_outcomes(&outcomes).map_err(|e| ConfigError::new("score", e.to_string()))?;
        io_err(write_metrics_csv(&run_dir.path("metrics.csv"), &metrics))?;
        print_metrics(&metrics);
    }
    println!(
        "detected {} pairs ({} stage failures) -> {}",
        outcomes.len(),
        failures,
        run_dir.dir.display()
    );
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_build_dataset(
    setup: &Setup,
    dataset: &Dataset,
    run_dir: &RunDir,
    lora_rank: Option<u32>,
    epochs: Option<u32>,
) -> Result<ExitCode, ConfigError> {
    let verify = VerifyConfig {
        max_retries: setup.verify.max_retries,
        temperature: setup.verify.temperature,
    };
    let (samples, report) = build_instruction_dataset(dataset, &setup.pipeline, &verify);
    let dataset_path = run_dir.path("instruction_dataset.jsonl");
    write_instruction_jsonl(&dataset_path, &samples)
        .map_err(|e| ConfigError::new("instruction_dataset", e.to_string()))?;
    io_err(std::fs::write(
        run_dir.path("build_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    ))?;

    let mut training = TrainingConfig::defaults(dataset_path.display().to_string());
    if let Some(rank) = lora_rank {
        training.lora_rank = rank;
    }
    if let Some(epochs) = epochs {
        training.epochs = epochs;
    }
    emit_training_config(&run_dir.path("training_config.json"), &training)
        .map_err(|e| ConfigError::new("training_config", e.to_string()))?;

    println!(
        "built {} verified samples ({} pristine / {} falsified), {} quarantined, {} errors -> {}",
        samples.len(),
        report.n_output_pristine,
        report.n_output_falsified,
        report.quarantined.len(),
        report.errors.len(),
        run_dir.dir.display()
    );
    Ok(
        if report.quarantined.is_empty() && report.errors.is_empty() {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(1)
        },
    )
}

fn cmd_eval(dataset: &Dataset, records: &Path, run_dir: &RunDir) -> Result<ExitCode, ConfigError> {
    let records =
        load_run_records(records).map_err(|e| ConfigError::new("records", e.to_string()))?;
    let mut judged = Vec::new();
    for record in &records {
        let Some(pair) = dataset.get(&record.pair_id) else {
            log::warn!("record {} has no dataset pair; skipped", record.pair_id);
            continue;
        };
        let Some(truth) = pair.truth else { continue };
        let judgment = ooc_engine::detector::Judgment {
            verdict: record.verdict,
            rationale: record.rationale.clone(),
            raw_output: String::new(),
            parse_status: record.parse_status,
        };
        judged.push((truth, judgment));
    }
    let metrics = score(&judged).map_err(|e| ConfigError::new("score", e.to_string()))?;
    io_err(write_metrics_csv(&run_dir.path("metrics.csv"), &metrics))?;
    print_metrics(&metrics);
    let n_failed = records
        .iter()
        .filter(|r| r.parse_status == ParseStatus::Failed)
        .count();
    Ok(if n_failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_ablate(
    setup: &Setup,
    dataset: &Dataset,
    rows: &[AblationFlags],
    run_dir: &RunDir,
) -> Result<ExitCode, ConfigError> {
    let results = run_ablation(dataset, rows, &setup.pipeline);
    write_ablation_csv(&run_dir.path("ablation.csv"), &results)
        .map_err(|e| ConfigError::new("ablation", e.to_string()))?;
    let mut failures = 0usize;
    for (i, row) in results.iter().enumerate() {
        io_err(write_run_records(
            &run_dir.path(&format!("row_{i}_records.jsonl")),
            &row.outcomes,
        ))?;
        failures += outcome_failures(&row.outcomes);
        if let Some(err) = &row.error {
            failures += 1;
            log::error!("ablation row {i} failed: {err}");
        }
    }
    println!(
        "ablation over {} rows x {} pairs -> {}",
        results.len(),
        dataset.len(),
        run_dir.dir.display()
    );
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_sweep(
    setup: &Setup,
    dataset: &Dataset,
    strategies: &[Strategy],
    ks: &[usize],
    run_dir: &RunDir,
) -> Result<ExitCode, ConfigError> {
    let report = sweep_topk(dataset, strategies, ks, &setup.pipeline)
        .map_err(|e| ConfigError::new("sweep", e.to_string()))?;
    write_sweep_csv(&run_dir.path("sweep.csv"), &report)
        .map_err(|e| ConfigError::new("sweep", e.to_string()))?;
    let failures = report.cells.iter().filter(|c| c.error.is_some()).count();
    println!(
        "sweep over {} cells -> {}",
        report.cells.len(),
        run_dir.dir.display()
    );
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_distance(
    setup: &Setup,
    dataset: &Dataset,
    run_dir: &RunDir,
) -> Result<ExitCode, ConfigError> {
    let embed = setup
        .pipeline
        .embed_backend()
        .ok_or_else(|| ConfigError::new("embed", "distance report needs an embedding backend"))?;
    let cache = ooc_engine::retrieval::EvidenceCache::new(setup.cache_dir.clone())
        .map_err(|e| ConfigError::new("cache_dir", e.to_string()))?;
    let mut evidence = std::collections::HashMap::new();
    for pair in &dataset.pairs {
        match cache.get(&pair.pair_id) {
            Ok(Some(set)) => {
                evidence.insert(pair.pair_id.clone(), set);
            }
            Ok(None) => log::warn!("no cached evidence for {}", pair.pair_id),
            Err(e) => log::warn!("cache read failed for {}: {e}", pair.pair_id),
        }
    }
    let rows = distance_report(&dataset.pairs, &evidence, embed)
        .map_err(|e| ConfigError::new("distance", e.to_string()))?;
    write_distance_csv(&run_dir.path("distance.csv"), &rows)
        .map_err(|e| ConfigError::new("distance", e.to_string()))?;
    println!(
        "distance report: {} rows over {} pairs -> {}",
        rows.len(),
        dataset.len(),
        run_dir.dir.display()
    );
    Ok(ExitCode::SUCCESS)
}
