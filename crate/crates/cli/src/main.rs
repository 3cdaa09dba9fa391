//! `curda` command-line front end.
//!
//! Every verb works on a run directory (`--out`) holding the configuration
//! snapshot, checkpoints, metrics streams, and `result.json`. Configuration
//! fields can be overridden with `--set section.key=value` or with
//! `CURDA_SECTION__KEY=value` environment variables.
//!
//! Exit codes: 0 success, 2 usage error, 3 invalid configuration, 4 runtime
//! failure. Failures print one JSON line `{"error": {"kind", "message"}}` on
//! stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use curda::config::ExperimentConfig;
use curda::data::{stack_pixels, Domain, Sample};
use curda::evaluation::{
    export_embeddings, render_tables, select_per_class, EmbeddingLayer, EmbeddingSet, ResultRecord,
};
use curda::metrics::MetricsSink;
use curda::models::{Checkpoint, Encoder};
use curda::trainer::{
    adapt_target, build_record, load_source_models, run_experiment, run_sweep, source_stage, AdaptState,
    ExperimentData, RunModels, SourceCache, SourceState, StageIo, ADAPT_STATE_FILE, RESULT_FILE, SOURCE_STATE_FILE,
    TARGET_ENCODER_FILE,
};
use curda::Error;

const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "curda", version, about = "Robust unsupervised domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Robust source training.
    Train(RunArgs),
    /// Target adaptation from the source models in the run directory.
    Adapt(RunArgs),
    /// Evaluate the run directory's checkpoints and write result.json.
    Evaluate(RunArgs),
    /// Train, adapt when the method calls for it, and evaluate.
    Run(RunArgs),
    /// Run every arm and seed of the [sweep] section, one child directory each.
    Sweep(RunArgs),
    /// Dump clean and adversarial embeddings of selected classes as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        run: RunArgs,
        /// `encoder` or `penultimate`.
        #[arg(long, default_value = "encoder")]
        layer: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment TOML. Defaults to the snapshot in the run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = if matches!(error, Error::Config(_)) { 3 } else { 4 };
        Self { code, error }
    }
}

fn config_failure(error: Error) -> Failure {
    Failure { code: 3, error }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({
                "error": { "kind": f.error.kind(), "message": f.error.to_string() }
            });
            eprintln!("{line}");
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train(a) => train(&a),
        Command::Adapt(a) => adapt(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Run(a) => run(&a),
        Command::Sweep(a) => sweep(&a),
        Command::ExportEmbeddings { run, layer } => export(&run, &layer),
    }
}

/// Loads the configuration and binds it to the run directory. A directory
/// that already holds a snapshot only accepts the identical configuration.
fn prepare(a: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let snapshot = a.out.join(SNAPSHOT_FILE);
    let source = match &a.config {
        Some(p) => p.clone(),
        None if snapshot.exists() => snapshot.clone(),
        None => {
            return Err(config_failure(Error::Config(format!(
                "no --config given and {} has no {SNAPSHOT_FILE}",
                a.out.display()
            ))))
        }
    };
    let mut overrides = a.set.clone();
    if let Some(seed) = a.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = ExperimentConfig::load(&source, &overrides).map_err(config_failure)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    if snapshot.exists() {
        let text = fs::read_to_string(&snapshot).map_err(|e| Error::Io {
            path: snapshot.clone(),
            source: e,
        })?;
        let existing = ExperimentConfig::from_toml_str(&text).map_err(config_failure)?;
        if existing.fingerprint() != cfg.fingerprint() {
            return Err(config_failure(Error::Config(format!(
                "{} already holds configuration {}; this one is {}",
                a.out.display(),
                existing.fingerprint(),
                cfg.fingerprint()
            ))));
        }
    } else {
        fs::write(&snapshot, cfg.to_toml_string()?).map_err(|e| Error::Io {
            path: snapshot.clone(),
            source: e,
        })?;
    }
    Ok(cfg)
}

fn metrics_sink(dir: &Path, verb: &str) -> Result<MetricsSink, Failure> {
    Ok(MetricsSink::to_file(&dir.join(format!("metrics-{verb}.jsonl")))?)
}

fn train(a: &RunArgs) -> Result<(), Failure> {
    let cfg = prepare(a)?;
    let data = ExperimentData::load(&cfg.data)?;
    let mut metrics = metrics_sink(&a.out, "train")?;
    source_stage(&cfg, &data, Some(&a.out), &mut metrics, &mut SourceCache::new())?;
    Ok(())
}

fn adapt(a: &RunArgs) -> Result<(), Failure> {
    let cfg = prepare(a)?;
    if !cfg.method.adapts() {
        return Err(config_failure(Error::Config(format!(
            "method {} has no adaptation stage",
            cfg.method.as_str()
        ))));
    }
    let data = ExperimentData::load(&cfg.data)?;
    let source = load_source_models(&a.out)?;
    let mut metrics = metrics_sink(&a.out, "adapt")?;
    let mut io = StageIo {
        dir: Some(&a.out),
        metrics: &mut metrics,
    };
    adapt_target(
        &cfg,
        &data.pair,
        &source,
        data.target_train_truth.as_ref(),
        &mut io,
        &mut |_| {},
    )?;
    Ok(())
}

fn load_run_models(cfg: &ExperimentConfig, dir: &Path) -> Result<RunModels, Failure> {
    let source = load_source_models(dir)?;
    let target_encoder = if cfg.method.adapts() {
        Some(Checkpoint::<Encoder<f32>>::load(&dir.join(TARGET_ENCODER_FILE))?.model)
    } else {
        None
    };
    Ok(RunModels { source, target_encoder })
}

fn read_state<S: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<S>, Failure> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())).into())
}

fn evaluate(a: &RunArgs) -> Result<(), Failure> {
    let cfg = prepare(a)?;
    let data = ExperimentData::load(&cfg.data)?;
    let models = load_run_models(&cfg, &a.out)?;
    let source_state: Option<SourceState> = read_state(&a.out.join(SOURCE_STATE_FILE))?;
    let adapt_state: Option<AdaptState> = if cfg.method.adapts() {
        read_state(&a.out.join(ADAPT_STATE_FILE))?
    } else {
        None
    };
    // Keep the training time of an earlier record for these checkpoints.
    let previous = ResultRecord::load(&a.out.join(RESULT_FILE))
        .ok()
        .filter(|r| r.complete && r.fingerprint == cfg.fingerprint());
    let wall = match previous {
        Some(r) => r.wall_clock_secs,
        None => {
            source_state.map_or(0.0, |s| s.wall_clock_secs) + adapt_state.as_ref().map_or(0.0, |s| s.wall_clock_secs)
        }
    };
    let history = adapt_state.map(|s| s.pseudo_history).unwrap_or_default();
    let record = build_record(&cfg, &data, &models, history, wall)?;
    record.save(&a.out.join(RESULT_FILE))?;
    print_record(&record);
    Ok(())
}

fn run(a: &RunArgs) -> Result<(), Failure> {
    let cfg = prepare(a)?;
    let data = ExperimentData::load(&cfg.data)?;
    let mut metrics = metrics_sink(&a.out, "run")?;
    let (record, _) = run_experiment(&cfg, &data, Some(&a.out), &mut metrics, &mut SourceCache::new())?;
    print_record(&record);
    Ok(())
}

fn print_record(r: &ResultRecord) {
    println!(
        "{}",
        serde_json::json!({
            "tag": r.tag, "seed": r.seed, "clean_acc": r.clean_acc, "adv_rob": r.adv_rob,
            "fingerprint": r.fingerprint,
        })
    );
}

fn sweep(a: &RunArgs) -> Result<(), Failure> {
    let cfg = prepare(a)?;
    if cfg.sweep.is_none() {
        return Err(config_failure(Error::Config(
            "configuration has no [sweep] section".into(),
        )));
    }
    let data = ExperimentData::load(&cfg.data)?;
    let records = run_sweep(&cfg, &data, Some(&a.out))?;
    let tables = render_tables(&records);
    let write = |name: &str, text: &str| {
        let p = a.out.join(name);
        fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })
    };
    write("table.txt", &tables.text)?;
    write("table.csv", &tables.csv)?;
    let mut csv = String::from("tag,seed,clean_acc,adv_rob,fingerprint\n");
    for r in &records {
        csv.push_str(&format!(
            "\"{}\",{},{},{},{}\n",
            r.tag, r.seed, r.clean_acc, r.adv_rob, r.fingerprint
        ));
    }
    write("results.csv", &csv)?;
    print!("{}", tables.text);
    Ok(())
}

fn labeled(
    samples: &[Sample],
    labels: &[usize],
    classes: &[usize],
    per_class: usize,
) -> (ndarray::Array4<f32>, Vec<usize>) {
    let idx = select_per_class(labels, classes, per_class);
    let pixels = stack_pixels(idx.iter().map(|&i| &samples[i]));
    (pixels, idx.iter().map(|&i| labels[i]).collect())
}

fn export(a: &RunArgs, layer: &str) -> Result<(), Failure> {
    let layer: EmbeddingLayer = layer.parse().map_err(config_failure)?;
    let cfg = prepare(a)?;
    let data = ExperimentData::load(&cfg.data)?;
    let models = load_run_models(&cfg, &a.out)?;
    let (classes, per) = (&cfg.eval.embedding_classes, cfg.eval.embedding_per_class);
    let source_samples = data.source_test.as_deref().unwrap_or(&data.pair.source_set);
    let source_labels: Vec<usize> = source_samples.iter().map(|s| s.label.unwrap_or(usize::MAX)).collect();
    let (sp, sl) = labeled(source_samples, &source_labels, classes, per);
    let (tp, tl) = labeled(&data.target_test, data.target_test_truth.for_evaluation(), classes, per);
    let sets = [
        EmbeddingSet {
            domain: Domain::Source,
            encoder: &models.source.encoder,
            pixels: sp,
            labels: sl,
        },
        EmbeddingSet {
            domain: Domain::Target,
            encoder: models.deployed_encoder(),
            pixels: tp,
            labels: tl,
        },
    ];
    let dump = export_embeddings(
        &sets,
        &models.source.classifier,
        layer,
        &cfg.attack.eval,
        curda::rng::derive_seed(cfg.seed, "embeddings", 0),
    )?;
    let path = a.out.join(format!("embeddings-{}.csv", layer.as_str()));
    dump.write_csv(&path)?;
    println!(
        "{}",
        serde_json::json!({
            "path": path.display().to_string(),
            "rows": dump.rows.len(),
            "centroid_alignment": dump.centroid_alignment(),
            "fingerprint": cfg.fingerprint(),
        })
    );
    Ok(())
}
