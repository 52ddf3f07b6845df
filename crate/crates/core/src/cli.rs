//! Command-line front end: dataset generation, training, evaluation, and the
//! property self-test, wired for reproducible runs.
//!
//! Every command resolves its parameters from explicit flags, then an
//! optional config file (flat `key=value` lines or a JSON object), then
//! defaults — and writes the fully-resolved set next to its outputs as
//! `run_config.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cnmp::{CnmpError, CnmpModel, HIDDEN_WIDTH};
use crate::context_ae::{train_ae, AeError, AeModel, AE_EPOCHS, AE_LEARNING_RATE};
use crate::dataset::{
    build_dataset, build_test_contexts, load_dataset, load_test_contexts, phase_stats,
    save_dataset, save_test_contexts, Phase, DEFAULT_DATASET_SEED, DEFAULT_TEST_SEED,
};
use crate::pipeline::{
    cnmp_param_count, curve_csv, monolithic_items, monolithic_width, run_trials,
    scene_image_corpus, train_monolithic, train_segmented, write_report, ContextMode,
    PipelineError, Policy, SegmentedModels, TrainingCurves, PARAM_MATCH_TOLERANCE_PCT,
    REFERENCE_LATENT, REFERENCE_MONOLITHIC, REFERENCE_SEGMENTED,
};
use crate::selftest;

/// Default number of demonstrations in a corpus.
pub const DEFAULT_DEMOS: usize = 200;
/// Default per-primitive update budget.
pub const DEFAULT_BUDGET: usize = 200_000;
/// Default training seed.
pub const DEFAULT_TRAIN_SEED: u64 = 0;

/// A command failure carrying the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys, or values → exit 1.
    Usage(String),
    /// Missing or inconsistent files and datasets → exit 2.
    Data(String),
    /// Numerical failure (divergence, failed property checks) → exit 3.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Training and evaluation failures split by their nature: a diverged
/// optimizer is a numeric failure, everything else a data problem.
fn pipeline_err(e: PipelineError) -> CliError {
    match &e {
        PipelineError::Cnmp(CnmpError::NonFiniteLoss { .. })
        | PipelineError::Ae(AeError::NonFiniteLoss { .. }) => CliError::Numeric(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

#[derive(Parser)]
#[command(
    name = "corridor-lfd",
    version,
    about = "Segmented movement-primitive learning on a corridor pushing task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the demonstration corpus and the stratified test contexts.
    GenData(GenDataArgs),
    /// Train movement primitives (and supporting models) on a dataset.
    Train(TrainArgs),
    /// Run the trial suite against trained checkpoints.
    Eval(EvalArgs),
    /// Run the numeric and simulator property suite.
    Selftest,
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of demonstrations to record.
    #[arg(long)]
    n: Option<usize>,
    /// Demonstration RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Test-context RNG seed.
    #[arg(long)]
    test_seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into an existing non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Config file (`key=value` lines or a JSON object); flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    /// Segmented primitives with ground-truth contexts.
    Pc,
    /// Scene autoencoder plus segmented primitives on its latents.
    Ae,
    /// Parameter-matched single-primitive baseline.
    Mono,
}

impl TrainMode {
    fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Pc => "pc",
            TrainMode::Ae => "ae",
            TrainMode::Mono => "mono",
        }
    }

    fn parse(s: &str) -> Option<TrainMode> {
        match s {
            "pc" => Some(TrainMode::Pc),
            "ae" => Some(TrainMode::Ae),
            "mono" => Some(TrainMode::Mono),
            _ => None,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// What to train: pc, ae, or mono.
    #[arg(long, value_enum)]
    mode: Option<TrainMode>,
    /// Adam updates per movement primitive.
    #[arg(long)]
    budget: Option<usize>,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and curves.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Autoencoder epochs (ae mode only; default matches the protocol).
    #[arg(long)]
    ae_epochs: Option<usize>,
    /// Config file (`key=value` lines or a JSON object); flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding the trained checkpoints.
    #[arg(long)]
    models: Option<PathBuf>,
    /// Dataset directory the models were trained on.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the report artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test-context CSV overriding the dataset's default suite.
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Maximum parallel trial workers.
    #[arg(long)]
    threads: Option<usize>,
    /// Config file (`key=value` lines or a JSON object); flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Config files
// ---------------------------------------------------------------------------

/// Values read from a config file. Keys are validated against the command's
/// known set so typos fail loudly instead of being ignored.
struct FileValues(BTreeMap<String, String>);

impl FileValues {
    fn load(path: Option<&Path>) -> Result<FileValues, CliError> {
        let Some(path) = path else {
            return Ok(FileValues(BTreeMap::new()));
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let bad = |reason: String| CliError::Usage(format!("config {}: {reason}", path.display()));
        let mut map = BTreeMap::new();
        if text.trim_start().starts_with('{') {
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            let object = value
                .as_object()
                .ok_or_else(|| bad("top level must be an object".into()))?;
            for (k, v) in object {
                let flat = match v {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Number(n) => n.to_string(),
                    serde_json::Value::Bool(b) => b.to_string(),
                    _ => return Err(bad(format!("key {k} must be a scalar"))),
                };
                map.insert(k.clone(), flat);
            }
        } else {
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("line {}: expected key=value", i + 1)))?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(FileValues(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                CliError::Usage(format!("config key {key}: cannot parse {raw:?}"))
            }),
        }
    }

    fn ensure_known(&self, allowed: &[&str]) -> Result<(), CliError> {
        for key in self.0.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("config key {key} is not recognized")));
            }
        }
        Ok(())
    }
}

/// Writes the fully-resolved parameters of a run next to its outputs.
fn write_run_config(
    out: &Path,
    command: &str,
    entries: &[(&str, String)],
) -> Result<(), CliError> {
    let mut text = format!("command={command}\n");
    for (k, v) in entries {
        let _ = writeln!(text, "{k}={v}");
    }
    fs::write(out.join("run_config.txt"), text).map_err(data_err)
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("{flag} is required (flag or config file)")))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let file = FileValues::load(args.config.as_deref())?;
    file.ensure_known(&["n", "seed", "test_seed", "out", "force"])?;
    let n = args.n.or(file.get("n")?).unwrap_or(DEFAULT_DEMOS);
    let seed = args.seed.or(file.get("seed")?).unwrap_or(DEFAULT_DATASET_SEED);
    let test_seed = args
        .test_seed
        .or(file.get("test_seed")?)
        .unwrap_or(DEFAULT_TEST_SEED);
    let out: PathBuf = require(args.out.or(file.get("out")?), "--out")?;
    let force = args.force || file.get("force")?.unwrap_or(false);

    if out.is_dir()
        && fs::read_dir(&out).map_err(data_err)?.next().is_some()
        && !force
    {
        return Err(CliError::Data(format!(
            "output directory {} is not empty (pass --force to write anyway)",
            out.display()
        )));
    }
    fs::create_dir_all(&out).map_err(data_err)?;

    let world = crate::sim::WorldConfig::default();
    let dataset = build_dataset(&world, n, seed).map_err(data_err)?;
    save_dataset(&dataset, &out).map_err(data_err)?;
    let contexts = build_test_contexts(&world, test_seed, &dataset.train_offsets());
    save_test_contexts(&out.join("test_contexts.csv"), &contexts).map_err(data_err)?;
    write_run_config(
        &out,
        "gen-data",
        &[
            ("n", n.to_string()),
            ("seed", seed.to_string()),
            ("test_seed", test_seed.to_string()),
            ("out", out.display().to_string()),
            ("force", force.to_string()),
        ],
    )?;

    let c = &dataset.header.counts;
    println!(
        "demonstrations: {} ({} push / {} pull / {} none), {} rejected and resampled",
        dataset.header.n_demos, c.push, c.pull, c.none, dataset.header.rejections
    );
    println!("scene images:   {}", 2 * dataset.header.n_demos);
    println!("test contexts:  {}", contexts.len());
    Ok(())
}

fn write_curves(out: &Path, name: &str, curves: &TrainingCurves) -> Result<(), CliError> {
    fs::write(out.join(format!("loss_{name}.csv")), curve_csv(&curves.loss)).map_err(data_err)?;
    fs::write(
        out.join(format!("validation_{name}.csv")),
        curve_csv(&curves.validation),
    )
    .map_err(data_err)
}

fn save_segmented(out: &Path, models: &SegmentedModels) -> Result<(), CliError> {
    models.pre.save(&out.join("pre.bin")).map_err(data_err)?;
    models.cor.save(&out.join("cor.bin")).map_err(data_err)?;
    models.post.save(&out.join("post.bin")).map_err(data_err)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = FileValues::load(args.config.as_deref())?;
    file.ensure_known(&["mode", "budget", "data", "out", "seed", "ae_epochs"])?;
    let mode = match args.mode {
        Some(m) => m,
        None => match file.0.get("mode") {
            Some(raw) => TrainMode::parse(raw)
                .ok_or_else(|| CliError::Usage(format!("config key mode: unknown mode {raw:?}")))?,
            None => return Err(CliError::Usage("--mode is required (pc, ae, or mono)".into())),
        },
    };
    let budget = args.budget.or(file.get("budget")?).unwrap_or(DEFAULT_BUDGET);
    let data: PathBuf = require(args.data.or(file.get("data")?), "--data")?;
    let out: PathBuf = require(args.out.or(file.get("out")?), "--out")?;
    let seed = args.seed.or(file.get("seed")?).unwrap_or(DEFAULT_TRAIN_SEED);
    let ae_epochs = args.ae_epochs.or(file.get("ae_epochs")?).unwrap_or(AE_EPOCHS);

    let dataset = load_dataset(&data)
        .map_err(|e| CliError::Data(format!("dataset {}: {e}", data.display())))?;
    fs::create_dir_all(&out).map_err(data_err)?;

    match mode {
        TrainMode::Pc => {
            let (models, report) =
                train_segmented(&dataset, ContextMode::Perfect, budget, seed).map_err(pipeline_err)?;
            save_segmented(&out, &models)?;
            for (name, curves) in [("pre", &report.pre), ("cor", &report.cor), ("post", &report.post)]
            {
                write_curves(&out, name, curves)?;
            }
            println!(
                "trained pre/cor/post primitives: {} parameters total, {} updates each",
                models.param_count(),
                budget
            );
        }
        TrainMode::Ae => {
            let images = scene_image_corpus(&dataset);
            let (ae, history) =
                train_ae(&images, ae_epochs, AE_LEARNING_RATE, seed).map_err(|e| match e {
                    AeError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
                    _ => CliError::Data(e.to_string()),
                })?;
            ae.save(&out.join("ae.bin")).map_err(data_err)?;
            let mut csv = String::from("epoch,train_mse,test_mse\n");
            for (i, (tr, te)) in history.train_mse.iter().zip(&history.test_mse).enumerate() {
                let _ = writeln!(csv, "{},{},{}", i + 1, tr, te);
            }
            fs::write(out.join("ae_history.csv"), csv).map_err(data_err)?;
            println!(
                "trained autoencoder: {} parameters, {} epochs on {} images, final test MSE {:.6}",
                ae.param_count(),
                ae_epochs,
                images.len(),
                history.test_mse.last().copied().unwrap_or(f64::NAN)
            );

            let (models, report) =
                train_segmented(&dataset, ContextMode::Latent(&ae), budget, seed)
                    .map_err(pipeline_err)?;
            save_segmented(&out, &models)?;
            for (name, curves) in [("pre", &report.pre), ("cor", &report.cor), ("post", &report.post)]
            {
                write_curves(&out, name, curves)?;
            }
            println!(
                "trained pre/cor/post primitives on latent contexts: {} parameters total",
                models.param_count()
            );
        }
        TrainMode::Mono => {
            let target = cnmp_param_count(HIDDEN_WIDTH, 3, 0) + 2 * cnmp_param_count(HIDDEN_WIDTH, 3, 1);
            let width = monolithic_width(target, 3, 1, PARAM_MATCH_TOLERANCE_PCT)
                .map_err(pipeline_err)?;
            let (model, curves) =
                train_monolithic(&dataset, budget, seed, target).map_err(pipeline_err)?;
            model.save(&out.join("mono.bin")).map_err(data_err)?;
            write_curves(&out, "mono", &curves)?;
            let count = model.param_count();
            println!(
                "parameter match: segmented total {target}, baseline {count} at width {width} \
                 ({:+.3}% difference)",
                100.0 * (count as f64 - target as f64) / target as f64
            );
        }
    }

    write_run_config(
        &out,
        "train",
        &[
            ("mode", mode.as_str().to_string()),
            ("budget", budget.to_string()),
            ("data", data.display().to_string()),
            ("out", out.display().to_string()),
            ("seed", seed.to_string()),
            ("ae_epochs", ae_epochs.to_string()),
        ],
    )
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let file = FileValues::load(args.config.as_deref())?;
    file.ensure_known(&["models", "data", "out", "trials", "threads"])?;
    let models_dir: PathBuf = require(args.models.or(file.get("models")?), "--models")?;
    let data: PathBuf = require(args.data.or(file.get("data")?), "--data")?;
    let out: PathBuf = require(args.out.or(file.get("out")?), "--out")?;
    let trials_path: PathBuf = args
        .trials
        .or(file.get("trials")?)
        .unwrap_or_else(|| data.join("test_contexts.csv"));
    let threads = args
        .threads
        .or(file.get("threads")?)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    let dataset = load_dataset(&data)
        .map_err(|e| CliError::Data(format!("dataset {}: {e}", data.display())))?;
    let contexts = load_test_contexts(&trials_path)
        .map_err(|e| CliError::Data(format!("trials {}: {e}", trials_path.display())))?;
    fs::create_dir_all(&out).map_err(data_err)?;

    // A checkpoint trained on a different corpus normalizes with different
    // statistics; evaluating it against this dataset would be meaningless.
    let stats_check = |name: &str, got: &crate::dataset::PhaseStats, want: &crate::dataset::PhaseStats| {
        if got != want {
            return Err(CliError::Data(format!(
                "checkpoint {name} was trained on a different dataset \
                 (normalization statistics disagree); refusing to evaluate"
            )));
        }
        Ok(())
    };

    let pre_path = models_dir.join("pre.bin");
    let mono_path = models_dir.join("mono.bin");
    let (label, references, segmented, mono, ae);
    if pre_path.is_file() {
        let loaded = SegmentedModels {
            pre: CnmpModel::load(&pre_path).map_err(data_err)?,
            cor: CnmpModel::load(&models_dir.join("cor.bin")).map_err(data_err)?,
            post: CnmpModel::load(&models_dir.join("post.bin")).map_err(data_err)?,
        };
        for (name, model, phase) in [
            ("pre.bin", &loaded.pre, Phase::Pre),
            ("cor.bin", &loaded.cor, Phase::Cor),
            ("post.bin", &loaded.post, Phase::Post),
        ] {
            stats_check(name, &model.descriptor().value_stats, dataset.header.stats.phase(phase))?;
        }
        let latent_context = loaded.cor.descriptor().context.dim() > 1;
        if latent_context {
            ae = Some(AeModel::load(&models_dir.join("ae.bin")).map_err(|e| {
                CliError::Data(format!(
                    "checkpoints use latent contexts but ae.bin failed to load: {e}"
                ))
            })?);
            label = "segmented policy, autoencoder context";
            references = REFERENCE_LATENT;
        } else {
            ae = None;
            label = "segmented policy, perfect context";
            references = REFERENCE_SEGMENTED;
        }
        segmented = Some(loaded);
        mono = None;
    } else if mono_path.is_file() {
        let model = CnmpModel::load(&mono_path).map_err(data_err)?;
        let expected = phase_stats(monolithic_items(dataset.train()).iter().map(|i| &i.trajectory));
        stats_check("mono.bin", &model.descriptor().value_stats, &expected)?;
        mono = Some(model);
        segmented = None;
        ae = None;
        label = "monolithic baseline";
        references = REFERENCE_MONOLITHIC;
    } else {
        return Err(CliError::Data(format!(
            "no checkpoints in {} (expected pre/cor/post.bin or mono.bin)",
            models_dir.display()
        )));
    }

    let policy = match (&segmented, &mono) {
        (Some(models), _) => Policy::Segmented {
            models,
            mode: match &ae {
                Some(ae) => ContextMode::Latent(ae),
                None => ContextMode::Perfect,
            },
        },
        (None, Some(model)) => Policy::Monolithic(model),
        (None, None) => unreachable!("one branch above always sets a policy"),
    };

    let results = run_trials(&dataset.header.world, &policy, &contexts, threads)
        .map_err(pipeline_err)?;
    let report = write_report(&out, &results, label, &references).map_err(pipeline_err)?;
    write_run_config(
        &out,
        "eval",
        &[
            ("models", models_dir.display().to_string()),
            ("data", data.display().to_string()),
            ("out", out.display().to_string()),
            ("trials", trials_path.display().to_string()),
            ("threads", threads.to_string()),
        ],
    )?;

    let rows: Vec<_> = results.iter().map(|r| r.row.clone()).collect();
    print!("{}", crate::pipeline::summary_text(&rows, &report, label, &references));
    // Exit 0 iff every trial executed (task failure is a result, not an
    // error; a simulator violation mid-rollout is).
    let aborted = rows.iter().filter(|r| !r.failure_cause.is_empty()).count();
    if aborted > 0 {
        return Err(CliError::Numeric(format!(
            "{aborted} of {} trials aborted on simulator violations",
            rows.len()
        )));
    }
    Ok(())
}

fn cmd_selftest() -> Result<(), CliError> {
    let scratch = std::env::temp_dir().join(format!("corridor-lfd-selftest-{}", std::process::id()));
    let outcomes = selftest::run_all(&scratch);
    let _ = fs::remove_dir_all(&scratch);
    let mut failed = 0usize;
    for o in &outcomes {
        println!(
            "{} {} — {}",
            if o.passed { "ok  " } else { "FAIL" },
            o.name,
            o.detail
        );
        if !o.passed {
            failed += 1;
        }
    }
    println!("{} checks, {failed} failed", outcomes.len());
    if failed > 0 {
        Err(CliError::Numeric(format!("{failed} property checks failed")))
    } else {
        Ok(())
    }
}

/// Parses the command line and runs the requested command, returning the
/// process exit code (0 ok, 1 usage, 2 data, 3 numeric).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
