//! `warpadv`: dataset generation, training, evaluation, gradient checks and
//! warp-search demonstrations.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{default_seed, ConfigError, RunConfig};
use warpadv_core::adversary::{search, AdversaryError};
use warpadv_core::data::{self, ppm, DataError, DatasetManifest, DegradeSpec, Split};
use warpadv_core::diff::{Graph, Tensor};
use warpadv_core::eval::{ablation_run, evaluate, ComparisonTable, EvalError, MetricsReport};
use warpadv_core::geometry::{build_warp_field, psi_tensor, warp_graph, TransformParams, WarpKind};
use warpadv_core::gradsuite::{run_suite, SuiteConfig, SuiteError};
use warpadv_core::image::Image;
use warpadv_core::model::{load_checkpoint, ModelError};
use warpadv_core::seeds;
use warpadv_core::train::{train, train_samples, Mode, TrainError, TrainOptions};

const EXIT_USAGE: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_ABORT: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "warpadv",
    version,
    about = "Adversarial warp training on synthetic identities"
)]
struct Cli {
    /// Worker threads; 1 runs fully serially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic identity dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Finite-difference checks of every backward rule.
    Gradcheck(GradcheckArgs),
    /// Run the warp search on one image and dump each step.
    SearchDemo(SearchDemoArgs),
    /// Train every mode for every seed and tabulate metrics.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    identities: usize,
    #[arg(long, default_value_t = 40)]
    samples_per_id: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_cont: Option<f64>,
    /// Ascent steps K of the warp search.
    #[arg(long)]
    adv_steps: Option<usize>,
    /// Share one ψ across each warped subset instead of one per image.
    #[arg(long)]
    per_batch: bool,
    /// Enable crop / low-resolution / photometric augmentation.
    #[arg(long)]
    augment: bool,
    /// Skip the per-epoch test rank-1.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated levels, e.g. `none,16,8`.
    #[arg(long, value_delimiter = ',')]
    degrade: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for pair sampling and degradation noise (defaults to the dataset seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Only checks whose name contains this, e.g. `conv2d` or `warp.`.
    #[arg(long)]
    primitive: Option<String>,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Corrupt one primitive's backward rule (negative control).
    #[arg(long)]
    inject_fault: Option<String>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SearchDemoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `.dten` or `.ppm` image.
    #[arg(long)]
    image: PathBuf,
    /// 1-based identity of the image.
    #[arg(long)]
    label: usize,
    #[arg(long, default_value = "global")]
    kind: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "clean-only,clean+trans,darface")]
    modes: Vec<Mode>,
    #[arg(long, value_delimiter = ',')]
    degrade: Vec<String>,
    #[command(flatten)]
    run: RunArgs,
}

/// An error with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Invalid(_) => EXIT_USAGE,
        _ => EXIT_MISSING,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Data(d) => data_code(d),
        ModelError::Checkpoint { .. } => EXIT_MISSING,
        ModelError::Config(_) | ModelError::InputDims { .. } => EXIT_USAGE,
        ModelError::Diff(_) => 1,
    }
}

fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::Data(d) => data_code(d),
        EvalError::Model(m) => model_code(m),
        EvalError::Train(_) => EXIT_ABORT,
        _ => EXIT_USAGE,
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::new(data_code(&e), e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::new(model_code(&e), e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::new(eval_code(&e), e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Missing(_) => Failure::new(EXIT_MISSING, e.to_string()),
            ConfigError::Invalid(_) => Failure::new(EXIT_USAGE, e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFinite { .. } => EXIT_ABORT,
            TrainError::Data(d) => data_code(d),
            TrainError::Model(m) => model_code(m),
            TrainError::Eval(ev) => eval_code(ev),
            TrainError::Resume { .. } => EXIT_MISSING,
            TrainError::Config(_) | TrainError::Split { .. } => EXIT_USAGE,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<AdversaryError> for Failure {
    fn from(e: AdversaryError) -> Self {
        Failure::new(1, e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_MISSING, format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn seed_or_env(seed: Option<u64>) -> Result<u64, Failure> {
    match seed {
        Some(s) => Ok(s),
        None => default_seed().map_err(|m| Failure::new(EXIT_USAGE, m)),
    }
}

fn parse_levels(levels: &[String]) -> Result<Vec<DegradeSpec>, Failure> {
    levels
        .iter()
        .map(|l| DegradeSpec::parse(l).map_err(Failure::from))
        .collect()
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, Failure> {
    DatasetManifest::load(path).map_err(|e| {
        let code = if e.is_missing_file() {
            EXIT_MISSING
        } else {
            data_code(&e)
        };
        Failure::new(code, e.to_string())
    })
}

/// Defaults < config file < flags, with the model shaped by the dataset.
fn resolve_run(run: &RunArgs, manifest: Option<&DatasetManifest>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::resolve(run.config.as_deref())?;
    if let Some(s) = run.seed {
        cfg.seed = Some(s);
    }
    let t = &mut cfg.train;
    if let Some(m) = run.mode {
        t.mode = m;
    }
    if let Some(e) = run.epochs {
        t.epochs = e;
    }
    if let Some(b) = run.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = run.lr {
        t.learning_rate = lr;
    }
    if let Some(l) = run.lambda_cont {
        t.loss.lambda_cont = l;
    }
    if let Some(k) = run.adv_steps {
        t.adversary.steps = k;
    }
    if run.per_batch {
        t.adversary.per_batch = true;
    }
    if run.augment {
        t.augment = true;
    }
    if run.no_eval {
        t.eval_each_epoch = false;
    }
    if let Some(m) = manifest {
        cfg.model.input_size = m.size;
        cfg.model.identities = m.identities;
    }
    Ok(cfg.finish()?)
}

#[derive(Serialize)]
struct DataStats<'a> {
    manifest: &'a Path,
    identities: usize,
    size: usize,
    train: usize,
    test: usize,
    seed: u64,
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let seed = seed_or_env(a.seed)?;
    let m = data::generate_dataset(&a.out, seed, a.identities, a.samples_per_id, a.size)?;
    let path = m.write()?;
    let count = |s: Split| m.records.iter().filter(|r| r.split == s).count();
    let stats = DataStats {
        manifest: &path,
        identities: m.identities,
        size: m.size,
        train: count(Split::Train),
        test: count(Split::Test),
        seed,
    };
    println!("{}", serde_json::to_string_pretty(&stats).expect("serializable"));
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    out: PathBuf,
    mode: Mode,
    seed: u64,
    steps: usize,
    epochs: usize,
    final_checkpoint: Option<PathBuf>,
    final_loss: Option<f64>,
    test_rank1: Option<f64>,
    model_hash: String,
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let manifest = load_manifest(&a.data)?;
    let cfg = resolve_run(&a.run, Some(&manifest))?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Failure::new(EXIT_USAGE, "--out is required (flag or config `out`)"))?;
    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    write_json(&out.join("config.json"), &cfg)?;
    let opts = TrainOptions {
        out_dir: Some(out.clone()),
        resume: a.resume.clone(),
    };
    let result = train(&manifest, &cfg.model, &cfg.train, &opts)?;
    let summary = TrainSummary {
        out: out.clone(),
        mode: cfg.train.mode,
        seed: cfg.train.seed,
        steps: result.log.steps.len(),
        epochs: result.log.epochs.len(),
        final_checkpoint: result.checkpoints.last().cloned(),
        final_loss: result.log.epochs.last().map(|e| e.mean_l_total),
        test_rank1: result.log.epochs.last().and_then(|e| e.test_rank1),
        model_hash: result.state.hash(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
    Ok(())
}

fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("degrade,metric,value\n");
    for r in reports {
        for (metric, value) in r.metric_rows() {
            out.push_str(&format!("{},{metric},{value}\n", r.degrade));
        }
    }
    out
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let mut manifest = load_manifest(&a.data)?;
    if let Some(s) = a.seed {
        manifest.seed = s;
    }
    let levels = if a.degrade.is_empty() {
        RunConfig::default().degrade
    } else {
        parse_levels(&a.degrade)?
    };
    let mut reports = Vec::new();
    for spec in &levels {
        let r = evaluate(&model, &manifest, spec)?;
        println!(
            "degrade {:>4}: rank-1 {:.4}  rank-5 {:.4}  tar@far=0.1 {:.4}",
            r.degrade,
            r.rank(1).unwrap_or(0.0),
            r.rank(5).unwrap_or(0.0),
            r.tar(0.1).unwrap_or(0.0)
        );
        reports.push(r);
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
        write_json(&out.join("metrics.json"), &reports)?;
        let p = out.join("metrics.csv");
        fs::write(&p, metrics_csv(&reports)).map_err(|e| io_failure(&p, e))?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let cfg = SuiteConfig {
        samples: a.samples,
        tolerance: a.tolerance,
        seed: a.seed,
        filter: a.primitive.clone(),
        fault: a.inject_fault.clone(),
        ..SuiteConfig::default()
    };
    let results = run_suite(&cfg).map_err(|e| match e {
        SuiteError::NoMatch(_) => Failure::new(EXIT_USAGE, e.to_string()),
        other => Failure::new(EXIT_GRADCHECK, other.to_string()),
    })?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&results).expect("serializable"));
    } else {
        for r in &results {
            println!(
                "{:<24} {} max rel err {:.3e} over {} samples",
                r.name,
                if r.pass { "ok  " } else { "FAIL" },
                r.max_rel_error,
                r.samples
            );
        }
    }
    let failing: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_GRADCHECK,
            format!("gradient check failed: {}", failing.join(", ")),
        ))
    }
}

fn read_image(path: &Path) -> Result<Image, Failure> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => ppm::read_ppm(path)?,
        _ => Image::new(data::load_tensor::<f32>(path)?).map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?,
    };
    Ok(img)
}

#[derive(Serialize)]
struct DemoRecord<'a> {
    step: usize,
    params: &'a TransformParams,
    loss: f64,
    image: String,
    field: String,
}

fn cmd_search_demo(a: SearchDemoArgs) -> Result<(), Failure> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let img = read_image(&a.image)?;
    model.check_input(img.tensor().dims())?;
    if a.label == 0 || a.label > model.config.identities {
        return Err(Failure::new(
            EXIT_USAGE,
            format!("label {} outside 1..={}", a.label, model.config.identities),
        ));
    }
    let kind = match a.kind.as_str() {
        "global" => WarpKind::Global,
        "local" => WarpKind::Local,
        other => {
            return Err(Failure::new(
                EXIT_USAGE,
                format!("kind {other:?}: expected global or local"),
            ))
        }
    };
    let mut cfg = RunConfig::resolve(a.config.as_deref())?.finish()?;
    if let Some(k) = a.steps {
        cfg.train.adversary.steps = k;
    }
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let model64 = model.cast::<f64>();
    let mut rng = seeds::rng(seed, &[seeds::TAG_ADVERSARY]);
    let t = &cfg.train;
    let trace = search(
        &model64,
        &t.loss,
        &img,
        a.label - 1,
        kind,
        &t.adversary,
        &t.bounds,
        &mut rng,
    )?;

    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    let x: Tensor<f64> = img.tensor().cast();
    let mut lines = String::new();
    for (k, (p, &loss)) in trace.params.iter().zip(&trace.losses).enumerate() {
        let mut g = Graph::<f64>::new();
        let xn = g.constant(x.clone());
        let psi = g.constant(psi_tensor(p));
        let y = warp_graph(&mut g, xn, psi, p).map_err(|e| Failure::new(1, e.to_string()))?;
        let warped = g.value(y).map_err(|e| Failure::new(1, e.to_string()))?.clone();
        let field = build_warp_field(p, img.height(), img.width()).map_err(|e| Failure::new(1, e.to_string()))?;
        let (name, fname) = (format!("step-{k:03}"), format!("field-{k:03}.dten"));
        data::save_tensor(&a.out.join(format!("{name}.dten")), &warped)?;
        data::save_tensor(&a.out.join(&fname), field.tensor())?;
        let preview = Image::new(warped.cast())
            .map_err(|e| Failure::new(1, e.to_string()))?
            .clamp01();
        ppm::write_ppm(&a.out.join(format!("{name}.ppm")), &preview)?;
        let rec = DemoRecord {
            step: k,
            params: p,
            loss,
            image: format!("{name}.dten"),
            field: fname,
        };
        let line = serde_json::to_string(&rec).expect("serializable");
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    let p = a.out.join("trajectory.jsonl");
    fs::write(&p, lines).map_err(|e| io_failure(&p, e))?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), Failure> {
    let manifest = load_manifest(&a.data)?;
    let cfg = resolve_run(&a.run, Some(&manifest))?;
    let levels = if a.degrade.is_empty() {
        cfg.degrade.clone()
    } else {
        parse_levels(&a.degrade)?
    };
    let train_set = manifest.load_split(Split::Train)?;
    let test_set = manifest.load_split(Split::Test)?;
    let modes: Vec<String> = a.modes.iter().map(|m| m.label().to_string()).collect();
    let table: ComparisonTable = ablation_run(&test_set, &modes, &a.seeds, &levels, manifest.seed, |mode, seed| {
        let mut t = cfg.train.clone();
        t.mode = mode.parse().map_err(EvalError::Train)?;
        t.seed = seed;
        t.eval_each_epoch = false;
        log::info!("training {mode} seed {seed}");
        train_samples(&train_set, &[], manifest.seed, &cfg.model, &t, &TrainOptions::default())
            .map(|o| o.state)
            .map_err(|e| EvalError::Train(e.to_string()))
    })?;
    table.write(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    print!("{}", table.summary_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::new(EXIT_USAGE, "--threads must be ≥ 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new(1, e.to_string()))?;
    }
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::SearchDemo(a) => cmd_search_demo(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
