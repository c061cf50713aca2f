//! Mini-batch training: batch composition, warp search with the network
//! frozen, loss assembly over clean and warped views, SGD and checkpoints.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{search_batch, AdvConfig, AdversaryError, ParamBounds};
use crate::data::{augment, DataError, DatasetManifest, DegradeSpec, Sample, Split, AUGMENT_PROB};
use crate::diff::{DiffError, Graph, NodeId, Tensor};
use crate::eval::{evaluate_samples, EvalError};
use crate::geometry::{warp_image, GeometryError, TransformParams, WarpKind};
use crate::image::Image;
use crate::losses::{angular_loss_graph, contrastive_pair_graph, total_loss, LossConfig, LossError};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelError, ModelState};
use crate::seeds;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("batch of {batch} cannot be split into non-empty subsets {sizes:?}")]
    Split { batch: usize, sizes: [usize; 3] },
    #[error("non-finite {what} at step {step}; step aborted and parameters restored")]
    NonFinite { step: u64, what: String },
    #[error("resume checkpoint {path}: {reason}")]
    Resume { path: PathBuf, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl TrainError {
    fn at_step(step: u64, e: impl Into<TrainError>) -> Self {
        match e.into() {
            TrainError::Model(ModelError::Diff(DiffError::NonFinite { op, .. }))
            | TrainError::Loss(LossError::Diff(DiffError::NonFinite { op, .. }))
            | TrainError::Adversary(AdversaryError::Diff(DiffError::NonFinite { op, .. }))
            | TrainError::Adversary(AdversaryError::Model(ModelError::Diff(DiffError::NonFinite { op, .. })))
            | TrainError::Adversary(AdversaryError::Loss(LossError::Diff(DiffError::NonFinite { op, .. }))) => {
                TrainError::NonFinite {
                    step,
                    what: format!("value in {op}"),
                }
            }
            TrainError::Loss(LossError::NonFinite { component, .. }) => TrainError::NonFinite {
                step,
                what: component.to_string(),
            },
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "clean-only")]
    CleanOnly,
    #[serde(rename = "clean+trans")]
    CleanTrans,
    #[serde(rename = "darface")]
    Darface,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::CleanOnly, Mode::CleanTrans, Mode::Darface];

    pub fn label(self) -> &'static str {
        match self {
            Mode::CleanOnly => "clean-only",
            Mode::CleanTrans => "clean+trans",
            Mode::Darface => "darface",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean-only" | "clean" => Ok(Mode::CleanOnly),
            "clean+trans" | "trans" => Ok(Mode::CleanTrans),
            "darface" | "full" => Ok(Mode::Darface),
            other => Err(format!(
                "unknown mode {other:?}; expected clean-only, clean+trans or darface"
            )),
        }
    }
}

/// Clean / globally warped / locally warped batch fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fractions {
    pub clean: f64,
    pub global: f64,
    pub local: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Self {
            clean: 0.75,
            global: 0.15,
            local: 0.10,
        }
    }
}

impl Fractions {
    pub fn all_clean() -> Self {
        Self {
            clean: 1.0,
            global: 0.0,
            local: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let parts = [self.clean, self.global, self.local];
        if parts.iter().any(|&f| !(f >= 0.0 && f.is_finite())) {
            return Err(TrainError::Config("fractions must be nonnegative".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TrainError::Config(format!("fractions {parts:?} must sum to 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Exponent of the polynomial decay to zero over the run.
    pub lr_power: f64,
    pub weight_decay: f64,
    pub fractions: Fractions,
    /// Standard crop / low-resolution / photometric augmentation.
    pub augment: bool,
    pub augment_prob: f64,
    /// Clean test rank-1 in each epoch summary.
    pub eval_each_epoch: bool,
    pub loss: LossConfig,
    pub adversary: AdvConfig,
    pub bounds: ParamBounds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Darface,
            seed: 0,
            batch_size: 20,
            epochs: 10,
            learning_rate: 0.05,
            lr_power: 1.0,
            weight_decay: 1e-4,
            fractions: Fractions::default(),
            augment: false,
            augment_prob: AUGMENT_PROB,
            eval_each_epoch: true,
            loss: LossConfig::default(),
            adversary: AdvConfig::default(),
            bounds: ParamBounds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.fractions.validate()?;
        self.loss.validate()?;
        self.adversary.validate()?;
        self.bounds.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.mode == Mode::Darface && self.batch_size < 4 {
            return Err(TrainError::Config("darface mode needs batch_size ≥ 4".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(self.lr_power >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("lr_power and weight_decay must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(TrainError::Config("augment_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Fractions actually used: clean-only trains on whole clean batches.
    pub fn effective_fractions(&self) -> Fractions {
        match self.mode {
            Mode::CleanOnly => Fractions::all_clean(),
            _ => self.fractions.clone(),
        }
    }

    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if total == 0 {
            return self.learning_rate;
        }
        let left = (1.0 - step as f64 / total as f64).max(0.0);
        self.learning_rate * left.powf(self.lr_power)
    }
}

/// Index partition of one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSplit {
    pub clean: Vec<usize>,
    pub global: Vec<usize>,
    pub local: Vec<usize>,
}

impl BatchSplit {
    pub fn sizes(&self) -> [usize; 3] {
        [self.clean.len(), self.global.len(), self.local.len()]
    }
}

/// Shuffle `0..b` and cut it into clean / global / local subsets of sizes
/// `floor(b·f)` for the warped parts, remainder clean. A warped part with a
/// positive fraction that floors to zero is given one image.
pub fn split_batch<R: rand::Rng + ?Sized>(
    b: usize,
    fractions: &Fractions,
    rng: &mut R,
) -> Result<BatchSplit, TrainError> {
    fractions.validate()?;
    let size = |f: f64| {
        let n = (b as f64 * f + 1e-9).floor() as usize;
        if f > 0.0 {
            n.max(1)
        } else {
            n
        }
    };
    let (g, l) = (size(fractions.global), size(fractions.local));
    let needs_clean = usize::from(fractions.clean > 0.0);
    if g + l + needs_clean > b {
        return Err(TrainError::Split {
            batch: b,
            sizes: [b.saturating_sub(g + l), g, l],
        });
    }
    let mut idx: Vec<usize> = (0..b).collect();
    idx.shuffle(rng);
    Ok(BatchSplit {
        global: idx[..g].to_vec(),
        local: idx[g..g + l].to_vec(),
        clean: idx[g + l..].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_clean: f64,
    pub l_trans: f64,
    pub l_cont: f64,
    pub l_total: f64,
    /// Mean loss increase achieved by the warp searches.
    pub psi_gain: f64,
}

pub const STEP_CSV_HEADER: &str = "step,epoch,lr,l_clean,l_trans,l_cont,l_total,psi_gain";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.l_clean, self.l_trans, self.l_cont, self.l_total, self.psi_gain
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: u64,
    pub mean_l_clean: f64,
    pub mean_l_trans: f64,
    pub mean_l_cont: f64,
    pub mean_l_total: f64,
    pub mean_psi_gain: f64,
    pub test_rank1: Option<f64>,
    pub model_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from(STEP_CSV_HEADER);
        out.push('\n');
        for r in &self.steps {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// One gradient unit: a clean image, one warped view, or a paired
/// global/local view of the same source.
enum Unit<'a> {
    Clean {
        image: &'a Image,
        class: usize,
        weight: f64,
    },
    View {
        image: Image,
        class: usize,
        weight: f64,
    },
    Pair {
        global: Image,
        local: Image,
        class: usize,
        /// Classification weights of the global and local views (zero when
        /// the view is outside its allocation).
        w_global: f64,
        w_local: f64,
        w_cont: f64,
    },
}

/// Per-unit parameter gradients and its (clean, trans, cont) contributions.
struct UnitResult {
    grads: Vec<Tensor<f32>>,
    parts: [f64; 3],
}

fn class_loss(
    model: &ModelState<f32>,
    g: &mut Graph<f32>,
    nodes: &crate::model::ModelNodes,
    loss: &LossConfig,
    image: &Image,
    class: usize,
) -> Result<(NodeId, NodeId), TrainError> {
    let x = g.constant(image.tensor().clone());
    let e = model.embed_graph(g, nodes, x)?;
    let l = model.logits_graph(g, nodes, e)?;
    Ok((e, angular_loss_graph(g, l, class, loss.margin, loss.scale)?))
}

fn run_unit(model: &ModelState<f32>, loss: &LossConfig, unit: &Unit) -> Result<UnitResult, TrainError> {
    let mut g = Graph::<f32>::new();
    let nodes = model.bind(&mut g, true);
    let mut parts = [0.0f64; 3];
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    match unit {
        Unit::Clean { image, class, weight } => {
            let (_, l) = class_loss(model, &mut g, &nodes, loss, image, *class)?;
            parts[0] = weight * g.value(l).map_err(ModelError::from)?.item() as f64;
            terms.push((l, *weight));
        }
        Unit::View { image, class, weight } => {
            let (_, l) = class_loss(model, &mut g, &nodes, loss, image, *class)?;
            parts[1] = weight * g.value(l).map_err(ModelError::from)?.item() as f64;
            terms.push((l, *weight));
        }
        Unit::Pair {
            global,
            local,
            class,
            w_global,
            w_local,
            w_cont,
        } => {
            let (eg, lg) = class_loss(model, &mut g, &nodes, loss, global, *class)?;
            let (el, ll) = class_loss(model, &mut g, &nodes, loss, local, *class)?;
            let c = contrastive_pair_graph(&mut g, eg, el)?;
            let val = |g: &Graph<f32>, n: NodeId| g.value(n).map(|t| t.item() as f64).map_err(ModelError::from);
            parts[1] = w_global * val(&g, lg)? + w_local * val(&g, ll)?;
            parts[2] = w_cont * val(&g, c)?;
            for (n, w) in [(lg, *w_global), (ll, *w_local), (c, *w_cont)] {
                if w != 0.0 {
                    terms.push((n, w));
                }
            }
        }
    }
    let mut acc: Option<NodeId> = None;
    for (n, w) in terms {
        let s = g.scale(n, w).map_err(ModelError::from)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s).map_err(ModelError::from)?,
            None => s,
        });
    }
    let grads = match acc {
        Some(out) => {
            let mut gr = g.backward(out).map_err(ModelError::from)?;
            nodes
                .params
                .iter()
                .map(|&id| gr.take(id).expect("parameters are marked inputs"))
                .collect()
        }
        None => model.params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
    };
    Ok(UnitResult { grads, parts })
}

/// Best warp per image (or one per group in per-batch mode) and the mean
/// loss gain of the searches.
fn search_warps(
    model: &ModelState<f32>,
    cfg: &TrainConfig,
    images: &[&Image],
    classes: &[usize],
    kind: WarpKind,
    step: u64,
) -> Result<(Vec<TransformParams>, Vec<f64>), TrainError> {
    let tag = match kind {
        WarpKind::Global => 0,
        WarpKind::Local => 1,
    };
    if images.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    if cfg.adversary.per_batch {
        let mut rng = seeds::rng(cfg.seed, &[seeds::TAG_ADVERSARY, step, tag, u64::MAX]);
        let t = search_batch(
            model,
            &cfg.loss,
            images,
            classes,
            kind,
            &cfg.adversary,
            &cfg.bounds,
            &mut rng,
        )
        .map_err(|e| TrainError::at_step(step, e))?;
        return Ok((vec![t.best().clone(); images.len()], vec![t.gain()]));
    }
    let traces = images
        .par_iter()
        .zip(classes)
        .enumerate()
        .map(|(k, (img, &y))| {
            let mut rng = seeds::rng(cfg.seed, &[seeds::TAG_ADVERSARY, step, tag, k as u64]);
            search_batch(
                model,
                &cfg.loss,
                &[*img],
                &[y],
                kind,
                &cfg.adversary,
                &cfg.bounds,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| TrainError::at_step(step, e))?;
    Ok((
        traces.iter().map(|t| t.best().clone()).collect(),
        traces.iter().map(|t| t.gain()).collect(),
    ))
}

fn render(images: &[&Image], params: &[TransformParams]) -> Result<Vec<Image>, TrainError> {
    images
        .par_iter()
        .zip(params)
        .map(|(img, p)| Ok(warp_image(img, p)?))
        .collect()
}

/// One optimizer step on `batch`. `state` is only modified when the step is
/// accepted; a non-finite loss or gradient leaves it untouched.
pub fn train_step(
    state: &mut ModelState<f32>,
    batch: &[&Sample],
    cfg: &TrainConfig,
    step: u64,
    epoch: u64,
    lr: f64,
) -> Result<StepRecord, TrainError> {
    let mut rng = seeds::rng(cfg.seed, &[seeds::TAG_SPLIT, step]);
    let split = split_batch(batch.len(), &cfg.effective_fractions(), &mut rng)?;
    let images: Vec<Image> = if cfg.augment {
        batch
            .iter()
            .enumerate()
            .map(|(k, s)| {
                augment(
                    &s.image,
                    &mut seeds::rng(cfg.seed, &[seeds::TAG_AUGMENT, step, k as u64]),
                    cfg.augment_prob,
                )
            })
            .collect()
    } else {
        batch.iter().map(|s| s.image.clone()).collect()
    };
    let model: &ModelState<f32> = state;
    let class = |k: usize| batch[k].class();
    let pick = |idx: &[usize]| -> (Vec<&Image>, Vec<usize>) {
        (
            idx.iter().map(|&k| &images[k]).collect(),
            idx.iter().map(|&k| class(k)).collect(),
        )
    };

    let mut units: Vec<Unit> = Vec::new();
    let w_clean = if split.clean.is_empty() {
        0.0
    } else {
        1.0 / split.clean.len() as f64
    };
    for &k in &split.clean {
        units.push(Unit::Clean {
            image: &images[k],
            class: class(k),
            weight: w_clean,
        });
    }
    let mut gains = Vec::new();
    let n_views = split.global.len() + split.local.len();
    let w_trans = if n_views == 0 { 0.0 } else { 1.0 / n_views as f64 };
    match cfg.mode {
        Mode::CleanOnly => {}
        Mode::CleanTrans => {
            for (idx, kind) in [(&split.global, WarpKind::Global), (&split.local, WarpKind::Local)] {
                let (imgs, ys) = pick(idx);
                let (params, g) = search_warps(model, cfg, &imgs, &ys, kind, step)?;
                gains.extend(g);
                for (img, y) in render(&imgs, &params)?.into_iter().zip(ys) {
                    units.push(Unit::View {
                        image: img,
                        class: y,
                        weight: w_trans,
                    });
                }
            }
        }
        Mode::Darface => {
            let pool: Vec<usize> = split.global.iter().chain(&split.local).copied().collect();
            let (imgs, ys) = pick(&pool);
            let (pg, gg) = search_warps(model, cfg, &imgs, &ys, WarpKind::Global, step)?;
            let (pl, gl) = search_warps(model, cfg, &imgs, &ys, WarpKind::Local, step)?;
            gains.extend(gg);
            gains.extend(gl);
            let gviews = render(&imgs, &pg)?;
            let lviews = render(&imgs, &pl)?;
            let w_cont = cfg.loss.lambda_cont / pool.len().max(1) as f64;
            let n_global = split.global.len();
            for (k, ((gv, lv), y)) in gviews.into_iter().zip(lviews).zip(ys).enumerate() {
                let in_global = k < n_global;
                units.push(Unit::Pair {
                    global: gv,
                    local: lv,
                    class: y,
                    w_global: if in_global { w_trans } else { 0.0 },
                    w_local: if in_global { 0.0 } else { w_trans },
                    w_cont,
                });
            }
        }
    }

    let results = units
        .par_iter()
        .map(|u| run_unit(model, &cfg.loss, u))
        .collect::<Vec<_>>();
    let mut grads: Vec<Tensor<f32>> = model.params.iter().map(|p| Tensor::zeros(p.dims())).collect();
    let mut parts = [0.0f64; 3];
    for r in results {
        let r = r.map_err(|e| TrainError::at_step(step, e))?;
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            acc.add_assign(g);
        }
        for (p, v) in parts.iter_mut().zip(r.parts) {
            *p += v;
        }
    }
    let [l_clean, l_trans, l_cont_weighted] = parts;
    let l_cont = if cfg.mode == Mode::Darface && cfg.loss.lambda_cont > 0.0 {
        l_cont_weighted / cfg.loss.lambda_cont
    } else {
        0.0
    };
    let lambda = if cfg.mode == Mode::Darface {
        cfg.loss.lambda_cont
    } else {
        0.0
    };
    let l_total = total_loss(l_clean, l_trans, l_cont, lambda).map_err(|e| TrainError::at_step(step, e))?;
    if !grads.iter().all(Tensor::is_finite) {
        return Err(TrainError::NonFinite {
            step,
            what: "gradient".into(),
        });
    }

    let names = model.config.param_specs();
    let mut next = state.clone();
    for ((p, g), (name, _)) in next.params.iter_mut().zip(&grads).zip(&names) {
        let decay = if name.ends_with(".bias") { 0.0 } else { cfg.weight_decay };
        let (lr, decay) = (lr as f32, decay as f32);
        for (w, &dw) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * (dw + decay * *w);
        }
    }
    next.renormalize_classifier();
    if !next.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            what: "parameters".into(),
        });
    }
    *state = next;
    Ok(StepRecord {
        step,
        epoch,
        lr,
        l_clean,
        l_trans,
        l_cont,
        l_total,
        psi_gain: if gains.is_empty() {
            0.0
        } else {
            gains.iter().sum::<f64>() / gains.len() as f64
        },
    })
}

/// Deterministic batch order for `epoch`; a trailing partial batch is
/// dropped unless it is the only one.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeds::rng(seed, &[seeds::TAG_SHUFFLE, epoch]));
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < batch_size) {
        out.pop();
    }
    out
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> u64 {
    epoch_batches(n, batch_size, 0, 0).len() as u64
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints and logs go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: ModelState<f32>,
    pub log: TrainLog,
    pub checkpoints: Vec<PathBuf>,
}

pub const STEPS_CSV: &str = "steps.csv";
pub const EPOCHS_JSON: &str = "epochs.json";
pub const FINAL_CHECKPOINT: &str = "final";

pub fn checkpoint_dir(out: &Path, epoch: u64) -> PathBuf {
    out.join("checkpoints").join(format!("epoch-{epoch:03}"))
}

fn write_logs(out: &Path, log: &TrainLog) -> Result<(), TrainError> {
    let p = out.join(STEPS_CSV);
    fs::write(&p, log.steps_csv()).map_err(|e| DataError::io(&p, e))?;
    let p = out.join(EPOCHS_JSON);
    let text = serde_json::to_string_pretty(&log.epochs).expect("summaries serialize") + "\n";
    fs::write(&p, text).map_err(|e| DataError::io(&p, e))?;
    Ok(())
}

fn read_prior_log(out: &Path, upto_step: u64, upto_epoch: u64) -> TrainLog {
    let mut log = TrainLog::default();
    if let Ok(text) = fs::read_to_string(out.join(STEPS_CSV)) {
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                continue;
            }
            let num = |k: usize| f[k].parse::<f64>().unwrap_or(f64::NAN);
            let step = f[0].parse::<u64>().unwrap_or(u64::MAX);
            if step < upto_step {
                log.steps.push(StepRecord {
                    step,
                    epoch: f[1].parse().unwrap_or(0),
                    lr: num(2),
                    l_clean: num(3),
                    l_trans: num(4),
                    l_cont: num(5),
                    l_total: num(6),
                    psi_gain: num(7),
                });
            }
        }
    }
    if let Ok(text) = fs::read_to_string(out.join(EPOCHS_JSON)) {
        if let Ok(epochs) = serde_json::from_str::<Vec<EpochSummary>>(&text) {
            log.epochs = epochs.into_iter().filter(|e| e.epoch < upto_epoch).collect();
        }
    }
    log
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Full training run over the manifest's train split.
pub fn train(
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_set = manifest.load_split(Split::Train)?;
    let test_set = if cfg.eval_each_epoch {
        manifest.load_split(Split::Test)?
    } else {
        Vec::new()
    };
    train_samples(&train_set, &test_set, manifest.seed, model_cfg, cfg, opts)
}

/// Training on in-memory samples; `test` may be empty.
pub fn train_samples(
    train_set: &[Sample],
    test_set: &[Sample],
    eval_seed: u64,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    let per_epoch = steps_per_epoch(train_set.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs as u64;
    let run_meta = serde_json::json!({ "train": cfg });

    let (mut state, start_epoch, mut log) = match &opts.resume {
        Some(path) => {
            let (state, m) = load_checkpoint(path)?;
            if &state.config != model_cfg {
                return Err(TrainError::Resume {
                    path: path.clone(),
                    reason: "model config differs from the requested one".into(),
                });
            }
            if m.run.get("train") != run_meta.get("train") {
                return Err(TrainError::Resume {
                    path: path.clone(),
                    reason: "training config differs from the checkpoint's".into(),
                });
            }
            let log = match &opts.out_dir {
                Some(out) => read_prior_log(out, m.step, m.epoch),
                None => TrainLog::default(),
            };
            (state, m.epoch, log)
        }
        None => (ModelState::init(model_cfg.clone(), cfg.seed)?, 0, TrainLog::default()),
    };
    let mut checkpoints = Vec::new();
    if let Some(out) = &opts.out_dir {
        fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;
    }

    for epoch in start_epoch..cfg.epochs as u64 {
        let batches = epoch_batches(train_set.len(), cfg.batch_size, cfg.seed, epoch);
        let first = log.steps.len();
        for (b, idx) in batches.iter().enumerate() {
            let step = epoch * per_epoch + b as u64;
            let batch: Vec<&Sample> = idx.iter().map(|&k| &train_set[k]).collect();
            let lr = cfg.lr_at(step, total);
            let rec = match train_step(&mut state, &batch, cfg, step, epoch, lr) {
                Ok(r) => r,
                Err(e) => {
                    log::error!("{e}");
                    if let Some(out) = &opts.out_dir {
                        write_logs(out, &log)?;
                    }
                    return Err(e);
                }
            };
            log::debug!("step {} loss {:.4}", rec.step, rec.l_total);
            log.steps.push(rec);
        }
        let recs = &log.steps[first..];
        let test_rank1 = if cfg.eval_each_epoch && !test_set.is_empty() {
            Some(
                evaluate_samples(&state, test_set, &DegradeSpec::none(), eval_seed)?
                    .rank(1)
                    .unwrap_or(0.0),
            )
        } else {
            None
        };
        let summary = EpochSummary {
            epoch,
            steps: recs.len() as u64,
            mean_l_clean: mean(recs.iter().map(|r| r.l_clean)),
            mean_l_trans: mean(recs.iter().map(|r| r.l_trans)),
            mean_l_cont: mean(recs.iter().map(|r| r.l_cont)),
            mean_l_total: mean(recs.iter().map(|r| r.l_total)),
            mean_psi_gain: mean(recs.iter().map(|r| r.psi_gain)),
            test_rank1,
            model_hash: state.hash(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4}{}",
            summary.mean_l_total,
            test_rank1.map(|r| format!(", test rank-1 {r:.3}")).unwrap_or_default()
        );
        log.epochs.push(summary);
        if let Some(out) = &opts.out_dir {
            let step = (epoch + 1) * per_epoch;
            let is_final = epoch + 1 == cfg.epochs as u64;
            let dir = checkpoint_dir(out, epoch + 1);
            save_checkpoint(&dir, &state, step, epoch + 1, is_final, run_meta.clone())?;
            checkpoints.push(dir);
            write_logs(out, &log)?;
        }
    }
    if let Some(out) = &opts.out_dir {
        let dir = out.join("checkpoints").join(FINAL_CHECKPOINT);
        save_checkpoint(&dir, &state, total, cfg.epochs as u64, true, run_meta)?;
        checkpoints.push(dir);
        write_logs(out, &log)?;
    }
    Ok(TrainOutcome {
        state,
        log,
        checkpoints,
    })
}
