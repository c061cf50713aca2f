//! Warp-parameter sampling and the projected sign-gradient ascent that looks
//! for loss-maximizing warps with the network frozen.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Graph, Scalar, Tensor};
use crate::geometry::{psi_tensor, warp_graph, ControlPointSet, GeometryError, TransformParams, WarpKind, PSI_LEN};
use crate::image::Image;
use crate::losses::{angular_loss_graph, LossConfig, LossError};
use crate::model::{ModelError, ModelState};

#[derive(Debug, Error)]
pub enum AdversaryError {
    #[error("invalid adversary config: {0}")]
    Config(String),
    #[error("{images} images but {labels} labels")]
    Batch { images: usize, labels: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Closed interval per warp parameter, in [`TransformParams::to_array`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamBounds {
    pub phi: [f64; 2],
    pub du: [f64; 2],
    pub dv: [f64; 2],
    pub lambda: [f64; 2],
    pub alpha: [f64; 2],
    pub sigma: [f64; 2],
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            phi: [-0.35, 0.35],
            du: [-3.0, 3.0],
            dv: [-3.0, 3.0],
            lambda: [0.85, 1.15],
            alpha: [0.05, 0.25],
            sigma: [20.0, 35.0],
        }
    }
}

impl ParamBounds {
    pub fn intervals(&self) -> [[f64; 2]; PSI_LEN] {
        [self.phi, self.du, self.dv, self.lambda, self.alpha, self.sigma]
    }

    pub fn widths(&self) -> [f64; PSI_LEN] {
        self.intervals().map(|[lo, hi]| hi - lo)
    }

    /// A box collapsed onto `p`.
    pub fn point(p: &TransformParams) -> Self {
        let a = p.to_array().map(|v| [v, v]);
        Self {
            phi: a[0],
            du: a[1],
            dv: a[2],
            lambda: a[3],
            alpha: a[4],
            sigma: a[5],
        }
    }

    pub fn validate(&self) -> Result<(), AdversaryError> {
        const NAMES: [&str; PSI_LEN] = ["phi", "du", "dv", "lambda", "alpha", "sigma"];
        for (name, [lo, hi]) in NAMES.iter().zip(self.intervals()) {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(AdversaryError::Config(format!(
                    "{name} bounds [{lo}, {hi}] are not an interval"
                )));
            }
        }
        if self.lambda[0] <= 0.0 {
            return Err(AdversaryError::Config("lambda bounds must be positive".into()));
        }
        if self.sigma[0] <= 0.0 {
            return Err(AdversaryError::Config("sigma bounds must be positive".into()));
        }
        if self.alpha[0] < 0.0 {
            return Err(AdversaryError::Config("alpha bounds must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn contains(&self, p: &TransformParams) -> bool {
        p.to_array()
            .iter()
            .zip(self.intervals())
            .all(|(&v, [lo, hi])| lo <= v && v <= hi)
    }
}

/// Mean and standard deviation of a Gaussian prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prior {
    pub mean: f64,
    pub std: f64,
}

impl Prior {
    pub const fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Always consume one draw so the stream layout does not depend on std.
        let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
        self.mean + self.std * z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvConfig {
    /// Ascent steps `K`.
    pub steps: usize,
    /// Per-parameter step sizes; `None` uses `0.25·width/K`.
    pub step_size: Option<[f64; PSI_LEN]>,
    pub alpha: Prior,
    pub sigma: Prior,
    /// Scale prior, drives `lambda`.
    pub scale: Prior,
    /// Rotation prior, drives `phi`.
    pub rotation: Prior,
    /// Translation prior, drives both `du` and `dv`.
    pub shift: Prior,
    /// One ψ per mini-batch instead of one per image.
    pub per_batch: bool,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            steps: 3,
            step_size: None,
            alpha: Prior::new(1.0, 0.1),
            sigma: Prior::new(10.0, 5.0),
            scale: Prior::new(1.0, 0.01),
            rotation: Prior::new(0.0, 0.01),
            shift: Prior::new(0.0, 0.01),
            per_batch: false,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<(), AdversaryError> {
        for (name, p) in [
            ("alpha", self.alpha),
            ("sigma", self.sigma),
            ("scale", self.scale),
            ("rotation", self.rotation),
            ("shift", self.shift),
        ] {
            if !(p.mean.is_finite() && p.std.is_finite() && p.std >= 0.0) {
                return Err(AdversaryError::Config(format!(
                    "{name} prior must have finite mean and std ≥ 0"
                )));
            }
        }
        if let Some(eta) = self.step_size {
            if eta.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
                return Err(AdversaryError::Config("step sizes must be positive".into()));
            }
        }
        Ok(())
    }

    /// Effective step sizes for `bounds`.
    pub fn eta(&self, bounds: &ParamBounds) -> [f64; PSI_LEN] {
        self.step_size
            .unwrap_or_else(|| bounds.widths().map(|w| 0.25 * w / self.steps.max(1) as f64))
    }
}

/// Component-wise clamp into the box.
pub fn project(p: &TransformParams, bounds: &ParamBounds) -> TransformParams {
    let mut a = p.to_array();
    for (v, [lo, hi]) in a.iter_mut().zip(bounds.intervals()) {
        *v = v.clamp(lo, hi);
    }
    p.with_array(a)
}

/// Draw ψ from the priors and clamp it into `bounds`. For the local kind the
/// control-point targets are drawn with the clamped `alpha` and the affine
/// map fitted for an `h × w` image.
pub fn sample_params<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &AdvConfig,
    bounds: &ParamBounds,
    kind: WarpKind,
    h: usize,
    w: usize,
) -> TransformParams {
    let raw = TransformParams {
        kind,
        phi: cfg.rotation.draw(rng),
        du: cfg.shift.draw(rng),
        dv: cfg.shift.draw(rng),
        lambda: cfg.scale.draw(rng),
        alpha: cfg.alpha.draw(rng),
        sigma: cfg.sigma.draw(rng),
        affine: crate::geometry::Affine::IDENTITY,
    };
    let mut p = project(&raw, bounds);
    if kind == WarpKind::Local {
        p.affine = ControlPointSet::sample(rng, p.alpha, h, w).fitted;
    }
    p
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean margin loss of `images` warped by `p`, with `∂/∂ψ` when `grad` is set.
fn warped_loss<T: Scalar>(
    model: &ModelState<T>,
    loss: &LossConfig,
    images: &[&Image],
    labels: &[usize],
    p: &TransformParams,
    grad: bool,
) -> Result<(f64, Option<[f64; PSI_LEN]>), AdversaryError> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(AdversaryError::Batch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let mut g = Graph::<T>::new();
    let nodes = model.bind(&mut g, false);
    let psi = if grad {
        g.input(psi_tensor(p))
    } else {
        g.constant(psi_tensor(p))
    };
    let mut terms = Vec::with_capacity(images.len());
    for (img, &y) in images.iter().zip(labels) {
        let x = g.constant(img.tensor().cast());
        let warped = warp_graph(&mut g, x, psi, p)?;
        let e = model.embed_graph(&mut g, &nodes, warped)?;
        let l = model.logits_graph(&mut g, &nodes, e)?;
        terms.push(angular_loss_graph(&mut g, l, y, loss.margin, loss.scale)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let mean = g.scale(total, 1.0 / terms.len() as f64)?;
    let value = g.value(mean)?.item().to_f64_lossy();
    if !grad {
        return Ok((value, None));
    }
    let grads = g.backward(mean)?;
    let gpsi: &Tensor<T> = grads.get(psi).expect("psi is a marked input");
    let mut out = [0.0; PSI_LEN];
    for (o, &v) in out.iter_mut().zip(gpsi.data()) {
        *o = v.to_f64_lossy();
    }
    Ok((value, Some(out)))
}

/// Loss of the batch under `p`, forward only.
pub fn warped_batch_loss<T: Scalar>(
    model: &ModelState<T>,
    loss: &LossConfig,
    images: &[&Image],
    labels: &[usize],
    p: &TransformParams,
) -> Result<f64, AdversaryError> {
    Ok(warped_loss(model, loss, images, labels, p, false)?.0)
}

/// Outcome of one ascent step.
#[derive(Clone, Debug)]
pub struct AscentStep {
    pub params: TransformParams,
    /// Loss at the parameters the step started from.
    pub loss_before: f64,
    pub gradient: [f64; PSI_LEN],
    pub skipped: bool,
}

/// `ψ ← Proj(ψ + η·sign(∇ψ L))` on the kind's active parameters, sharing
/// one ψ across `images`.
pub fn ascent_step_batch<T: Scalar>(
    model: &ModelState<T>,
    loss: &LossConfig,
    images: &[&Image],
    labels: &[usize],
    p: &TransformParams,
    eta: &[f64; PSI_LEN],
    bounds: &ParamBounds,
) -> Result<AscentStep, AdversaryError> {
    let (value, grad) = warped_loss(model, loss, images, labels, p, true)?;
    let grad = grad.expect("requested");
    let active = p.active();
    if !value.is_finite() || active.iter().any(|&k| !grad[k].is_finite()) {
        log::warn!("non-finite adversary gradient; keeping ψ");
        return Ok(AscentStep {
            params: p.clone(),
            loss_before: value,
            gradient: grad,
            skipped: true,
        });
    }
    let mut a = p.to_array();
    for &k in active {
        a[k] += eta[k] * sign(grad[k]);
    }
    Ok(AscentStep {
        params: project(&p.with_array(a), bounds),
        loss_before: value,
        gradient: grad,
        skipped: false,
    })
}

pub fn ascent_step<T: Scalar>(
    model: &ModelState<T>,
    loss: &LossConfig,
    x: &Image,
    y: usize,
    p: &TransformParams,
    eta: &[f64; PSI_LEN],
    bounds: &ParamBounds,
) -> Result<AscentStep, AdversaryError> {
    ascent_step_batch(model, loss, &[x], &[y], p, eta, bounds)
}

/// ψ and loss after each of the `K` steps, starting with the sampled ψ0.
#[derive(Clone, Debug, Serialize)]
pub struct SearchTrace {
    pub params: Vec<TransformParams>,
    pub losses: Vec<f64>,
}

impl SearchTrace {
    pub fn initial(&self) -> &TransformParams {
        &self.params[0]
    }

    pub fn best(&self) -> &TransformParams {
        self.params.last().expect("trace holds ψ0")
    }

    pub fn gain(&self) -> f64 {
        self.losses.last().expect("trace holds ψ0") - self.losses[0]
    }
}

/// Sample ψ0 and run `K` ascent steps against a shared-ψ batch.
#[allow(clippy::too_many_arguments)]
pub fn search_batch<T: Scalar, R: Rng + ?Sized>(
    model: &ModelState<T>,
    loss: &LossConfig,
    images: &[&Image],
    labels: &[usize],
    kind: WarpKind,
    cfg: &AdvConfig,
    bounds: &ParamBounds,
    rng: &mut R,
) -> Result<SearchTrace, AdversaryError> {
    let (h, w) = match images.first() {
        Some(img) => (img.height(), img.width()),
        None => {
            return Err(AdversaryError::Batch {
                images: 0,
                labels: labels.len(),
            })
        }
    };
    let eta = cfg.eta(bounds);
    let mut p = sample_params(rng, cfg, bounds, kind, h, w);
    let mut params = vec![p.clone()];
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let step = ascent_step_batch(model, loss, images, labels, &p, &eta, bounds)?;
        losses.push(step.loss_before);
        p = step.params;
        params.push(p.clone());
    }
    losses.push(warped_batch_loss(model, loss, images, labels, &p)?);
    Ok(SearchTrace { params, losses })
}

#[allow(clippy::too_many_arguments)]
pub fn search<T: Scalar, R: Rng + ?Sized>(
    model: &ModelState<T>,
    loss: &LossConfig,
    x: &Image,
    y: usize,
    kind: WarpKind,
    cfg: &AdvConfig,
    bounds: &ParamBounds,
    rng: &mut R,
) -> Result<SearchTrace, AdversaryError> {
    search_batch(model, loss, &[x], &[y], kind, cfg, bounds, rng)
}
