//! The full finite-difference suite: every tape primitive, each warp
//! parameter through the sampler, and both loss graphs.

use rand::Rng;
use serde::Serialize;

use crate::diff::{check_graph, DiffError, GradChecker, Graph, Primitive, Tensor};
use crate::geometry::{psi_tensor, warp_graph, ControlPointSet, GeometryError, TransformParams, WarpKind};
use crate::losses::{angular_loss_graph, contrastive_pair_graph, LossError};
use crate::seeds;

pub const WARP_PARAMS: [&str; 6] = ["phi", "du", "dv", "lambda", "alpha", "sigma"];

#[derive(Clone, Debug, Serialize)]
pub struct SuiteConfig {
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Only checks whose name contains this string.
    pub filter: Option<String>,
    /// Corrupt this primitive's backward rule everywhere.
    pub fault: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            step: 1e-6,
            tolerance: 1e-3,
            seed: 0,
            filter: None,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub samples: usize,
    pub max_rel_error: f64,
    pub failing_samples: Vec<u64>,
    pub pass: bool,
}

fn warp_check_names() -> Vec<String> {
    WARP_PARAMS.iter().map(|p| format!("warp.{p}")).collect()
}

pub fn check_names() -> Vec<String> {
    let mut out: Vec<String> = Primitive::ALL.iter().map(|p| p.name().to_string()).collect();
    out.extend(warp_check_names());
    out.push("loss.angular".into());
    out.push("loss.contrastive".into());
    out
}

fn summarize(name: String, tolerance: f64, errors: Vec<(u64, f64)>) -> CheckSummary {
    let failing: Vec<u64> = errors
        .iter()
        .filter(|(_, e)| !(*e < tolerance))
        .map(|(s, _)| *s)
        .collect();
    CheckSummary {
        samples: errors.len(),
        max_rel_error: errors.iter().map(|(_, e)| *e).fold(0.0, f64::max),
        pass: failing.is_empty() && !errors.is_empty(),
        failing_samples: failing,
        name,
    }
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
    let data = (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(vec![h, w, c], data).expect("dims match")
}

/// Relative errors of d(probe·warp(x; ψ))/dψ_k for each of the six
/// parameters at one random draw.
fn warp_sample(seed: u64, cfg: &SuiteConfig) -> Result<[f64; 6], GeometryError> {
    let mut rng = seeds::rng(seed, &[0x77]);
    let (h, w) = (9, 8);
    let img = random_image(&mut rng, h, w, 2);
    let weights = random_image(&mut rng, h, w, 2).map(|v| 2.0 * v - 1.0);
    let mut errs = [0.0; 6];
    for kind in [WarpKind::Global, WarpKind::Local] {
        let mut p = TransformParams {
            phi: rng.gen_range(-0.35..0.35),
            du: rng.gen_range(-3.0..3.0),
            dv: rng.gen_range(-3.0..3.0),
            lambda: rng.gen_range(0.85..1.15),
            alpha: rng.gen_range(0.5..4.0),
            sigma: rng.gen_range(1.5..5.0),
            ..TransformParams::identity(kind)
        };
        if kind == WarpKind::Local {
            p.affine = ControlPointSet::sample(&mut rng, 0.25, h, w).fitted;
        }
        let mut g = Graph::<f64>::new();
        if let Some(f) = &cfg.fault {
            g.inject_fault(f);
        }
        let x = g.constant(img.clone());
        let psi = g.input(psi_tensor(&p));
        let y = warp_graph(&mut g, x, psi, &p)?;
        let wn = g.constant(weights.clone());
        let prod = g.mul(y, wn)?;
        let out = g.sum(prod)?;
        let analytic = g
            .backward(out)?
            .get(psi)
            .cloned()
            .ok_or(DiffError::NotAnInput { node: psi.index() })?;
        let base = psi_tensor::<f64>(&p);
        for &k in p.active() {
            let mut plus = base.clone();
            plus.data_mut()[k] += cfg.step;
            let mut minus = base.clone();
            minus.data_mut()[k] -= cfg.step;
            let width = plus.data()[k] - minus.data()[k];
            let fp = g.evaluate(out, &[(psi, plus)])?.item();
            let fm = g.evaluate(out, &[(psi, minus)])?.item();
            let numeric = (fp - fm) / width;
            let a = analytic.data()[k];
            errs[k] = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        }
    }
    Ok(errs)
}

fn loss_sample(seed: u64, cfg: &SuiteConfig) -> Result<(f64, f64), LossError> {
    let mut rng = seeds::rng(seed, &[0x78]);
    let classes = 5;
    let logits: Vec<f64> = (0..classes).map(|_| rng.gen_range(-0.95..0.95)).collect();
    let mut g = Graph::<f64>::new();
    if let Some(f) = &cfg.fault {
        g.inject_fault(f);
    }
    let x = g.input(Tensor::vector(logits));
    let out = angular_loss_graph(&mut g, x, rng.gen_range(0..classes), 0.3, 4.0)?;
    let angular = check_graph(&mut g, out, &[x], cfg.step)?.max_rel_error;

    let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::<f64>::new();
    if let Some(f) = &cfg.fault {
        g.inject_fault(f);
    }
    let an = g.input(Tensor::vector(a));
    let bn = g.input(Tensor::vector(b));
    let out = contrastive_pair_graph(&mut g, an, bn)?;
    let contrastive = check_graph(&mut g, out, &[an, bn], cfg.step)?.max_rel_error;
    Ok((angular, contrastive))
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error("no gradient check matches `{0}`")]
    NoMatch(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Run every check selected by `cfg.filter`, `cfg.samples` draws each.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckSummary>, SuiteError> {
    let wanted = |name: &str| cfg.filter.as_deref().is_none_or(|f| name.contains(f));
    if !check_names().iter().any(|n| wanted(n)) {
        return Err(SuiteError::NoMatch(cfg.filter.clone().unwrap_or_default()));
    }
    let seeds: Vec<u64> = (0..cfg.samples as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let mut out = Vec::new();
    for prim in Primitive::ALL {
        if !wanted(prim.name()) {
            continue;
        }
        let mut errors = Vec::new();
        for &s in &seeds {
            let checker = GradChecker {
                seed: s,
                tolerance: cfg.tolerance,
                fault: cfg.fault.clone(),
                ..GradChecker::default()
            };
            errors.push((s, checker.check_random(prim, cfg.step)?.max_rel_error));
        }
        out.push(summarize(prim.name().to_string(), cfg.tolerance, errors));
    }
    let warp_names = warp_check_names();
    if warp_names.iter().any(|n| wanted(n)) {
        let per_seed = seeds
            .iter()
            .map(|&s| warp_sample(s, cfg).map(|e| (s, e)))
            .collect::<Result<Vec<_>, _>>()?;
        for (k, name) in warp_names.into_iter().enumerate() {
            if wanted(&name) {
                let errors = per_seed.iter().map(|(s, e)| (*s, e[k])).collect();
                out.push(summarize(name, cfg.tolerance, errors));
            }
        }
    }
    if wanted("loss.angular") || wanted("loss.contrastive") {
        let per_seed = seeds
            .iter()
            .map(|&s| loss_sample(s, cfg).map(|e| (s, e)))
            .collect::<Result<Vec<_>, _>>()?;
        if wanted("loss.angular") {
            out.push(summarize(
                "loss.angular".into(),
                cfg.tolerance,
                per_seed.iter().map(|(s, e)| (*s, e.0)).collect(),
            ));
        }
        if wanted("loss.contrastive") {
            out.push(summarize(
                "loss.contrastive".into(),
                cfg.tolerance,
                per_seed.iter().map(|(s, e)| (*s, e.1)).collect(),
            ));
        }
    }
    Ok(out)
}
