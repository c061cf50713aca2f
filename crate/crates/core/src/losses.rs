//! Additive angular margin loss, the global/local consistency loss and the
//! combined objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Graph, NodeId, Scalar, Tensor};

/// Target cosines are kept this far inside `[-1, 1]` before the margin.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("target {target} out of range for {classes} classes")]
    Target { target: usize, classes: usize },
    #[error("batch size mismatch: {global} global vs {local} local embeddings")]
    BatchMismatch { global: usize, local: usize },
    #[error("contrastive loss of an empty batch")]
    EmptyBatch,
    #[error("embedding {index} has length {found}, expected {expected}")]
    EmbeddingDims {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("{component} is not finite ({value})")]
    NonFinite { component: &'static str, value: f64 },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Additive angular margin, radians.
    pub margin: f64,
    pub scale: f64,
    pub lambda_cont: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            scale: 16.0,
            lambda_cont: 0.7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(LossError::Config(format!("margin {} outside [0, π/2)", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(LossError::Config(format!("scale {} must be positive", self.scale)));
        }
        if !(self.lambda_cont >= 0.0 && self.lambda_cont.is_finite()) {
            return Err(LossError::Config(format!(
                "lambda_cont {} must be ≥ 0",
                self.lambda_cont
            )));
        }
        Ok(())
    }
}

/// Record the margin loss of the `[I]` cosine node `logits` for class
/// `target`.
pub fn angular_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    target: usize,
    margin: f64,
    scale: f64,
) -> Result<NodeId, LossError> {
    let classes = g.value(logits)?.len();
    if target >= classes {
        return Err(LossError::Target { target, classes });
    }
    let c = g.pick(logits, target)?;
    let cc = g.clamp(c, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)?;
    // Past θ = π − m, cos(θ + m) turns back up; use cos θ − m·sin m there.
    // The branch is fixed from the value at record time.
    let shifted = if g.value(cc)?.item().to_f64_lossy() > (std::f64::consts::PI - margin).cos() {
        let c2 = g.square(cc)?;
        let one_minus = g.scale(c2, -1.0)?;
        let one_minus = g.offset(one_minus, 1.0)?;
        let sin = g.sqrt(one_minus)?;
        let a = g.scale(cc, margin.cos())?;
        let b = g.scale(sin, margin.sin())?;
        g.sub(a, b)?
    } else {
        g.offset(cc, -margin * margin.sin())?
    };
    let delta = g.sub(shifted, c)?;
    let adjusted = g.add_at(logits, target, delta)?;
    let scaled = g.scale(adjusted, scale)?;
    Ok(g.softmax_cross_entropy(scaled, target)?)
}

/// Scalar margin loss of a cosine vector.
pub fn angular_loss(logits: &[f64], target: usize, margin: f64, scale: f64) -> Result<f64, LossError> {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::vector(logits.to_vec()));
    let out = angular_loss_graph(&mut g, l, target, margin, scale)?;
    Ok(g.value(out)?.item())
}

/// `1 − cos(a, b)` for one aligned pair on the tape.
pub fn contrastive_pair_graph<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId, LossError> {
    let cos = g.cosine_similarity(a, b)?;
    let neg = g.scale(cos, -1.0)?;
    Ok(g.offset(neg, 1.0)?)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::model::NORM_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::model::NORM_EPS);
    dot / (na * nb)
}

/// `1 − mean_i cos(global_i, local_i)`.
pub fn contrastive_loss(global: &[Vec<f64>], local: &[Vec<f64>]) -> Result<f64, LossError> {
    if global.len() != local.len() {
        return Err(LossError::BatchMismatch {
            global: global.len(),
            local: local.len(),
        });
    }
    if global.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let d = global[0].len();
    let mut total = 0.0;
    for (index, (a, b)) in global.iter().zip(local).enumerate() {
        for v in [a, b] {
            if v.len() != d {
                return Err(LossError::EmbeddingDims {
                    index,
                    expected: d,
                    found: v.len(),
                });
            }
        }
        total += cosine(a, b);
    }
    Ok(1.0 - total / global.len() as f64)
}

/// `L_clean + L_trans + λ·L_cont`.
pub fn total_loss(clean: f64, trans: f64, cont: f64, lambda_cont: f64) -> Result<f64, LossError> {
    for (component, value) in [
        ("L_clean", clean),
        ("L_trans", trans),
        ("L_cont", cont),
        ("lambda_cont", lambda_cont),
    ] {
        if !value.is_finite() {
            return Err(LossError::NonFinite { component, value });
        }
    }
    Ok(clean + trans + lambda_cont * cont)
}
