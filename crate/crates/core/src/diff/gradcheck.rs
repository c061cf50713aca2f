//! Central finite-difference checks of the analytic backward rules.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ops::tent_taps;
use super::{DiffError, Graph, NodeId, Tensor};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Floor on the relative-error denominator, so that gradients that are
/// (analytically) zero are compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

/// Distance from a kink below which a sample component is moved.
const KINK_GUARD: f64 = 1e-3;

/// Every primitive with a backward rule on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Offset,
    MatMul,
    Conv2d,
    AvgPool2d,
    Relu,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Square,
    Sum,
    Mean,
    L2Normalize,
    Dot,
    CosineSimilarity,
    Clamp,
    SoftmaxCrossEntropy,
    GridSample,
    Reshape,
    Pick,
    AddAt,
    StackLast,
}

impl Primitive {
    pub const ALL: [Primitive; 28] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::Scale,
        Primitive::Offset,
        Primitive::MatMul,
        Primitive::Conv2d,
        Primitive::AvgPool2d,
        Primitive::Relu,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Sqrt,
        Primitive::Sin,
        Primitive::Cos,
        Primitive::Square,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::L2Normalize,
        Primitive::Dot,
        Primitive::CosineSimilarity,
        Primitive::Clamp,
        Primitive::SoftmaxCrossEntropy,
        Primitive::GridSample,
        Primitive::Reshape,
        Primitive::Pick,
        Primitive::AddAt,
        Primitive::StackLast,
    ];

    /// Name used by the tape for this primitive's node.
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale => "scale",
            Primitive::Offset => "offset",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d => "conv2d",
            Primitive::AvgPool2d => "avgpool2d",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Square => "square",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::L2Normalize => "l2_normalize",
            Primitive::Dot => "dot",
            Primitive::CosineSimilarity => "cosine_similarity",
            Primitive::Clamp => "clamp",
            Primitive::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Primitive::GridSample => "grid_sample",
            Primitive::Reshape => "reshape",
            Primitive::Pick => "pick",
            Primitive::AddAt => "add_at",
            Primitive::StackLast => "stack_last",
        }
    }

    /// A representative primary operand for random sampling.
    pub fn sample_dims(self) -> Vec<usize> {
        match self {
            Primitive::MatMul => vec![3, 4],
            Primitive::Conv2d => vec![8, 8, 2],
            Primitive::AvgPool2d => vec![4, 6, 2],
            Primitive::GridSample => vec![3, 3, 2],
            Primitive::L2Normalize | Primitive::CosineSimilarity => vec![3, 5],
            Primitive::Dot | Primitive::SoftmaxCrossEntropy | Primitive::AddAt => vec![6],
            Primitive::Reshape => vec![2, 6],
            _ => vec![2, 5],
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = DiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_").to_ascii_lowercase();
        let alias = match norm.as_str() {
            "softmax_ce" | "softmaxce" => "softmax_cross_entropy",
            "bilinear_grid_sample" | "grid_sample" | "gridsample" => "grid_sample",
            "avg_pool2d" | "avgpool" => "avgpool2d",
            "cosine" | "cos_sim" => "cosine_similarity",
            "normalize" => "l2_normalize",
            "elementwise_multiply" | "multiply" => "mul",
            "subtract" => "sub",
            "scalar_scale" => "scale",
            "matrix_multiply" => "matmul",
            "exponent" => "exp",
            "logarithm" => "log",
            other => other,
        };
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == alias)
            .ok_or_else(|| DiffError::UnknownPrimitive(s.to_string()))
    }
}

/// Result of one finite-difference comparison.
#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub primitive: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub components: usize,
    pub pass: bool,
    /// Resampling notes for components that sat on a non-differentiable locus.
    pub notes: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOutcome {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub components: usize,
}

/// Compare the analytic gradient of `output` with central differences for
/// every component of every listed input.
///
/// The step actually taken is recovered as `(x + h) - x` so representation
/// error in the perturbed coordinate does not leak into the quotient.
pub fn check_graph(
    graph: &mut Graph<f64>,
    output: NodeId,
    inputs: &[NodeId],
    step: f64,
) -> Result<GradCheckOutcome, DiffError> {
    let grads = graph.backward(output)?;
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut components = 0;
    for &id in inputs {
        let base = graph.value(id)?.clone();
        let analytic = grads.get(id).ok_or(DiffError::NotAnInput { node: id.index() })?.clone();
        for k in 0..base.len() {
            let x = base.data()[k];
            let mut plus = base.clone();
            plus.data_mut()[k] = x + step;
            let mut minus = base.clone();
            minus.data_mut()[k] = x - step;
            let width = plus.data()[k] - minus.data()[k];
            let fp = graph.evaluate(output, &[(id, plus)])?.item();
            let fm = graph.evaluate(output, &[(id, minus)])?.item();
            let numeric = (fp - fm) / width;
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            components += 1;
        }
        graph.evaluate(output, &[(id, base)])?;
    }
    Ok(GradCheckOutcome {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        components,
    })
}

/// Configurable finite-difference harness for single primitives.
#[derive(Clone, Debug)]
pub struct GradChecker {
    /// Seeds the auxiliary operands and probe weights.
    pub seed: u64,
    pub tolerance: f64,
    /// Source image extent for grid-sample checks.
    pub grid: (usize, usize),
    /// Negative control: corrupt this primitive's backward rule.
    pub fault: Option<String>,
}

impl Default for GradChecker {
    fn default() -> Self {
        Self {
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            grid: (4, 4),
            fault: None,
        }
    }
}

/// Check one primitive at `sample` with the default harness.
pub fn gradcheck(primitive: Primitive, sample: &Tensor<f64>, step: f64) -> Result<GradcheckReport, DiffError> {
    GradChecker::default().check(primitive, sample, step)
}

fn random_like(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("dims and data agree")
}

/// Random magnitude in `[lo, hi)` with random sign.
fn signed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let m = rng.gen_range(lo..hi);
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

impl GradChecker {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Move components of `sample` that sit on a kink of `primitive`.
    fn resample(&self, primitive: Primitive, sample: &mut Tensor<f64>, rng: &mut ChaCha8Rng, notes: &mut Vec<String>) {
        let (gh, gw) = self.grid;
        let dims = sample.dims().to_vec();
        let data = sample.data_mut();
        match primitive {
            Primitive::Relu => {
                for (i, v) in data.iter_mut().enumerate() {
                    if v.abs() < KINK_GUARD {
                        let nv = signed(rng, 0.05, 0.5);
                        notes.push(format!("relu component {i} at {v} is on the kink; resampled to {nv}"));
                        *v = nv;
                    }
                }
            }
            Primitive::Clamp => {
                for (i, v) in data.iter_mut().enumerate() {
                    if (v.abs() - CLAMP_BOUND).abs() < KINK_GUARD {
                        let nv = *v + signed(rng, 0.05, 0.2);
                        notes.push(format!("clamp component {i} at {v} is on a bound; resampled to {nv}"));
                        *v = nv;
                    }
                }
            }
            Primitive::Log | Primitive::Sqrt => {
                for (i, v) in data.iter_mut().enumerate() {
                    if *v < KINK_GUARD {
                        let nv = v.abs() + 0.1;
                        notes.push(format!(
                            "{} component {i} at {v} is outside the domain; resampled to {nv}",
                            primitive.name()
                        ));
                        *v = nv;
                    }
                }
            }
            Primitive::GridSample if dims.last() == Some(&2) => {
                for p in 0..data.len() / 2 {
                    let (i0, j0, fy, fx) = tent_taps(data[2 * p], data[2 * p + 1], gh, gw);
                    let _ = (i0, j0);
                    let near = |f: f64| f < KINK_GUARD || f > 1.0 - KINK_GUARD;
                    if near(fx) {
                        let nv = data[2 * p] + rng.gen_range(0.1..0.4);
                        notes.push(format!(
                            "grid_sample u={} of point {p} lies on a grid line; resampled to {nv}",
                            data[2 * p]
                        ));
                        data[2 * p] = nv;
                    }
                    if near(fy) {
                        let nv = data[2 * p + 1] + rng.gen_range(0.1..0.4);
                        notes.push(format!(
                            "grid_sample v={} of point {p} lies on a grid line; resampled to {nv}",
                            data[2 * p + 1]
                        ));
                        data[2 * p + 1] = nv;
                    }
                }
            }
            _ => {}
        }
    }

    /// Check `primitive` with `sample` as its primary operand. Auxiliary
    /// operands are drawn from the harness seed and are checked as well.
    pub fn check(&self, primitive: Primitive, sample: &Tensor<f64>, step: f64) -> Result<GradcheckReport, DiffError> {
        if !sample.is_finite() {
            return Err(DiffError::NonFinite {
                node: 0,
                op: "gradcheck sample",
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut notes = Vec::new();
        let mut x = sample.clone();
        self.resample(primitive, &mut x, &mut rng, &mut notes);
        let dims = x.dims().to_vec();
        let shape_err = |detail: &str| DiffError::Shape {
            node: 0,
            op: primitive.name(),
            detail: format!("gradcheck sample {dims:?}: {detail}"),
        };

        let mut g = Graph::new();
        if let Some(f) = &self.fault {
            g.inject_fault(f);
        }
        let xi = g.input(x.clone());
        let mut inputs = vec![xi];
        let out = match primitive {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
                let b = if primitive == Primitive::Div {
                    let n: usize = dims.iter().product();
                    Tensor::new(dims.clone(), (0..n).map(|_| signed(&mut rng, 0.5, 1.5)).collect())?
                } else {
                    random_like(&mut rng, &dims, -1.0, 1.0)
                };
                let bi = g.input(b);
                inputs.push(bi);
                match primitive {
                    Primitive::Add => g.add(xi, bi)?,
                    Primitive::Sub => g.sub(xi, bi)?,
                    Primitive::Mul => g.mul(xi, bi)?,
                    _ => g.div(xi, bi)?,
                }
            }
            Primitive::Scale => g.scale(xi, 1.7)?,
            Primitive::Offset => g.offset(xi, 0.3)?,
            Primitive::MatMul => {
                if dims.len() != 2 {
                    return Err(shape_err("matmul needs a matrix"));
                }
                let b = g.input(random_like(&mut rng, &[dims[1], 3], -1.0, 1.0));
                inputs.push(b);
                g.matmul(xi, b)?
            }
            Primitive::Conv2d => {
                if dims.len() != 3 {
                    return Err(shape_err("conv2d needs [H, W, C]"));
                }
                let k = g.input(random_like(&mut rng, &[3, 3, dims[2], 2], -1.0, 1.0));
                inputs.push(k);
                g.conv2d(xi, k, 1)?
            }
            Primitive::AvgPool2d => g.avg_pool2d(xi, 2)?,
            Primitive::Relu => g.relu(xi)?,
            Primitive::Exp => g.exp(xi)?,
            Primitive::Log => g.log(xi)?,
            Primitive::Sqrt => g.sqrt(xi)?,
            Primitive::Sin => g.sin(xi)?,
            Primitive::Cos => g.cos(xi)?,
            Primitive::Square => g.square(xi)?,
            Primitive::Sum => g.sum(xi)?,
            Primitive::Mean => g.mean(xi)?,
            Primitive::L2Normalize => g.l2_normalize(xi, 1e-8)?,
            Primitive::Dot => {
                let b = g.input(random_like(&mut rng, &dims, -1.0, 1.0));
                inputs.push(b);
                g.dot(xi, b)?
            }
            Primitive::CosineSimilarity => {
                let b = g.input(random_like(&mut rng, &dims, -1.0, 1.0));
                inputs.push(b);
                g.cosine_similarity(xi, b)?
            }
            Primitive::Clamp => g.clamp(xi, -CLAMP_BOUND, CLAMP_BOUND)?,
            Primitive::SoftmaxCrossEntropy => {
                let n = x.len();
                g.softmax_cross_entropy(xi, n / 2)?
            }
            Primitive::GridSample => {
                let (gh, gw) = self.grid;
                let img = g.input(random_like(&mut rng, &[gh, gw, 2], 0.0, 1.0));
                inputs.insert(0, img);
                g.grid_sample(img, xi)?
            }
            Primitive::Reshape => {
                let n = x.len();
                g.reshape(xi, &[n])?
            }
            Primitive::Pick => {
                let n = x.len();
                g.pick(xi, n - 1)?
            }
            Primitive::AddAt => {
                let s = g.input(Tensor::scalar(rng.gen_range(-1.0..1.0)));
                inputs.push(s);
                g.add_at(xi, 0, s)?
            }
            Primitive::StackLast => {
                let b = g.input(random_like(&mut rng, &dims, -1.0, 1.0));
                inputs.push(b);
                g.stack_last(xi, b)?
            }
        };
        let out_dims = g.value(out)?.dims().to_vec();
        let n: usize = out_dims.iter().product();
        let weights = Tensor::new(out_dims, (0..n).map(|_| signed(&mut rng, 0.5, 1.5)).collect())?;
        let w = g.constant(weights);
        let probe = g.mul(out, w)?;
        let loss = g.sum(probe)?;
        let outcome = check_graph(&mut g, loss, &inputs, step)?;
        Ok(GradcheckReport {
            primitive: primitive.name().to_string(),
            max_rel_error: outcome.max_rel_error,
            max_abs_error: outcome.max_abs_error,
            components: outcome.components,
            pass: outcome.max_rel_error < self.tolerance,
            notes,
        })
    }

    /// Draw a random smooth-locus sample for `primitive` and check it.
    pub fn check_random(&self, primitive: Primitive, step: f64) -> Result<GradcheckReport, DiffError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let dims = primitive.sample_dims();
        let sample = match primitive {
            Primitive::GridSample => {
                let (gh, gw) = self.grid;
                let (hu, hv) = ((gw as f64 + 1.0) / 2.0, (gh as f64 + 1.0) / 2.0);
                let n = dims[0] * dims[1];
                let mut data = Vec::with_capacity(2 * n);
                for _ in 0..n {
                    data.push(rng.gen_range(-hu..hu));
                    data.push(rng.gen_range(-hv..hv));
                }
                Tensor::new(dims, data)?
            }
            Primitive::Log | Primitive::Sqrt => random_like(&mut rng, &dims, 0.2, 2.0),
            _ => random_like(&mut rng, &dims, -1.0, 1.0),
        };
        self.check(primitive, &sample, step)
    }
}

const CLAMP_BOUND: f64 = 0.5;
