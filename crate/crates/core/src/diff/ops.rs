//! Forward and backward rules for every primitive on the tape.
//!
//! Images and feature maps are channels-last: `[H, W, C]`. Convolution
//! kernels are `[kh, kw, C_in, C_out]`.

use super::tensor::{Scalar, Tensor};
use super::DiffError;

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Input,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Offset(f64),
    MatMul,
    Conv2d { pad: usize },
    AvgPool2d { size: usize },
    Relu,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Square,
    Sum,
    Mean,
    L2Normalize { eps: f64 },
    Dot,
    CosineSimilarity { eps: f64 },
    Clamp { lo: f64, hi: f64 },
    SoftmaxCrossEntropy { target: usize },
    GridSample,
    Reshape(Vec<usize>),
    Pick(usize),
    AddAt(usize),
    StackLast,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Dot => "dot",
            Op::CosineSimilarity { .. } => "cosine_similarity",
            Op::Clamp { .. } => "clamp",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::GridSample => "grid_sample",
            Op::Reshape(_) => "reshape",
            Op::Pick(_) => "pick",
            Op::AddAt(_) => "add_at",
            Op::StackLast => "stack_last",
        }
    }
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn shape_err(node: usize, op: &Op, detail: impl Into<String>) -> DiffError {
    DiffError::Shape {
        node,
        op: op.name(),
        detail: detail.into(),
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy)]
enum Broadcast {
    /// Right operand holds one element.
    Scalar,
    /// Right operand repeats over blocks of `block` elements.
    Suffix { block: usize },
}

fn broadcast_mode<T: Scalar>(node: usize, op: &Op, a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast, DiffError> {
    if b.len() == 1 {
        return Ok(Broadcast::Scalar);
    }
    if a.dims().ends_with(b.dims()) {
        return Ok(Broadcast::Suffix { block: b.len() });
    }
    Err(shape_err(
        node,
        op,
        format!("cannot broadcast {:?} onto {:?}", b.dims(), a.dims()),
    ))
}

fn binary_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = match mode {
        Broadcast::Scalar => {
            let s = b.data()[0];
            a.data().iter().map(|&x| f(x, s)).collect()
        }
        Broadcast::Suffix { block } => a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % block]))
            .collect(),
    };
    Tensor::new(a.dims().to_vec(), data).expect("same dims as lhs")
}

/// Sum a full-size gradient back onto the broadcast right operand.
fn reduce_to<T: Scalar>(full: Vec<T>, b: &Tensor<T>, mode: Broadcast) -> Tensor<T> {
    match mode {
        Broadcast::Scalar => {
            let s: T = full.into_iter().sum();
            Tensor::new(b.dims().to_vec(), vec![s]).expect("one element")
        }
        Broadcast::Suffix { block } => {
            let mut out = vec![T::zero(); block];
            for (i, v) in full.into_iter().enumerate() {
                out[i % block] = out[i % block] + v;
            }
            Tensor::new(b.dims().to_vec(), out).expect("block sized")
        }
    }
}

fn bcast_get<T: Scalar>(b: &Tensor<T>, mode: Broadcast, i: usize) -> T {
    match mode {
        Broadcast::Scalar => b.data()[0],
        Broadcast::Suffix { block } => b.data()[i % block],
    }
}

fn unary<T: Scalar>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    a.map(f)
}

fn rows<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let d = t.dims().last().copied().unwrap_or(1);
    let d = d.max(1);
    (t.len() / d, d)
}

fn norm<T: Scalar>(r: &[T]) -> T {
    r.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Bilinear tap positions for a centered coordinate on an `h`×`w` grid.
///
/// Returns `(i0, j0, fy, fx)` where `(i0, j0)` is the upper-left neighbour
/// in pixel indices and `fy`, `fx` are the fractional offsets.
#[inline]
pub(crate) fn tent_taps<T: Scalar>(u: T, v: T, h: usize, w: usize) -> (isize, isize, T, T) {
    let half_w = c::<T>((w as f64 - 1.0) / 2.0);
    let half_h = c::<T>((h as f64 - 1.0) / 2.0);
    let x = u + half_w;
    let y = half_h - v;
    let xf = x.floor();
    let yf = y.floor();
    let j0 = xf.to_isize().unwrap_or(isize::MIN / 2);
    let i0 = yf.to_isize().unwrap_or(isize::MIN / 2);
    (i0, j0, y - yf, x - xf)
}

#[inline]
fn in_grid(i: isize, j: isize, h: usize, w: usize) -> bool {
    i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w
}

/// Bilinear sample of a `[H, W, C]` image at centered coordinate `(u, v)`,
/// accumulating into `out` (length `C`). Outside taps contribute zero.
pub(crate) fn sample_into<T: Scalar>(img: &[T], h: usize, w: usize, ch: usize, u: T, v: T, out: &mut [T]) {
    let (i0, j0, fy, fx) = tent_taps(u, v, h, w);
    let one = T::one();
    let taps = [
        (i0, j0, (one - fy) * (one - fx)),
        (i0, j0 + 1, (one - fy) * fx),
        (i0 + 1, j0, fy * (one - fx)),
        (i0 + 1, j0 + 1, fy * fx),
    ];
    for (i, j, wt) in taps {
        if wt == T::zero() || !in_grid(i, j, h, w) {
            continue;
        }
        let base = (i as usize * w + j as usize) * ch;
        for k in 0..ch {
            out[k] = out[k] + wt * img[base + k];
        }
    }
}

pub(crate) fn forward<T: Scalar>(node: usize, op: &Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, DiffError> {
    let out = match op {
        Op::Input | Op::Constant => unreachable!("leaves are not computed"),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let mode = broadcast_mode(node, op, a, b)?;
            match op {
                Op::Add => binary_map(a, b, mode, |x, y| x + y),
                Op::Sub => binary_map(a, b, mode, |x, y| x - y),
                Op::Mul => binary_map(a, b, mode, |x, y| x * y),
                _ => binary_map(a, b, mode, |x, y| x / y),
            }
        }
        Op::Scale(s) => {
            let s = c::<T>(*s);
            unary(inputs[0], |x| x * s)
        }
        Op::Offset(s) => {
            let s = c::<T>(*s);
            unary(inputs[0], |x| x + s)
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.dims().len() != 2 || b.dims().len() != 2 || a.dims()[1] != b.dims()[0] {
                return Err(shape_err(node, op, format!("{:?} x {:?}", a.dims(), b.dims())));
            }
            let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a.data()[i * k + p];
                    let brow = &b.data()[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
            Tensor::new(vec![m, n], out)?
        }
        Op::Conv2d { pad } => conv2d_forward(node, op, inputs[0], inputs[1], *pad)?,
        Op::AvgPool2d { size } => {
            let x = inputs[0];
            let s = *size;
            if x.dims().len() != 3 || s == 0 || x.dims()[0] % s != 0 || x.dims()[1] % s != 0 {
                return Err(shape_err(node, op, format!("pool {s} over {:?}", x.dims())));
            }
            let (h, w, ch) = (x.dims()[0], x.dims()[1], x.dims()[2]);
            let (ho, wo) = (h / s, w / s);
            let inv = c::<T>(1.0 / (s * s) as f64);
            let mut out = vec![T::zero(); ho * wo * ch];
            for y in 0..h {
                for xx in 0..w {
                    let src = &x.data()[(y * w + xx) * ch..(y * w + xx + 1) * ch];
                    let o = ((y / s) * wo + xx / s) * ch;
                    for k in 0..ch {
                        out[o + k] = out[o + k] + src[k] * inv;
                    }
                }
            }
            Tensor::new(vec![ho, wo, ch], out)?
        }
        Op::Relu => unary(inputs[0], |x| if x > T::zero() { x } else { T::zero() }),
        Op::Exp => unary(inputs[0], T::exp),
        Op::Log => unary(inputs[0], T::ln),
        Op::Sqrt => unary(inputs[0], T::sqrt),
        Op::Sin => unary(inputs[0], T::sin),
        Op::Cos => unary(inputs[0], T::cos),
        Op::Square => unary(inputs[0], |x| x * x),
        Op::Sum => Tensor::scalar(inputs[0].data().iter().copied().sum()),
        Op::Mean => {
            let a = inputs[0];
            if a.is_empty() {
                return Err(shape_err(node, op, "mean of empty tensor"));
            }
            let s: T = a.data().iter().copied().sum();
            Tensor::scalar(s / c::<T>(a.len() as f64))
        }
        Op::L2Normalize { eps } => {
            let a = inputs[0];
            let (nrows, d) = rows(a);
            let eps = c::<T>(*eps);
            let mut out = a.data().to_vec();
            for r in 0..nrows {
                let row = &mut out[r * d..(r + 1) * d];
                let n = norm(row).max(eps);
                for v in row.iter_mut() {
                    *v = *v / n;
                }
            }
            Tensor::new(a.dims().to_vec(), out)?
        }
        Op::Dot => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.dims() != b.dims() || a.dims().len() != 1 {
                return Err(shape_err(node, op, format!("{:?} . {:?}", a.dims(), b.dims())));
            }
            Tensor::scalar(a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum())
        }
        Op::CosineSimilarity { eps } => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.dims() != b.dims() || a.dims().is_empty() {
                return Err(shape_err(node, op, format!("{:?} vs {:?}", a.dims(), b.dims())));
            }
            let eps = c::<T>(*eps);
            let (nrows, d) = rows(a);
            let mut out = Vec::with_capacity(nrows);
            for r in 0..nrows {
                let ra = &a.data()[r * d..(r + 1) * d];
                let rb = &b.data()[r * d..(r + 1) * d];
                let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                out.push(dot / (norm(ra).max(eps) * norm(rb).max(eps)));
            }
            let dims = a.dims()[..a.dims().len() - 1].to_vec();
            Tensor::new(dims, out)?
        }
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (c::<T>(*lo), c::<T>(*hi));
            unary(inputs[0], |x| x.max(lo).min(hi))
        }
        Op::SoftmaxCrossEntropy { target } => {
            let z = inputs[0];
            if z.dims().len() != 1 || *target >= z.len() {
                return Err(shape_err(
                    node,
                    op,
                    format!("target {target} for logits {:?}", z.dims()),
                ));
            }
            let m = z.data().iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + z.data().iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            Tensor::scalar(lse - z.data()[*target])
        }
        Op::GridSample => {
            let (img, coords) = (inputs[0], inputs[1]);
            if img.dims().len() != 3 || coords.dims().len() != 3 || coords.dims()[2] != 2 {
                return Err(shape_err(
                    node,
                    op,
                    format!("image {:?} coords {:?}", img.dims(), coords.dims()),
                ));
            }
            let (h, w, ch) = (img.dims()[0], img.dims()[1], img.dims()[2]);
            let (ho, wo) = (coords.dims()[0], coords.dims()[1]);
            let mut out = vec![T::zero(); ho * wo * ch];
            for p in 0..ho * wo {
                let (u, v) = (coords.data()[2 * p], coords.data()[2 * p + 1]);
                sample_into(img.data(), h, w, ch, u, v, &mut out[p * ch..(p + 1) * ch]);
            }
            Tensor::new(vec![ho, wo, ch], out)?
        }
        Op::Reshape(dims) => inputs[0]
            .clone()
            .reshaped(dims.clone())
            .map_err(|e| shape_err(node, op, e.to_string()))?,
        Op::Pick(i) => {
            let a = inputs[0];
            if *i >= a.len() {
                return Err(shape_err(node, op, format!("index {i} of {}", a.len())));
            }
            Tensor::scalar(a.data()[*i])
        }
        Op::AddAt(i) => {
            let (a, s) = (inputs[0], inputs[1]);
            if *i >= a.len() || s.len() != 1 {
                return Err(shape_err(
                    node,
                    op,
                    format!("index {i} of {:?} with {:?}", a.dims(), s.dims()),
                ));
            }
            let mut out = a.clone();
            out.data_mut()[*i] = out.data()[*i] + s.data()[0];
            out
        }
        Op::StackLast => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.dims() != b.dims() {
                return Err(shape_err(node, op, format!("{:?} vs {:?}", a.dims(), b.dims())));
            }
            let mut dims = a.dims().to_vec();
            dims.push(2);
            if dims.len() > super::tensor::MAX_AXES {
                return Err(shape_err(node, op, "too many axes"));
            }
            let mut out = Vec::with_capacity(a.len() * 2);
            for (&x, &y) in a.data().iter().zip(b.data()) {
                out.push(x);
                out.push(y);
            }
            Tensor::new(dims, out)?
        }
    };
    if !out.is_finite() {
        return Err(DiffError::NonFinite { node, op: op.name() });
    }
    Ok(out)
}

fn conv2d_forward<T: Scalar>(
    node: usize,
    op: &Op,
    x: &Tensor<T>,
    k: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>, DiffError> {
    if x.dims().len() != 3 || k.dims().len() != 4 || k.dims()[2] != x.dims()[2] {
        return Err(shape_err(
            node,
            op,
            format!("input {:?} kernel {:?}", x.dims(), k.dims()),
        ));
    }
    let (h, w, ci) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (kh, kw, co) = (k.dims()[0], k.dims()[1], k.dims()[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err(node, op, "kernel larger than padded input"));
    }
    let (ho, wo) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    let mut out = vec![T::zero(); ho * wo * co];
    let xd = x.data();
    let kd = k.data();
    for oy in 0..ho {
        for ox in 0..wo {
            let acc = &mut out[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
            for ky in 0..kh {
                let iy = oy + ky;
                if iy < pad || iy - pad >= h {
                    continue;
                }
                let iy = iy - pad;
                for kx in 0..kw {
                    let ix = ox + kx;
                    if ix < pad || ix - pad >= w {
                        continue;
                    }
                    let ix = ix - pad;
                    let xrow = &xd[(iy * w + ix) * ci..(iy * w + ix + 1) * ci];
                    let kbase = (ky * kw + kx) * ci * co;
                    for (cin, &xv) in xrow.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let krow = &kd[kbase + cin * co..kbase + (cin + 1) * co];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a = *a + xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ho, wo, co], out)
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    pad: usize,
    g: &Tensor<T>,
    need_x: bool,
    need_k: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (h, w, ci) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (kh, kw, co) = (k.dims()[0], k.dims()[1], k.dims()[3]);
    let (ho, wo) = (g.dims()[0], g.dims()[1]);
    let mut gx = if need_x { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut gk = if need_k { vec![T::zero(); k.len()] } else { Vec::new() };
    let xd = x.data();
    let kd = k.data();
    for oy in 0..ho {
        for ox in 0..wo {
            let grow = &g.data()[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
            if grow.iter().all(|&v| v == T::zero()) {
                continue;
            }
            for ky in 0..kh {
                let iy = oy + ky;
                if iy < pad || iy - pad >= h {
                    continue;
                }
                let iy = iy - pad;
                for kx in 0..kw {
                    let ix = ox + kx;
                    if ix < pad || ix - pad >= w {
                        continue;
                    }
                    let ix = ix - pad;
                    let xoff = (iy * w + ix) * ci;
                    let kbase = (ky * kw + kx) * ci * co;
                    for cin in 0..ci {
                        let krange = kbase + cin * co..kbase + (cin + 1) * co;
                        if need_x {
                            let krow = &kd[krange.clone()];
                            let s: T = krow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                            gx[xoff + cin] = gx[xoff + cin] + s;
                        }
                        if need_k {
                            let xv = xd[xoff + cin];
                            if xv != T::zero() {
                                for (a, &gv) in gk[krange].iter_mut().zip(grow) {
                                    *a = *a + xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        need_x.then(|| Tensor::new(x.dims().to_vec(), gx).expect("input dims")),
        need_k.then(|| Tensor::new(k.dims().to_vec(), gk).expect("kernel dims")),
    )
}

/// Gradients of the op's inputs given the upstream gradient `g`.
///
/// Entries are `None` where `need[i]` is false.
pub(crate) fn backward<T: Scalar>(
    op: &Op,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    need: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let same = |f: &dyn Fn(usize) -> T| -> Tensor<T> {
        let a = inputs[0];
        Tensor::new(a.dims().to_vec(), (0..a.len()).map(f).collect()).expect("same dims")
    };
    let gd = g.data();
    match op {
        Op::Input | Op::Constant => Vec::new(),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let mode = if b.len() == 1 {
                Broadcast::Scalar
            } else {
                Broadcast::Suffix { block: b.len() }
            };
            let ga = need[0].then(|| match op {
                Op::Add | Op::Sub => g.clone(),
                Op::Mul => same(&|i| gd[i] * bcast_get(b, mode, i)),
                _ => same(&|i| gd[i] / bcast_get(b, mode, i)),
            });
            let gb = need[1].then(|| {
                let full: Vec<T> = match op {
                    Op::Add => gd.to_vec(),
                    Op::Sub => gd.iter().map(|&v| -v).collect(),
                    Op::Mul => (0..a.len()).map(|i| gd[i] * a.data()[i]).collect(),
                    _ => (0..a.len())
                        .map(|i| {
                            let bv = bcast_get(b, mode, i);
                            -gd[i] * a.data()[i] / (bv * bv)
                        })
                        .collect(),
                };
                reduce_to(full, b, mode)
            });
            vec![ga, gb]
        }
        Op::Scale(s) => {
            let s = c::<T>(*s);
            vec![Some(g.map(|v| v * s))]
        }
        Op::Offset(_) => vec![Some(g.clone())],
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
            let ga = need[0].then(|| {
                let mut out = vec![T::zero(); m * k];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b.data()[p * n..(p + 1) * n];
                        out[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    }
                }
                Tensor::new(vec![m, k], out).expect("lhs dims")
            });
            let gb = need[1].then(|| {
                let mut out = vec![T::zero(); k * n];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o = *o + av * gv;
                        }
                    }
                }
                Tensor::new(vec![k, n], out).expect("rhs dims")
            });
            vec![ga, gb]
        }
        Op::Conv2d { pad } => {
            let (gx, gk) = conv2d_backward(inputs[0], inputs[1], *pad, g, need[0], need[1]);
            vec![gx, gk]
        }
        Op::AvgPool2d { size } => {
            let x = inputs[0];
            let s = *size;
            let (w, ch) = (x.dims()[1], x.dims()[2]);
            let wo = w / s;
            let inv = c::<T>(1.0 / (s * s) as f64);
            vec![Some(same(&|i| {
                let k = i % ch;
                let p = i / ch;
                let (y, xx) = (p / w, p % w);
                gd[((y / s) * wo + xx / s) * ch + k] * inv
            }))]
        }
        Op::Relu => {
            let a = inputs[0];
            vec![Some(same(&|i| {
                if a.data()[i] > T::zero() {
                    gd[i]
                } else {
                    T::zero()
                }
            }))]
        }
        Op::Exp => vec![Some(same(&|i| gd[i] * out.data()[i]))],
        Op::Log => vec![Some(same(&|i| gd[i] / inputs[0].data()[i]))],
        Op::Sqrt => vec![Some(same(&|i| gd[i] / (c::<T>(2.0) * out.data()[i])))],
        Op::Sin => vec![Some(same(&|i| gd[i] * inputs[0].data()[i].cos()))],
        Op::Cos => vec![Some(same(&|i| -gd[i] * inputs[0].data()[i].sin()))],
        Op::Square => vec![Some(same(&|i| c::<T>(2.0) * inputs[0].data()[i] * gd[i]))],
        Op::Sum => vec![Some(same(&|_| gd[0]))],
        Op::Mean => {
            let n = c::<T>(inputs[0].len() as f64);
            vec![Some(same(&|_| gd[0] / n))]
        }
        Op::L2Normalize { eps } => {
            let a = inputs[0];
            let (nrows, d) = rows(a);
            let eps = c::<T>(*eps);
            let mut gx = vec![T::zero(); a.len()];
            for r in 0..nrows {
                let range = r * d..(r + 1) * d;
                let n = norm(&a.data()[range.clone()]);
                let y = &out.data()[range.clone()];
                let gr = &gd[range.clone()];
                if n > eps {
                    let yg: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (t, o) in range.enumerate() {
                        gx[o] = (gr[t] - y[t] * yg) / n;
                    }
                } else {
                    for (t, o) in range.enumerate() {
                        gx[o] = gr[t] / eps;
                    }
                }
            }
            vec![Some(Tensor::new(a.dims().to_vec(), gx).expect("same dims"))]
        }
        Op::Dot => {
            let (a, b) = (inputs[0], inputs[1]);
            let s = gd[0];
            vec![need[0].then(|| b.map(|v| v * s)), need[1].then(|| a.map(|v| v * s))]
        }
        Op::CosineSimilarity { eps } => {
            let (a, b) = (inputs[0], inputs[1]);
            let eps = c::<T>(*eps);
            let (nrows, d) = rows(a);
            let mut ga = vec![T::zero(); a.len()];
            let mut gb = vec![T::zero(); b.len()];
            for r in 0..nrows {
                let range = r * d..(r + 1) * d;
                let ra = &a.data()[range.clone()];
                let rb = &b.data()[range.clone()];
                let (na, nb) = (norm(ra), norm(rb));
                let (da, db) = (na.max(eps), nb.max(eps));
                let cs = out.data()[r];
                let gr = gd[r];
                for (t, o) in range.enumerate() {
                    let ta = if na > eps { cs * ra[t] / (da * da) } else { T::zero() };
                    let tb = if nb > eps { cs * rb[t] / (db * db) } else { T::zero() };
                    ga[o] = gr * (rb[t] / (da * db) - ta);
                    gb[o] = gr * (ra[t] / (da * db) - tb);
                }
            }
            vec![
                need[0].then(|| Tensor::new(a.dims().to_vec(), ga).expect("dims")),
                need[1].then(|| Tensor::new(b.dims().to_vec(), gb).expect("dims")),
            ]
        }
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (c::<T>(*lo), c::<T>(*hi));
            let a = inputs[0];
            vec![Some(same(&|i| {
                let x = a.data()[i];
                if x > lo && x < hi {
                    gd[i]
                } else {
                    T::zero()
                }
            }))]
        }
        Op::SoftmaxCrossEntropy { target } => {
            let z = inputs[0];
            let m = z.data().iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = z.data().iter().map(|&v| (v - m).exp()).collect();
            let s: T = e.iter().copied().sum();
            vec![Some(same(&|i| {
                let p = e[i] / s;
                let t = if i == *target { T::one() } else { T::zero() };
                gd[0] * (p - t)
            }))]
        }
        Op::GridSample => {
            let (img, coords) = (inputs[0], inputs[1]);
            let (h, w, ch) = (img.dims()[0], img.dims()[1], img.dims()[2]);
            let (ho, wo) = (coords.dims()[0], coords.dims()[1]);
            let mut gi = if need[0] {
                vec![T::zero(); img.len()]
            } else {
                Vec::new()
            };
            let mut gc = if need[1] {
                vec![T::zero(); coords.len()]
            } else {
                Vec::new()
            };
            let one = T::one();
            let id = img.data();
            for p in 0..ho * wo {
                let (u, v) = (coords.data()[2 * p], coords.data()[2 * p + 1]);
                let (i0, j0, fy, fx) = tent_taps(u, v, h, w);
                let gp = &gd[p * ch..(p + 1) * ch];
                let taps = [
                    (i0, j0, (one - fy) * (one - fx)),
                    (i0, j0 + 1, (one - fy) * fx),
                    (i0 + 1, j0, fy * (one - fx)),
                    (i0 + 1, j0 + 1, fy * fx),
                ];
                if need[0] {
                    for (i, j, wt) in taps {
                        if in_grid(i, j, h, w) {
                            let base = (i as usize * w + j as usize) * ch;
                            for k in 0..ch {
                                gi[base + k] = gi[base + k] + wt * gp[k];
                            }
                        }
                    }
                }
                if need[1] {
                    // Corner values, zero outside the grid.
                    let at = |i: isize, j: isize, k: usize| -> T {
                        if in_grid(i, j, h, w) {
                            id[(i as usize * w + j as usize) * ch + k]
                        } else {
                            T::zero()
                        }
                    };
                    let mut dx = T::zero();
                    let mut dy = T::zero();
                    for (k, &gk) in gp.iter().enumerate() {
                        let (x00, x01) = (at(i0, j0, k), at(i0, j0 + 1, k));
                        let (x10, x11) = (at(i0 + 1, j0, k), at(i0 + 1, j0 + 1, k));
                        dx = dx + gk * ((one - fy) * (x01 - x00) + fy * (x11 - x10));
                        dy = dy + gk * ((one - fx) * (x10 - x00) + fx * (x11 - x01));
                    }
                    // x grows with u; row position y shrinks as v grows.
                    gc[2 * p] = dx;
                    gc[2 * p + 1] = -dy;
                }
            }
            vec![
                need[0].then(|| Tensor::new(img.dims().to_vec(), gi).expect("dims")),
                need[1].then(|| Tensor::new(coords.dims().to_vec(), gc).expect("dims")),
            ]
        }
        Op::Reshape(_) => vec![Some(
            g.clone()
                .reshaped(inputs[0].dims().to_vec())
                .expect("reshape preserves size"),
        )],
        Op::Pick(idx) => vec![Some(same(&|i| if i == *idx { gd[0] } else { T::zero() }))],
        Op::AddAt(idx) => vec![
            need[0].then(|| g.clone()),
            need[1].then(|| Tensor::new(inputs[1].dims().to_vec(), vec![gd[*idx]]).expect("one")),
        ],
        Op::StackLast => {
            let a = inputs[0];
            let ga = need[0].then(|| same(&|i| gd[2 * i]));
            let gb = need[1]
                .then(|| Tensor::new(a.dims().to_vec(), (0..a.len()).map(|i| gd[2 * i + 1]).collect()).expect("dims"));
            vec![ga, gb]
        }
    }
}
