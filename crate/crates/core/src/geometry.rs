//! Centered coordinates, global similarity warps, local elastic warps and
//! bilinear resampling.
//!
//! Pixel `(i, j)` of an `h × w` grid sits at `u = j − (w−1)/2`,
//! `v = (h−1)/2 − i`, so `v` grows upward and the grid center is the origin.
//! Every warp is an inverse map: each output pixel samples the source image
//! at the coordinate the warp sends it to. Positive `phi` rotates image
//! content counterclockwise.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{sample_into, DiffError, Graph, NodeId, Scalar, Tensor};
use crate::image::Image;

/// Circumradius of the control-point triangle as a fraction of `min(h, w)`.
pub const CONTROL_RADIUS: f64 = 0.35;
/// Control-point perturbation half-width per unit of `alpha`, as a fraction
/// of `min(h, w)`.
pub const CONTROL_JITTER: f64 = 0.1;
/// Minimum triangle area as a fraction of `h·w`.
pub const MIN_AREA_FRACTION: f64 = 1e-3;
pub const MAX_CONTROL_RETRIES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("pixel ({i}, {j}) outside a {h}x{w} grid")]
    OutOfRange { i: usize, j: usize, h: usize, w: usize },
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("alpha must be non-negative, got {0}")]
    NegativeAlpha(f64),
    #[error("degenerate control triangle (area {area:.3e} below {threshold:.3e})")]
    Degenerate { area: f64, threshold: f64 },
    #[error("warp field is {field:?} but image is {image:?}")]
    DimMismatch { field: [usize; 2], image: [usize; 2] },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpKind {
    Global,
    Local,
}

impl std::fmt::Display for WarpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WarpKind::Global => "global",
            WarpKind::Local => "local",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenteredPoint {
    pub u: f64,
    pub v: f64,
}

impl CenteredPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// 2×3 affine map `[u', v'] = M [u, v] + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn apply(&self, p: CenteredPoint) -> CenteredPoint {
        let m = &self.0;
        CenteredPoint {
            u: m[0][0] * p.u + m[0][1] * p.v + m[0][2],
            v: m[1][0] * p.u + m[1][1] * p.v + m[1][2],
        }
    }

    pub fn determinant(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn inverse(&self) -> Option<Affine> {
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return None;
        }
        let [[a, b, tx], [c, d, ty]] = self.0;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some(Affine([[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]]))
    }
}

/// Warp parameters `(phi, du, dv, lambda, alpha, sigma)` plus the kind tag.
///
/// The global kind reads `(phi, du, dv, lambda)`; the local kind reads
/// `(alpha, sigma)` and `affine`, the map fitted from perturbed control points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub kind: WarpKind,
    pub phi: f64,
    pub du: f64,
    pub dv: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub affine: Affine,
}

/// Number of continuous warp parameters.
pub const PSI_LEN: usize = 6;

impl TransformParams {
    pub fn identity(kind: WarpKind) -> Self {
        Self {
            kind,
            phi: 0.0,
            du: 0.0,
            dv: 0.0,
            lambda: 1.0,
            alpha: 0.0,
            sigma: 1.0,
            affine: Affine::IDENTITY,
        }
    }

    pub fn to_array(&self) -> [f64; PSI_LEN] {
        [self.phi, self.du, self.dv, self.lambda, self.alpha, self.sigma]
    }

    pub fn with_array(&self, a: [f64; PSI_LEN]) -> Self {
        Self {
            phi: a[0],
            du: a[1],
            dv: a[2],
            lambda: a[3],
            alpha: a[4],
            sigma: a[5],
            ..self.clone()
        }
    }

    /// Indices into [`TransformParams::to_array`] that this kind's warp reads.
    pub fn active(&self) -> &'static [usize] {
        match self.kind {
            WarpKind::Global => &[0, 1, 2, 3],
            WarpKind::Local => &[4, 5],
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        match self.kind {
            WarpKind::Global if !(self.lambda > 0.0) => Err(GeometryError::NonPositiveScale(self.lambda)),
            WarpKind::Local if !(self.sigma > 0.0) => Err(GeometryError::NonPositiveSigma(self.sigma)),
            WarpKind::Local if !(self.alpha >= 0.0) => Err(GeometryError::NegativeAlpha(self.alpha)),
            WarpKind::Local if self.affine.inverse().is_none() => Err(GeometryError::Degenerate {
                area: 0.0,
                threshold: 0.0,
            }),
            _ => Ok(()),
        }
    }
}

pub fn pixel_to_centered(i: usize, j: usize, h: usize, w: usize) -> Result<CenteredPoint, GeometryError> {
    if i >= h || j >= w {
        return Err(GeometryError::OutOfRange { i, j, h, w });
    }
    Ok(CenteredPoint {
        u: j as f64 - (w as f64 - 1.0) / 2.0,
        v: (h as f64 - 1.0) / 2.0 - i as f64,
    })
}

/// Scale by `lambda`, rotate by `phi`, then translate by `(du, dv)`.
pub fn global_forward(p: &TransformParams, pt: CenteredPoint) -> Result<CenteredPoint, GeometryError> {
    if !(p.lambda > 0.0) {
        return Err(GeometryError::NonPositiveScale(p.lambda));
    }
    let (s, c) = p.phi.sin_cos();
    Ok(CenteredPoint {
        u: p.lambda * (c * pt.u - s * pt.v) + p.du,
        v: p.lambda * (s * pt.u + c * pt.v) + p.dv,
    })
}

/// Exact inverse of [`global_forward`].
pub fn global_inverse(p: &TransformParams, pt: CenteredPoint) -> Result<CenteredPoint, GeometryError> {
    if !(p.lambda > 0.0) {
        return Err(GeometryError::NonPositiveScale(p.lambda));
    }
    let (s, c) = p.phi.sin_cos();
    let (a, b) = (pt.u - p.du, pt.v - p.dv);
    Ok(CenteredPoint {
        u: (c * a + s * b) / p.lambda,
        v: (c * b - s * a) / p.lambda,
    })
}

/// Tent-kernel interpolation of every channel at `pt`; zero outside the grid.
pub fn bilinear_sample(img: &Image, pt: CenteredPoint) -> Vec<f32> {
    let mut out = vec![0.0f32; img.channels()];
    sample_into(
        img.data(),
        img.height(),
        img.width(),
        img.channels(),
        pt.u as f32,
        pt.v as f32,
        &mut out,
    );
    out
}

fn triangle_area(p: &[CenteredPoint; 3]) -> f64 {
    0.5 * ((p[1].u - p[0].u) * (p[2].v - p[0].v) - (p[2].u - p[0].u) * (p[1].v - p[0].v)).abs()
}

/// Affine map sending each `src[k]` to `dst[k]`.
///
/// Rejects `src` triangles whose area is below `min_area`.
pub fn fit_affine(src: &[CenteredPoint; 3], dst: &[CenteredPoint; 3], min_area: f64) -> Result<Affine, GeometryError> {
    let area = triangle_area(src);
    if area < min_area || area == 0.0 {
        return Err(GeometryError::Degenerate {
            area,
            threshold: min_area,
        });
    }
    // Both output rows share the 3x3 system [u v 1] x = target; Cramer's rule.
    let m = [
        [src[0].u, src[0].v, 1.0],
        [src[1].u, src[1].v, 1.0],
        [src[2].u, src[2].v, 1.0],
    ];
    let det3 = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let det = det3(m);
    let solve = |rhs: [f64; 3]| -> [f64; 3] {
        let mut x = [0.0; 3];
        for (col, xc) in x.iter_mut().enumerate() {
            let mut a = m;
            for r in 0..3 {
                a[r][col] = rhs[r];
            }
            *xc = det3(a) / det;
        }
        x
    };
    let row_u = solve([dst[0].u, dst[1].u, dst[2].u]);
    let row_v = solve([dst[0].v, dst[1].v, dst[2].v]);
    Ok(Affine([row_u, row_v]))
}

/// Three source control points and their perturbed targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPointSet {
    pub src: [CenteredPoint; 3],
    pub dst: [CenteredPoint; 3],
    pub fitted: Affine,
}

impl ControlPointSet {
    /// Equilateral triangle of circumradius `CONTROL_RADIUS·min(h, w)`.
    pub fn reference_triangle(h: usize, w: usize) -> [CenteredPoint; 3] {
        let r = CONTROL_RADIUS * h.min(w) as f64;
        let at = |deg: f64| {
            let (s, c) = deg.to_radians().sin_cos();
            CenteredPoint::new(r * c, r * s)
        };
        [at(90.0), at(210.0), at(330.0)]
    }

    pub fn identity(h: usize, w: usize) -> Self {
        let src = Self::reference_triangle(h, w);
        Self {
            src,
            dst: src,
            fitted: Affine::IDENTITY,
        }
    }

    /// Perturb each target coordinate by `U(−a, a)` with
    /// `a = alpha·CONTROL_JITTER·min(h, w)` and fit the affine map.
    ///
    /// Degenerate targets are redrawn up to [`MAX_CONTROL_RETRIES`] times,
    /// after which the identity map is used.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, alpha: f64, h: usize, w: usize) -> Self {
        let src = Self::reference_triangle(h, w);
        let half = alpha.abs() * CONTROL_JITTER * h.min(w) as f64;
        let min_area = MIN_AREA_FRACTION * (h * w) as f64;
        for _ in 0..MAX_CONTROL_RETRIES {
            let dst = src.map(|p| {
                let mut jit = || if half > 0.0 { rng.gen_range(-half..half) } else { 0.0 };
                CenteredPoint::new(p.u + jit(), p.v + jit())
            });
            if triangle_area(&dst) < min_area {
                continue;
            }
            if let Ok(fitted) = fit_affine(&src, &dst, min_area) {
                return Self { src, dst, fitted };
            }
        }
        log::warn!("control points degenerate after {MAX_CONTROL_RETRIES} draws; using identity affine");
        Self::identity(h, w)
    }
}

/// Gaussian bump displacement centered at the origin, applied per axis.
pub fn gaussian_warp(pt: CenteredPoint, alpha: f64, sigma: f64) -> Result<CenteredPoint, GeometryError> {
    if !(sigma > 0.0) {
        return Err(GeometryError::NonPositiveSigma(sigma));
    }
    let k = alpha / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    let bump = |x: f64| k * (-(x * x) / (2.0 * sigma * sigma)).exp();
    Ok(CenteredPoint {
        u: pt.u + bump(pt.u),
        v: pt.v + bump(pt.v),
    })
}

/// Source coordinate for every output pixel, stored as `[H, W, 2]` `(u, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    coords: Tensor<f64>,
}

impl WarpField {
    pub fn from_tensor(coords: Tensor<f64>) -> Result<Self, GeometryError> {
        if coords.dims().len() != 3 || coords.dims()[2] != 2 {
            return Err(DiffError::Shape {
                node: 0,
                op: "warp field",
                detail: format!("expected [H, W, 2], got {:?}", coords.dims()),
            }
            .into());
        }
        Ok(Self { coords })
    }

    pub fn height(&self) -> usize {
        self.coords.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.coords.dims()[1]
    }

    pub fn at(&self, i: usize, j: usize) -> CenteredPoint {
        let o = 2 * (i * self.width() + j);
        CenteredPoint::new(self.coords.data()[o], self.coords.data()[o + 1])
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.coords
    }
}

pub fn build_warp_field(p: &TransformParams, h: usize, w: usize) -> Result<WarpField, GeometryError> {
    p.validate()?;
    let inv = p.affine.inverse();
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            let pt = pixel_to_centered(i, j, h, w)?;
            let src = match p.kind {
                WarpKind::Global => global_inverse(p, pt)?,
                WarpKind::Local => {
                    let a = inv.expect("validated invertible").apply(pt);
                    gaussian_warp(a, p.alpha, p.sigma)?
                }
            };
            data.push(src.u);
            data.push(src.v);
        }
    }
    WarpField::from_tensor(Tensor::new(vec![h, w, 2], data)?)
}

pub fn apply_warp(img: &Image, field: &WarpField) -> Result<Image, GeometryError> {
    if field.height() != img.height() || field.width() != img.width() {
        return Err(GeometryError::DimMismatch {
            field: [field.height(), field.width()],
            image: [img.height(), img.width()],
        });
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out = vec![0.0f32; h * w * ch];
    for p in 0..h * w {
        let (u, v) = (field.coords.data()[2 * p], field.coords.data()[2 * p + 1]);
        sample_into(img.data(), h, w, ch, u as f32, v as f32, &mut out[p * ch..(p + 1) * ch]);
    }
    Ok(Image::new(Tensor::new(vec![h, w, ch], out)?)?)
}

/// Build the warp and resample `img` in one call.
pub fn warp_image(img: &Image, p: &TransformParams) -> Result<Image, GeometryError> {
    let field = build_warp_field(p, img.height(), img.width())?;
    apply_warp(img, &field)
}

/// Base grids `U`, `V` of centered coordinates for an `h × w` image.
fn centered_grid<T: Scalar>(h: usize, w: usize) -> (Tensor<T>, Tensor<T>) {
    let mut us = Vec::with_capacity(h * w);
    let mut vs = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            us.push(T::from_f64_lossy(j as f64 - (w as f64 - 1.0) / 2.0));
            vs.push(T::from_f64_lossy((h as f64 - 1.0) / 2.0 - i as f64));
        }
    }
    (
        Tensor::new(vec![h, w], us).expect("grid"),
        Tensor::new(vec![h, w], vs).expect("grid"),
    )
}

/// Record the warp field on the tape as a function of the `[6]` parameter
/// node `psi`, ordered as [`TransformParams::to_array`].
///
/// For the local kind the fitted affine in `p` is a constant; only `alpha`
/// and `sigma` carry gradient.
pub fn warp_coords_graph<T: Scalar>(
    g: &mut Graph<T>,
    psi: NodeId,
    p: &TransformParams,
    h: usize,
    w: usize,
) -> Result<NodeId, GeometryError> {
    p.validate()?;
    let (gu, gv) = centered_grid::<T>(h, w);
    let coords = match p.kind {
        WarpKind::Global => {
            let u = g.constant(gu);
            let v = g.constant(gv);
            let phi = g.pick(psi, 0)?;
            let du = g.pick(psi, 1)?;
            let dv = g.pick(psi, 2)?;
            let lambda = g.pick(psi, 3)?;
            let a = g.sub(u, du)?;
            let b = g.sub(v, dv)?;
            let c = g.cos(phi)?;
            let s = g.sin(phi)?;
            let ac = g.mul(a, c)?;
            let bs = g.mul(b, s)?;
            let bc = g.mul(b, c)?;
            let as_ = g.mul(a, s)?;
            let ru = g.add(ac, bs)?;
            let rv = g.sub(bc, as_)?;
            let uu = g.div(ru, lambda)?;
            let vv = g.div(rv, lambda)?;
            g.stack_last(uu, vv)?
        }
        WarpKind::Local => {
            let inv = p.affine.inverse().expect("validated invertible");
            let n = h * w;
            let mut ua = Vec::with_capacity(n);
            let mut va = Vec::with_capacity(n);
            let mut usq = Vec::with_capacity(n);
            let mut vsq = Vec::with_capacity(n);
            for (&u, &v) in gu.data().iter().zip(gv.data()) {
                let q = inv.apply(CenteredPoint::new(u.to_f64_lossy(), v.to_f64_lossy()));
                ua.push(T::from_f64_lossy(q.u));
                va.push(T::from_f64_lossy(q.v));
                usq.push(T::from_f64_lossy(-q.u * q.u / 2.0));
                vsq.push(T::from_f64_lossy(-q.v * q.v / 2.0));
            }
            let dims = vec![h, w];
            let ua = g.constant(Tensor::new(dims.clone(), ua)?);
            let va = g.constant(Tensor::new(dims.clone(), va)?);
            let usq = g.constant(Tensor::new(dims.clone(), usq)?);
            let vsq = g.constant(Tensor::new(dims, vsq)?);
            let alpha = g.pick(psi, 4)?;
            let sigma = g.pick(psi, 5)?;
            let sigma2 = g.square(sigma)?;
            // alpha / (sqrt(2 pi) sigma)
            let norm = g.scale(sigma, (2.0 * std::f64::consts::PI).sqrt())?;
            let amp = g.div(alpha, norm)?;
            let eu = g.div(usq, sigma2)?;
            let ev = g.div(vsq, sigma2)?;
            let eu = g.exp(eu)?;
            let ev = g.exp(ev)?;
            let bu = g.mul(eu, amp)?;
            let bv = g.mul(ev, amp)?;
            let uu = g.add(ua, bu)?;
            let vv = g.add(va, bv)?;
            g.stack_last(uu, vv)?
        }
    };
    Ok(coords)
}

/// Warp image node `img` (`[H, W, C]`) under `psi` on the tape.
pub fn warp_graph<T: Scalar>(
    g: &mut Graph<T>,
    img: NodeId,
    psi: NodeId,
    p: &TransformParams,
) -> Result<NodeId, GeometryError> {
    let dims = g.value(img)?.dims().to_vec();
    let coords = warp_coords_graph(g, psi, p, dims[0], dims[1])?;
    Ok(g.grid_sample(img, coords)?)
}

/// `[6]` tensor of the continuous parameters, for binding on the tape.
pub fn psi_tensor<T: Scalar>(p: &TransformParams) -> Tensor<T> {
    Tensor::vector(p.to_array().iter().map(|&v| T::from_f64_lossy(v)).collect())
}
