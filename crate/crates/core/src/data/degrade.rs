//! Low-resolution simulation: box-average down, bilinear up, optional blur
//! and noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::Image;

use super::DataError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeSpec {
    /// Target side `r`; `None` keeps full resolution.
    pub resolution: Option<usize>,
    /// Gaussian blur standard deviation in pixels; 0 disables.
    pub blur_radius: f64,
    /// Additive pixel noise standard deviation; 0 disables.
    pub noise_std: f64,
}

impl DegradeSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn resolution(r: usize) -> Self {
        Self {
            resolution: Some(r),
            ..Self::default()
        }
    }

    /// `"none"` or a side length such as `"8"`.
    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s.trim() {
            "none" | "" => Ok(Self::none()),
            t => t
                .parse::<usize>()
                .map(Self::resolution)
                .map_err(|_| DataError::Invalid(format!("degrade level {t:?}: expected \"none\" or an integer"))),
        }
    }

    pub fn label(&self) -> String {
        match self.resolution {
            Some(r) => r.to_string(),
            None => "none".into(),
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<(), DataError> {
        if let Some(r) = self.resolution {
            if r == 0 || h % r != 0 || w % r != 0 {
                return Err(DataError::Invalid(format!(
                    "resolution {r} does not divide image size {h}x{w}"
                )));
            }
        }
        if !(self.blur_radius >= 0.0 && self.blur_radius.is_finite()) {
            return Err(DataError::Invalid(format!(
                "blur radius {} must be ≥ 0",
                self.blur_radius
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DataError::Invalid(format!("noise std {} must be ≥ 0", self.noise_std)));
        }
        Ok(())
    }
}

/// Mean of each `b × b` block, as an `(h/b) × (w/b)` image.
pub fn box_downsample(img: &Image, r: usize) -> Result<Image, DataError> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    DegradeSpec::resolution(r).validate(h, w)?;
    let (bh, bw) = (h / r, w / r);
    let scale = 1.0 / (bh * bw) as f64;
    let mut acc = vec![0.0f64; r * r * c];
    for i in 0..h {
        for j in 0..w {
            let o = ((i / bh) * r + j / bw) * c;
            for k in 0..c {
                acc[o + k] += img.get(i, j, k) as f64;
            }
        }
    }
    Ok(Image::from_fn(r, r, c, |i, j, k| {
        (acc[(i * r + j) * c + k] * scale) as f32
    }))
}

/// Half-pixel-centered bilinear resize with edge clamping.
pub(crate) fn bilinear_resize(img: &Image, oh: usize, ow: usize) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = |o: usize, n_out: usize, n_in: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let rows: Vec<_> = (0..oh).map(|i| src(i, oh, h)).collect();
    let cols: Vec<_> = (0..ow).map(|j| src(j, ow, w)).collect();
    Image::from_fn(oh, ow, c, |i, j, k| {
        let (y0, y1, fy) = rows[i];
        let (x0, x1, fx) = cols[j];
        let top = img.get(y0, x0, k) as f64 * (1.0 - fx) + img.get(y0, x1, k) as f64 * fx;
        let bot = img.get(y1, x0, k) as f64 * (1.0 - fx) + img.get(y1, x1, k) as f64 * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let tap = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
    let horizontal = Image::from_fn(h, w, c, |i, j, k| {
        kernel
            .iter()
            .enumerate()
            .map(|(t, kv)| kv * img.get(i, tap(j as isize + t as isize - radius, w), k) as f64)
            .sum::<f64>() as f32
    });
    Image::from_fn(h, w, c, |i, j, k| {
        kernel
            .iter()
            .enumerate()
            .map(|(t, kv)| kv * horizontal.get(tap(i as isize + t as isize - radius, h), j, k) as f64)
            .sum::<f64>() as f32
    })
}

/// Box-average to `r × r`, bilinear-upsample back, then shift each block so
/// its mean equals the box average. The shift makes the operation a
/// projection: degrading a degraded image changes nothing.
fn resample(img: &Image, r: usize) -> Result<Image, DataError> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let low = box_downsample(img, r)?;
    let mut up = bilinear_resize(&low, h, w);
    let drift = box_downsample(&up, r)?;
    let (bh, bw) = (h / r, w / r);
    let data = up.data_mut();
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let (bi, bj) = (i / bh, j / bw);
                data[(i * w + j) * c + k] += low.get(bi, bj, k) - drift.get(bi, bj, k);
            }
        }
    }
    Ok(up)
}

/// Deterministic degradation. Rejects specs with noise; use
/// [`degrade_with_rng`] for those.
pub fn degrade(img: &Image, spec: &DegradeSpec) -> Result<Image, DataError> {
    if spec.noise_std > 0.0 {
        return Err(DataError::Invalid("noise requires a random source".into()));
    }
    degrade_with_rng(img, spec, &mut rand::rngs::mock::StepRng::new(0, 0))
}

pub fn degrade_with_rng<R: Rng + ?Sized>(img: &Image, spec: &DegradeSpec, rng: &mut R) -> Result<Image, DataError> {
    spec.validate(img.height(), img.width())?;
    let mut out = match spec.resolution {
        Some(r) if r != img.height() || r != img.width() => resample(img, r)?,
        _ => img.clone(),
    };
    if spec.blur_radius > 0.0 {
        out = gaussian_blur(&out, spec.blur_radius);
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
        for v in out.data_mut() {
            *v += noise.sample(rng) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn checkerboard(n: usize) -> Image {
        Image::from_fn(n, n, 1, |i, j, _| ((i + j) % 2) as f32)
    }

    #[test]
    fn constant_unchanged() {
        let img = Image::filled(32, 32, 3, 0.37);
        let out = degrade(&img, &DegradeSpec::resolution(8)).unwrap();
        assert!(out.tensor().max_abs_diff(img.tensor()) < 1e-6);
    }

    #[test]
    fn full_resolution_is_identity() {
        let img = Image::from_fn(16, 16, 2, |i, j, k| (i * 3 + j + k) as f32 / 64.0);
        assert_eq!(degrade(&img, &DegradeSpec::resolution(16)).unwrap(), img);
        assert_eq!(degrade(&img, &DegradeSpec::none()).unwrap(), img);
    }

    #[test]
    fn block_means_preserved() {
        let img = Image::from_fn(32, 32, 1, |i, j, _| ((i / 3 + j * j) % 5) as f32 / 4.0);
        let out = degrade(&img, &DegradeSpec::resolution(8)).unwrap();
        for bi in 0..8 {
            for bj in 0..8 {
                let (mut a, mut b) = (0.0f64, 0.0f64);
                for i in 0..4 {
                    for j in 0..4 {
                        a += img.get(bi * 4 + i, bj * 4 + j, 0) as f64;
                        b += out.get(bi * 4 + i, bj * 4 + j, 0) as f64;
                    }
                }
                assert!((a - b).abs() / 16.0 < 1e-6);
            }
        }
    }

    #[test]
    fn checkerboard_flattens() {
        let out = degrade(&checkerboard(32), &DegradeSpec::resolution(8)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn idempotent() {
        let mut rng = seeds::rng(3, &[]);
        let img = Image::from_fn(32, 32, 3, |_, _, _| rng.gen::<f32>());
        for r in [4, 8, 16] {
            let once = degrade(&img, &DegradeSpec::resolution(r)).unwrap();
            let twice = degrade(&once, &DegradeSpec::resolution(r)).unwrap();
            assert!(once.tensor().max_abs_diff(twice.tensor()) < 1e-6, "r={r}");
        }
    }

    #[test]
    fn non_dividing_rejected() {
        let img = Image::filled(32, 32, 1, 0.0);
        assert!(degrade(&img, &DegradeSpec::resolution(12)).is_err());
        assert!(degrade(&img, &DegradeSpec::resolution(0)).is_err());
    }

    #[test]
    fn noise_needs_rng() {
        let img = Image::filled(16, 16, 1, 0.5);
        let spec = DegradeSpec {
            noise_std: 0.1,
            ..DegradeSpec::none()
        };
        assert!(degrade(&img, &spec).is_err());
        let out = degrade_with_rng(&img, &spec, &mut seeds::rng(1, &[])).unwrap();
        assert!(out.tensor().max_abs_diff(img.tensor()) > 0.0);
    }

    #[test]
    fn blur_keeps_constants() {
        let img = Image::filled(16, 16, 1, 0.25);
        let spec = DegradeSpec {
            blur_radius: 1.5,
            ..DegradeSpec::none()
        };
        let out = degrade(&img, &spec).unwrap();
        assert!(out.tensor().max_abs_diff(img.tensor()) < 1e-6);
    }

    #[test]
    fn parse_levels() {
        assert_eq!(DegradeSpec::parse("none").unwrap(), DegradeSpec::none());
        assert_eq!(DegradeSpec::parse("8").unwrap().resolution, Some(8));
        assert!(DegradeSpec::parse("eight").is_err());
    }
}
