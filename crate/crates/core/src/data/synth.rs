//! Procedural identity templates: soft elliptical blobs laid out like face
//! parts over a gradient background.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::image::Image;

use super::CHANNELS;

/// One soft ellipse. Positions and radii are fractions of the image side,
/// in centered coordinates with `v` up.
#[derive(Clone, Debug)]
struct Blob {
    cu: f64,
    cv: f64,
    ru: f64,
    rv: f64,
    angle: f64,
    color: [f64; 3],
    softness: f64,
}

impl Blob {
    /// Coverage in `[0, 1]` at normalized point `(u, v)`.
    fn coverage(&self, u: f64, v: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - self.cu, v - self.cv);
        let a = (c * du + s * dv) / self.ru;
        let b = (-s * du + c * dv) / self.rv;
        let r = (a * a + b * b).sqrt();
        1.0 / (1.0 + ((r - 1.0) / self.softness).exp())
    }
}

/// Fixed appearance of one identity.
#[derive(Clone, Debug)]
pub struct IdentityTemplate {
    top: [f64; 3],
    bottom: [f64; 3],
    gradient_angle: f64,
    blobs: Vec<Blob>,
}

fn color<R: Rng + ?Sized>(rng: &mut R, base: [f64; 3], spread: f64) -> [f64; 3] {
    base.map(|b| (b + rng.gen_range(-spread..spread)).clamp(0.0, 1.0))
}

impl IdentityTemplate {
    /// Draw a template with 5–8 blobs: face oval, two eyes, nose, mouth and
    /// up to three extra marks.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let skin_base = [0.62, 0.52, 0.45];
        let dark = [0.22, 0.18, 0.18];
        let top = color(rng, [0.35, 0.4, 0.5], 0.05);
        let bottom = color(rng, [0.5, 0.45, 0.4], 0.05);
        let skin = color(rng, skin_base, 0.04);
        let mut blobs = Vec::with_capacity(8);

        blobs.push(Blob {
            cu: rng.gen_range(-0.04..0.04),
            cv: rng.gen_range(-0.04..0.04),
            ru: rng.gen_range(0.26..0.38),
            rv: rng.gen_range(0.32..0.44),
            angle: rng.gen_range(-0.15..0.15),
            color: skin,
            softness: rng.gen_range(0.06..0.14),
        });
        let eye_u = rng.gen_range(0.08..0.18);
        let eye_v = rng.gen_range(0.04..0.18);
        let eye_r = (rng.gen_range(0.035..0.08), rng.gen_range(0.025..0.06));
        let eye_tilt = rng.gen_range(-0.4..0.4);
        let eye_color = color(rng, dark, 0.04);
        for side in [-1.0, 1.0] {
            blobs.push(Blob {
                cu: side * eye_u,
                cv: eye_v,
                ru: eye_r.0,
                rv: eye_r.1,
                angle: side * eye_tilt,
                color: eye_color,
                softness: 0.12,
            });
        }
        blobs.push(Blob {
            cu: rng.gen_range(-0.04..0.04),
            cv: rng.gen_range(-0.06..0.04),
            ru: rng.gen_range(0.025..0.06),
            rv: rng.gen_range(0.05..0.11),
            angle: rng.gen_range(-0.2..0.2),
            color: color(rng, [skin[0] * 0.8, skin[1] * 0.75, skin[2] * 0.75], 0.08),
            softness: 0.15,
        });
        blobs.push(Blob {
            cu: rng.gen_range(-0.05..0.05),
            cv: rng.gen_range(-0.24..-0.12),
            ru: rng.gen_range(0.06..0.15),
            rv: rng.gen_range(0.02..0.05),
            angle: rng.gen_range(-0.25..0.25),
            color: color(rng, [0.55, 0.25, 0.25], 0.04),
            softness: 0.12,
        });
        let extras = rng.gen_range(0..=3);
        for _ in 0..extras {
            let kind = rng.gen_range(0..3);
            let blob = match kind {
                // Hair or headwear across the top.
                0 => Blob {
                    cu: rng.gen_range(-0.1..0.1),
                    cv: rng.gen_range(0.3..0.42),
                    ru: rng.gen_range(0.2..0.4),
                    rv: rng.gen_range(0.06..0.14),
                    angle: rng.gen_range(-0.3..0.3),
                    color: color(rng, [0.3, 0.25, 0.2], 0.05),
                    softness: 0.1,
                },
                // Cheek mark.
                1 => Blob {
                    cu: rng.gen_range(-0.22..0.22),
                    cv: rng.gen_range(-0.12..0.02),
                    ru: rng.gen_range(0.03..0.08),
                    rv: rng.gen_range(0.03..0.08),
                    angle: 0.0,
                    color: color(rng, [0.6, 0.4, 0.4], 0.05),
                    softness: 0.2,
                },
                // Brow.
                _ => Blob {
                    cu: rng.gen_range(-0.18..0.18),
                    cv: eye_v + rng.gen_range(0.06..0.12),
                    ru: rng.gen_range(0.05..0.1),
                    rv: rng.gen_range(0.012..0.03),
                    angle: rng.gen_range(-0.4..0.4),
                    color: color(rng, dark, 0.04),
                    softness: 0.12,
                },
            };
            blobs.push(blob);
        }
        Self {
            top,
            bottom,
            gradient_angle: rng.gen_range(-0.6..0.6),
            blobs,
        }
    }

    pub fn blob_count(&self) -> usize {
        self.blobs.len()
    }

    /// Color at normalized point `(u, v)` (fractions of the side, `v` up).
    fn shade(&self, u: f64, v: f64) -> [f64; 3] {
        let (s, c) = self.gradient_angle.sin_cos();
        let t = (0.5 - (s * u + c * v)).clamp(0.0, 1.0);
        let mut px = [0.0; 3];
        for k in 0..3 {
            px[k] = self.top[k] * (1.0 - t) + self.bottom[k] * t;
        }
        for b in &self.blobs {
            let a = b.coverage(u, v);
            for k in 0..3 {
                px[k] = px[k] * (1.0 - a) + b.color[k] * a;
            }
        }
        px
    }

    /// Render one sample of this identity at `size × size`.
    pub fn render_sample<R: Rng + ?Sized>(&self, size: usize, jitter: &SampleJitter, rng: &mut R) -> Image {
        let noise = Normal::new(0.0, jitter.noise_std).expect("finite std");
        let half = (size as f64 - 1.0) / 2.0;
        let (s, c) = jitter.rotation.sin_cos();
        let mut data = Vec::with_capacity(size * size * CHANNELS);
        for i in 0..size {
            for j in 0..size {
                // Inverse pose: undo the shift, then the rotation.
                let u = (j as f64 - half) / size as f64 - jitter.shift_u;
                let v = (half - i as f64) / size as f64 - jitter.shift_v;
                let (su, sv) = (c * u + s * v, -s * u + c * v);
                let px = self.shade(su, sv);
                for ch in px {
                    let val = ch * jitter.brightness + noise.sample(rng);
                    data.push(val.clamp(0.0, 1.0) as f32);
                }
            }
        }
        Image::from_fn(size, size, CHANNELS, |i, j, k| data[(i * size + j) * CHANNELS + k])
    }
}

/// Per-sample nuisance: pose, brightness and pixel noise.
#[derive(Clone, Debug)]
pub struct SampleJitter {
    /// Fractions of the image side.
    pub shift_u: f64,
    pub shift_v: f64,
    /// Radians.
    pub rotation: f64,
    pub brightness: f64,
    pub noise_std: f64,
}

impl SampleJitter {
    /// ±5% shift, ±5° rotation, brightness ×[0.85, 1.15], N(0, 0.02) noise.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            shift_u: rng.gen_range(-0.05..0.05),
            shift_v: rng.gen_range(-0.05..0.05),
            rotation: rng.gen_range(-5f64..5.0).to_radians(),
            brightness: rng.gen_range(0.85..1.15),
            noise_std: 0.02,
        }
    }

    pub fn none() -> Self {
        Self {
            shift_u: 0.0,
            shift_v: 0.0,
            rotation: 0.0,
            brightness: 1.0,
            noise_std: 1e-12,
        }
    }
}
