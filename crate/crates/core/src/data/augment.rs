//! Standard training-time augmentations: crop-and-resize, low resolution
//! and photometric jitter.

use rand::Rng;

use crate::image::Image;

use super::degrade::{bilinear_resize, degrade, DegradeSpec};

pub const AUGMENT_PROB: f64 = 0.2;

fn crop_resize<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let area = rng.gen_range(0.75..=1.0f64);
    let ch = ((h as f64 * area.sqrt()).round() as usize).clamp(1, h);
    let cw = ((w as f64 * area.sqrt()).round() as usize).clamp(1, w);
    let top = rng.gen_range(0..=h - ch);
    let left = rng.gen_range(0..=w - cw);
    let crop = Image::from_fn(ch, cw, c, |i, j, k| img.get(top + i, left + j, k));
    bilinear_resize(&crop, h, w)
}

fn low_resolution<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    let r = if rng.gen_bool(0.5) { 8 } else { 16 };
    degrade(img, &DegradeSpec::resolution(r)).unwrap_or_else(|_| img.clone())
}

fn photometric<R: Rng + ?Sized>(mut img: Image, rng: &mut R) -> Image {
    let brightness = rng.gen_range(0.7..=1.3f32);
    let contrast = rng.gen_range(0.7..=1.3f32);
    let mean = img.data().iter().sum::<f32>() / img.data().len().max(1) as f32;
    for v in img.data_mut() {
        *v = ((*v - mean) * contrast + mean) * brightness;
    }
    img
}

/// Apply each augmentation independently with probability `prob`, then
/// clamp to `[0, 1]`. The decision draws are always made so the stream
/// position does not depend on the outcome.
pub fn augment<R: Rng + ?Sized>(img: &Image, rng: &mut R, prob: f64) -> Image {
    let prob = prob.clamp(0.0, 1.0);
    let do_crop = rng.gen_bool(prob);
    let do_low = rng.gen_bool(prob);
    let do_photo = rng.gen_bool(prob);
    if !(do_crop || do_low || do_photo) {
        return img.clone();
    }
    let mut out = img.clone();
    if do_crop {
        out = crop_resize(&out, rng);
    }
    if do_low {
        out = low_resolution(&out, rng);
    }
    if do_photo {
        out = photometric(out, rng);
    }
    out.clamp01()
}
