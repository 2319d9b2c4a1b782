use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use super::{Image, CHANNELS};
use crate::rng::uniform;

/// Which augmentation pipeline to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AugmentPolicy {
    /// Resize only.
    None,
    /// Random resized crop and horizontal flip.
    Basic,
    /// `Basic` plus color jitter, greyscale, Gaussian blur and solarization.
    SmallData,
}

/// Augmentation parameters. Defaults are the fixed values of the
/// `basic`/`small_data` policies.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Augmenter {
    pub policy: AugmentPolicy,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_strength: f64,
    pub greyscale_p: f64,
    pub solarize_p: f64,
    pub solarize_threshold: f32,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for Augmenter {
    fn default() -> Self {
        Self::new(AugmentPolicy::Basic)
    }
}

impl Augmenter {
    pub fn new(policy: AugmentPolicy) -> Self {
        Self {
            policy,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_strength: 0.4,
            greyscale_p: 0.2,
            solarize_p: 0.2,
            solarize_threshold: 0.5,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }

    /// Augments `image` to `size × size`; output values stay in `[0, 1]`.
    pub fn apply<R: Rng + ?Sized>(&self, image: &Image, size: usize, rng: &mut R) -> Image {
        if self.policy == AugmentPolicy::None {
            return image.resize(size, size);
        }
        let mut out = random_resized_crop(image, size, self.crop_scale, self.crop_ratio, rng);
        if rng.random::<f64>() < self.flip_p {
            out = hflip(&out);
        }
        if self.policy == AugmentPolicy::SmallData {
            let s = self.jitter_strength;
            let b = uniform(rng, 1.0 - s, 1.0 + s) as f32;
            let c = uniform(rng, 1.0 - s, 1.0 + s) as f32;
            let sat = uniform(rng, 1.0 - s, 1.0 + s) as f32;
            color_jitter(&mut out, b, c, sat);
            if rng.random::<f64>() < self.greyscale_p {
                greyscale(&mut out);
            }
            if rng.random::<f64>() < self.blur_p {
                let sigma = uniform(rng, self.blur_sigma.0, self.blur_sigma.1) as f32;
                out = gaussian_blur(&out, sigma);
            }
            if rng.random::<f64>() < self.solarize_p {
                solarize(&mut out, self.solarize_threshold);
            }
        }
        out.clamp_values();
        out
    }
}

/// Crops a window covering a random `scale` fraction of the area with a
/// log-uniform aspect ratio, then resamples it to `size × size`.
pub fn random_resized_crop<R: Rng + ?Sized>(
    image: &Image,
    size: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut R,
) -> Image {
    let (h, w) = (image.height() as f64, image.width() as f64);
    let area = h * w;
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let log_r = uniform(rng, libm::log(ratio.0), libm::log(ratio.1));
        let r = libm::exp(log_r);
        let cw = libm::sqrt(target * r);
        let ch = libm::sqrt(target / r);
        if cw <= w && ch <= h {
            let y0 = uniform(rng, 0.0, h - ch + f64::EPSILON);
            let x0 = uniform(rng, 0.0, w - cw + f64::EPSILON);
            return image.resample(y0 as f32, x0 as f32, ch as f32, cw as f32, size, size);
        }
    }
    image.resize(size, size)
}

pub fn hflip(image: &Image) -> Image {
    let mut out = image.clone();
    let w = image.width();
    for c in 0..CHANNELS {
        for y in 0..image.height() {
            for x in 0..w {
                out.set(c, y, x, image.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

/// Inverts every value at or above `threshold`.
pub fn solarize(image: &mut Image, threshold: f32) {
    for v in image.data_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn greyscale(image: &mut Image) {
    let plane = image.height() * image.width();
    let data = image.data_mut();
    for i in 0..plane {
        let y = luma(data[i], data[plane + i], data[2 * plane + i]);
        data[i] = y;
        data[plane + i] = y;
        data[2 * plane + i] = y;
    }
}

/// Brightness, contrast and saturation factors applied in that order, each
/// followed by clamping.
pub fn color_jitter(image: &mut Image, brightness: f32, contrast: f32, saturation: f32) {
    let plane = image.height() * image.width();
    {
        let data = image.data_mut();
        for v in data.iter_mut() {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
        let mean = (0..plane)
            .map(|i| luma(data[i], data[plane + i], data[2 * plane + i]))
            .sum::<f32>()
            / plane as f32;
        for v in data.iter_mut() {
            *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
        }
        for i in 0..plane {
            let y = luma(data[i], data[plane + i], data[2 * plane + i]);
            for c in 0..CHANNELS {
                let v = &mut data[c * plane + i];
                *v = ((*v - y) * saturation + y).clamp(0.0, 1.0);
            }
        }
    }
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(image: &Image, sigma: f32) -> Image {
    let radius = libm::ceilf(3.0 * sigma).max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| libm::expf(-((i * i) as f32) / (2.0 * sigma * sigma)))
        .collect();
    let total: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= total;
    }
    let (h, w) = (image.height() as isize, image.width() as isize);
    let mut tmp = image.clone();
    let mut out = image.clone();
    let mut line = vec![0.0f32; h.max(w) as usize];
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let sx = (x + j as isize - radius).clamp(0, w - 1);
                    acc += k * image.get(c, y as usize, sx as usize);
                }
                line[x as usize] = acc;
            }
            for x in 0..w {
                tmp.set(c, y as usize, x as usize, line[x as usize]);
            }
        }
        for x in 0..w {
            for y in 0..h {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let sy = (y + j as isize - radius).clamp(0, h - 1);
                    acc += k * tmp.get(c, sy as usize, x as usize);
                }
                out.set(c, y as usize, x as usize, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}
