//! Procedurally rendered shape dataset.
//!
//! A class is a (shape, color family) pair: class `c` draws shape `c % 4`
//! (disc, square, triangle, cross) filled with a hue from family `c / 4`.
//! Every image puts one shape with random position, scale and rotation on a
//! textured background of random color.

use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{Image, LabeledDataset, Split};
use crate::error::{bail, Result};
use crate::rng::{derive_seed, seeded, uniform};

const FAMILY_HUES: [f32; 4] = [0.0, 0.33, 0.62, 0.14];

/// Generator parameters. The defaults are frozen: acceptance calibration
/// (raw-pixel linear separability, pre-training benefit) depends on them.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthParams {
    /// Maximum center offset as a fraction of the image side.
    pub position_jitter: f32,
    /// Shape radius range as a fraction of the image side.
    pub radius: (f32, f32),
    /// Maximum rotation in degrees.
    pub rotation_deg: f32,
    /// Half-width of the hue window around the family hue.
    pub hue_jitter: f32,
    /// Amplitude of the background grating.
    pub texture: f32,
    /// Per-pixel uniform noise amplitude.
    pub noise: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            position_jitter: 0.07,
            radius: (0.22, 0.36),
            rotation_deg: 15.0,
            hue_jitter: 0.06,
            texture: 0.12,
            noise: 0.04,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Renders a stratified train/test pair fully determined by `seed`.
pub fn synth_generate(seed: u64, n_train: usize, n_test: usize, num_classes: usize, size: usize) -> Result<SynthSplit> {
    synth_generate_with(&SynthParams::default(), seed, n_train, n_test, num_classes, size)
}

pub fn synth_generate_with(
    params: &SynthParams,
    seed: u64,
    n_train: usize,
    n_test: usize,
    num_classes: usize,
    size: usize,
) -> Result<SynthSplit> {
    if !(2..=16).contains(&num_classes) {
        bail!(Config, "synthetic class count must be in [2, 16], got {}", num_classes);
    }
    if size == 0 || size % 8 != 0 {
        bail!(Config, "synthetic image size must be a positive multiple of 8, got {}", size);
    }
    let train = render_split(params, derive_seed(seed, &[1]), n_train, num_classes, size, Split::Train)?;
    let test = render_split(params, derive_seed(seed, &[2]), n_test, num_classes, size, Split::Test)?;
    Ok(SynthSplit { train, test })
}

fn render_split(
    params: &SynthParams,
    seed: u64,
    count: usize,
    num_classes: usize,
    size: usize,
    split: Split,
) -> Result<LabeledDataset> {
    let mut labels: Vec<usize> = (0..count).map(|i| i % num_classes).collect();
    labels.shuffle(&mut seeded(derive_seed(seed, &[0])));
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| render(params, label, size, &mut seeded(derive_seed(seed, &[1, i as u64]))))
        .collect();
    LabeledDataset::new(images, labels, num_classes, split)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h - libm::floorf(h)) * 6.0;
    let i = libm::floorf(h) as i32 % 6;
    let f = h - libm::floorf(h);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Point-in-shape test in the shape's local frame scaled to unit radius.
fn inside(shape: usize, x: f32, y: f32) -> bool {
    match shape {
        0 => x * x + y * y <= 1.0,
        1 => x.abs() <= 0.8 && y.abs() <= 0.8,
        2 => {
            // equilateral triangle inscribed in the unit circle, apex up
            let y = -y;
            y >= -0.5 && (y - 1.0) <= -1.732_050_8 * x.abs()
        }
        _ => (x.abs() <= 0.3 && y.abs() <= 1.0) || (y.abs() <= 0.3 && x.abs() <= 1.0),
    }
}

fn render<R: Rng>(params: &SynthParams, label: usize, size: usize, rng: &mut R) -> Image {
    let shape = label % 4;
    let family = label / 4;
    let s = size as f32;

    let bg = hsv_to_rgb(rng.random(), uniform(rng, 0.2, 0.6) as f32, uniform(rng, 0.15, 0.45) as f32);
    let freq = uniform(rng, 1.0, 4.0) as f32 * core::f32::consts::TAU / s;
    let angle = uniform(rng, 0.0, core::f64::consts::PI) as f32;
    let (gx, gy) = (libm::cosf(angle) * freq, libm::sinf(angle) * freq);
    let phase = uniform(rng, 0.0, core::f64::consts::TAU) as f32;

    let hue = FAMILY_HUES[family % 4] + uniform(rng, -params.hue_jitter as f64, params.hue_jitter as f64) as f32;
    let fg = hsv_to_rgb(hue, uniform(rng, 0.6, 1.0) as f32, uniform(rng, 0.75, 1.0) as f32);

    let j = params.position_jitter as f64;
    let cx = s * (0.5 + uniform(rng, -j, j) as f32);
    let cy = s * (0.5 + uniform(rng, -j, j) as f32);
    let radius = s * uniform(rng, params.radius.0 as f64, params.radius.1 as f64) as f32;
    let rot = (uniform(rng, -params.rotation_deg as f64, params.rotation_deg as f64) as f32).to_radians();
    let (cr, sr) = (libm::cosf(rot), libm::sinf(rot));

    let mut data = alloc::vec![0.0f32; 3 * size * size];
    let plane = size * size;
    for py in 0..size {
        for px in 0..size {
            let mut coverage = 0.0f32;
            for sy in 0..2 {
                for sx in 0..2 {
                    let x = px as f32 + 0.25 + 0.5 * sx as f32 - cx;
                    let y = py as f32 + 0.25 + 0.5 * sy as f32 - cy;
                    let lx = (cr * x + sr * y) / radius;
                    let ly = (-sr * x + cr * y) / radius;
                    if inside(shape, lx, ly) {
                        coverage += 0.25;
                    }
                }
            }
            let wave = params.texture * libm::sinf(gx * px as f32 + gy * py as f32 + phase);
            for c in 0..3 {
                let noise = uniform(rng, -params.noise as f64, params.noise as f64) as f32;
                let back = bg[c] + wave;
                let v = back * (1.0 - coverage) + fg[c] * coverage + noise;
                data[c * plane + py * size + px] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(size, size, data).expect("rendered image is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_byte_identical() {
        let a = synth_generate(5, 24, 8, 4, 32).unwrap();
        let b = synth_generate(5, 24, 8, 4, 32).unwrap();
        for i in 0..24 {
            assert_eq!(a.train.image(i).to_rgb8(), b.train.image(i).to_rgb8());
            assert_eq!(a.train.image(i), b.train.image(i));
        }
        assert_eq!(a.train.labels(), b.train.labels());
        let c = synth_generate(6, 24, 8, 4, 32).unwrap();
        assert_ne!(a.train.image(0), c.train.image(0));
    }

    #[test]
    fn labels_are_stratified() {
        let split = synth_generate(1, 512, 64, 4, 32).unwrap();
        assert_eq!(split.train.len(), 512);
        for c in 0..4 {
            assert_eq!(split.train.labels().iter().filter(|&&l| l == c).count(), 128);
        }
        assert_eq!(split.test.split(), Split::Test);
    }

    #[test]
    fn train_and_test_are_drawn_independently() {
        let split = synth_generate(2, 16, 16, 4, 16).unwrap();
        for i in 0..16 {
            assert!(split.test.images().iter().all(|t| t != split.train.image(i)));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(synth_generate(0, 4, 4, 1, 32).is_err());
        assert!(synth_generate(0, 4, 4, 17, 32).is_err());
        assert!(synth_generate(0, 4, 4, 4, 30).is_err());
    }
}
