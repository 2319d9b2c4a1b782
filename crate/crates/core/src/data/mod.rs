//! Images, labeled datasets, patchification, augmentation and the
//! procedural synthetic dataset.

mod augment;
mod patch;
mod synth;

pub use augment::{
    color_jitter, gaussian_blur, greyscale, hflip, random_resized_crop, solarize, AugmentPolicy, Augmenter,
};
pub use patch::{patchify, unpatchify, PatchSequence};
pub use synth::{synth_generate, synth_generate_with, SynthParams, SynthSplit};

use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::error::{bail, Result};
use crate::rng::{derive_seed, seeded};

pub const CHANNELS: usize = 3;

/// RGB image stored channel-major (`[c][y][x]`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            bail!(Dimension, "image must be non-empty, got {}×{}", height, width);
        }
        if data.len() != CHANNELS * height * width {
            bail!(
                Dimension,
                "{}×{} RGB image needs {} values, got {}",
                height,
                width,
                CHANNELS * height * width,
                data.len()
            );
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(Usage, "pixel value {} outside [0, 1]", v);
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = vec![0.0; CHANNELS * height * width];
        for (c, plane) in data.chunks_exact_mut(height * width).enumerate() {
            plane.fill(rgb[c].clamp(0.0, 1.0));
        }
        Self { height, width, data }
    }

    /// Builds an image from interleaved 8-bit RGB bytes (`[y][x][c]`).
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != CHANNELS * height * width {
            bail!(Dimension, "expected {} RGB bytes, got {}", CHANNELS * height * width, bytes.len());
        }
        let mut data = vec![0.0; bytes.len()];
        let plane = height * width;
        for (i, px) in bytes.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Self::new(height, width, data)
    }

    /// Interleaved 8-bit RGB bytes, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..plane {
            for c in 0..CHANNELS {
                out.push(libm::roundf(self.data[c * plane + i] * 255.0) as u8);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub(crate) fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub(crate) fn clamp_values(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear resampling of the window `[y0, y0+h) × [x0, x0+w)` (in
    /// fractional source pixels) to `out_h × out_w`.
    pub fn resample(&self, y0: f32, x0: f32, h: f32, w: f32, out_h: usize, out_w: usize) -> Image {
        let mut out = Image::filled(out_h, out_w, [0.0; 3]);
        let sy = h / out_h as f32;
        let sx = w / out_w as f32;
        for oy in 0..out_h {
            let fy = (y0 + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let iy = fy as usize;
            let iy1 = (iy + 1).min(self.height - 1);
            let ty = fy - iy as f32;
            for ox in 0..out_w {
                let fx = (x0 + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let ix = fx as usize;
                let ix1 = (ix + 1).min(self.width - 1);
                let tx = fx - ix as f32;
                for c in 0..CHANNELS {
                    let top = self.get(c, iy, ix) * (1.0 - tx) + self.get(c, iy, ix1) * tx;
                    let bottom = self.get(c, iy1, ix) * (1.0 - tx) + self.get(c, iy1, ix1) * tx;
                    out.set(c, oy, ox, (top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
                }
            }
        }
        out
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.resample(0.0, 0.0, self.height as f32, self.width as f32, out_h, out_w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Test,
}

/// In-memory labeled images.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            bail!(Usage, "{} images but {} labels", images.len(), labels.len());
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            bail!(Index, "label {} of item {} outside [0, {})", l, i, num_classes);
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn empty(num_classes: usize, split: Split) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            num_classes,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// First `count` items, keeping order.
    pub fn take(&self, count: usize) -> Self {
        let count = count.min(self.len());
        Self {
            images: self.images[..count].to_vec(),
            labels: self.labels[..count].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Deterministic class-balanced subset holding `fraction` of the items.
    pub fn fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            bail!(Config, "dataset fraction {} outside (0, 1]", fraction);
        }
        let target = libm::round(self.len() as f64 * fraction).max(1.0) as usize;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut rng = seeded(derive_seed(seed, &[0xF2AC]));
        for bucket in by_class.iter_mut() {
            bucket.shuffle(&mut rng);
        }
        // round-robin over classes keeps the subset stratified
        let mut chosen = Vec::with_capacity(target);
        let mut cursor = 0;
        while chosen.len() < target {
            for bucket in &by_class {
                if cursor < bucket.len() && chosen.len() < target {
                    chosen.push(bucket[cursor]);
                }
            }
            cursor += 1;
        }
        chosen.sort_unstable();
        Ok(Self {
            images: chosen.iter().map(|&i| self.images[i].clone()).collect(),
            labels: chosen.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        })
    }
}

/// Visiting order of `len` items for `epoch`: a pure function of its inputs.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = seeded(derive_seed(seed, &[0x0D3E, epoch]));
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip() {
        let bytes: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::from_rgb8(4, 5, &bytes).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_out_of_range_pixels_and_labels() {
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        let img = Image::filled(2, 2, [0.5; 3]);
        assert!(LabeledDataset::new(vec![img], vec![3], 3, Split::Train).is_err());
    }

    #[test]
    fn epoch_order_is_pure_and_a_permutation() {
        let a = epoch_order(50, 9, 2);
        assert_eq!(a, epoch_order(50, 9, 2));
        assert_ne!(a, epoch_order(50, 9, 3));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn fraction_is_stratified() {
        let images = (0..40).map(|_| Image::filled(2, 2, [0.1; 3])).collect();
        let labels = (0..40).map(|i| i % 4).collect();
        let ds = LabeledDataset::new(images, labels, 4, Split::Train).unwrap();
        let half = ds.fraction(0.5, 1).unwrap();
        assert_eq!(half.len(), 20);
        for c in 0..4 {
            assert_eq!(half.labels().iter().filter(|&&l| l == c).count(), 5);
        }
        assert!(ds.fraction(0.0, 1).is_err());
    }
}
