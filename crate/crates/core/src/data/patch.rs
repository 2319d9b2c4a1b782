use alloc::vec;
use alloc::vec::Vec;

use super::{Image, CHANNELS};
use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// Non-overlapping square patches of an image in row-major grid order.
///
/// Patch `(r, c)` covers pixels `[r·p, (r+1)·p) × [c·p, (c+1)·p)`. Inside a
/// patch the flattened index is `channel·p² + y·p + x`, so `d = 3·p²`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub patches: Tensor<f32>,
}

impl PatchSequence {
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    pub fn d(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        self.patches.row(i)
    }
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchSequence> {
    let (h, w) = (image.height(), image.width());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        bail!(Dimension, "{}×{} image is not divisible into {}-pixel patches", h, w, patch_size);
    }
    let p = patch_size;
    let (rows, cols) = (h / p, w / p);
    let d = CHANNELS * p * p;
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            for ch in 0..CHANNELS {
                let plane = image.plane(ch);
                for y in 0..p {
                    let start = (r * p + y) * w + c * p;
                    data.extend_from_slice(&plane[start..start + p]);
                }
            }
        }
    }
    Ok(PatchSequence {
        rows,
        cols,
        patch_size: p,
        patches: Tensor::new(&[rows * cols, d], data)?,
    })
}

/// Reassembles an image from its patches; exact inverse of [`patchify`].
pub fn unpatchify(seq: &PatchSequence) -> Result<Image> {
    let p = seq.patch_size;
    let (h, w) = (seq.rows * p, seq.cols * p);
    if seq.patches.shape() != [seq.n(), seq.d()] {
        bail!(Dimension, "patch tensor {:?} does not match a {}×{} grid", seq.patches.shape(), seq.rows, seq.cols);
    }
    let mut data = vec![0.0f32; CHANNELS * h * w];
    for r in 0..seq.rows {
        for c in 0..seq.cols {
            let patch = seq.patch(r * seq.cols + c);
            for ch in 0..CHANNELS {
                for y in 0..p {
                    let dst = ch * h * w + (r * p + y) * w + c * p;
                    let src = ch * p * p + y * p;
                    data[dst..dst + p].copy_from_slice(&patch[src..src + p]);
                }
            }
        }
    }
    Image::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = seeded(seed);
        Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn desk_scale_shape() {
        let seq = patchify(&random_image(32, 32, 1), 8).unwrap();
        assert_eq!((seq.n(), seq.d()), (16, 192));
        assert_eq!(seq.patches.shape(), &[16, 192]);
    }

    #[test]
    fn single_patch_is_whole_image() {
        let img = random_image(16, 16, 2);
        let seq = patchify(&img, 16).unwrap();
        assert_eq!(seq.n(), 1);
        assert_eq!(seq.patch(0), img.data());
    }

    #[test]
    fn patch_layout() {
        let img = random_image(8, 12, 3);
        let seq = patchify(&img, 4).unwrap();
        // patch (1, 2), channel 2, y=3, x=1
        let v = seq.patch(5)[2 * 16 + 3 * 4 + 1];
        assert_eq!(v, img.get(2, 4 + 3, 8 + 1));
    }

    #[test]
    fn indivisible_dimensions() {
        assert!(patchify(&random_image(10, 8, 4), 8).is_err());
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(rows in 1usize..4, cols in 1usize..4, p in 1usize..5, seed in 0u64..100) {
            let img = random_image(rows * p, cols * p, seed);
            let seq = patchify(&img, p).unwrap();
            let back = unpatchify(&seq).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(patchify(&back, p).unwrap(), seq);
        }
    }
}
