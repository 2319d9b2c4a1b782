//! Mask plans: block masking, uniform masking and the A/B split.

use alloc::vec;
use alloc::vec::Vec;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{bail, Result};
use crate::rng::uniform;

/// Partition of a `rows × cols` patch grid into observed and masked patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    rows: usize,
    cols: usize,
    masked: Vec<bool>,
}

impl MaskPlan {
    pub fn new(rows: usize, cols: usize, masked: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            bail!(Dimension, "mask grid must be non-empty, got {}×{}", rows, cols);
        }
        if masked.len() != rows * cols {
            bail!(Dimension, "{}×{} grid needs {} mask bits, got {}", rows, cols, rows * cols, masked.len());
        }
        Ok(Self { rows, cols, masked })
    }

    /// Plan over a `1 × n` grid from a list of masked indices.
    pub fn from_indices(n: usize, masked: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n];
        for &i in masked {
            if i >= n {
                bail!(Index, "masked index {} outside grid of {}", i, n);
            }
            bits[i] = true;
        }
        Self::new(1, n, bits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n(&self) -> usize {
        self.masked.len()
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked[i]
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Observed indices, ascending.
    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.masked[i]).collect()
    }

    /// Masked indices, ascending.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.masked[i]).collect()
    }

    /// The same grid with observed and masked swapped.
    pub fn complement(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            masked: self.masked.iter().map(|m| !m).collect(),
        }
    }
}

/// The two disjoint patch subsets of a SplitMask step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

/// `A` = observed, `B` = masked, both ascending and non-empty.
pub fn split(plan: &MaskPlan) -> Result<SplitIndices> {
    let a = plan.observed_indices();
    let b = plan.masked_indices();
    if a.is_empty() || b.is_empty() {
        bail!(
            Config,
            "split needs both subsets non-empty, got |A|={} |B|={}",
            a.len(),
            b.len()
        );
    }
    Ok(SplitIndices { a, b })
}

fn target_count(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(Config, "masking ratio must be in (0, 1), got {}", ratio);
    }
    Ok(libm::floor(ratio * n as f64) as usize)
}

/// Exactly `⌊ratio·n⌋` positions drawn uniformly without replacement.
pub fn uniform_mask<R: Rng + ?Sized>(rows: usize, cols: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    let n = rows * cols;
    let count = target_count(n, ratio)?;
    let mut bits = vec![false; n];
    for i in sample(rng, n, count) {
        bits[i] = true;
    }
    MaskPlan::new(rows, cols, bits)
}

/// Min/max patches per block on a 14×14 grid.
pub const REFERENCE_BLOCK_BOUNDS: (usize, usize) = (16, 75);

/// Block bounds scaled from the `14×14` grid to `n` patches.
pub fn scaled_block_bounds(n: usize) -> (usize, usize) {
    let min = (REFERENCE_BLOCK_BOUNDS.0 * n / 196).max(1);
    let max = (REFERENCE_BLOCK_BOUNDS.1 * n / 196).max(min);
    (min, max)
}

/// Block aspect ratios are log-uniform in `[ASPECT_MIN, 1 / ASPECT_MIN]`.
pub const ASPECT_MIN: f64 = 0.3;

/// Union of random rectangles, trimmed to exactly `⌊ratio·n⌋` masked patches.
pub fn block_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    ratio: f64,
    min_block: usize,
    max_block: usize,
    rng: &mut R,
) -> Result<MaskPlan> {
    let n = rows * cols;
    let count = target_count(n, ratio)?;
    if min_block == 0 || min_block > max_block {
        bail!(Config, "block bounds need 1 ≤ min ≤ max, got [{}, {}]", min_block, max_block);
    }
    if min_block > n {
        bail!(Config, "min block {} exceeds grid of {} patches", min_block, n);
    }
    let max_block = max_block.min(n);
    let mut bits = vec![false; n];
    let mut masked = 0;
    let (log_lo, log_hi) = (libm::log(ASPECT_MIN), -libm::log(ASPECT_MIN));
    while masked < count {
        let area = uniform(rng, min_block as f64, max_block as f64);
        let aspect = libm::exp(uniform(rng, log_lo, log_hi));
        let h = (libm::round(libm::sqrt(area * aspect)) as usize).clamp(1, rows);
        let w = (libm::round(libm::sqrt(area / aspect)) as usize).clamp(1, cols);
        // every placement overlapping the grid is equally likely, then clipped
        let top = rng.random_range(0..rows + h - 1) as isize - (h as isize - 1);
        let left = rng.random_range(0..cols + w - 1) as isize - (w as isize - 1);
        let (y0, y1) = (top.max(0) as usize, ((top + h as isize) as usize).min(rows));
        let (x0, x1) = (left.max(0) as usize, ((left + w as isize) as usize).min(cols));
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * cols + x;
                if !bits[i] {
                    bits[i] = true;
                    masked += 1;
                }
            }
        }
    }
    if masked > count {
        let on: Vec<usize> = (0..n).filter(|&i| bits[i]).collect();
        for k in sample(rng, on.len(), masked - count) {
            bits[on[k]] = false;
        }
    }
    MaskPlan::new(rows, cols, bits)
}

/// Which masking scheme produces plans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MaskingKind {
    Block,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MaskingConfig {
    pub kind: MaskingKind,
    pub ratio: f64,
    /// Patches per block; `None` scales [`REFERENCE_BLOCK_BOUNDS`] to the grid.
    pub min_block: Option<usize>,
    pub max_block: Option<usize>,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            kind: MaskingKind::Block,
            ratio: 0.5,
            min_block: None,
            max_block: None,
        }
    }
}

impl MaskingConfig {
    /// 75% uniform masking for the smallest datasets.
    pub fn small_data() -> Self {
        Self {
            kind: MaskingKind::Uniform,
            ratio: 0.75,
            ..Self::default()
        }
    }

    pub fn block_bounds(&self, n: usize) -> (usize, usize) {
        let (min, max) = scaled_block_bounds(n);
        let min = self.min_block.unwrap_or(min);
        (min, self.max_block.unwrap_or(max.max(min)))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rows: usize, cols: usize, rng: &mut R) -> Result<MaskPlan> {
        match self.kind {
            MaskingKind::Uniform => uniform_mask(rows, cols, self.ratio, rng),
            MaskingKind::Block => {
                let (min, max) = self.block_bounds(rows * cols);
                block_mask(rows, cols, self.ratio, min, max, rng)
            }
        }
    }
}
