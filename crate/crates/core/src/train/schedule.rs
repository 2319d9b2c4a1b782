//! Epoch budgets and the learning-rate schedule.

/// Epoch count that keeps the number of updates of `reference_epochs` over
/// `reference_size` images, capped at `cap`.
pub fn epoch_budget(dataset_size: usize, reference_size: usize, reference_epochs: usize, cap: Option<usize>) -> usize {
    scaled(reference_size as f64 / dataset_size as f64, reference_epochs, cap)
}

/// [`epoch_budget`] for a subset holding `fraction` of the reference set.
pub fn epoch_budget_for_fraction(fraction: f64, reference_epochs: usize, cap: Option<usize>) -> usize {
    scaled(1.0 / fraction, reference_epochs, cap)
}

fn scaled(factor: f64, reference_epochs: usize, cap: Option<usize>) -> usize {
    let epochs = libm::round(reference_epochs as f64 * factor) as usize;
    cap.map_or(epochs, |c| epochs.min(c)).max(1)
}

/// Rounds an epoch count to the nearest multiple of `step`.
pub fn round_epochs(epochs: usize, step: usize) -> usize {
    libm::round(epochs as f64 / step as f64) as usize * step
}

pub const IMAGENET_TRAIN_SIZE: usize = 1_281_167;
pub const IMAGENET_EPOCHS: usize = 300;
/// Epoch cap for small classification datasets.
pub const SMALL_DATASET_CAP: usize = 5000;

/// A published pre-training schedule: dataset, train-set size, epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochPreset {
    pub name: &'static str,
    pub train_size: usize,
    pub epochs: usize,
}

pub const EPOCH_PRESETS: [EpochPreset; 11] = [
    EpochPreset { name: "imagenet", train_size: 1_281_167, epochs: 300 },
    EpochPreset { name: "inaturalist2018", train_size: 437_513, epochs: 800 },
    EpochPreset { name: "inaturalist2019", train_size: 265_240, epochs: 1_400 },
    EpochPreset { name: "food101", train_size: 75_750, epochs: 5_000 },
    EpochPreset { name: "stanford_cars", train_size: 8_144, epochs: 5_000 },
    EpochPreset { name: "clipart", train_size: 34_019, epochs: 5_000 },
    EpochPreset { name: "painting", train_size: 52_867, epochs: 5_000 },
    EpochPreset { name: "sketch", train_size: 49_115, epochs: 5_000 },
    EpochPreset { name: "ade20k", train_size: 20_210, epochs: 21_000 },
    EpochPreset { name: "coco", train_size: 118_287, epochs: 3_000 },
    EpochPreset { name: "imagenet_10pct", train_size: 128_117, epochs: 3_000 },
];

pub fn preset(name: &str) -> Option<EpochPreset> {
    EPOCH_PRESETS.iter().copied().find(|p| p.name == name)
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// `floor` at `total`.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, peak: f64, floor: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    let lr = floor + (peak - floor) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t));
    lr.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn imagenet_subsets() {
        assert_eq!(epoch_budget_for_fraction(0.1, 300, None), 3000);
        assert_eq!(epoch_budget_for_fraction(0.01, 300, None), 30_000);
        assert_eq!(epoch_budget(128_117, IMAGENET_TRAIN_SIZE, 300, None), 3000);
        assert_eq!(epoch_budget(118_287, IMAGENET_TRAIN_SIZE, 300, None), 3249);
        assert_eq!(round_epochs(3249, 1000), 3000);
        assert_eq!(epoch_budget(8_144, IMAGENET_TRAIN_SIZE, 300, Some(SMALL_DATASET_CAP)), 5000);
    }

    #[test]
    fn presets_are_verbatim() {
        assert_eq!(preset("coco").unwrap().epochs, 3000);
        assert_eq!(preset("ade20k").unwrap().epochs, 21_000);
        assert_eq!(preset("inaturalist2018").unwrap().epochs, 800);
        assert_eq!(preset("nope"), None);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 100, 1e-3, 1e-5), 0.0);
        assert_eq!(cosine_lr(10, 10, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 10, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert_eq!(cosine_lr(0, 0, 100, 2.0, 0.0), 2.0);
    }

    proptest! {
        #[test]
        fn budget_identity(x in 1usize..100_000, e in 1usize..1000, cap in 1usize..2000) {
            prop_assert_eq!(epoch_budget(x, x, e, Some(cap)), e.min(cap));
        }

        #[test]
        fn lr_is_bounded(step in 0usize..500, warmup in 0usize..100, extra in 0usize..400, peak in 0.0f64..1.0) {
            let lr = cosine_lr(step, warmup, warmup + extra, peak, 0.0);
            prop_assert!(lr >= 0.0 && lr <= peak + 1e-15);
        }
    }
}
