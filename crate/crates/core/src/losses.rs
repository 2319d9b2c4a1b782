//! Visual-word cross-entropy and the symmetric InfoNCE objective.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::model::SplitOutput;
use crate::numerics::{Tape, Var};
use crate::real::Real;

/// Loss weights and contrastive temperature.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    pub mim: f64,
    pub nce: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mim: 1.0,
            nce: 1.0,
            tau: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.mim >= 0.0 && self.nce >= 0.0) {
            bail!(Config, "loss weights must be non-negative, got mim={} nce={}", self.mim, self.nce);
        }
        if self.mim == 0.0 && self.nce == 0.0 {
            bail!(Config, "at least one of the mim and nce weights must be positive");
        }
        if !(self.tau > 0.0) {
            bail!(Config, "temperature must be positive, got {}", self.tau);
        }
        Ok(())
    }
}

/// Scalar values of one loss evaluation. A disabled term is `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mim: Option<f64>,
    pub nce: Option<f64>,
    pub total: f64,
}

/// Cross-entropy over both branches' predictions, each patch position
/// contributing exactly once.
pub fn mim_loss<T: Real>(tape: &mut Tape<T>, out: &SplitOutput, targets: &[usize]) -> Result<Var> {
    let (Some(la), Some(lb)) = (out.a.logits, out.b.logits) else {
        bail!(Usage, "mim_loss needs logits from both branches");
    };
    let mut seen = alloc::vec![false; targets.len()];
    let mut rows = Vec::with_capacity(targets.len());
    for &r in out.a.missing.iter().chain(&out.b.missing) {
        if r >= targets.len() || seen[r] {
            bail!(Usage, "branch predictions do not partition the patch grid (row {})", r);
        }
        seen[r] = true;
        rows.push(targets[r]);
    }
    if rows.len() != targets.len() {
        bail!(Usage, "branches predict {} of {} patches", rows.len(), targets.len());
    }
    let logits = tape.concat_rows(&[la, lb])?;
    tape.cross_entropy(logits, &rows)
}

/// `mean_i (ℓa(i) + ℓb(i)) / 2` with in-batch negatives, where `ℓa(i)` is the
/// cross-entropy of row `i` of `Xa·Xbᵀ/τ` against its diagonal and `ℓb`
/// the same for `Xb·Xaᵀ/τ`.
pub fn infonce<T: Real>(tape: &mut Tape<T>, xa: Var, xb: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        bail!(Config, "temperature must be positive, got {}", tau);
    }
    if tape.shape(xa) != tape.shape(xb) || tape.shape(xa).len() != 2 {
        bail!(Dimension, "infonce: descriptor shapes {:?} and {:?}", tape.shape(xa), tape.shape(xb));
    }
    let b = tape.shape(xa)[0];
    let diag: Vec<usize> = (0..b).collect();
    let xbt = tape.transpose(xb)?;
    let sim = tape.matmul(xa, xbt)?;
    let sim = tape.scale(sim, T::from_f64(1.0 / tau))?;
    let la = tape.cross_entropy(sim, &diag)?;
    let simt = tape.transpose(sim)?;
    let lb = tape.cross_entropy(simt, &diag)?;
    let both = tape.add(la, lb)?;
    tape.scale(both, T::from_f64(0.5))
}

/// `λ_mim·mim + λ_nce·nce`; a zero weight skips its term entirely.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &SplitOutput,
    targets: &[usize],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown {
        mim: None,
        nce: None,
        total: 0.0,
    };
    if weights.mim > 0.0 {
        let l = mim_loss(tape, out, targets)?;
        breakdown.mim = Some(tape.value(l).item().to_f64());
        total = Some(tape.scale(l, T::from_f64(weights.mim))?);
    }
    if weights.nce > 0.0 {
        let l = infonce(tape, out.a.descriptor, out.b.descriptor, weights.tau)?;
        breakdown.nce = Some(tape.value(l).item().to_f64());
        let scaled = tape.scale(l, T::from_f64(weights.nce))?;
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("validated weights enable a term");
    breakdown.total = tape.value(total).item().to_f64();
    Ok((total, breakdown))
}

/// Cross-entropy of BEiT-mode logits against the targets of their rows.
pub fn beit_loss<T: Real>(tape: &mut Tape<T>, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
    let picked: Vec<usize> = rows
        .iter()
        .map(|&r| targets.get(r).copied())
        .collect::<Option<_>>()
        .ok_or_else(|| crate::Error::Index("beit row outside target range".into()))?;
    tape.cross_entropy(logits, &picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::rng::{normal, seeded};
    use alloc::vec;
    use proptest::prelude::*;

    /// Direct evaluation of the per-pair softmax formula, no matrices.
    fn brute_force(xa: &[Vec<f64>], xb: &[Vec<f64>], tau: f64) -> f64 {
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let b = xa.len();
        let mut total = 0.0;
        for i in 0..b {
            for (p, q) in [(xa, xb), (xb, xa)] {
                let pos = (dot(&p[i], &q[i]) / tau).exp();
                let mut denom = pos;
                for j in 0..b {
                    if j != i {
                        denom += (dot(&p[i], &q[j]) / tau).exp();
                    }
                }
                total += -(pos / denom).ln() / 2.0;
            }
        }
        total / b as f64
    }

    fn unit_rows(b: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        (0..b)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect()
    }

    fn eval(xa: &[Vec<f64>], xb: &[Vec<f64>], tau: f64) -> f64 {
        let d = xa[0].len();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(&[xa.len(), d], xa.concat()).unwrap()).unwrap();
        let b = tape.constant(Tensor::new(&[xb.len(), d], xb.concat()).unwrap()).unwrap();
        let l = infonce(&mut tape, a, b, tau).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn single_pair_is_exactly_zero() {
        let x = unit_rows(1, 5, 0);
        let y = unit_rows(1, 5, 1);
        assert_eq!(eval(&x, &y, 0.2), 0.0);
    }

    #[test]
    fn orthogonal_pairs() {
        let u = vec![1.0, 0.0, 0.0];
        let v = vec![0.0, 1.0, 0.0];
        let x = vec![u, v];
        let got = eval(&x, &x, 0.2);
        let expected = (1.0 + (-5.0f64).exp()).ln();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.00672).abs() < 1e-5);
    }

    #[test]
    fn matches_brute_force_and_is_symmetric() {
        for seed in 0..10 {
            let xa = unit_rows(6, 8, seed);
            let xb = unit_rows(6, 8, seed + 100);
            let got = eval(&xa, &xb, 0.2);
            assert!((got - brute_force(&xa, &xb, 0.2)).abs() < 1e-12);
            assert!((got - eval(&xb, &xa, 0.2)).abs() <= 4.0 * f64::EPSILON * got.abs());
        }
    }

    #[test]
    fn rejects_bad_temperature_and_weights() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(infonce(&mut tape, a, a, 0.0), Err(crate::Error::Config(_))));
        let zero = LossWeights {
            mim: 0.0,
            nce: 0.0,
            tau: 0.2,
        };
        assert!(matches!(zero.validate(), Err(crate::Error::Config(_))));
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[5, 8])).unwrap();
        let ce = tape.cross_entropy(l, &[0, 1, 2, 3, 7]).unwrap();
        assert!((tape.value(ce).item() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn positive_similarity_increase_lowers_loss() {
        let xa = unit_rows(4, 6, 3);
        let mut xb = unit_rows(4, 6, 4);
        // moving xb[0] toward xa[0] leaves row 0's negatives xb[1..] fixed
        let row_loss = |xa: &[Vec<f64>], xb: &[Vec<f64>]| {
            let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            let s: Vec<f64> = (0..4).map(|j| (dot(&xa[0], &xb[j]) / 0.2).exp()).collect();
            -(s[0] / s.iter().sum::<f64>()).ln()
        };
        let r0 = row_loss(&xa, &xb);
        let mixed: Vec<f64> = xb[0].iter().zip(&xa[0]).map(|(b, a)| 0.5 * b + 0.5 * a).collect();
        let n = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
        xb[0] = mixed.iter().map(|x| x / n).collect();
        assert!(row_loss(&xa, &xb) < r0);
    }

    #[test]
    fn total_respects_weights() {
        use crate::data::{synth_generate, Image};
        use crate::masking::MaskingConfig;
        use crate::model::{Batch, BoundParams, ModelConfig, ModelParams};
        use crate::tokenizer::build_random_projection;

        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            encoder_depth: 1,
            decoder_depth: 1,
            num_heads: 2,
            vocab_size: 8,
            ..ModelConfig::default()
        };
        let params = ModelParams::<f64>::init(&cfg, None, 0).unwrap();
        let data = synth_generate(0, 3, 0, 4, 16).unwrap();
        let vocab = build_random_projection(8, cfg.patch_dim(), 0).unwrap();
        let mut rng = seeded(0);
        let plans = (0..3).map(|_| MaskingConfig::default().sample(4, 4, &mut rng).unwrap()).collect();
        let images: Vec<&Image> = data.train.images().iter().collect();
        let batch = Batch::from_images(&images, 4, Some(&vocab), plans).unwrap();
        let run = |w: LossWeights| {
            let mut tape = Tape::new();
            let p = BoundParams::bind(&mut tape, &params, true).unwrap();
            let out = params.forward_splitmask(&mut tape, &p, &batch, w.mim > 0.0).unwrap();
            total_loss(&mut tape, &out, &batch.targets, &w).unwrap().1
        };
        let full = run(LossWeights::default());
        assert!((full.total - full.mim.unwrap() - full.nce.unwrap()).abs() < 1e-12);
        let inpaint = run(LossWeights { nce: 0.0, mim: 2.0, tau: 0.2 });
        assert_eq!(inpaint.nce, None);
        assert!((inpaint.total - 2.0 * full.mim.unwrap()).abs() < 1e-12);
        let matching = run(LossWeights { mim: 0.0, ..LossWeights::default() });
        assert_eq!(matching.mim, None);
        assert_eq!(matching.total, full.nce.unwrap());
        assert!(full.mim.unwrap() > 0.0 && full.nce.unwrap() >= 0.0);
    }

    proptest! {
        #[test]
        fn invariant_under_shared_row_permutation(seed: u64, rot in 0usize..5) {
            let xa = unit_rows(5, 4, seed);
            let xb = unit_rows(5, 4, seed ^ 0xABCD);
            let mut pa = xa.clone();
            let mut pb = xb.clone();
            pa.rotate_left(rot);
            pb.rotate_left(rot);
            let l = eval(&xa, &xb, 0.2);
            prop_assert!((l - eval(&pa, &pb, 0.2)).abs() < 1e-12);
            prop_assert!(l >= 0.0);
        }
    }
}
