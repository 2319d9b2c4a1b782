//! Finite-difference verification of every differentiable operation and of
//! one complete split-mask loss evaluation, in `f64`.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::synth_generate;
use crate::error::Result;
use crate::losses::{infonce, total_loss, LossWeights};
use crate::masking::block_mask;
use crate::model::{Batch, BoundParams, ModelConfig, ModelParams};
use crate::numerics::{grad_check_many, GradCheckReport, Tape, Tensor, Var};
use crate::rng::{derive_seed, normal, seeded};
use crate::tokenizer::build_random_projection;

/// Tolerance on the maximum relative error for nonlinear operations.
pub const NONLINEAR_TOL: f64 = 1e-4;
/// Tolerance for operations that are linear in each input.
pub const LINEAR_TOL: f64 = 1e-6;
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type Check = fn(&mut Tape<f64>, &[Var], &Tensor<f64>) -> Result<Var>;

fn weighted_sum(tape: &mut Tape<f64>, x: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone())?;
    let m = tape.mul(x, wv)?;
    tape.sum(m)
}

const OPS: [(&str, &[&[usize]], &[usize], bool, Check); 20] = [
    ("matmul", &[&[4, 3], &[3, 5]], &[4, 5], true, |t, v, w| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, w)
    }),
    ("add", &[&[3, 4], &[3, 4]], &[3, 4], true, |t, v, w| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, w)
    }),
    ("sub", &[&[3, 4], &[]], &[3, 4], true, |t, v, w| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y, w)
    }),
    ("mul", &[&[3, 4], &[3, 4]], &[3, 4], true, |t, v, w| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, w)
    }),
    ("scale", &[&[5]], &[5], true, |t, v, w| {
        let y = t.scale(v[0], -1.7)?;
        weighted_sum(t, y, w)
    }),
    ("sum", &[&[2, 3]], &[], true, |t, v, w| {
        let y = t.sum(v[0])?;
        weighted_sum(t, y, w)
    }),
    ("gelu", &[&[9]], &[9], false, |t, v, w| {
        let y = t.gelu(v[0])?;
        weighted_sum(t, y, w)
    }),
    ("softmax", &[&[3, 5]], &[3, 5], false, |t, v, w| {
        let y = t.softmax(v[0], 1)?;
        weighted_sum(t, y, w)
    }),
    ("layernorm", &[&[3, 6], &[6], &[6]], &[3, 6], false, |t, v, w| {
        let y = t.layernorm(v[0], v[1], v[2], 1e-6)?;
        weighted_sum(t, y, w)
    }),
    ("cross_entropy", &[&[4, 6]], &[], false, |t, v, _| t.cross_entropy(v[0], &[5, 0, 2, 2])),
    ("mean_pool", &[&[5, 3]], &[3], true, |t, v, w| {
        let y = t.mean_pool(v[0])?;
        weighted_sum(t, y, w)
    }),
    ("mean_pool_segments", &[&[6, 3]], &[2, 3], true, |t, v, w| {
        let y = t.mean_pool_segments(v[0], 3)?;
        weighted_sum(t, y, w)
    }),
    ("l2_normalize", &[&[3, 4]], &[3, 4], false, |t, v, w| {
        let y = t.l2_normalize(v[0], 1e-8)?;
        weighted_sum(t, y, w)
    }),
    ("add_row_bias", &[&[3, 4], &[4]], &[3, 4], true, |t, v, w| {
        let y = t.add_row_bias(v[0], v[1])?;
        weighted_sum(t, y, w)
    }),
    ("gather_rows", &[&[4, 3]], &[5, 3], true, |t, v, w| {
        let y = t.gather_rows(v[0], &[3, 0, 3, 1, 2])?;
        weighted_sum(t, y, w)
    }),
    ("concat_rows", &[&[2, 3], &[1, 3]], &[3, 3], true, |t, v, w| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        weighted_sum(t, y, w)
    }),
    ("repeat_rows", &[&[3]], &[4, 3], true, |t, v, w| {
        let y = t.repeat_rows(v[0], 4)?;
        weighted_sum(t, y, w)
    }),
    ("transpose", &[&[2, 5]], &[5, 2], true, |t, v, w| {
        let y = t.transpose(v[0])?;
        weighted_sum(t, y, w)
    }),
    ("reshape", &[&[2, 6]], &[3, 4], true, |t, v, w| {
        let y = t.reshape(v[0], &[3, 4])?;
        weighted_sum(t, y, w)
    }),
    ("attention", &[&[8, 4], &[8, 4], &[8, 4]], &[8, 4], false, |t, v, w| {
        let y = t.attention(v[0], v[1], v[2], 4, 2)?;
        weighted_sum(t, y, w)
    }),
];

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| normal(&mut rng))
}

/// Model used for the end-to-end check: 8×8 images, 4×4 patches.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        encoder_depth: 1,
        decoder_depth: 1,
        num_heads: 2,
        mlp_ratio: 2,
        vocab_size: 8,
        ..ModelConfig::default()
    }
}

/// Gradient of the full split-mask objective with respect to every model
/// parameter, for a batch of three images.
pub fn check_splitmask_step(seed: u64) -> Result<GradCheckReport> {
    let model = tiny_model();
    let data = synth_generate(seed, 3, 0, 2, 8)?;
    let vocab = build_random_projection(model.vocab_size, model.patch_dim(), seed)?;
    let mut rng = seeded(derive_seed(seed, &[0x6C]));
    let grid = model.grid();
    let plans = (0..3)
        .map(|_| block_mask(grid, grid, 0.5, 1, 2, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<_> = data.train.images().iter().collect();
    let batch = Batch::<f64>::from_images(&images, model.patch_size, Some(&vocab), plans)?;
    let params = ModelParams::<f64>::init(&model, None, seed)?;
    let inputs: Vec<Tensor<f64>> = params.params().iter().map(|p| p.value.clone()).collect();
    let weights = LossWeights::default();
    grad_check_many(
        |tape, vars| {
            let bound = BoundParams::from_vars(vars.to_vec());
            let out = params.forward_splitmask(tape, &bound, &batch, true)?;
            Ok(total_loss(tape, &out, &batch.targets, &weights)?.0)
        },
        &inputs,
        STEP,
        NONLINEAR_TOL,
    )
}

/// Runs the whole suite. Every entry carries its own tolerance and verdict.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(OPS.len() + 2);
    for (i, &(name, shapes, weight_shape, linear, f)) in OPS.iter().enumerate() {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| random(s, derive_seed(seed, &[i as u64, j as u64])))
            .collect();
        let w = random(weight_shape, derive_seed(seed, &[i as u64, 99]));
        let tol = if linear { LINEAR_TOL } else { NONLINEAR_TOL };
        let report = grad_check_many(|t, v| f(t, v, &w), &inputs, STEP, tol)?;
        out.push(SuiteEntry { name, report });
    }
    let descriptors = vec![random(&[4, 6], derive_seed(seed, &[50])), random(&[4, 6], derive_seed(seed, &[51]))];
    let report = grad_check_many(
        |t, v| {
            let a = t.l2_normalize(v[0], 1e-8)?;
            let b = t.l2_normalize(v[1], 1e-8)?;
            infonce(t, a, b, 0.2)
        },
        &descriptors,
        STEP,
        NONLINEAR_TOL,
    )?;
    out.push(SuiteEntry { name: "infonce", report });
    out.push(SuiteEntry {
        name: "splitmask_step",
        report: check_splitmask_step(seed)?,
    });
    Ok(out)
}
