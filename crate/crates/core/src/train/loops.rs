use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use super::optim::{adamw_step, OptimizerState};
use super::schedule::cosine_lr;
use super::{total_steps, FinetuneConfig, PretrainConfig, ProbeConfig};
use crate::data::{epoch_order, Augmenter, Image, LabeledDataset};
use crate::error::{bail, Result};
use crate::losses::{beit_loss, total_loss, LossBreakdown};
use crate::model::{Batch, BoundParams, ModelParams, Mode};
use crate::numerics::{Tape, Tensor};
use crate::rng::{derive_seed, seeded};
use crate::tokenizer::Vocabulary;

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Number of optimizer updates applied so far.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_mim: Option<f64>,
    pub loss_nce: Option<f64>,
    pub images_per_sec: Option<f64>,
}

/// Receives progress from the training loops. Every method defaults to a
/// no-op, so `()` observes nothing.
pub trait Observer {
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: usize, _params: &ModelParams<f32>) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _epoch: usize, _test_accuracy: f64) -> Result<()> {
        Ok(())
    }

    /// Throughput of the step that just processed `images` images, if a
    /// clock is available.
    fn images_per_sec(&mut self, _images: usize) -> Option<f64> {
        None
    }
}

impl Observer for () {}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub steps: usize,
    pub last: LossBreakdown,
    /// Mean losses over the final epoch.
    pub final_epoch_total: f64,
    pub final_epoch_mim: Option<f64>,
    pub final_epoch_nce: Option<f64>,
}

fn parameter_refs(params: &mut ModelParams<f32>) -> (Vec<&mut Tensor<f32>>, Vec<bool>) {
    params.params_mut().iter_mut().map(|p| (&mut p.value, p.decay)).unzip()
}

fn check_images(images: &[Image], size: usize) -> Result<()> {
    if images.is_empty() {
        bail!(Capacity, "training set is empty");
    }
    if let Some(im) = images.iter().find(|im| im.height() < 1 || im.width() < 1) {
        bail!(Dimension, "invalid image {}×{}", im.height(), im.width());
    }
    let _ = size;
    Ok(())
}

/// Pre-trains `params` in place for `config.epochs` epochs. On error the
/// parameters hold the last successfully applied update.
pub fn pretrain(
    params: &mut ModelParams<f32>,
    images: &[Image],
    vocab: &Vocabulary,
    config: &PretrainConfig,
    observer: &mut dyn Observer,
) -> Result<PretrainSummary> {
    config.optim.validate()?;
    config.loss.validate()?;
    let model = params.config().clone();
    if vocab.size() != model.vocab_size || vocab.dim() != model.patch_dim() {
        bail!(
            Config,
            "vocabulary is {}×{}, model expects {}×{}",
            vocab.size(),
            vocab.dim(),
            model.vocab_size,
            model.patch_dim()
        );
    }
    if config.batch_size == 0 || config.epochs == 0 {
        bail!(Config, "batch_size and epochs must be positive");
    }
    check_images(images, model.image_size)?;
    let total = total_steps(images.len(), config.batch_size, config.epochs);
    let warmup = config.optim.warmup(total);
    let peak = config.optim.peak_lr(config.batch_size);
    let adamw = config.optim.adamw();
    let augmenter = Augmenter::new(config.augment);
    let grid = model.grid();
    let mut state = OptimizerState::new(params.params().iter().map(|p| p.value.shape()));
    let mut step = 0;
    let mut last = None;
    let mut epoch_sums = (0.0, 0.0, 0.0, 0usize);
    for epoch in 0..config.epochs {
        epoch_sums = (0.0, 0.0, 0.0, 0);
        let order = epoch_order(images.len(), config.seed, epoch as u64);
        for chunk in order.chunks(config.batch_size) {
            let mut rng = seeded(derive_seed(config.seed, &[0x57E9, step as u64]));
            let views: Vec<Image> = chunk
                .iter()
                .map(|&i| augmenter.apply(&images[i], model.image_size, &mut rng))
                .collect();
            let plans = (0..chunk.len())
                .map(|_| config.masking.sample(grid, grid, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Image> = views.iter().collect();
            let batch = Batch::<f32>::from_images(&refs, model.patch_size, Some(vocab), plans)?;

            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, params, true)?;
            let (loss, breakdown) = match model.mode {
                Mode::Splitmask => {
                    let out = params.forward_splitmask(&mut tape, &bound, &batch, config.loss.mim > 0.0)?;
                    total_loss(&mut tape, &out, &batch.targets, &config.loss)?
                }
                Mode::Beit => {
                    let (logits, rows) = params.forward_beit(&mut tape, &bound, &batch)?;
                    let l = beit_loss(&mut tape, logits, &rows, &batch.targets)?;
                    let v = tape.value(l).item() as f64;
                    (l, LossBreakdown { mim: Some(v), nce: None, total: v })
                }
            };
            let mut grads = tape.backward(loss)?;
            let grads = bound.gradients(&tape, &mut grads);
            drop(tape);
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(crate::Error::NonFinite { op: "backward" });
            }
            let lr = cosine_lr(step + 1, warmup, total, peak, config.optim.lr_floor);
            let (mut refs, decay) = parameter_refs(params);
            adamw_step(&mut refs, &grads, &decay, &mut state, lr, &adamw)?;
            step += 1;
            epoch_sums.0 += breakdown.total;
            epoch_sums.1 += breakdown.mim.unwrap_or(0.0);
            epoch_sums.2 += breakdown.nce.unwrap_or(0.0);
            epoch_sums.3 += 1;
            let metrics = StepMetrics {
                step,
                epoch,
                lr,
                loss_total: breakdown.total,
                loss_mim: breakdown.mim,
                loss_nce: breakdown.nce,
                images_per_sec: observer.images_per_sec(chunk.len()),
            };
            observer.on_step(&metrics)?;
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < total {
                observer.on_checkpoint(step, params)?;
            }
            last = Some(breakdown);
        }
    }
    observer.on_checkpoint(step, params)?;
    let last = last.expect("at least one step");
    let count = epoch_sums.3 as f64;
    Ok(PretrainSummary {
        steps: step,
        last,
        final_epoch_total: epoch_sums.0 / count,
        final_epoch_mim: last.mim.map(|_| epoch_sums.1 / count),
        final_epoch_nce: last.nce.map(|_| epoch_sums.2 / count),
    })
}

/// Stacked model-ready patches of `images` resized to the model input size.
fn batch_patches(params: &ModelParams<f32>, images: &[&Image]) -> Result<Tensor<f32>> {
    let size = params.config().image_size;
    let resized: Vec<Image> = images.iter().map(|im| im.resize(size, size)).collect();
    let refs: Vec<&Image> = resized.iter().collect();
    Ok(Batch::<f32>::from_images(&refs, params.config().patch_size, None, Vec::new())?.patches)
}

const EVAL_CHUNK: usize = 128;

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of the classifier head on `data`.
pub fn accuracy(params: &ModelParams<f32>, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        bail!(Capacity, "evaluation set is empty");
    }
    let mut correct = 0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let images: Vec<&Image> = (start..end).map(|i| data.image(i)).collect();
        let patches = batch_patches(params, &images)?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, false)?;
        let logits = params.classify(&mut tape, &bound, &patches)?;
        let v = tape.value(logits);
        for (r, i) in (start..end).enumerate() {
            correct += (argmax(v.row(r)) == data.label(i)) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    /// `(epoch, test accuracy)` at every evaluation.
    pub history: Vec<(usize, f64)>,
}

/// Attaches a fresh classifier head to `backbone` and trains every weight.
pub fn finetune(
    backbone: &ModelParams<f32>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &FinetuneConfig,
    observer: &mut dyn Observer,
) -> Result<(ModelParams<f32>, FinetuneReport)> {
    config.optim.validate()?;
    if train.num_classes() != test.num_classes() {
        bail!(Usage, "train has {} classes, test has {}", train.num_classes(), test.num_classes());
    }
    if let Some(c) = backbone.num_classes() {
        if c != train.num_classes() {
            bail!(Usage, "classifier head has {} classes, dataset has {}", c, train.num_classes());
        }
    }
    if config.batch_size == 0 || config.epochs == 0 {
        bail!(Config, "batch_size and epochs must be positive");
    }
    if !(0.0..1.0).contains(&config.label_smoothing) {
        bail!(Config, "label_smoothing must be in [0, 1)");
    }
    check_images(train.images(), backbone.config().image_size)?;
    let classes = train.num_classes();
    let mut params = backbone.without_classifier().with_classifier(classes, derive_seed(config.seed, &[0xC1A5]))?;
    let size = params.config().image_size;
    let total = total_steps(train.len(), config.batch_size, config.epochs);
    let warmup = config.optim.warmup(total);
    let peak = config.optim.peak_lr(config.batch_size);
    let adamw = config.optim.adamw();
    let augmenter = Augmenter::new(config.augment);
    let mut state = OptimizerState::new(params.params().iter().map(|p| p.value.shape()));
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = epoch_order(train.len(), derive_seed(config.seed, &[0xF17E]), epoch as u64);
        for chunk in order.chunks(config.batch_size) {
            let mut rng = seeded(derive_seed(config.seed, &[0xF1, step as u64]));
            let views: Vec<Image> = chunk.iter().map(|&i| augmenter.apply(train.image(i), size, &mut rng)).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.label(i)).collect();
            let refs: Vec<&Image> = views.iter().collect();
            let patches = batch_patches(&params, &refs)?;
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params, true)?;
            let logits = params.classify(&mut tape, &bound, &patches)?;
            let mut loss = tape.cross_entropy(logits, &labels)?;
            if config.label_smoothing > 0.0 {
                let eps = config.label_smoothing as f32;
                let mut smooth = None;
                for c in 0..classes {
                    let l = tape.cross_entropy(logits, &vec![c; labels.len()])?;
                    smooth = Some(match smooth {
                        Some(s) => tape.add(s, l)?,
                        None => l,
                    });
                }
                let smooth = tape.scale(smooth.expect("classes > 0"), eps / classes as f32)?;
                let hard = tape.scale(loss, 1.0 - eps)?;
                loss = tape.add(hard, smooth)?;
            }
            let loss_value = tape.value(loss).item() as f64;
            let mut grads = tape.backward(loss)?;
            let grads = bound.gradients(&tape, &mut grads);
            drop(tape);
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(crate::Error::NonFinite { op: "backward" });
            }
            let lr = cosine_lr(step + 1, warmup, total, peak, config.optim.lr_floor);
            let (mut refs, decay) = parameter_refs(&mut params);
            adamw_step(&mut refs, &grads, &decay, &mut state, lr, &adamw)?;
            step += 1;
            let images_per_sec = observer.images_per_sec(chunk.len());
            observer.on_step(&StepMetrics {
                step,
                epoch,
                lr,
                loss_total: loss_value,
                loss_mim: None,
                loss_nce: None,
                images_per_sec,
            })?;
        }
        let last = epoch + 1 == config.epochs;
        if last || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0) {
            let acc = accuracy(&params, test)?;
            observer.on_eval(epoch, acc)?;
            history.push((epoch, acc));
        }
    }
    let final_accuracy = history.last().expect("final evaluation").1;
    let best_accuracy = history.iter().map(|h| h.1).fold(0.0, f64::max);
    Ok((
        params,
        FinetuneReport {
            best_accuracy,
            final_accuracy,
            history,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub layer: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// `[layer][image][embed]` pooled features for every encoder layer.
fn layer_features(params: &ModelParams<f32>, data: &LabeledDataset) -> Result<Vec<Vec<f32>>> {
    let depth = params.config().encoder_depth;
    let mut out = vec![Vec::with_capacity(data.len() * params.config().embed_dim); depth + 1];
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let images: Vec<&Image> = (start..end).map(|i| data.image(i)).collect();
        let patches = batch_patches(params, &images)?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, false)?;
        for (layer, v) in params.features_per_layer(&mut tape, &bound, &patches)?.into_iter().enumerate() {
            out[layer].extend_from_slice(tape.value(v).data());
        }
    }
    Ok(out)
}

fn standardize(train: &mut [f32], test: &mut [f32], dim: usize) {
    let n = (train.len() / dim) as f64;
    for c in 0..dim {
        let mean = train.iter().skip(c).step_by(dim).map(|&v| v as f64).sum::<f64>() / n;
        let var = train.iter().skip(c).step_by(dim).map(|&v| { let d = v as f64 - mean; d * d }).sum::<f64>() / n;
        let inv = 1.0 / libm::sqrt(var + 1e-6);
        for x in train.iter_mut().skip(c).step_by(dim).chain(test.iter_mut().skip(c).step_by(dim)) {
            *x = ((*x as f64 - mean) * inv) as f32;
        }
    }
}

fn linear_accuracy(features: &[f32], labels: &[usize], w: &Tensor<f32>, b: &Tensor<f32>, dim: usize) -> f64 {
    let classes = b.numel();
    let mut correct = 0;
    for (row, &label) in features.chunks_exact(dim).zip(labels) {
        let scores: Vec<f32> = (0..classes)
            .map(|c| b.data()[c] + row.iter().enumerate().map(|(k, &x)| x * w.data()[k * classes + c]).sum::<f32>())
            .collect();
        correct += (argmax(&scores) == label) as usize;
    }
    correct as f64 / labels.len() as f64
}

/// Linear classifiers on frozen, standardized pooled features of each
/// requested encoder layer.
pub fn probe(
    params: &ModelParams<f32>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &ProbeConfig,
) -> Result<Vec<ProbeResult>> {
    config.optim.validate()?;
    let depth = params.config().encoder_depth;
    let layers: Vec<usize> = if config.layers.is_empty() {
        (0..=depth).collect()
    } else {
        config.layers.clone()
    };
    if let Some(&l) = layers.iter().find(|&&l| l > depth) {
        bail!(Index, "probe layer {} outside [0, {}]", l, depth);
    }
    if train.is_empty() || test.is_empty() || config.batch_size == 0 || config.epochs == 0 {
        bail!(Config, "probe needs non-empty splits, batch_size and epochs");
    }
    let dim = params.config().embed_dim;
    let classes = train.num_classes();
    let mut train_feats = layer_features(params, train)?;
    let mut test_feats = layer_features(params, test)?;
    let total = total_steps(train.len(), config.batch_size, config.epochs);
    let warmup = config.optim.warmup(total);
    let peak = config.optim.peak_lr(config.batch_size);
    let adamw = config.optim.adamw();
    let mut results = Vec::with_capacity(layers.len());
    for &layer in &layers {
        let (tr, te) = (&mut train_feats[layer], &mut test_feats[layer]);
        standardize(tr, te, dim);
        let mut rng = seeded(derive_seed(config.seed, &[0x960B, layer as u64]));
        let mut w = Tensor::from_fn(&[dim, classes], |_| (rng.random::<f32>() - 0.5) * 0.02);
        let mut b = Tensor::<f32>::zeros(&[classes]);
        let mut state = OptimizerState::new([w.shape(), b.shape()]);
        let mut step = 0;
        for epoch in 0..config.epochs {
            let order = epoch_order(train.len(), derive_seed(config.seed, &[0x960C, layer as u64]), epoch as u64);
            for chunk in order.chunks(config.batch_size) {
                let mut x = Vec::with_capacity(chunk.len() * dim);
                for &i in chunk {
                    x.extend_from_slice(&tr[i * dim..(i + 1) * dim]);
                }
                let labels: Vec<usize> = chunk.iter().map(|&i| train.label(i)).collect();
                let mut tape = Tape::new();
                let xv = tape.constant(Tensor::new(&[chunk.len(), dim], x)?)?;
                let wv = tape.param(w.clone())?;
                let bv = tape.param(b.clone())?;
                let logits = tape.matmul(xv, wv)?;
                let logits = tape.add_row_bias(logits, bv)?;
                let loss = tape.cross_entropy(logits, &labels)?;
                let mut grads = tape.backward(loss)?;
                let g = [grads.take(wv).expect("weight gradient"), grads.take(bv).expect("bias gradient")];
                let lr = cosine_lr(step + 1, warmup, total, peak, config.optim.lr_floor);
                adamw_step(&mut [&mut w, &mut b], &g, &[true, false], &mut state, lr, &adamw)?;
                step += 1;
            }
        }
        results.push(ProbeResult {
            layer,
            train_accuracy: linear_accuracy(tr, train.labels(), &w, &b, dim),
            test_accuracy: linear_accuracy(te, test.labels(), &w, &b, dim),
        });
    }
    Ok(results)
}
