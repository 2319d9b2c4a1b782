use alloc::vec;
use alloc::vec::Vec;

use super::{BlockIdx, ModelParams, Mode, LAYERNORM_EPS};
use crate::data::{patchify, Image};
use crate::error::{bail, Result};
use crate::masking::{split, MaskPlan};
use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::real::Real;
use crate::tokenizer::{tokenize, Vocabulary};

/// Parameters placed on a tape, in [`ModelParams::params`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// `trainable = false` binds constants, so no gradients are kept.
    pub fn bind<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> Result<Self> {
        let vars = params
            .params()
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect::<Result<_>>()?;
        Ok(Self { vars })
    }

    /// Wraps externally created variables, one per parameter in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter, zero where the loss does not depend on it.
    pub fn gradients<T: Real>(&self, tape: &Tape<T>, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }

    fn at(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Model inputs for a batch of equally sized images.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B·n × d]` patches, pixels mapped to `[-1, 1]`, image-major.
    pub patches: Tensor<T>,
    pub size: usize,
    pub n: usize,
    /// Visual word of every patch, `B·n` entries (empty without a vocabulary).
    pub targets: Vec<usize>,
    /// One plan per image (empty for unmasked evaluation).
    pub plans: Vec<MaskPlan>,
}

impl<T: Real> Batch<T> {
    pub fn from_images(
        images: &[&Image],
        patch_size: usize,
        vocab: Option<&Vocabulary>,
        plans: Vec<MaskPlan>,
    ) -> Result<Self> {
        if images.is_empty() {
            bail!(Usage, "empty batch");
        }
        if !plans.is_empty() && plans.len() != images.len() {
            bail!(Usage, "{} mask plans for {} images", plans.len(), images.len());
        }
        let mut data = Vec::new();
        let mut targets = Vec::new();
        let mut shape = None;
        for image in images {
            let seq = patchify(image, patch_size)?;
            let s = (seq.n(), seq.d());
            if *shape.get_or_insert(s) != s {
                bail!(Dimension, "batch images differ in size");
            }
            data.extend(seq.patches.data().iter().map(|&v| T::from_f64(v as f64 * 2.0 - 1.0)));
            if let Some(vocab) = vocab {
                for i in 0..seq.n() {
                    targets.push(tokenize(seq.patch(i), vocab)?);
                }
            }
        }
        let (n, d) = shape.expect("non-empty batch");
        for plan in &plans {
            if plan.n() != n {
                bail!(Dimension, "mask plan covers {} patches, images have {}", plan.n(), n);
            }
        }
        Ok(Self {
            patches: Tensor::new(&[images.len() * n, d], data)?,
            size: images.len(),
            n,
            targets,
            plans,
        })
    }
}

/// One inpainting branch of a SplitMask step.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// `[B·n × embed]` decoder outputs.
    pub decoded: Var,
    /// `[B·|missing| × V]` logits, absent when the MIM term is disabled.
    pub logits: Option<Var>,
    /// Global rows (`image·n + position`) the logits predict, in row order.
    pub missing: Vec<usize>,
    /// `[B × embed]` pooled descriptors.
    pub descriptor: Var,
    /// Sequence length the encoder ran on.
    pub encoder_len: usize,
}

#[derive(Clone, Debug)]
pub struct SplitOutput {
    pub a: BranchOutput,
    pub b: BranchOutput,
}

fn offsets(rows_per_image: &[Vec<usize>], n: usize) -> Vec<usize> {
    rows_per_image
        .iter()
        .enumerate()
        .flat_map(|(img, pos)| pos.iter().map(move |&p| img * n + p))
        .collect()
}

fn uniform_len(sets: &[Vec<usize>], what: &str) -> Result<usize> {
    let len = sets[0].len();
    if sets.iter().any(|s| s.len() != len) {
        bail!(Usage, "{} sizes differ across the batch", what);
    }
    Ok(len)
}

impl<T: Real> ModelParams<T> {
    fn linear(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var, wb: (usize, usize)) -> Result<Var> {
        let y = tape.matmul(x, p.at(wb.0))?;
        tape.add_row_bias(y, p.at(wb.1))
    }

    fn norm(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var, gb: (usize, usize)) -> Result<Var> {
        tape.layernorm(x, p.at(gb.0), p.at(gb.1), T::from_f64(LAYERNORM_EPS))
    }

    fn block(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var, b: &BlockIdx, seq: usize) -> Result<Var> {
        let h = self.norm(tape, p, x, b.norm1)?;
        let q = self.linear(tape, p, h, b.q)?;
        let k = self.linear(tape, p, h, b.k)?;
        let v = self.linear(tape, p, h, b.v)?;
        let a = tape.attention(q, k, v, seq, self.config().num_heads)?;
        let a = self.linear(tape, p, a, b.proj)?;
        let x = tape.add(x, a)?;
        let h = self.norm(tape, p, x, b.norm2)?;
        let h = self.linear(tape, p, h, b.fc1)?;
        let h = tape.gelu(h)?;
        let h = self.linear(tape, p, h, b.fc2)?;
        tape.add(x, h)
    }

    /// Projects the selected global patch rows and adds the positional
    /// embedding of each row's grid position.
    pub fn embed(&self, tape: &mut Tape<T>, p: &BoundParams, patches: Var, rows: &[usize]) -> Result<Var> {
        let n = self.config().num_patches();
        let total = tape.shape(patches)[0];
        if let Some(&r) = rows.iter().find(|&&r| r >= total) {
            bail!(Index, "patch row {} outside batch of {}", r, total);
        }
        let x = tape.gather_rows(patches, rows)?;
        let x = self.linear(tape, p, x, self.layout.patch)?;
        let positions: Vec<usize> = rows.iter().map(|r| r % n).collect();
        let pos = tape.gather_rows(p.at(self.layout.pos), &positions)?;
        tape.add(x, pos)
    }

    /// Encoder blocks over stacked sequences of length `seq`.
    pub fn encode(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var, seq: usize) -> Result<Var> {
        self.encode_to(tape, p, x, seq, self.layout.encoder.len())
    }

    fn encode_to(&self, tape: &mut Tape<T>, p: &BoundParams, mut x: Var, seq: usize, layers: usize) -> Result<Var> {
        for b in &self.layout.encoder[..layers] {
            x = self.block(tape, p, x, b, seq)?;
        }
        Ok(x)
    }

    /// Full-length sequences: encoded rows at `observed` positions, mask token
    /// plus positional embedding at `missing` ones. `observed[i]` and
    /// `missing[i]` partition image `i`'s grid; `encoded` stacks each image's
    /// observed rows in ascending position order.
    pub fn insert_mask_tokens(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        encoded: Var,
        observed: &[Vec<usize>],
        missing: &[Vec<usize>],
    ) -> Result<Var> {
        let n = self.config().num_patches();
        let batch = observed.len();
        if batch == 0 || missing.len() != batch {
            bail!(Usage, "insert_mask_tokens: {} observed sets, {} missing sets", batch, missing.len());
        }
        let mut perm = vec![usize::MAX; batch * n];
        let enc_rows: usize = observed.iter().map(Vec::len).sum();
        if tape.shape(encoded)[0] != enc_rows {
            bail!(Usage, "insert_mask_tokens: {} encoded rows for {} observed positions", tape.shape(encoded)[0], enc_rows);
        }
        let mut next_enc = 0;
        let mut next_mask = enc_rows;
        for img in 0..batch {
            if observed[img].is_empty() {
                bail!(Usage, "encoder must see at least one patch");
            }
            for (set, cursor) in [(&observed[img], &mut next_enc), (&missing[img], &mut next_mask)] {
                for &pos in set.iter() {
                    if pos >= n || perm[img * n + pos] != usize::MAX {
                        bail!(Usage, "observed/missing sets do not partition the grid at position {}", pos);
                    }
                    perm[img * n + pos] = *cursor;
                    *cursor += 1;
                }
            }
        }
        if perm.contains(&usize::MAX) {
            bail!(Usage, "observed/missing sets do not cover the grid");
        }
        let mask_positions: Vec<usize> = missing.iter().flatten().copied().collect();
        let full = if mask_positions.is_empty() {
            encoded
        } else {
            let tokens = tape.repeat_rows(p.at(self.layout.mask), mask_positions.len())?;
            let pos = tape.gather_rows(p.at(self.layout.pos), &mask_positions)?;
            let mask_rows = tape.add(tokens, pos)?;
            tape.concat_rows(&[encoded, mask_rows])?
        };
        tape.gather_rows(full, &perm)
    }

    /// Decoder over full sequences, MIM head at `missing` global rows and
    /// pooled descriptors.
    pub fn decode_branch(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        full: Var,
        missing: Vec<usize>,
        with_logits: bool,
    ) -> Result<BranchOutput> {
        let n = self.config().num_patches();
        let Some(norm) = self.layout.decoder_norm else {
            bail!(Usage, "model has no decoder (beit mode)");
        };
        let mut x = full;
        for b in &self.layout.decoder {
            x = self.block(tape, p, x, b, n)?;
        }
        let decoded = self.norm(tape, p, x, norm)?;
        let logits = if with_logits {
            let rows = tape.gather_rows(decoded, &missing)?;
            Some(self.linear(tape, p, rows, self.layout.head)?)
        } else {
            None
        };
        let pooled = tape.mean_pool_segments(decoded, n)?;
        let descriptor = if self.config().normalize_descriptors {
            tape.l2_normalize(pooled, T::from_f64(1e-6))?
        } else {
            pooled
        };
        Ok(BranchOutput {
            decoded,
            logits,
            missing,
            descriptor,
            encoder_len: 0,
        })
    }

    fn branch(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        patches: Var,
        observed: &[Vec<usize>],
        missing: &[Vec<usize>],
        with_logits: bool,
    ) -> Result<BranchOutput> {
        let n = self.config().num_patches();
        let seq = uniform_len(observed, "subset")?;
        let x = self.embed(tape, p, patches, &offsets(observed, n))?;
        let x = self.encode(tape, p, x, seq)?;
        let x = self.norm(tape, p, x, self.layout.encoder_norm)?;
        let full = self.insert_mask_tokens(tape, p, x, observed, missing)?;
        let mut out = self.decode_branch(tape, p, full, offsets(missing, n), with_logits)?;
        out.encoder_len = seq;
        Ok(out)
    }

    /// Branch A encodes each plan's observed subset and predicts its masked
    /// one; branch B does the reverse.
    pub fn forward_splitmask(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        batch: &Batch<T>,
        with_logits: bool,
    ) -> Result<SplitOutput> {
        if self.config().mode != Mode::Splitmask {
            bail!(Usage, "forward_splitmask needs a splitmask-mode model");
        }
        if batch.plans.len() != batch.size {
            bail!(Usage, "splitmask forward needs one mask plan per image");
        }
        let mut a_sets = Vec::with_capacity(batch.size);
        let mut b_sets = Vec::with_capacity(batch.size);
        for plan in &batch.plans {
            let s = split(plan)?;
            a_sets.push(s.a);
            b_sets.push(s.b);
        }
        let patches = tape.constant(batch.patches.clone())?;
        let a = self.branch(tape, p, patches, &a_sets, &b_sets, with_logits)?;
        let b = self.branch(tape, p, patches, &b_sets, &a_sets, with_logits)?;
        Ok(SplitOutput { a, b })
    }

    /// Encoder over all `n` positions with masked ones replaced by the mask
    /// token; returns logits at masked rows and their global row indices.
    pub fn forward_beit(&self, tape: &mut Tape<T>, p: &BoundParams, batch: &Batch<T>) -> Result<(Var, Vec<usize>)> {
        let n = self.config().num_patches();
        if batch.plans.len() != batch.size {
            bail!(Usage, "beit forward needs one mask plan per image");
        }
        let observed: Vec<Vec<usize>> = batch.plans.iter().map(MaskPlan::observed_indices).collect();
        let masked: Vec<Vec<usize>> = batch.plans.iter().map(MaskPlan::masked_indices).collect();
        if masked.iter().any(Vec::is_empty) {
            bail!(Config, "beit forward needs at least one masked patch per image");
        }
        let patches = tape.constant(batch.patches.clone())?;
        let x = self.embed(tape, p, patches, &offsets(&observed, n))?;
        let x = self.insert_mask_tokens(tape, p, x, &observed, &masked)?;
        let x = self.encode(tape, p, x, n)?;
        let x = self.norm(tape, p, x, self.layout.encoder_norm)?;
        let rows = offsets(&masked, n);
        let h = tape.gather_rows(x, &rows)?;
        Ok((self.linear(tape, p, h, self.layout.head)?, rows))
    }

    /// `[B × embed]` mean-pooled encoder activations after `layer` blocks
    /// (0 = patch plus positional embeddings) over the full grid.
    pub fn features_at_layer(&self, tape: &mut Tape<T>, p: &BoundParams, patches: &Tensor<T>, layer: usize) -> Result<Var> {
        let depth = self.config().encoder_depth;
        if layer > depth {
            bail!(Index, "layer {} outside [0, {}]", layer, depth);
        }
        let n = self.config().num_patches();
        let patches = tape.constant(patches.clone())?;
        let rows: Vec<usize> = (0..tape.shape(patches)[0]).collect();
        let x = self.embed(tape, p, patches, &rows)?;
        let x = self.encode_to(tape, p, x, n, layer)?;
        tape.mean_pool_segments(x, n)
    }

    /// Pooled features after every layer `0..=encoder_depth` from one pass.
    pub fn features_per_layer(&self, tape: &mut Tape<T>, p: &BoundParams, patches: &Tensor<T>) -> Result<Vec<Var>> {
        let n = self.config().num_patches();
        let patches = tape.constant(patches.clone())?;
        let rows: Vec<usize> = (0..tape.shape(patches)[0]).collect();
        let mut x = self.embed(tape, p, patches, &rows)?;
        let mut out = vec![tape.mean_pool_segments(x, n)?];
        for b in &self.layout.encoder {
            x = self.block(tape, p, x, b, n)?;
            out.push(tape.mean_pool_segments(x, n)?);
        }
        Ok(out)
    }

    /// Classifier logits `[B × classes]` from mean-pooled, normalized final
    /// encoder features.
    pub fn classify(&self, tape: &mut Tape<T>, p: &BoundParams, patches: &Tensor<T>) -> Result<Var> {
        let Some(head) = self.layout.classifier else {
            bail!(Usage, "model has no classifier head");
        };
        let n = self.config().num_patches();
        let patches = tape.constant(patches.clone())?;
        let rows: Vec<usize> = (0..tape.shape(patches)[0]).collect();
        let x = self.embed(tape, p, patches, &rows)?;
        let x = self.encode(tape, p, x, n)?;
        let x = self.norm(tape, p, x, self.layout.encoder_norm)?;
        let pooled = tape.mean_pool_segments(x, n)?;
        self.linear(tape, p, pooled, head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::masking::{uniform_mask, MaskingConfig};
    use crate::model::ModelConfig;
    use crate::rng::seeded;
    use crate::tokenizer::build_random_projection;

    fn small_config(mode: Mode) -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            encoder_depth: 2,
            decoder_depth: 1,
            num_heads: 2,
            vocab_size: 8,
            mode,
            ..ModelConfig::default()
        }
    }

    fn batch(cfg: &ModelConfig, size: usize, seed: u64) -> Batch<f64> {
        let data = synth_generate(seed, size, 0, 4, cfg.image_size).unwrap();
        let vocab = build_random_projection(cfg.vocab_size, cfg.patch_dim(), seed).unwrap();
        let mut rng = seeded(seed);
        let g = cfg.grid();
        let plans = (0..size).map(|_| MaskingConfig::default().sample(g, g, &mut rng).unwrap()).collect();
        let images: Vec<&Image> = data.train.images().iter().collect();
        Batch::from_images(&images, cfg.patch_size, Some(&vocab), plans).unwrap()
    }

    #[test]
    fn splitmask_shapes_and_partition() {
        let cfg = small_config(Mode::Splitmask);
        let params = ModelParams::<f64>::init(&cfg, None, 0).unwrap();
        let b = batch(&cfg, 3, 1);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params, true).unwrap();
        let out = params.forward_splitmask(&mut tape, &bound, &b, true).unwrap();
        let n = cfg.num_patches();
        for br in [&out.a, &out.b] {
            assert_eq!(br.encoder_len, n / 2);
            assert_eq!(tape.shape(br.decoded), &[3 * n, 16]);
            assert_eq!(tape.shape(br.logits.unwrap()), &[3 * n / 2, 8]);
            assert_eq!(tape.shape(br.descriptor), &[3, 16]);
            for r in 0..3 {
                let row = tape.value(br.descriptor).row(r);
                assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let mut all: Vec<usize> = out.a.missing.iter().chain(&out.b.missing).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..3 * n).collect::<Vec<_>>());
    }

    #[test]
    fn complemented_plan_swaps_branches() {
        let cfg = small_config(Mode::Splitmask);
        let params = ModelParams::<f64>::init(&cfg, None, 0).unwrap();
        let b = batch(&cfg, 2, 2);
        let mut swapped = b.clone();
        swapped.plans = b.plans.iter().map(MaskPlan::complement).collect();
        let mut t1 = Tape::new();
        let p1 = BoundParams::bind(&mut t1, &params, false).unwrap();
        let o1 = params.forward_splitmask(&mut t1, &p1, &b, true).unwrap();
        let mut t2 = Tape::new();
        let p2 = BoundParams::bind(&mut t2, &params, false).unwrap();
        let o2 = params.forward_splitmask(&mut t2, &p2, &swapped, true).unwrap();
        assert_eq!(t1.value(o1.a.logits.unwrap()), t2.value(o2.b.logits.unwrap()));
        assert_eq!(t1.value(o1.b.descriptor), t2.value(o2.a.descriptor));
        assert_eq!(o1.a.missing, o2.b.missing);
    }

    #[test]
    fn embed_selection_and_permutation() {
        let cfg = small_config(Mode::Splitmask);
        let params = ModelParams::<f64>::init(&cfg, None, 0).unwrap();
        let b = batch(&cfg, 1, 3);
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &params, false).unwrap();
        let patches = tape.constant(b.patches.clone()).unwrap();
        let all: Vec<usize> = (0..16).collect();
        let full = params.embed(&mut tape, &p, patches, &all).unwrap();
        assert_eq!(tape.shape(full), &[16, 16]);
        let picked = [9, 2, 14];
        let some = params.embed(&mut tape, &p, patches, &picked).unwrap();
        for (r, &i) in picked.iter().enumerate() {
            assert_eq!(tape.value(some).row(r), tape.value(full).row(i));
        }
        assert!(matches!(params.embed(&mut tape, &p, patches, &[16]), Err(crate::Error::Index(_))));
    }

    #[test]
    fn inserted_mask_rows_differ_only_by_position() {
        let cfg = small_config(Mode::Splitmask);
        let params = ModelParams::<f64>::init(&cfg, None, 0).unwrap();
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &params, false).unwrap();
        let enc = tape.constant(Tensor::from_fn(&[2, 16], |i| i as f64)).unwrap();
        let observed = vec![vec![3, 7]];
        let missing = vec![(0..16).filter(|i| *i != 3 && *i != 7).collect::<Vec<_>>()];
        let full = params.insert_mask_tokens(&mut tape, &p, enc, &observed, &missing).unwrap();
        let v = tape.value(full);
        assert_eq!(v.row(3), tape.value(enc).row(0));
        assert_eq!(v.row(7), tape.value(enc).row(1));
        let pos = params.get("pos_embed").unwrap();
        let mask = params.get("mask_token").unwrap();
        for &i in &missing[0] {
            for c in 0..16 {
                assert!((v.row(i)[c] - pos.row(i)[c] - mask.data()[c]).abs() < 1e-15);
            }
        }
        // B empty: output is the encoded rows in grid order
        let enc_all = tape.constant(Tensor::from_fn(&[16, 16], |i| i as f64)).unwrap();
        let order: Vec<usize> = (0..16).collect();
        let same = params.insert_mask_tokens(&mut tape, &p, enc_all, &[order], &[vec![]]).unwrap();
        assert_eq!(tape.value(same), tape.value(enc_all));
        let bad = params.insert_mask_tokens(&mut tape, &p, enc, &[vec![3, 7]], &[vec![3]]);
        assert!(matches!(bad, Err(crate::Error::Usage(_))));
        let none = tape.constant(Tensor::zeros(&[1, 16])).unwrap();
        assert!(params.insert_mask_tokens(&mut tape, &p, none, &[vec![]], &[order_all()]).is_err());
    }

    fn order_all() -> Vec<usize> {
        (0..16).collect()
    }

    #[test]
    fn beit_and_splitmask_share_patch_embeddings() {
        let sm = small_config(Mode::Splitmask);
        let params = ModelParams::<f64>::init(&sm, None, 5).unwrap();
        let beit_params = ModelParams::<f64>::init(&small_config(Mode::Beit), None, 5).unwrap();
        assert_eq!(params.get("patch_embed.weight"), beit_params.get("patch_embed.weight"));
        let b = batch(&sm, 2, 4);
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &beit_params, false).unwrap();
        let (logits, rows) = beit_params.forward_beit(&mut tape, &p, &b).unwrap();
        assert_eq!(tape.shape(logits), &[16, 8]);
        assert_eq!(rows.len(), 16);
        let mut t2 = Tape::new();
        let p2 = BoundParams::bind(&mut t2, &params, false).unwrap();
        let patches = t2.constant(b.patches.clone()).unwrap();
        let e1 = params.embed(&mut t2, &p2, patches, &[0, 5]).unwrap();
        let patches = tape.constant(b.patches.clone()).unwrap();
        let e2 = beit_params.embed(&mut tape, &p, patches, &[0, 5]).unwrap();
        assert_eq!(t2.value(e1), tape.value(e2));

        let mut unmasked = b.clone();
        unmasked.plans = vec![MaskPlan::from_indices(16, &[]).unwrap(); 2];
        assert!(matches!(
            beit_params.forward_beit(&mut tape, &p, &unmasked),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn uneven_split_branch_lengths() {
        let cfg = small_config(Mode::Splitmask);
        let params = ModelParams::<f64>::init(&cfg, None, 0).unwrap();
        let mut b = batch(&cfg, 2, 6);
        let mut rng = seeded(1);
        b.plans = (0..2).map(|_| uniform_mask(4, 4, 0.75, &mut rng).unwrap()).collect();
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &params, false).unwrap();
        let out = params.forward_splitmask(&mut tape, &p, &b, true).unwrap();
        assert_eq!((out.a.encoder_len, out.b.encoder_len), (4, 12));
        assert_eq!(tape.shape(out.a.logits.unwrap())[0], 24);
        assert_eq!(tape.shape(out.b.logits.unwrap())[0], 8);
    }

    #[test]
    fn descriptor_gradient_reaches_encoder() {
        let cfg = small_config(Mode::Splitmask);
        let params = ModelParams::<f64>::init(&cfg, None, 0).unwrap();
        let b = batch(&cfg, 2, 7);
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &params, true).unwrap();
        let out = params.forward_splitmask(&mut tape, &p, &b, false).unwrap();
        let w = tape.constant(Tensor::from_fn(&[2, 16], |i| (i as f64 * 0.37).sin())).unwrap();
        let prod = tape.mul(out.a.descriptor, w).unwrap();
        let s = tape.sum(prod).unwrap();
        let mut grads = tape.backward(s).unwrap();
        let g = p.gradients(&tape, &mut grads);
        let idx = params.params().iter().position(|q| q.name == "encoder.0.attn.q.weight").unwrap();
        assert!(g[idx].data().iter().any(|&v| v != 0.0));
        let head = params.params().iter().position(|q| q.name == "mim_head.weight").unwrap();
        assert!(g[head].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_and_classifier() {
        let cfg = small_config(Mode::Splitmask);
        let params = ModelParams::<f64>::init(&cfg, Some(3), 0).unwrap();
        let b = batch(&cfg, 2, 8);
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &params, false).unwrap();
        for layer in 0..=2 {
            let f = params.features_at_layer(&mut tape, &p, &b.patches, layer).unwrap();
            assert_eq!(tape.shape(f), &[2, 16]);
        }
        assert!(params.features_at_layer(&mut tape, &p, &b.patches, 3).is_err());
        let all = params.features_per_layer(&mut tape, &p, &b.patches).unwrap();
        for (layer, &f) in all.iter().enumerate() {
            let single = params.features_at_layer(&mut tape, &p, &b.patches, layer).unwrap();
            assert_eq!(tape.value(f), tape.value(single));
        }
        let logits = params.classify(&mut tape, &p, &b.patches).unwrap();
        assert_eq!(tape.shape(logits), &[2, 3]);
        let zero_depth = ModelConfig {
            encoder_depth: 0,
            ..cfg.clone()
        };
        let flat = ModelParams::<f64>::init(&zero_depth, None, 0).unwrap();
        let mut t = Tape::new();
        let q = BoundParams::bind(&mut t, &flat, false).unwrap();
        let x = t.constant(Tensor::from_fn(&[4, 16], |i| i as f64)).unwrap();
        let y = flat.encode(&mut t, &q, x, 4).unwrap();
        assert_eq!(t.value(x), t.value(y));
    }

    #[test]
    fn attention_rows_sum_to_one_in_encoder() {
        let cfg = small_config(Mode::Splitmask);
        let params = ModelParams::<f64>::init(&cfg, None, 0).unwrap();
        let b = batch(&cfg, 2, 9);
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &params, false).unwrap();
        params.forward_splitmask(&mut tape, &p, &b, true).unwrap();
        let mut seqs = Vec::new();
        for v in tape.vars() {
            if let Some(probs) = tape.attention_probs(v) {
                let seq = probs.len() / (tape.shape(v)[0] * cfg.num_heads);
                seqs.push(seq);
                for row in probs.chunks(seq) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
        // two branches: 2 encoder blocks on n/2 tokens, 1 decoder block on n
        assert_eq!(seqs, vec![8, 8, 16, 8, 8, 16]);
    }
}
