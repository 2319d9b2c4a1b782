//! Vision transformer encoder, shallow decoder with mask-token insertion,
//! visual-word prediction head and pooled descriptors.

mod forward;

pub use forward::{Batch, BoundParams, BranchOutput, SplitOutput};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::CHANNELS;
use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::real::Real;
use crate::rng::{derive_seed, seeded, truncated_normal};

/// Pre-training objective layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mode {
    /// Encoder sees one subset, decoder inpaints the other; two branches.
    Splitmask,
    /// Encoder sees the full grid with mask tokens; no decoder.
    Beit,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub mode: Mode,
    /// L2-normalize pooled descriptors before the contrastive loss.
    pub normalize_descriptors: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            encoder_depth: 4,
            decoder_depth: 2,
            num_heads: 4,
            mlp_ratio: 4,
            vocab_size: 512,
            mode: Mode::Splitmask,
            normalize_descriptors: true,
        }
    }
}

pub const LAYERNORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            bail!(Config, "image size {} is not a multiple of patch size {}", self.image_size, self.patch_size);
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            bail!(Config, "embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads);
        }
        if self.mode == Mode::Splitmask && self.decoder_depth == 0 {
            bail!(Config, "splitmask mode needs decoder_depth ≥ 1");
        }
        if self.mlp_ratio == 0 || self.vocab_size < 2 {
            bail!(Config, "mlp_ratio must be ≥ 1 and vocab_size ≥ 2");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Decoder blocks that actually exist (none in BEiT mode).
    pub fn active_decoder_depth(&self) -> usize {
        match self.mode {
            Mode::Splitmask => self.decoder_depth,
            Mode::Beit => 0,
        }
    }

    pub fn block_param_count(&self) -> usize {
        let (e, h) = (self.embed_dim, self.hidden_dim());
        4 * e + 4 * (e * e + e) + (e * h + h) + (h * e + e)
    }

    /// Closed-form parameter count; `num_classes` adds a classifier head.
    pub fn param_count(&self, num_classes: Option<usize>) -> usize {
        let e = self.embed_dim;
        let mut total = self.patch_dim() * e + e + self.num_patches() * e + e;
        total += self.encoder_depth * self.block_param_count() + 2 * e;
        let dec = self.active_decoder_depth();
        if dec > 0 {
            total += dec * self.block_param_count() + 2 * e;
        }
        total += e * self.vocab_size + self.vocab_size;
        if let Some(c) = num_classes {
            total += e * c + c;
        }
        total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockIdx {
    pub norm1: (usize, usize),
    pub q: (usize, usize),
    pub k: (usize, usize),
    pub v: (usize, usize),
    pub proj: (usize, usize),
    pub norm2: (usize, usize),
    pub fc1: (usize, usize),
    pub fc2: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub patch: (usize, usize),
    pub pos: usize,
    pub mask: usize,
    pub encoder: Vec<BlockIdx>,
    pub encoder_norm: (usize, usize),
    pub decoder: Vec<BlockIdx>,
    pub decoder_norm: Option<(usize, usize)>,
    pub head: (usize, usize),
    pub classifier: Option<(usize, usize)>,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init, bool)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init, decay: bool) -> usize {
        self.specs.push((name, shape.to_vec(), init, decay));
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Normal, true);
        let b = self.add(format!("{prefix}.bias"), &[fan_out], Init::Zeros, false);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> (usize, usize) {
        let g = self.add(format!("{prefix}.gain"), &[dim], Init::Ones, false);
        let b = self.add(format!("{prefix}.bias"), &[dim], Init::Zeros, false);
        (g, b)
    }

    fn block(&mut self, prefix: &str, e: usize, h: usize) -> BlockIdx {
        BlockIdx {
            norm1: self.norm(&format!("{prefix}.norm1"), e),
            q: self.linear(&format!("{prefix}.attn.q"), e, e),
            k: self.linear(&format!("{prefix}.attn.k"), e, e),
            v: self.linear(&format!("{prefix}.attn.v"), e, e),
            proj: self.linear(&format!("{prefix}.attn.proj"), e, e),
            norm2: self.norm(&format!("{prefix}.norm2"), e),
            fc1: self.linear(&format!("{prefix}.mlp.fc1"), e, h),
            fc2: self.linear(&format!("{prefix}.mlp.fc2"), h, e),
        }
    }
}

fn layout(config: &ModelConfig, num_classes: Option<usize>) -> (Layout, Vec<(String, Vec<usize>, Init, bool)>) {
    let (e, h) = (config.embed_dim, config.hidden_dim());
    let mut b = Builder { specs: Vec::new() };
    let patch = b.linear("patch_embed", config.patch_dim(), e);
    let pos = b.add("pos_embed".into(), &[config.num_patches(), e], Init::Normal, false);
    let mask = b.add("mask_token".into(), &[e], Init::Normal, false);
    let encoder = (0..config.encoder_depth).map(|i| b.block(&format!("encoder.{i}"), e, h)).collect();
    let encoder_norm = b.norm("encoder.norm", e);
    let dec_depth = config.active_decoder_depth();
    let decoder = (0..dec_depth).map(|i| b.block(&format!("decoder.{i}"), e, h)).collect();
    let decoder_norm = (dec_depth > 0).then(|| b.norm("decoder.norm", e));
    let head = b.linear("mim_head", e, config.vocab_size);
    let classifier = num_classes.map(|c| b.linear("classifier", e, c));
    let layout = Layout {
        patch,
        pos,
        mask,
        encoder,
        encoder_norm,
        decoder,
        decoder_norm,
        head,
        classifier,
    };
    (layout, b.specs)
}

/// Every learnable tensor of a model, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    num_classes: Option<usize>,
    params: Vec<Param<T>>,
    pub(crate) layout: Layout,
}

impl<T: Real> ModelParams<T> {
    /// Truncated-normal weights and embeddings, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, num_classes: Option<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes == Some(0) {
            bail!(Config, "classifier needs at least one class");
        }
        let (layout, specs) = layout(config, num_classes);
        let params = specs
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape, init, decay))| {
                let mut rng = seeded(derive_seed(seed, &[0x1417, i as u64]));
                let value = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, T::ONE),
                    Init::Normal => Tensor::from_fn(&shape, |_| T::from_f64(truncated_normal(&mut rng, INIT_STD))),
                };
                Param { name, value, decay }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            num_classes,
            params,
            layout,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(config: &ModelConfig, num_classes: Option<usize>, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(config, num_classes);
        if named.len() != specs.len() {
            bail!(Config, "model config expects {} parameter tensors, got {}", specs.len(), named.len());
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape, _, decay), (got_name, value)) in specs.into_iter().zip(named) {
            if name != got_name || value.shape() != shape.as_slice() {
                bail!(
                    Config,
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    name,
                    shape,
                    got_name,
                    value.shape()
                );
            }
            params.push(Param { name, value, decay });
        }
        Ok(Self {
            config: config.clone(),
            num_classes,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            num_classes: self.num_classes,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Copy with a freshly initialized classifier head for `num_classes`;
    /// the MIM head and decoder are kept so checkpoints stay loadable.
    pub fn with_classifier(&self, num_classes: usize, seed: u64) -> Result<Self> {
        let fresh = Self::init(&self.config, Some(num_classes), seed)?;
        let mut out = fresh.clone();
        for (dst, src) in out.params.iter_mut().zip(&self.params) {
            if !dst.name.starts_with("classifier.") {
                dst.value = src.value.clone();
            }
        }
        Ok(out)
    }

    /// The same weights without a classifier head.
    pub fn without_classifier(&self) -> Self {
        let (layout, specs) = layout(&self.config, None);
        Self {
            config: self.config.clone(),
            num_classes: None,
            params: self.params[..specs.len()].to_vec(),
            layout,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_matches_closed_form() {
        for mode in [Mode::Splitmask, Mode::Beit] {
            for classes in [None, Some(4)] {
                let cfg = ModelConfig {
                    mode,
                    ..ModelConfig::default()
                };
                let p = ModelParams::<f32>::init(&cfg, classes, 0).unwrap();
                assert_eq!(p.count(), cfg.param_count(classes));
            }
        }
        let beit = ModelConfig {
            mode: Mode::Beit,
            ..ModelConfig::default()
        };
        let p = ModelParams::<f32>::init(&beit, None, 0).unwrap();
        assert!(p.params().iter().all(|p| !p.name.starts_with("decoder")));
    }

    #[test]
    fn init_is_deterministic_and_follows_conventions() {
        let cfg = ModelConfig::default();
        let a = ModelParams::<f32>::init(&cfg, None, 3).unwrap();
        assert_eq!(a, ModelParams::<f32>::init(&cfg, None, 3).unwrap());
        assert_ne!(a, ModelParams::<f32>::init(&cfg, None, 4).unwrap());
        for p in a.params() {
            if p.name.ends_with(".bias") {
                assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
            } else if p.name.ends_with(".gain") {
                assert!(p.value.data().iter().all(|&v| v == 1.0), "{}", p.name);
            } else {
                assert!(p.value.data().iter().all(|v| v.abs() <= 0.04 + 1e-7), "{}", p.name);
            }
        }
        let no_decay: Vec<_> = a.params().iter().filter(|p| !p.decay).map(|p| p.name.as_str()).collect();
        assert!(no_decay.contains(&"pos_embed") && no_decay.contains(&"mask_token"));
        assert!(no_decay.contains(&"encoder.0.norm1.gain"));
        assert!(!no_decay.contains(&"encoder.0.attn.q.weight"));
    }

    #[test]
    fn rejects_bad_configs() {
        let bad_heads = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(ModelParams::<f32>::init(&bad_heads, None, 0), Err(crate::Error::Config(_))));
        let bad_patch = ModelConfig {
            patch_size: 5,
            ..ModelConfig::default()
        };
        assert!(bad_patch.validate().is_err());
    }

    #[test]
    fn named_round_trip_and_mismatch() {
        let cfg = ModelConfig::default();
        let p = ModelParams::<f32>::init(&cfg, Some(3), 1).unwrap();
        let named: Vec<_> = p.params().iter().map(|q| (q.name.clone(), q.value.clone())).collect();
        assert_eq!(ModelParams::from_named(&cfg, Some(3), named.clone()).unwrap(), p);
        let other = ModelConfig {
            embed_dim: 32,
            ..cfg.clone()
        };
        assert!(matches!(ModelParams::from_named(&other, Some(3), named), Err(crate::Error::Config(_))));
    }

    #[test]
    fn classifier_swap_keeps_backbone() {
        let cfg = ModelConfig::default();
        let p = ModelParams::<f32>::init(&cfg, None, 1).unwrap();
        let c = p.with_classifier(5, 2).unwrap();
        assert_eq!(c.get("pos_embed"), p.get("pos_embed"));
        assert_eq!(c.get("classifier.weight").unwrap().shape(), &[64, 5]);
        assert_eq!(c.without_classifier(), p);
    }
}
