//! Run configuration: a TOML tree plus dotted `key=value` overrides.
//!
//! Every section is optional and falls back to the desk-scale defaults.
//! Unknown keys are rejected, both in files and in overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splitmask_core::model::ModelConfig;
use splitmask_core::tokenizer::{KMeansSettings, PatchNorm, VocabKind};
use splitmask_core::train::{self, FinetuneConfig, PretrainConfig, ProbeConfig};
use toml::{Table, Value};

use crate::dataset::DataSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Pretrain,
    Finetune,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSpec {
    pub kind: VocabKind,
    pub norm: PatchNorm,
    pub seed: u64,
    pub kmeans: KMeansSettings,
    /// Load this vocabulary file instead of fitting one.
    pub path: Option<PathBuf>,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self {
            kind: VocabKind::Kmeans,
            norm: PatchNorm::None,
            seed: 0,
            kmeans: KMeansSettings::default(),
            path: None,
        }
    }
}

/// Optional constant-update rule for the pre-training epoch count. When
/// `reference_size` or `preset` is set it replaces `pretrain.epochs`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSpec {
    pub preset: Option<String>,
    pub reference_size: Option<usize>,
    pub reference_epochs: usize,
    pub cap: Option<usize>,
}

impl BudgetSpec {
    /// `None` when no rule is configured.
    pub fn epochs(&self, dataset_size: usize) -> Result<Option<usize>> {
        if let Some(name) = &self.preset {
            let p = train::preset(name).ok_or_else(|| Error::Config(format!("unknown epoch preset {:?}", name)))?;
            return Ok(Some(p.epochs));
        }
        match self.reference_size {
            None => Ok(None),
            Some(r) if r == 0 || self.reference_epochs == 0 || dataset_size == 0 => {
                Err(Error::Config("budget.reference_size and budget.reference_epochs must be positive".into()))
            }
            Some(r) => Ok(Some(train::epoch_budget(dataset_size, r, self.reference_epochs, self.cap))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogSpec {
    /// Fill the `images_per_sec` column from the wall clock. Off by default
    /// so metrics files are bit-identical across reruns.
    pub wall_clock: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub tag: String,
    /// Seed of every stage; stage-level `seed` keys must be left unset.
    pub seed: u64,
    /// Initial weights for finetuning and probing; random init when unset.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataSpec,
    pub tokenizer: TokenizerSpec,
    pub budget: BudgetSpec,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub probe: ProbeConfig,
    pub log: LogSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Pretrain,
            tag: "splitmask".into(),
            seed: 0,
            checkpoint: None,
            model: ModelConfig::default(),
            data: DataSpec::default(),
            tokenizer: TokenizerSpec::default(),
            budget: BudgetSpec::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            probe: ProbeConfig::default(),
            log: LogSpec::default(),
        }
    }
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", raw)))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {:?} has an empty key", raw)));
    }
    let value = value.trim();
    let parsed = format!("v = {}", value)
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("unknown key {}: {} is not a section", key, part)))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn deserialize(table: Table) -> std::result::Result<RunConfig, String> {
    RunConfig::deserialize(Value::Table(table)).map_err(|e| e.to_string().trim().replace('\n', " "))
}

impl RunConfig {
    /// Parses TOML text and applies overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| {
            Error::Config(format!("config parse error: {}", e.to_string().trim().replace('\n', " ")))
        })?;
        deserialize(table.clone()).map_err(|e| Error::Config(format!("config: {}", e)))?;
        for raw in overrides {
            let (key, value) = parse_override(raw)?;
            set_path(&mut table, &key, value)?;
            deserialize(table.clone()).map_err(|e| {
                if e.contains("unknown field") || e.contains("unknown variant") {
                    Error::Config(format!("unknown key {} ({})", key, e))
                } else {
                    Error::Config(format!("override {}: {}", key, e))
                }
            })?;
        }
        let mut cfg = deserialize(table).map_err(|e| Error::Config(format!("config: {}", e)))?;
        cfg.resolve_seeds()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (relative paths inside resolve against its directory).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, base) = match path {
            Some(p) => (
                fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (String::new(), PathBuf::new()),
        };
        let mut cfg = Self::from_toml(&text, overrides)?;
        cfg.rebase(&base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        self.data.rebase(base);
        for p in [&mut self.checkpoint, &mut self.tokenizer.path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    fn resolve_seeds(&mut self) -> Result<()> {
        let seed = self.seed;
        for (name, s) in [
            ("pretrain", &mut self.pretrain.seed),
            ("finetune", &mut self.finetune.seed),
            ("probe", &mut self.probe.seed),
        ] {
            if *s != 0 && *s != seed {
                return Err(Error::Config(format!("{}.seed differs from seed; set the top-level seed only", name)));
            }
            *s = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.optim.validate()?;
        self.pretrain.loss.validate()?;
        self.finetune.optim.validate()?;
        self.probe.optim.validate()?;
        if self.data.image_size != self.model.image_size && self.data.source == crate::dataset::Source::Synth {
            return Err(Error::Config(format!(
                "data.image_size {} differs from model.image_size {}",
                self.data.image_size, self.model.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.pretrain.masking.ratio) || self.pretrain.masking.ratio <= 0.0 {
            return Err(Error::Config("pretrain.masking.ratio must be in (0, 1)".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        Ok(())
    }

    /// Fully resolved TOML, preceded by a version comment.
    pub fn to_toml(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {}", e)))?;
        Ok(format!("# splitmask {}\n{}", crate::CODE_VERSION, body))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
