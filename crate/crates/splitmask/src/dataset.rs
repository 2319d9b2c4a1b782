//! Image folders described by a manifest, and synthetic dataset export.
//!
//! A manifest is UTF-8 text with one `relative/path<TAB>label` per line.
//! Blank lines are skipped. Paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splitmask_core::data::{synth_generate_with, Image, LabeledDataset, Split, SynthParams};

use crate::error::{Error, Result};

pub fn decode_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| match e {
        other => Error::Data(format!("{}: cannot decode image: {}", path.display(), other)),
    })?;
    let rgb = img.to_rgb8();
    Image::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

pub fn encode_png(path: &Path, image: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("{}: cannot write image: {}", path.display(), e)))
}

/// Loads every image listed in `manifest`, in manifest order.
pub fn load_image_folder(manifest: &Path, num_classes: usize, split: Split) -> Result<LabeledDataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::Data(format!("{}: {}", manifest.display(), e)))?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", manifest.display(), i + 1);
        let (rel, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("{}: expected `path<TAB>label`", at())))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("{}: label {:?} is not a non-negative integer", at(), label)))?;
        if label >= num_classes {
            return Err(Error::Data(format!("{}: label {} outside [0, {})", at(), label, num_classes)));
        }
        let path = root.join(rel);
        if !path.is_file() {
            return Err(Error::Data(format!("{}: missing file {}", at(), path.display())));
        }
        images.push(decode_image(&path).map_err(|e| Error::Data(format!("{}: {}", at(), e)))?);
        labels.push(label);
    }
    LabeledDataset::new(images, labels, num_classes, split).map_err(|e| Error::Data(e.to_string()))
}

/// Writes `data` as `<dir>/<name>/NNNNN.png` plus the manifest `<dir>/<name>.tsv`.
pub fn export_dataset(dir: &Path, name: &str, data: &LabeledDataset) -> Result<PathBuf> {
    let folder = dir.join(name);
    fs::create_dir_all(&folder).map_err(|e| Error::io(&folder, e))?;
    let mut manifest = String::new();
    for i in 0..data.len() {
        let file = format!("{:05}.png", i);
        encode_png(&folder.join(&file), data.image(i))?;
        manifest.push_str(&format!("{}/{}\t{}\n", name, file, data.label(i)));
    }
    let path = dir.join(format!("{}.tsv", name));
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synth,
    Folder,
}

/// Where a run's train and test splits come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub source: Source,
    pub num_classes: usize,
    /// Keep a stratified fraction of the training split.
    pub fraction: f64,
    pub synth_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub synth: SynthParams,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: Source::Synth,
            num_classes: 4,
            fraction: 1.0,
            synth_seed: 1000,
            n_train: 512,
            n_test: 1000,
            image_size: 32,
            synth: SynthParams::default(),
            train_manifest: None,
            test_manifest: None,
        }
    }
}

impl DataSpec {
    /// Resolves relative manifest paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        for m in [&mut self.train_manifest, &mut self.test_manifest].into_iter().flatten() {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
    }

    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("data.fraction must be in (0, 1], got {}", self.fraction)));
        }
        let (train, test) = match self.source {
            Source::Synth => {
                let s = synth_generate_with(&self.synth, self.synth_seed, self.n_train, self.n_test, self.num_classes, self.image_size)
                    .map_err(|e| Error::Config(format!("synthetic data: {}", e)))?;
                (s.train, s.test)
            }
            Source::Folder => {
                let need = |m: &Option<PathBuf>, key: &str| {
                    m.clone().ok_or_else(|| Error::Config(format!("data.{} is required for folder data", key)))
                };
                let train = load_image_folder(&need(&self.train_manifest, "train_manifest")?, self.num_classes, Split::Train)?;
                let test = match &self.test_manifest {
                    Some(m) => load_image_folder(m, self.num_classes, Split::Test)?,
                    None => LabeledDataset::empty(self.num_classes, Split::Test),
                };
                (train, test)
            }
        };
        let train = if self.fraction < 1.0 {
            train.fraction(self.fraction, self.synth_seed).map_err(crate::error::data_err)?
        } else {
            train
        };
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        Ok((train, test))
    }
}
