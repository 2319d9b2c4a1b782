//! CSV logs.
//!
//! * training log: `step,epoch,lr,loss_total,loss_mim,loss_nce,images_per_sec`,
//!   absent values left empty;
//! * evaluation log: `tag,seed,metric,value`;
//! * probe log: `tag,seed,layer,train_accuracy,test_accuracy`.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use splitmask_core::model::ModelParams;
use splitmask_core::train::{Observer, ProbeResult, StepMetrics};

use crate::error::{Error, Result};
use crate::formats::{save_checkpoint, CheckpointMeta};

pub const METRICS_HEADER: [&str; 7] = ["step", "epoch", "lr", "loss_total", "loss_mim", "loss_nce", "images_per_sec"];
pub const EVAL_HEADER: [&str; 4] = ["tag", "seed", "metric", "value"];
pub const PROBE_HEADER: [&str; 5] = ["tag", "seed", "layer", "train_accuracy", "test_accuracy"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {}", path.display(), e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn create_csv(path: &Path, header: &[&str]) -> Result<csv::Writer<File>> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    Ok(w)
}

/// Observer writing the training log and checkpoints of one run.
pub struct RunLog {
    path: PathBuf,
    writer: csv::Writer<File>,
    clock: Option<Instant>,
    checkpoints: Option<(PathBuf, u64)>,
    pub last_error: Option<Error>,
}

impl RunLog {
    pub fn create(path: &Path, wall_clock: bool) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            writer: create_csv(path, &METRICS_HEADER)?,
            clock: wall_clock.then(Instant::now),
            checkpoints: None,
            last_error: None,
        })
    }

    /// Saves `step_<N>.smck` under `dir` on every checkpoint event.
    pub fn with_checkpoints(mut self, dir: &Path, seed: u64) -> Self {
        self.checkpoints = Some((dir.to_path_buf(), seed));
        self
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }

    fn keep<T>(&mut self, r: Result<T>) -> splitmask_core::Result<T> {
        r.map_err(|e| {
            let msg = e.to_string();
            self.last_error = Some(e);
            splitmask_core::Error::External(msg)
        })
    }
}

impl Observer for RunLog {
    fn on_step(&mut self, m: &StepMetrics) -> splitmask_core::Result<()> {
        let row = [
            m.step.to_string(),
            m.epoch.to_string(),
            m.lr.to_string(),
            m.loss_total.to_string(),
            opt(m.loss_mim),
            opt(m.loss_nce),
            opt(m.images_per_sec),
        ];
        let r = self.writer.write_record(&row).map_err(|e| csv_err(&self.path, e));
        self.keep(r)
    }

    fn on_checkpoint(&mut self, step: usize, params: &ModelParams<f32>) -> splitmask_core::Result<()> {
        let Some((dir, seed)) = self.checkpoints.clone() else {
            return Ok(());
        };
        let meta = CheckpointMeta::new(params, step as u64, seed);
        let r = save_checkpoint(&dir.join(format!("step_{}.smck", step)), &meta, params);
        self.keep(r)
    }

    fn images_per_sec(&mut self, images: usize) -> Option<f64> {
        let start = self.clock.as_mut()?;
        let secs = start.elapsed().as_secs_f64();
        *start = Instant::now();
        (secs > 0.0).then(|| images as f64 / secs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub tag: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_eval(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = create_csv(path, &EVAL_HEADER)?;
    for r in rows {
        w.write_record([r.tag.clone(), r.seed.to_string(), r.metric.clone(), r.value.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_probe(path: &Path, tag: &str, seed: u64, results: &[ProbeResult]) -> Result<()> {
    let mut w = create_csv(path, &PROBE_HEADER)?;
    for r in results {
        w.write_record([
            tag.to_string(),
            seed.to_string(),
            r.layer.to_string(),
            r.train_accuracy.to_string(),
            r.test_accuracy.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `epoch,test_accuracy` rows of a finetuning run.
pub fn write_history(path: &Path, history: &[(usize, f64)]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,test_accuracy\n");
    for (e, a) in history {
        text.push_str(&format!("{},{}\n", e, a));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
