//! Grid sweeps over run configurations.
//!
//! A sweep file names a base run config, the stages each cell runs, the
//! seeds, and one list of values per dotted key:
//!
//! ```toml
//! base = "splitmask.toml"
//! stages = ["pretrain", "finetune"]
//! seeds = [0, 1, 2]
//! set = ["data.n_train=128"]
//!
//! [axes]
//! "pretrain.epochs" = [25, 50, 100]
//! ```
//!
//! A table in an axis list sets several keys at once, e.g.
//! `"pretrain.loss" = [{ mim = 1.0, nce = 0.0 }]`.
//!
//! Cells are the product of all axes (keys in sorted order) and seeds. Each
//! runs in `cells/<hash>/`, where the hash covers the resolved config and
//! the stage list; a cell whose `eval.csv` exists is skipped on rerun.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{create_csv, write_eval, EvalRow};
use crate::run::{backbone, ensure_dir, finetune_rows, pretrain_rows, probe_rows, run_finetune, run_pretrain, run_probe};

/// Environment variable holding the number of cells run concurrently.
pub const WORKERS_ENV: &str = "SPLITMASK_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: Option<PathBuf>,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub set: Vec<String>,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<Value>>,
}

fn default_stages() -> Vec<Stage> {
    vec![Stage::Pretrain, Stage::Finetune]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Metric columns of the results table, in order.
pub const RESULT_METRICS: [&str; 9] = [
    "pretrain_epochs",
    "pretrain_steps",
    "pretrain_loss_total",
    "pretrain_loss_mim",
    "pretrain_loss_nce",
    "finetune_best_top1",
    "finetune_final_top1",
    "probe_best_top1",
    "probe_last_top1",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub seed: u64,
    /// `(key, value)` for every axis, in axis order.
    pub point: Vec<(String, Value)>,
    pub config: RunConfig,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub skipped: bool,
    pub outcome: std::result::Result<BTreeMap<String, f64>, String>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub results: Vec<CellResult>,
    pub results_path: PathBuf,
}

impl SweepReport {
    pub fn executed(&self) -> usize {
        self.results.iter().filter(|r| !r.skipped).count()
    }

    pub fn failed(&self) -> usize {
        self.results.iter().filter(|r| r.outcome.is_err()).count()
    }
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        let spec: SweepSpec =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((spec, base_dir))
    }

    /// Expands the grid. `base_dir` resolves a relative `base`.
    pub fn cells(&self, base_dir: &Path, extra: &[String]) -> Result<Vec<Cell>> {
        if self.stages.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one stage and one seed".into()));
        }
        if let Some((k, _)) = self.axes.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Config(format!("axis {} has no values", k)));
        }
        let base = self.base.as_ref().map(|b| if b.is_relative() { base_dir.join(b) } else { b.clone() });
        let keys: Vec<&String> = self.axes.keys().collect();
        let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for key in &keys {
            points = points
                .into_iter()
                .flat_map(|p| {
                    self.axes[*key].iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(((*key).clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        let mut cells = Vec::new();
        for point in points {
            for &seed in &self.seeds {
                let mut overrides: Vec<String> = self.set.clone();
                overrides.extend(extra.iter().cloned());
                for (k, v) in &point {
                    flatten(k, v, &mut overrides);
                }
                overrides.push(format!("seed={}", seed));
                let config = RunConfig::load(base.as_deref(), &overrides)?;
                let hash = cell_hash(&config, &self.stages)?;
                cells.push(Cell {
                    index: cells.len(),
                    seed,
                    point: point.clone(),
                    config,
                    hash,
                });
            }
        }
        Ok(cells)
    }
}

/// A table value sets each of its keys below `key`; anything else is one
/// override.
fn flatten(key: &str, value: &Value, out: &mut Vec<String>) {
    match value {
        Value::Table(t) => {
            for (k, v) in t {
                flatten(&format!("{}.{}", key, k), v, out);
            }
        }
        other => out.push(format!("{}={}", key, other)),
    }
}

pub fn cell_hash(config: &RunConfig, stages: &[Stage]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(config.to_toml()?.as_bytes());
    h.update(format!("{:?}", stages).as_bytes());
    let digest = h.finalize();
    Ok(digest.iter().take(8).map(|b| format!("{:02x}", b)).collect())
}

fn read_eval(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
            let bad = || Error::Data(format!("{}: malformed row", path.display()));
            Ok(EvalRow {
                tag: rec.get(0).ok_or_else(bad)?.to_string(),
                seed: rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
                metric: rec.get(2).ok_or_else(bad)?.to_string(),
                value: rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            })
        })
        .collect()
}

fn summarize(rows: &[EvalRow]) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = rows.iter().map(|r| (r.metric.clone(), r.value)).collect();
    let probes: Vec<(usize, f64)> = rows
        .iter()
        .filter_map(|r| {
            let layer = r.metric.strip_prefix("probe_layer_")?.strip_suffix("_top1")?.parse().ok()?;
            Some((layer, r.value))
        })
        .collect();
    if let Some(&(_, last)) = probes.iter().max_by_key(|p| p.0) {
        out.insert("probe_last_top1".into(), last);
        out.insert("probe_best_top1".into(), probes.iter().map(|p| p.1).fold(f64::MIN, f64::max));
    }
    out
}

fn run_cell(cell: &Cell, stages: &[Stage], dir: &Path) -> Result<Vec<EvalRow>> {
    ensure_dir(dir)?;
    let cfg = &cell.config;
    cfg.write_resolved(dir)?;
    let (train, test) = cfg.data.load()?;
    let mut rows = Vec::new();
    let params = if stages.contains(&Stage::Pretrain) {
        let o = run_pretrain(cfg, &train, dir)?;
        rows.extend(pretrain_rows(cfg, &o));
        o.params
    } else {
        backbone(cfg)?
    };
    if stages.contains(&Stage::Finetune) {
        rows.extend(finetune_rows(cfg, &run_finetune(cfg, &params, &train, &test, dir)?));
    }
    if stages.contains(&Stage::Probe) {
        rows.extend(probe_rows(cfg, &run_probe(cfg, &params, &train, &test, dir)?));
    }
    write_eval(&dir.join("eval.csv"), &rows)?;
    Ok(rows)
}

pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs every cell not already completed under `out` and writes
/// `results.csv`. A failing cell is recorded and the sweep continues.
pub fn run_sweep(spec: &SweepSpec, cells: Vec<Cell>, out: &Path, workers: usize) -> Result<SweepReport> {
    ensure_dir(out)?;
    let slots: Vec<Mutex<Option<CellResult>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = cells.get(i) else { break };
        let dir = out.join("cells").join(&cell.hash);
        let done = dir.join("eval.csv");
        let (skipped, outcome) = if done.is_file() {
            (true, read_eval(&done).map(|r| summarize(&r)).map_err(|e| e.line()))
        } else {
            (false, run_cell(cell, &spec.stages, &dir).map(|r| summarize(&r)).map_err(|e| e.line()))
        };
        *slots[i].lock().unwrap() = Some(CellResult {
            cell: cell.clone(),
            skipped,
            outcome,
        });
    };
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(cells.len().max(1)) {
            s.spawn(work);
        }
    });
    let results: Vec<CellResult> = slots.into_iter().map(|m| m.into_inner().unwrap().expect("cell ran")).collect();
    let results_path = out.join("results.csv");
    write_results(&results_path, spec, &results)?;
    Ok(SweepReport { results, results_path })
}

fn axis_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Table(t) => t.iter().map(|(k, v)| format!("{}={}", k, axis_text(v))).collect::<Vec<_>>().join(" "),
        other => other.to_string(),
    }
}

fn write_results(path: &Path, spec: &SweepSpec, results: &[CellResult]) -> Result<()> {
    let mut header: Vec<&str> = vec!["cell", "hash", "tag", "seed"];
    header.extend(spec.axes.keys().map(String::as_str));
    header.extend(["status", "error"]);
    header.extend(RESULT_METRICS);
    let mut w = create_csv(path, &header)?;
    for r in results {
        let mut row = vec![
            r.cell.index.to_string(),
            r.cell.hash.clone(),
            r.cell.config.tag.clone(),
            r.cell.seed.to_string(),
        ];
        row.extend(r.cell.point.iter().map(|(_, v)| axis_text(v)));
        match &r.outcome {
            Ok(m) => {
                row.extend(["ok".to_string(), String::new()]);
                row.extend(RESULT_METRICS.iter().map(|k| m.get(*k).map(|v| v.to_string()).unwrap_or_default()));
            }
            Err(e) => {
                row.extend(["failed".to_string(), e.clone()]);
                row.extend(RESULT_METRICS.iter().map(|_| String::new()));
            }
        }
        w.write_record(&row).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
