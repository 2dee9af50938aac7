//! Grid sweeps with content-addressed, resumable cells.
//!
//! Every cell trains in its own directory `cells/<hash>/`, where the hash is
//! the SHA-256 of the cell's full training config. `cell.json` is written
//! last and carries a digest of `record.csv`, so a cell whose files are
//! missing, truncated or edited is simply trained again.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RunRecord, Stage, TrainConfig, Trainer};
use crate::analysis::csv_err;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::peft::Method;
use crate::scalar::Scalar;
use crate::steering::LayerSet;
use crate::tasks::Dataset;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "MORES_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub ranks: Vec<usize>,
    /// Steered-token ratios; only MoReS cells vary over these.
    pub ratios: Vec<f64>,
    pub layer_sets: Vec<LayerSet>,
    pub seeds: Vec<u64>,
    /// Settings shared by every cell.
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Mores],
            ranks: vec![1, 2, 4, 8],
            ratios: vec![0.01, 0.25, 0.5, 1.0],
            layer_sets: vec![LayerSet::All, LayerSet::Stride(2), LayerSet::Deep],
            seeds: vec![0],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub method: Method,
    pub rank: usize,
    pub ratio: f64,
    pub layers: LayerSet,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub hash: String,
    pub trainable_params: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub lmar_mean: f64,
    pub visual_share: f64,
    /// SHA-256 of the cell's `record.csv`.
    pub record_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// In grid order.
    pub cells: Vec<CellResult>,
    pub ran: usize,
    pub reused: usize,
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Grid cells in a fixed order. Ratios apply only to MoReS; other
    /// methods get a single ratio of 1.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &method in &self.methods {
            let ratios: &[f64] = if method == Method::Mores { &self.ratios } else { &[1.0] };
            for &rank in &self.ranks {
                for &ratio in ratios {
                    for layers in &self.layer_sets {
                        for &seed in &self.seeds {
                            out.push(CellKey { method, rank, ratio, layers: layers.clone(), seed });
                        }
                    }
                }
            }
        }
        out
    }

    /// Full training config of one cell.
    pub fn cell_config(&self, key: &CellKey) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.stage = Stage::InstructionTune;
        cfg.seed = key.seed;
        cfg.out = None;
        let m = &mut cfg.method;
        m.method = key.method;
        m.rank = key.rank;
        m.alpha = 2.0 * key.rank as f64;
        m.layers = key.layers.clone();
        m.steering.rank = key.rank;
        m.steering.ratio = key.ratio;
        m.steering.layers = key.layers.clone();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells().is_empty() {
            return Err(Error::config("sweep grid is empty"));
        }
        for key in self.cells() {
            self.cell_config(&key).validate()?;
        }
        Ok(())
    }
}

/// Content hash of a cell config.
pub fn cell_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex(&Sha256::digest(json.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Worker count: `MORES_THREADS` if set, else the available cores.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(format!("{THREADS_ENV} must be a positive integer, got `{s}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// A completed cell, or `None` if it is missing or damaged.
pub fn load_cell(dir: &Path, hash: &str) -> Option<CellResult> {
    let text = std::fs::read_to_string(dir.join("cell.json")).ok()?;
    let cell: CellResult = serde_json::from_str(&text).ok()?;
    let record = std::fs::read(dir.join("record.csv")).ok()?;
    (cell.hash == hash && cell.record_digest == hex(&Sha256::digest(&record))).then_some(cell)
}

fn run_cell<T: Scalar>(cfg: TrainConfig, base: &ParamStore<T>, data: &Dataset, key: CellKey, dir: &Path) -> Result<CellResult> {
    let hash = cell_hash(&cfg);
    let mut trainer = Trainer::<T>::new(cfg, base.clone())?;
    trainer.run(data)?;
    std::fs::create_dir_all(dir)?;
    let _ = std::fs::remove_file(dir.join("cell.json"));
    std::fs::write(dir.join("config.toml"), trainer.config.to_toml())?;
    let mut record = Vec::new();
    trainer.record.write_csv(&mut record)?;
    std::fs::write(dir.join("record.csv"), &record)?;
    let last = trainer.record.last().expect("run logs at least one row");
    let cell = CellResult {
        key,
        hash,
        trainable_params: trainer.trainable_params,
        steps: trainer.step,
        final_loss: trainer.losses.last().copied().unwrap_or(f64::NAN),
        final_accuracy: last.eval_accuracy,
        lmar_mean: last.lmar_mean,
        visual_share: last.visual_share,
        record_digest: hex(&Sha256::digest(&record)),
    };
    let tmp = dir.join("cell.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&cell).expect("cell serializes"))?;
    std::fs::rename(tmp, dir.join("cell.json"))?;
    Ok(cell)
}

/// Runs every cell not already complete under `out`, then writes
/// `results.csv` covering the whole grid.
pub fn run_sweep<T: Scalar>(sweep: &SweepConfig, base: &ParamStore<T>, data: &Dataset, out: &Path, threads: usize) -> Result<SweepReport> {
    sweep.validate()?;
    let keys = sweep.cells();
    let jobs: Vec<(CellKey, TrainConfig, String, PathBuf)> = keys
        .into_iter()
        .map(|k| {
            let cfg = sweep.cell_config(&k);
            let hash = cell_hash(&cfg);
            let dir = out.join("cells").join(&hash);
            (k, cfg, hash, dir)
        })
        .collect();
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; jobs.len()]);
    let mut reused = 0;
    let mut todo = Vec::new();
    for (i, (_, _, hash, dir)) in jobs.iter().enumerate() {
        match load_cell(dir, hash) {
            Some(c) => {
                results.lock().unwrap()[i] = Some(c);
                reused += 1;
            }
            None => todo.push(i),
        }
    }
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..threads.max(1).min(todo.len()) {
            s.spawn(|| loop {
                if failure.lock().unwrap().is_some() {
                    return;
                }
                let t = next.fetch_add(1, Ordering::Relaxed);
                let Some(&i) = todo.get(t) else { return };
                let (key, cfg, _, dir) = &jobs[i];
                match run_cell(cfg.clone(), base, data, key.clone(), dir) {
                    Ok(c) => results.lock().unwrap()[i] = Some(c),
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let cells: Vec<CellResult> = results.into_inner().unwrap().into_iter().map(|c| c.expect("every cell ran")).collect();
    write_results(&cells, std::fs::File::create(out.join("results.csv"))?)?;
    Ok(SweepReport { cells, ran: todo.len(), reused })
}

pub const RESULT_COLUMNS: [&str; 12] = [
    "method",
    "rank",
    "ratio",
    "layers",
    "seed",
    "hash",
    "trainable_params",
    "steps",
    "final_loss",
    "final_accuracy",
    "lmar_mean",
    "visual_share",
];

/// Consolidated table; deterministic for a given grid and seed set.
pub fn write_results<W: std::io::Write>(cells: &[CellResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULT_COLUMNS).map_err(csv_err)?;
    for c in cells {
        out.write_record([
            c.key.method.to_string(),
            c.key.rank.to_string(),
            format!("{:?}", c.key.ratio),
            c.key.layers.to_string(),
            c.key.seed.to_string(),
            c.hash.clone(),
            c.trainable_params.to_string(),
            c.steps.to_string(),
            format!("{:?}", c.final_loss),
            format!("{:?}", c.final_accuracy),
            format!("{:?}", c.lmar_mean),
            format!("{:?}", c.visual_share),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a cell's `record.csv`.
pub fn read_cell_record(dir: &Path) -> Result<RunRecord> {
    RunRecord::read_csv(std::fs::File::open(dir.join("record.csv"))?)
}
