use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train, EpochLog, TrainConfig};
use crate::error::{Error, Result};
use crate::story::DatasetSplit;

/// Outcome of one config in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub fingerprint: String,
    pub per_k_accuracy: BTreeMap<usize, f64>,
    pub mean_test_accuracy: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub wall_clock_secs: f64,
    /// Set when training or evaluation failed; accuracies are then empty.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// One row per config, in input order.
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, name: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Tab-separated table: `variant fingerprint acc_k... mean best_epoch
    /// error`. Wall-clock time is left out so reruns compare equal.
    pub fn to_tsv(&self) -> String {
        let ks: Vec<usize> = {
            let mut ks: Vec<usize> = self
                .rows
                .iter()
                .flat_map(|r| r.per_k_accuracy.keys().copied())
                .collect();
            ks.sort_unstable();
            ks.dedup();
            ks
        };
        let mut s = String::from("variant\tfingerprint");
        for k in &ks {
            let _ = write!(s, "\tk{k}");
        }
        s += "\tmean\tbest_epoch\terror\n";
        for r in &self.rows {
            let _ = write!(s, "{}\t{}", r.name, r.fingerprint);
            for k in &ks {
                match r.per_k_accuracy.get(k) {
                    Some(a) => {
                        let _ = write!(s, "\t{a:.4}");
                    }
                    None => s += "\t",
                }
            }
            let mean = if r.error.is_some() {
                String::new()
            } else {
                format!("{:.4}", r.mean_test_accuracy)
            };
            let err = r.error.as_deref().unwrap_or("").replace(['\t', '\n'], " ");
            let _ = writeln!(s, "\t{mean}\t{}\t{err}", r.best_epoch);
        }
        s
    }

    /// Writes `results.tsv`, `results.json` and, per successful row,
    /// `curves/<variant>-<fingerprint>.tsv` (k, accuracy) and
    /// `logs/<variant>-<fingerprint>.tsv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("curves"))?;
        std::fs::create_dir_all(dir.join("logs"))?;
        std::fs::write(dir.join("results.tsv"), self.to_tsv())?;
        std::fs::write(dir.join("results.json"), serde_json::to_string_pretty(self)?)?;
        for r in self.rows.iter().filter(|r| r.error.is_none()) {
            let stem = format!("{}-{}.tsv", r.name, r.fingerprint);
            let mut curve = String::from("k\taccuracy\n");
            for (k, a) in &r.per_k_accuracy {
                let _ = writeln!(curve, "{k}\t{a:.6}");
            }
            std::fs::write(dir.join("curves").join(&stem), curve)?;
            let mut log = String::from("epoch\ttrain_loss\tval_loss\tval_acc\n");
            for e in &r.log {
                let _ = writeln!(
                    log,
                    "{}\t{:.6}\t{:.6}\t{:.6}",
                    e.epoch, e.train_loss, e.val_loss, e.val_acc
                );
            }
            std::fs::write(dir.join("logs").join(&stem), log)?;
        }
        Ok(())
    }
}

fn run_one(cfg: &TrainConfig, data: &DatasetSplit) -> SweepRow {
    let start = Instant::now();
    let fingerprint = cfg.fingerprint();
    let mut row = SweepRow {
        name: cfg.model.name(),
        fingerprint: fingerprint.clone(),
        per_k_accuracy: BTreeMap::new(),
        mean_test_accuracy: 0.0,
        best_epoch: 0,
        log: Vec::new(),
        wall_clock_secs: 0.0,
        error: None,
    };
    let result = train(cfg, data).and_then(|out| {
        let report = evaluate(&out.model, &data.test, &fingerprint)?;
        Ok((out, report))
    });
    match result {
        Ok((out, report)) => {
            row.per_k_accuracy = report.per_k_accuracy;
            row.mean_test_accuracy = report.mean_test_accuracy;
            row.best_epoch = out.best_epoch;
            row.log = out.log;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row.wall_clock_secs = start.elapsed().as_secs_f64();
    row
}

/// Trains and evaluates every config on `data`, at most `jobs` at a time.
/// A failing config yields a row with `error` set; the rest still run.
pub fn sweep(configs: &[TrainConfig], data: &DatasetSplit, jobs: usize) -> Result<SweepTable> {
    if configs.is_empty() {
        return Err(Error::Config("sweep needs at least one config".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| configs.par_iter().map(|c| run_one(c, data)).collect());
    Ok(SweepTable { rows })
}
