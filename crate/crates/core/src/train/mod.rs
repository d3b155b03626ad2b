//! Minibatch training with model selection, per-clause-length evaluation and
//! config sweeps.

mod config;
mod model;
mod sweep;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relchain_tensor::{Adam, Optimizer, Sgd, Tape};
use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, OptimizerKind, Selection, TrainConfig};
pub use model::Model;
pub use sweep::{sweep, SweepRow, SweepTable};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::story::{DatasetSplit, StoryInstance};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The model restored to its selected epoch.
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainOutcome {
    /// One `epoch  train_loss  val_loss  val_acc` line per epoch.
    pub fn log_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\tval_acc\n");
        for e in &self.log {
            s += &format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_acc
            );
        }
        s
    }
}

/// Loss and accuracy of `model` on `items`, canonical slots, no gradients.
pub fn loss_and_accuracy(model: &Model, items: &[StoryInstance], batch_size: usize) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(Error::Config("cannot score an empty split".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in items.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk.iter().collect());
        let labels = batch.labels()?;
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &batch)?;
        let l = tape.cross_entropy(logits, &labels)?;
        loss += tape.value(l).item()? * chunk.len() as f64;
        let pred = tape.value(logits).argmax_rows();
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok((loss / items.len() as f64, correct as f64 / items.len() as f64))
}

/// Argmax class per instance (lowest index on ties).
pub fn predict(model: &Model, items: &[StoryInstance], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk.iter().collect());
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &batch)?;
        out.extend(tape.value(logits).argmax_rows());
    }
    Ok(out)
}

fn better(sel: Selection, cand: &EpochLog, best: &EpochLog) -> bool {
    match sel {
        Selection::MinValLoss => cand.val_loss < best.val_loss,
        Selection::MaxValAcc => cand.val_acc > best.val_acc,
    }
}

/// Trains from scratch. Deterministic in `cfg.seed`.
pub fn train(cfg: &TrainConfig, data: &DatasetSplit) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Config("train and valid splits must be non-empty".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(&cfg.model, &mut init_rng)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0000_05ee_d0f0_da7a);
    let mut opt: Box<dyn Optimizer> = match cfg.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(cfg.lr)),
        OptimizerKind::Sgd => Box::new(Sgd { lr: cfg.lr }),
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log: Vec<EpochLog> = Vec::new();
    let mut best: Option<(EpochLog, Vec<relchain_tensor::Tensor>)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&StoryInstance> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = if cfg.shuffle_slots {
                Batch::shuffled(items, &mut order_rng)
            } else {
                Batch::new(items)
            };
            let labels = batch.labels()?;
            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, &batch)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                let norms = model
                    .params()
                    .norms()
                    .iter()
                    .map(|(n, v)| format!("{n}={v:.3e}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    norms,
                });
            }
            total += value * chunk.len() as f64;
            tape.backward(loss)?;
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate_grads(&tape)?;
            if let Some(max) = cfg.clip_grad {
                params.clip_grad_norm(max);
            }
            opt.step(params)?;
        }
        let (val_loss, val_acc) = loss_and_accuracy(&model, &data.valid, cfg.eval_batch_size)?;
        let entry = EpochLog {
            epoch,
            train_loss: total / data.train.len() as f64,
            val_loss,
            val_acc,
        };
        log.push(entry);
        if cfg.verbose {
            eprintln!(
                "epoch {epoch:3}  train {:.4}  val {:.4}  acc {:.4}",
                entry.train_loss, val_loss, val_acc
            );
        }
        let improved = best
            .as_ref()
            .is_none_or(|(b, _)| better(cfg.selection, &entry, b));
        if improved {
            best = Some((entry, model.params().snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    let (best_entry, snapshot) = best.expect("at least one epoch runs");
    model.params_mut().restore(&snapshot)?;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best_entry.epoch,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_k_accuracy: BTreeMap<usize, f64>,
    pub mean_test_accuracy: f64,
    pub fingerprint: String,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn from_accuracies(per_k: BTreeMap<usize, f64>, fingerprint: String, secs: f64) -> EvalReport {
        let mean = per_k.values().sum::<f64>() / per_k.len().max(1) as f64;
        EvalReport {
            per_k_accuracy: per_k,
            mean_test_accuracy: mean,
            fingerprint,
            wall_clock_secs: secs,
        }
    }
}

/// Per-k accuracy of argmax predictions on every test split.
pub fn evaluate(model: &Model, test: &BTreeMap<usize, Vec<StoryInstance>>, fingerprint: &str) -> Result<EvalReport> {
    evaluate_with(test, fingerprint, |items| predict(model, items, 256))
}

/// [`evaluate`] for an arbitrary predictor.
pub fn evaluate_with(
    test: &BTreeMap<usize, Vec<StoryInstance>>,
    fingerprint: &str,
    mut predictor: impl FnMut(&[StoryInstance]) -> Result<Vec<usize>>,
) -> Result<EvalReport> {
    let start = Instant::now();
    if test.is_empty() {
        return Err(Error::Config("no test splits".into()));
    }
    let mut per_k = BTreeMap::new();
    for (&k, items) in test {
        if items.is_empty() {
            return Err(Error::Config(format!("test split for k={k} is empty")));
        }
        let pred = predictor(items)?;
        let correct = items
            .iter()
            .zip(&pred)
            .filter(|(i, &p)| !i.target.is_inverse() && i.target.index() == p)
            .count();
        per_k.insert(k, correct as f64 / items.len() as f64);
    }
    Ok(EvalReport::from_accuracies(
        per_k,
        fingerprint.to_string(),
        start.elapsed().as_secs_f64(),
    ))
}
