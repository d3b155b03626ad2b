//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.
//! With `RELCHAIN_ACCEPTANCE_STRICT=1` it also exits non-zero if any
//! criterion fails; otherwise the workspace test run carries on to the
//! remaining test binaries.
//!
//! Trained criteria use the desk-scale protocol in [`desk`]. Sweep tables
//! are written under `target/acceptance/`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relchain::batch::Batch;
use relchain::egnn::{EgnnConfig, EgnnModel, EgnnVariant, GraphBatch};
use relchain::kb::{check_chains, validate_kb, FamilyTree, KnowledgeBase};
use relchain::lgraph::{SeqConfig, SeqModel, SeqVariant, TokenBatch};
use relchain::story::{
    generate_dataset, load_dataset, save_dataset, DatasetConfig, DatasetSplit, Noise, StoryInstance,
};
use relchain::train::{predict, sweep, train, Model, ModelConfig, SweepTable, TrainConfig};
use relchain_tensor::gradcheck::op_suite;
use relchain_tensor::{Tape, Tensor};

const STRICT_ENV: &str = "RELCHAIN_ACCEPTANCE_STRICT";
const SEED: u64 = 0;
const GRADCHECK_BUDGET_SECS: f64 = 120.0;
const EDGE_PERM_TOL: f64 = 1e-9;
const PAD_TOL: f64 = 1e-9;
const BOE_TOL: f64 = 1e-12;
const PROPERTY_CASES: u64 = 40;
const DESK_EPOCHS: usize = 30;
const MODEL_BUDGET_SECS: f64 = 20.0 * 60.0;
const GRU_MEAN_MIN: f64 = 0.80;
const GRU_K10_MIN: f64 = 0.70;
const WEAK_MEAN_MAX: f64 = 0.50;
const SHORT_K_MIN: f64 = 0.85;
const TREND_SLACK: f64 = 0.05;
const ORDER_SET: usize = 200;
const ORDER_PERMS: usize = 5;
const ORDER_GRU_MIN: f64 = 0.10;
const ROBUST_MARGIN: f64 = 0.05;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Desk-scale training protocol shared by every trained criterion.
fn desk(model: ModelConfig) -> TrainConfig {
    TrainConfig {
        model,
        max_epochs: DESK_EPOCHS,
        seed: SEED,
        ..TrainConfig::default()
    }
}

fn graph(variant: EgnnVariant) -> ModelConfig {
    ModelConfig::Graph(EgnnConfig {
        variant,
        ..EgnnConfig::default()
    })
}

fn seq(variant: SeqVariant) -> ModelConfig {
    ModelConfig::Seq(SeqConfig::new(variant, 100))
}

fn out_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/acceptance")
        .join(name)
}

fn fmt_curve(acc: &BTreeMap<usize, f64>) -> String {
    acc.iter()
        .map(|(k, a)| format!("k{k}={a:.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let ops = op_suite(3, SEED).expect("op suite runs");
    let models = relchain::gradcheck::model_suite(SEED).expect("model suite runs");
    let secs = start.elapsed().as_secs_f64();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for (name, check) in ops
        .iter()
        .map(|r| (r.op.to_string(), r.check.clone()))
        .chain(models.iter().cloned())
    {
        worst = worst.max(check.max_rel_err);
        if !check.passes() || check.checked == 0 {
            failed.push(name);
        }
    }
    verdict(
        failed.is_empty() && models.len() == 15 && secs < GRADCHECK_BUDGET_SECS,
        format!(
            "{} ops + {} models, worst rel err {worst:.2e}, {secs:.1}s, failing: {failed:?}",
            ops.len(),
            models.len()
        ),
    )
}

fn criterion_2() -> Verdict {
    let kb = KnowledgeBase::default();
    let report = validate_kb(&kb);
    let check = check_chains(&kb, &FamilyTree::reference(), 4);
    verdict(
        report.is_empty() && check.mismatches.is_empty() && check.resolved > 0,
        format!(
            "{} walks, {} realised chains, {} resolved, {} disagreements, validation report empty: {}",
            check.walks,
            check.chains,
            check.resolved,
            check.mismatches.len(),
            report.is_empty()
        ),
    )
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn graph_logits(m: &EgnnModel, g: &GraphBatch) -> Tensor {
    let mut tape = Tape::new();
    let out = m.forward_graph(&mut tape, g).expect("forward");
    tape.value(out).clone()
}

fn seq_logits(m: &SeqModel, items: &[&StoryInstance]) -> Tensor {
    let mut tape = Tape::new();
    let t = TokenBatch::from_batch(&Batch::new(items.to_vec())).expect("tokens");
    let out = m.forward_tokens(&mut tape, &t).expect("forward");
    tape.value(out).clone()
}

fn criterion_3() -> Verdict {
    let kb = KnowledgeBase::default();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut edge = 0.0f64;
    let mut pad = 0.0f64;
    let mut boe = 0.0f64;
    let small = DatasetConfig {
        train_size: 60,
        valid_size: 20,
        test_per_k: 10,
        noise: Noise::Supporting,
        ..DatasetConfig::default()
    };
    let data = generate_dataset(&small, &kb).expect("dataset");
    let pool: Vec<&StoryInstance> = data.test_instances().collect();
    for case in 0..PROPERTY_CASES {
        let items: Vec<&StoryInstance> = pool.choose_multiple(&mut rng, 4).copied().collect();
        let batch = Batch::new(items.clone());
        let g = GraphBatch::from_batch(&batch).expect("graph batch");
        for variant in EgnnVariant::ALL {
            let cfg = EgnnConfig {
                variant,
                emb_dim: 16,
                ..EgnnConfig::default()
            };
            let m = EgnnModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(case)).expect("model");
            let base = graph_logits(&m, &g);
            let mut order: Vec<usize> = (0..g.num_edges()).collect();
            order.shuffle(&mut rng);
            let permuted = GraphBatch {
                edge_src: order.iter().map(|&e| g.edge_src[e]).collect(),
                edge_dst: order.iter().map(|&e| g.edge_dst[e]).collect(),
                edge_rel: order.iter().map(|&e| g.edge_rel[e]).collect(),
                ..g.clone()
            };
            edge = edge.max(max_diff(&base, &graph_logits(&m, &permuted)));
            let padded = GraphBatch::padded(&batch, g.nodes_per_graph + 3).expect("padded");
            pad = pad.max(max_diff(&base, &graph_logits(&m, &padded)));
        }
        let m = SeqModel::new(SeqConfig::new(SeqVariant::Boe, 16), &mut ChaCha8Rng::seed_from_u64(case))
            .expect("model");
        let shuffled: Vec<StoryInstance> = items
            .iter()
            .map(|i| {
                let mut s = (*i).clone();
                s.facts.shuffle(&mut rng);
                s
            })
            .collect();
        let shuffled_refs: Vec<&StoryInstance> = shuffled.iter().collect();
        boe = boe.max(max_diff(&seq_logits(&m, &items), &seq_logits(&m, &shuffled_refs)));
    }

    let dir = tempfile::tempdir().expect("tempdir");
    save_dataset(dir.path(), &data, &small).expect("save");
    let round_trip = load_dataset(dir.path()).expect("load") == data;
    let again = tempfile::tempdir().expect("tempdir");
    save_dataset(again.path(), &generate_dataset(&small, &kb).expect("dataset"), &small).expect("save");
    let identical = ["train.jsonl", "valid.jsonl", "test.jsonl", "manifest.json"]
        .iter()
        .all(|f| std::fs::read(dir.path().join(f)).ok() == std::fs::read(again.path().join(f)).ok());

    verdict(
        edge <= EDGE_PERM_TOL && pad <= PAD_TOL && boe <= BOE_TOL && round_trip && identical,
        format!(
            "{PROPERTY_CASES} cases: edge-order diff {edge:.1e}, padding diff {pad:.1e}, boe order diff {boe:.1e}, round trip {round_trip}, regeneration identical {identical}"
        ),
    )
}

struct Trained {
    model: Model,
    acc: BTreeMap<usize, f64>,
    mean: f64,
    secs: f64,
}

fn train_and_eval(cfg: &TrainConfig, data: &DatasetSplit) -> Trained {
    let start = Instant::now();
    let out = train(cfg, data).expect("training succeeds");
    let secs = start.elapsed().as_secs_f64();
    let report = relchain::train::evaluate(&out.model, &data.test, &cfg.fingerprint()).expect("evaluation");
    println!(
        "  {:<14} best epoch {:>2}/{:<2} {:>6.0}s  mean {:.3}  {}",
        cfg.model.name(),
        out.best_epoch,
        out.log.len(),
        secs,
        report.mean_test_accuracy,
        fmt_curve(&report.per_k_accuracy)
    );
    Trained {
        model: out.model,
        acc: report.per_k_accuracy,
        mean: report.mean_test_accuracy,
        secs,
    }
}

fn criterion_4(data: &DatasetSplit) -> (Verdict, Trained, Trained) {
    let gru = train_and_eval(&desk(seq(SeqVariant::Gru)), data);
    let cnn = train_and_eval(&desk(seq(SeqVariant::Cnn)), data);
    let boe = train_and_eval(&desk(seq(SeqVariant::Boe)), data);
    let k10 = gru.acc.get(&10).copied().unwrap_or(0.0);
    let slowest = [gru.secs, cnn.secs, boe.secs].into_iter().fold(0.0, f64::max);
    let v = verdict(
        data.train.len() == 5000
            && gru.mean >= GRU_MEAN_MIN
            && k10 >= GRU_K10_MIN
            && cnn.mean <= WEAK_MEAN_MAX
            && boe.mean <= WEAK_MEAN_MAX
            && slowest <= MODEL_BUDGET_SECS,
        format!(
            "gru mean {:.3} (>= {GRU_MEAN_MIN}), gru k10 {k10:.3} (>= {GRU_K10_MIN}), cnn mean {:.3} (<= {WEAK_MEAN_MAX}), boe mean {:.3} (<= {WEAK_MEAN_MAX}), slowest model {slowest:.0}s",
            gru.mean, cnn.mean, boe.mean
        ),
    );
    (v, gru, boe)
}

/// Rises between consecutive k; at most one, and no larger than the slack.
fn declining(acc: &BTreeMap<usize, f64>) -> bool {
    let v: Vec<f64> = acc.values().copied().collect();
    let rises: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    rises.len() <= 1 && rises.iter().all(|&d| d <= TREND_SLACK) && v.last() < v.first()
}

fn write_table(table: &SweepTable, name: &str) {
    let dir = out_dir(name);
    table.write(&dir).expect("write sweep table");
    println!("  table written to {}", dir.display());
    for line in table.to_tsv().lines() {
        println!("  | {line}");
    }
}

fn criterion_5(data: &DatasetSplit) -> Verdict {
    let configs: Vec<TrainConfig> = EgnnVariant::ALL.into_iter().map(|v| desk(graph(v))).collect();
    let table = sweep(&configs, data, 1).expect("sweep");
    write_table(&table, "graph-models");
    let mut notes = Vec::new();
    let mut ok = true;
    for row in &table.rows {
        if let Some(e) = &row.error {
            ok = false;
            notes.push(format!("{} failed: {e}", row.name));
            continue;
        }
        let short = row
            .per_k_accuracy
            .iter()
            .filter(|(&k, _)| k <= 4)
            .map(|(_, &a)| a)
            .fold(1.0, f64::min);
        let trend = declining(&row.per_k_accuracy);
        ok &= short >= SHORT_K_MIN && trend;
        notes.push(format!(
            "{} mean {:.3} min(k<=4) {short:.3} declining {trend}",
            row.name, row.mean_test_accuracy
        ));
    }
    let mean = |n: &str| table.row(n).map_or(0.0, |r| r.mean_test_accuracy);
    let ordered = mean("agnn") >= mean("gcn");
    verdict(
        ok && ordered,
        format!("agnn >= gcn: {ordered}; {}", notes.join("; ")),
    )
}

fn changed_under_permutation(model: &Model, items: &[StoryInstance], rng: &mut ChaCha8Rng) -> f64 {
    let base = predict(model, items, 256).expect("predict");
    let mut changed = vec![false; items.len()];
    for _ in 0..ORDER_PERMS {
        let permuted: Vec<StoryInstance> = items
            .iter()
            .map(|i| {
                let mut p = i.clone();
                p.facts.shuffle(rng);
                p
            })
            .collect();
        let pred = predict(model, &permuted, 256).expect("predict");
        for (c, (a, b)) in changed.iter_mut().zip(base.iter().zip(&pred)) {
            *c |= a != b;
        }
    }
    changed.iter().filter(|&&c| c).count() as f64 / items.len() as f64
}

fn criterion_6(data: &DatasetSplit, gru: &Trained, boe: &Trained) -> Verdict {
    let all: Vec<StoryInstance> = data.test_instances().cloned().collect();
    let stride = (all.len() / ORDER_SET).max(1);
    let set: Vec<StoryInstance> = all.into_iter().step_by(stride).take(ORDER_SET).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let g = changed_under_permutation(&gru.model, &set, &mut rng);
    let b = changed_under_permutation(&boe.model, &set, &mut rng);
    verdict(
        set.len() == ORDER_SET && g >= ORDER_GRU_MIN && b == 0.0,
        format!(
            "{} instances, {ORDER_PERMS} fact permutations each: gru changed {g:.3} (>= {ORDER_GRU_MIN}), boe changed {b:.3} (== 0)",
            set.len()
        ),
    )
}

fn criterion_7(kb: &KnowledgeBase) -> Verdict {
    let cfg = DatasetConfig {
        noise: Noise::Disconnected,
        seed: SEED,
        ..DatasetConfig::default()
    };
    let data = generate_dataset(&cfg, kb).expect("disconnected dataset");
    let recurrent = [
        SeqVariant::Rnn,
        SeqVariant::Lstm,
        SeqVariant::Gru,
        SeqVariant::BiRnn,
        SeqVariant::BiLstm,
        SeqVariant::BiGru,
    ];
    let configs: Vec<TrainConfig> = EgnnVariant::ALL
        .into_iter()
        .map(|v| desk(graph(v)))
        .chain(recurrent.into_iter().map(|v| desk(seq(v))))
        .collect();
    let table = sweep(&configs, &data, 1).expect("sweep");
    write_table(&table, "disconnected-noise");
    let k3 = |graph_family: bool| {
        table
            .rows
            .iter()
            .zip(&configs)
            .filter(|(_, c)| matches!(c.model, ModelConfig::Graph(_)) == graph_family)
            .filter_map(|(r, _)| r.per_k_accuracy.get(&3).map(|&a| (a, r.name.clone())))
            .fold((f64::NEG_INFINITY, String::new()), |best, x| if x.0 > best.0 { x } else { best })
    };
    let (g, gname) = k3(true);
    let (r, rname) = k3(false);
    let failures = table.rows.iter().filter(|r| r.error.is_some()).count();
    verdict(
        failures == 0 && g >= r - ROBUST_MARGIN,
        format!("best graph k3 {g:.3} ({gname}) vs best recurrent k3 {r:.3} ({rname}) - {ROBUST_MARGIN}; failed runs {failures}"),
    )
}

fn report(n: usize, v: &Verdict) {
    println!(
        "criterion {n}: {}  {}",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
}

fn main() {
    let start = Instant::now();
    let mut verdicts = Vec::new();

    let v = criterion_1();
    report(1, &v);
    verdicts.push(v);
    let v = criterion_2();
    report(2, &v);
    verdicts.push(v);
    let v = criterion_3();
    report(3, &v);
    verdicts.push(v);

    let kb = KnowledgeBase::default();
    let clean = DatasetConfig {
        seed: SEED,
        ..DatasetConfig::default()
    };
    let data = generate_dataset(&clean, &kb).expect("clean dataset");
    println!("training on {} clean instances (k in {:?})", data.train.len(), clean.train_ks);
    let (v, gru, boe) = criterion_4(&data);
    report(4, &v);
    verdicts.push(v);
    let v = criterion_5(&data);
    report(5, &v);
    verdicts.push(v);
    let v = criterion_6(&data, &gru, &boe);
    report(6, &v);
    verdicts.push(v);
    let v = criterion_7(&kb);
    report(7, &v);
    verdicts.push(v);

    println!("\nacceptance summary ({:.0}s)", start.elapsed().as_secs_f64());
    for (i, v) in verdicts.iter().enumerate() {
        println!("criterion {}: {}", i + 1, if v.pass { "PASS" } else { "FAIL" });
    }
    let strict = std::env::var(STRICT_ENV).is_ok_and(|v| v == "1");
    if strict && verdicts.iter().any(|v| !v.pass) {
        std::process::exit(1);
    }
}
