use std::path::Path;
use std::process::{Command, Output};

fn relchain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relchain"))
        .args(args)
        .env_remove("RELCHAIN_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY_DATA: &str = "train_size = 40\nvalid_size = 10\ntest_per_k = 4\ntest_ks = [2, 3]\n";

fn tiny_train(dir: &Path, variant: &str) -> std::path::PathBuf {
    let family = if ["gcn", "gat", "sgcn", "agnn", "rgcn"].contains(&variant) {
        "graph"
    } else {
        "seq"
    };
    let dim = if family == "graph" { "emb_dim" } else { "hidden" };
    let path = dir.join(format!("{variant}.toml"));
    std::fs::write(
        &path,
        format!("max_epochs = 2\nbatch_size = 16\n[model]\nfamily = \"{family}\"\nvariant = \"{variant}\"\n{dim} = 8\n"),
    )
    .unwrap();
    path
}

#[test]
fn oracle_resolves_grandfather() {
    let o = relchain(&["oracle", "father,father"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "grandfather");
}

#[test]
fn oracle_with_empty_chain_is_a_usage_error() {
    assert_eq!(relchain(&["oracle"]).status.code(), Some(2));
    assert_eq!(relchain(&["oracle", ""]).status.code(), Some(2));
    assert_eq!(relchain(&["oracle", "father,cousin"]).status.code(), Some(2));
}

#[test]
fn unresolvable_chain_is_a_runtime_failure() {
    assert_eq!(relchain(&["oracle", "sister,husband"]).status.code(), Some(1));
}

#[test]
fn unknown_subcommands_and_flags_are_rejected() {
    let o = relchain(&["bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(relchain(&["oracle", "--frobnicate", "father"]).status.code(), Some(2));
}

#[test]
fn every_subcommand_documents_its_flags() {
    for (cmd, flags) in [
        ("gen-data", &["--config", "--out", "--seed", "--jobs", "--noise"][..]),
        ("train", &["--config", "--out", "--data", "--seed", "--jobs"]),
        ("eval", &["--config", "--checkpoint", "--data", "--out", "--seed"]),
        ("sweep", &["--config", "--out", "--data", "--seed", "--jobs"]),
        ("oracle", &["--kb", "--validate"]),
        ("gradcheck", &["--trials", "--seed"]),
    ] {
        let o = relchain(&[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn gradcheck_passes() {
    let o = relchain(&["gradcheck", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("graph_gru"));
}

#[test]
fn gen_data_is_deterministic_in_seed_and_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("data.toml");
    std::fs::write(&cfg, TINY_DATA).unwrap();
    let gen = |out: &str, seed: Option<&str>, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_relchain"));
        c.args(["gen-data", "--config", cfg.to_str().unwrap(), "--out"])
            .arg(dir.path().join(out));
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        match env {
            Some(v) => c.env("RELCHAIN_SEED", v),
            None => c.env_remove("RELCHAIN_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        std::fs::read(dir.path().join(out).join("train.jsonl")).unwrap()
    };
    let a = gen("a", Some("5"), None);
    let b = gen("b", None, Some("5"));
    let c = gen("c", Some("6"), None);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn train_eval_and_sweep_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("data.toml"), TINY_DATA).unwrap();
    let data = d.join("data");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let o = relchain(&["gen-data", "--config", &s(&d.join("data.toml")), "--out", &s(&data), "--seed", "3"]);
    assert!(o.status.success());

    let cfg = tiny_train(d, "gru");
    let run = d.join("run");
    let o = relchain(&["train", "--config", &s(&cfg), "--out", &s(&run), "--data", &s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let eval = |out: &Path| {
        let o = relchain(&[
            "eval", "--config", &s(&cfg), "--checkpoint", &s(&run.join("model.ckpt")),
            "--data", &s(&data), "--out", &s(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out.join("eval.json")).unwrap()
    };
    let first: serde_json::Value = serde_json::from_str(&eval(&d.join("e1"))).unwrap();
    let second: serde_json::Value = serde_json::from_str(&eval(&d.join("e2"))).unwrap();
    assert_eq!(first["per_k_accuracy"], second["per_k_accuracy"]);
    assert_eq!(first["per_k_accuracy"].as_object().unwrap().len(), 2);

    let sweep = d.join("sweep.toml");
    std::fs::write(
        &sweep,
        "dataset = \"data\"\n\
         [[runs]]\nmax_epochs = 1\n[runs.model]\nfamily = \"graph\"\nvariant = \"gcn\"\nemb_dim = 8\n\
         [[runs]]\nmax_epochs = 1\n[runs.model]\nfamily = \"seq\"\nvariant = \"boe\"\nhidden = 8\n",
    )
    .unwrap();
    let out = d.join("sweep");
    let o = relchain(&["sweep", "--config", &s(&sweep), "--out", &s(&out), "--jobs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("results.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("variant\tfingerprint\tk2\tk3\tmean"));
    assert!(lines[1].starts_with("gcn\t") && lines[2].starts_with("graph_boe\t"));
    assert_eq!(std::fs::read_dir(out.join("curves")).unwrap().count(), 2);
}

#[test]
fn train_with_missing_config_fails_at_runtime() {
    let o = relchain(&["train", "--config", "/nonexistent.toml", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let text = std::fs::read_to_string(dir.join("dataset.toml")).unwrap();
    let data: relchain::story::DatasetConfig = toml::from_str(&text).unwrap();
    data.validate().unwrap();
    assert_eq!(data, relchain::story::DatasetConfig::default());
    for name in ["gcn.toml", "gru.toml"] {
        relchain::train::TrainConfig::load(dir.join(name)).unwrap();
    }
}
