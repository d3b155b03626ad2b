//! `relchain` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::kb::{validate_kb, KnowledgeBase, Relation};
use crate::story::{generate_dataset, load_dataset, save_dataset, DatasetConfig, DatasetSplit, Noise};
use crate::train::{evaluate, sweep, train, Model, TrainConfig};

/// Environment variable consulted when `--seed` is absent.
pub const SEED_ENV: &str = "RELCHAIN_SEED";

#[derive(Debug, Parser)]
#[command(name = "relchain", version, about = "Kinship reasoning datasets and relation classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Master seed; falls back to RELCHAIN_SEED, then to the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/valid/test splits into a directory.
    GenData {
        /// Dataset config (TOML); defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Noise regime: clean, supporting, irrelevant or disconnected.
        #[arg(long)]
        noise: Option<Noise>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write its checkpoint and epoch log.
    Train {
        /// Training config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; overrides the config's `dataset`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-k test accuracy of a trained checkpoint.
    Eval {
        /// Training config the checkpoint was produced with.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; overrides the config's `dataset`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for `eval.json`; the report is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every run of a sweep file.
    Sweep {
        /// Sweep file: optional top-level `dataset`, then `[[runs]]` tables
        /// with the keys of a training config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the results table, curves and logs.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; overrides the sweep file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Resolve a comma-separated relation chain, e.g. `father,father`.
    Oracle {
        /// Relations in path order.
        chain: Option<String>,
        /// Rule file (TSV) to use instead of the built-in rules.
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Also validate the rule base against the reference family.
        #[arg(long)]
        validate: bool,
    },
    /// Finite-difference check of every op and every model variant.
    Gradcheck {
        /// Random cases per op.
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    dataset: Option<PathBuf>,
    runs: Vec<TrainConfig>,
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 on a usage error, 1 on any other failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn resolve_seed(flag: Option<u64>) -> std::result::Result<Option<u64>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn set_jobs(jobs: Option<usize>) {
    if let Some(n) = jobs {
        // only the first call can configure the global pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::GenData {
            config,
            out,
            noise,
            common,
        } => {
            set_jobs(common.jobs);
            let mut cfg = match config {
                Some(path) => {
                    let text = read(&path)?;
                    toml::from_str::<DatasetConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => DatasetConfig::default(),
            };
            if let Some(seed) = resolve_seed(common.seed)? {
                cfg.seed = seed;
            }
            if let Some(n) = noise {
                cfg.noise = n;
            }
            cfg.validate()?;
            let data = generate_dataset(&cfg, &KnowledgeBase::default())?;
            save_dataset(&out, &data, &cfg)?;
            println!(
                "wrote {} train, {} valid, {} test instances to {}",
                data.train.len(),
                data.valid.len(),
                data.test_instances().count(),
                out.display()
            );
        }
        Command::Train {
            config,
            out,
            data,
            common,
        } => {
            set_jobs(common.jobs);
            let cfg = train_config(&config, common.seed)?;
            let split = dataset_for(&cfg, data.as_deref())?;
            let outcome = train(&cfg, &split)?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            outcome.model.save(out.join("model.ckpt"))?;
            write(&out.join("train_log.tsv"), &outcome.log_tsv())?;
            let resolved = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
            write(&out.join("config.toml"), &resolved)?;
            println!(
                "best epoch {} of {}; checkpoint in {}",
                outcome.best_epoch,
                outcome.log.len(),
                out.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
            common,
        } => {
            set_jobs(common.jobs);
            let cfg = train_config(&config, common.seed)?;
            let split = dataset_for(&cfg, data.as_deref())?;
            let model = Model::load(&cfg.model, &checkpoint)?;
            let report = evaluate(&model, &split.test, &cfg.fingerprint())?;
            let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            println!("{json}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(Error::from)?;
                write(&dir.join("eval.json"), &json)?;
            }
        }
        Command::Sweep {
            config,
            out,
            data,
            common,
        } => {
            let text = read(&config)?;
            let file: SweepFile = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            if file.runs.is_empty() {
                return Err(Failure::Usage("sweep file has no [[runs]]".into()));
            }
            let seed = resolve_seed(common.seed)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let dir = data.or_else(|| file.dataset.map(|d| base.join(d)));
            let mut runs = file.runs;
            for r in &mut runs {
                if let Some(s) = seed {
                    r.seed = s;
                }
                r.validate()?;
            }
            let split = match &dir {
                Some(d) => load_dataset(d)?,
                None => default_dataset(seed.unwrap_or(0))?,
            };
            let table = sweep(&runs, &split, common.jobs.unwrap_or(1))?;
            table.write(&out)?;
            print!("{}", table.to_tsv());
        }
        Command::Oracle {
            chain,
            kb,
            validate,
        } => {
            let chain = chain.unwrap_or_default();
            let names: Vec<&str> = chain.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if names.is_empty() {
                return Err(Failure::Usage("oracle needs a non-empty relation chain".into()));
            }
            let relations = names
                .iter()
                .map(|n| n.parse::<Relation>())
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let kb = match kb {
                Some(path) => KnowledgeBase::load(path)?,
                None => KnowledgeBase::default(),
            };
            if validate {
                let report = validate_kb(&kb);
                if !report.is_empty() {
                    return Err(Failure::Runtime(Error::Config(format!(
                        "rule base is invalid:\n{report}"
                    ))));
                }
            }
            match kb.resolve_chain(&relations)? {
                Some(r) => println!("{r}"),
                None => return Err(Failure::Runtime(Error::Unresolved(names.join(",")))),
            }
        }
        Command::Gradcheck { trials, common } => {
            let seed = resolve_seed(common.seed)?.unwrap_or(0);
            let ops = relchain_tensor::gradcheck::op_suite(trials.max(1), seed).map_err(Error::from)?;
            let models = crate::gradcheck::model_suite(seed)?;
            let rows = ops
                .iter()
                .map(|r| (r.op.to_string(), r.check.clone()))
                .chain(models);
            let mut worst = 0.0f64;
            let mut failed = Vec::new();
            println!("{:<20} {:>8} {:>12}", "check", "coords", "max_rel_err");
            for (name, check) in rows {
                println!("{name:<20} {:>8} {:>12.3e}", check.checked, check.max_rel_err);
                worst = worst.max(check.max_rel_err);
                if !check.passes() {
                    failed.push(name);
                }
            }
            println!("worst {worst:.3e}, tolerance {:.0e}", relchain_tensor::gradcheck::TOLERANCE);
            if !failed.is_empty() {
                return Err(Failure::Runtime(Error::Config(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                ))));
            }
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn train_config(path: &Path, seed: Option<u64>) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = resolve_seed(seed)? {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn default_dataset(seed: u64) -> Result<DatasetSplit> {
    let cfg = DatasetConfig {
        seed,
        ..DatasetConfig::default()
    };
    generate_dataset(&cfg, &KnowledgeBase::default())
}

/// The `--data` directory, else the config's dataset, else the default
/// dataset generated from the config seed.
fn dataset_for(cfg: &TrainConfig, flag: Option<&Path>) -> Result<DatasetSplit> {
    match flag.or(cfg.dataset.as_deref()) {
        Some(dir) => load_dataset(dir),
        None => default_dataset(cfg.seed),
    }
}
