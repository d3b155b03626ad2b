use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::{sample_family_graph, GraphParams};
use super::instance::{add_noise, default_noise_facts, sample_chain, Noise, StoryInstance};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_ks: Vec<usize>,
    pub test_ks: Vec<usize>,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_per_k: usize,
    pub noise: Noise,
    /// Noise facts per instance; `ceil(k / 2)` when absent.
    pub noise_facts: Option<usize>,
    pub seed: u64,
    /// Families tried per instance before giving up.
    pub max_attempts: usize,
    pub graph: GraphParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_ks: vec![2, 3, 4],
            test_ks: (2..=10).collect(),
            train_size: 5000,
            valid_size: 500,
            test_per_k: 200,
            noise: Noise::Clean,
            noise_facts: None,
            seed: 0,
            max_attempts: 200,
            graph: GraphParams::default(),
        }
    }
}

impl DatasetConfig {
    /// Train on k in {2, 3, 4}.
    pub fn generalisation() -> DatasetConfig {
        DatasetConfig::default()
    }

    /// Train on k in {2, 3}.
    pub fn short() -> DatasetConfig {
        DatasetConfig {
            train_ks: vec![2, 3],
            ..DatasetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.train_ks.is_empty() || self.test_ks.is_empty() {
            return bad("train_ks and test_ks must be non-empty".into());
        }
        for &k in self.train_ks.iter().chain(&self.test_ks) {
            if !(2..=10).contains(&k) {
                return bad(format!("clause length {k} outside 2..=10"));
            }
            if k + 1 > self.graph.max_entities {
                return bad(format!(
                    "clause length {k} needs {} people but max_entities is {}",
                    k + 1,
                    self.graph.max_entities
                ));
            }
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }

    fn noise_count(&self, k: usize) -> usize {
        match self.noise {
            Noise::Clean => 0,
            _ => self.noise_facts.unwrap_or_else(|| default_noise_facts(k)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 3,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of instance `index` of `split` under `master`; independent of the
/// order instances are generated in.
pub fn instance_seed(master: u64, split: Split, index: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ split.tag()) ^ index)
}

/// Generates one instance of clause length `k` from its own seed.
pub fn generate_instance(
    cfg: &DatasetConfig,
    kb: &KnowledgeBase,
    k: usize,
    seed: u64,
) -> Result<StoryInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let graph = sample_family_graph(rng.gen(), &cfg.graph)?;
        let Ok(mut chain) = sample_chain(&graph, kb, k, rng.gen()) else {
            continue;
        };
        chain.seed = seed;
        let noise_seed = rng.gen();
        let inst = match cfg.noise {
            Noise::Clean => Ok(chain.to_instance()),
            regime => add_noise(&chain, &graph, regime, cfg.noise_count(k), noise_seed),
        };
        if let Ok(inst) = inst {
            return Ok(inst);
        }
    }
    Err(Error::Story(format!(
        "no {k}-step {} instance after {} families (seed {seed})",
        cfg.noise, cfg.max_attempts
    )))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<StoryInstance>,
    pub valid: Vec<StoryInstance>,
    pub test: BTreeMap<usize, Vec<StoryInstance>>,
}

impl DatasetSplit {
    pub fn test_instances(&self) -> impl Iterator<Item = &StoryInstance> {
        self.test.values().flatten()
    }
}

fn generate_split(
    cfg: &DatasetConfig,
    kb: &KnowledgeBase,
    split: Split,
    ks: &[usize],
    count: usize,
) -> Result<Vec<StoryInstance>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let k = ks[i % ks.len()];
            generate_instance(cfg, kb, k, instance_seed(cfg.seed, split, i as u64))
        })
        .collect()
}

/// Generates all three splits. Work runs on the current rayon pool; output
/// does not depend on its size.
pub fn generate_dataset(cfg: &DatasetConfig, kb: &KnowledgeBase) -> Result<DatasetSplit> {
    cfg.validate()?;
    let train = generate_split(cfg, kb, Split::Train, &cfg.train_ks, cfg.train_size)?;
    let valid = generate_split(cfg, kb, Split::Valid, &cfg.train_ks, cfg.valid_size)?;
    let all = generate_split(
        cfg,
        kb,
        Split::Test,
        &cfg.test_ks,
        cfg.test_ks.len() * cfg.test_per_k,
    )?;
    let mut test: BTreeMap<usize, Vec<StoryInstance>> = BTreeMap::new();
    for inst in all {
        test.entry(inst.k).or_default().push(inst);
    }
    Ok(DatasetSplit { train, valid, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub seed: u64,
    pub train: usize,
    pub valid: usize,
    pub test: BTreeMap<usize, usize>,
}

fn write_jsonl<'a>(path: &Path, items: impl Iterator<Item = &'a StoryInstance>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for inst in items {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<Vec<StoryInstance>> {
    let file = fs::File::open(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = serde_json::from_str(&line).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", i + 1),
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn save_dataset(dir: impl AsRef<Path>, data: &DatasetSplit, cfg: &DatasetConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(TRAIN_FILE), data.train.iter())?;
    write_jsonl(&dir.join(VALID_FILE), data.valid.iter())?;
    write_jsonl(&dir.join(TEST_FILE), data.test_instances())?;
    let manifest = Manifest {
        config: cfg.clone(),
        seed: cfg.seed,
        train: data.train.len(),
        valid: data.valid.len(),
        test: data.test.iter().map(|(k, v)| (*k, v.len())).collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    let mut test: BTreeMap<usize, Vec<StoryInstance>> = BTreeMap::new();
    for inst in read_jsonl(&dir.join(TEST_FILE))? {
        test.entry(inst.k).or_default().push(inst);
    }
    Ok(DatasetSplit {
        train: read_jsonl(&dir.join(TRAIN_FILE))?,
        valid: read_jsonl(&dir.join(VALID_FILE))?,
        test,
    })
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Data {
        path,
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: Noise) -> DatasetConfig {
        DatasetConfig {
            train_size: 30,
            valid_size: 6,
            test_per_k: 4,
            noise,
            seed: 11,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn generalisation_regime_ks() {
        let cfg = DatasetConfig::generalisation();
        assert_eq!(cfg.train_ks, vec![2, 3, 4]);
        assert_eq!(cfg.test_ks, (2..=10).collect::<Vec<_>>());
        assert_eq!(DatasetConfig::short().train_ks, vec![2, 3]);
    }

    #[test]
    fn every_regime_generates_valid_instances() {
        let kb = KnowledgeBase::default();
        for noise in Noise::ALL {
            let data = generate_dataset(&small(noise), &kb).unwrap();
            assert_eq!(data.train.len(), 30);
            assert_eq!(data.test.len(), 9);
            for inst in data.train.iter().chain(&data.valid).chain(data.test_instances()) {
                inst.check(&kb).unwrap();
                assert_eq!(inst.noise, noise);
            }
            assert!(data.train.iter().all(|i| (2..=4).contains(&i.k)));
        }
    }

    #[test]
    fn pool_size_does_not_change_output() {
        let kb = KnowledgeBase::default();
        let cfg = small(Noise::Irrelevant);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| generate_dataset(&cfg, &kb)).unwrap();
        let b = three.install(|| generate_dataset(&cfg, &kb)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let kb = KnowledgeBase::default();
        let cfg = small(Noise::Clean);
        let data = generate_dataset(&cfg, &kb).unwrap();
        save_dataset(dir.path(), &data, &cfg).unwrap();
        let path = dir.path().join(VALID_FILE);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{\"facts\": oops}\n");
        fs::write(&path, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 7"), "{err}");
    }
}
