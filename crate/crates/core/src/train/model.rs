use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relchain_tensor::{checkpoint, ParamStore, Tape, Var};

use super::config::ModelConfig;
use crate::batch::Batch;
use crate::egnn::EgnnModel;
use crate::error::Result;
use crate::lgraph::SeqModel;

/// Either model family behind one interface.
#[derive(Clone, Debug)]
pub enum Model {
    Graph(EgnnModel),
    Seq(SeqModel),
}

impl Model {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<Model> {
        Ok(match config {
            ModelConfig::Graph(c) => Model::Graph(EgnnModel::new(c.clone(), rng)?),
            ModelConfig::Seq(c) => Model::Seq(SeqModel::new(c.clone(), rng)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Graph(m) => ModelConfig::Graph(m.config().clone()),
            Model::Seq(m) => ModelConfig::Seq(m.config().clone()),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Graph(m) => m.params(),
            Model::Seq(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Graph(m) => m.params_mut(),
            Model::Seq(m) => m.params_mut(),
        }
    }

    /// `[B, NUM_CLASSES]` logits.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        match self {
            Model::Graph(m) => m.forward(tape, batch),
            Model::Seq(m) => m.forward(tape, batch),
        }
    }

    /// Same as [`forward`](Self::forward) but reading parameters from `p`.
    pub fn forward_with(&self, tape: &mut Tape, p: &ParamStore, batch: &Batch) -> Result<Var> {
        match self {
            Model::Graph(m) => m.forward_with(tape, p, &crate::egnn::GraphBatch::from_batch(batch)?),
            Model::Seq(m) => m.forward_with(tape, p, &crate::lgraph::TokenBatch::from_batch(batch)?),
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(checkpoint::save(self.params(), path)?)
    }

    /// Builds a model of the given shape and overwrites its parameters from
    /// a checkpoint.
    pub fn load(config: &ModelConfig, path: impl AsRef<std::path::Path>) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(config, &mut rng)?;
        checkpoint::load_into(model.params_mut(), path)?;
        Ok(model)
    }
}
