//! Finite-difference checks of every model variant end to end.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relchain_tensor::gradcheck::{check_params, GradCheck};
use relchain_tensor::TensorError;

use crate::batch::Batch;
use crate::egnn::{EgnnConfig, EgnnVariant};
use crate::error::Result;
use crate::kb::KnowledgeBase;
use crate::lgraph::{SeqConfig, SeqVariant};
use crate::story::{generate_instance, DatasetConfig, Noise, StoryInstance};
use crate::train::{Model, ModelConfig};

/// Entries perturbed per parameter tensor.
pub const COORDS_PER_PARAM: usize = 12;

/// Small configs of all fifteen variants.
pub fn tiny_configs() -> Vec<ModelConfig> {
    let graph = EgnnVariant::ALL.into_iter().map(|variant| {
        ModelConfig::Graph(EgnnConfig {
            variant,
            emb_dim: 4,
            layers: 2,
            heads: if variant == EgnnVariant::Gat { 2 } else { 1 },
            aggregation: None,
        })
    });
    let seq = SeqVariant::ALL.into_iter().map(|variant| {
        ModelConfig::Seq(SeqConfig {
            variant,
            hidden: 4,
            emb_dim: Some(4),
        })
    });
    graph.chain(seq).collect()
}

/// A clean k=2 instance plus a noisy k=3 one so padding paths are exercised.
pub fn fixture(seed: u64) -> Result<Vec<StoryInstance>> {
    let kb = KnowledgeBase::default();
    let clean = DatasetConfig::default();
    let noisy = DatasetConfig {
        noise: Noise::Supporting,
        ..DatasetConfig::default()
    };
    Ok(vec![
        generate_instance(&clean, &kb, 2, seed)?,
        generate_instance(&noisy, &kb, 3, seed ^ 1)?,
    ])
}

/// Cross-entropy gradient check of one model on `items`.
pub fn check_model(config: &ModelConfig, items: &[StoryInstance], seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(config, &mut rng)?;
    let batch = Batch::new(items.iter().collect());
    let labels = batch.labels()?;
    let report = check_params(
        model.params(),
        |tape, p| {
            let logits = model
                .forward_with(tape, p, &batch)
                .map_err(|e| TensorError::InvalidArgument {
                    op: "model",
                    msg: e.to_string(),
                })?;
            tape.cross_entropy(logits, &labels)
        },
        Some(COORDS_PER_PARAM),
        seed,
    )?;
    Ok(report)
}

/// `(model name, check)` for every variant.
pub fn model_suite(seed: u64) -> Result<Vec<(String, GradCheck)>> {
    let items = fixture(seed)?;
    tiny_configs()
        .iter()
        .map(|c| Ok((c.name(), check_model(c, &items, seed)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_variant_passes() {
        for (name, check) in model_suite(7).unwrap() {
            assert!(check.passes(), "{name}: {check:?}");
            assert!(check.checked > 0, "{name}");
        }
    }
}
