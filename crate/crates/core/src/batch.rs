//! Minibatches of story instances with their entity-slot assignment.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kb::NUM_BASE;
use crate::story::StoryInstance;

/// Entity slots shared by every instance; ids must stay below this.
pub const NUM_SLOTS: usize = 30;

/// Number of output classes (base relations).
pub const NUM_CLASSES: usize = NUM_BASE;

/// Instances plus, per instance, the slot each entity id is mapped to.
///
/// Models never see raw ids: entity `i` of instance `b` is embedded through
/// slot `slots[b][i]`.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub items: Vec<&'a StoryInstance>,
    pub slots: Vec<Vec<usize>>,
}

impl<'a> Batch<'a> {
    /// Canonical slots: entity `i` uses slot `i`.
    pub fn new(items: Vec<&'a StoryInstance>) -> Batch<'a> {
        let slots = items.iter().map(|i| (0..i.num_entities()).collect()).collect();
        Batch { items, slots }
    }

    /// Each instance gets an independent random injection of its entities
    /// into the slot table.
    pub fn shuffled(items: Vec<&'a StoryInstance>, rng: &mut impl Rng) -> Batch<'a> {
        let mut pool: Vec<usize> = (0..NUM_SLOTS).collect();
        let slots = items
            .iter()
            .map(|i| {
                pool.shuffle(rng);
                pool[..i.num_entities().min(NUM_SLOTS)].to_vec()
            })
            .collect();
        Batch { items, slots }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn slot(&self, b: usize, entity: usize) -> Result<usize> {
        self.slots[b]
            .get(entity)
            .copied()
            .filter(|&s| s < NUM_SLOTS)
            .ok_or_else(|| {
                Error::Batch(format!(
                    "entity {entity} of instance {b} has no slot below {NUM_SLOTS}"
                ))
            })
    }

    /// Class index of every target.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.items
            .iter()
            .map(|i| {
                if i.target.is_inverse() {
                    Err(Error::Batch(format!("target {} is not a base relation", i.target)))
                } else {
                    Ok(i.target.index())
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::KnowledgeBase;
    use crate::story::{generate_dataset, DatasetConfig};
    use rand::SeedableRng;

    #[test]
    fn shuffled_slots_are_injective() {
        let cfg = DatasetConfig {
            train_size: 20,
            valid_size: 1,
            test_per_k: 1,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg, &KnowledgeBase::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let b = Batch::shuffled(data.train.iter().collect(), &mut rng);
        for (inst, s) in b.items.iter().zip(&b.slots) {
            let mut sorted = s.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), inst.num_entities());
            assert!(s.iter().all(|&x| x < NUM_SLOTS));
        }
    }
}
