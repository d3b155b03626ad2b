use crate::batch::{Batch, NUM_SLOTS};
use crate::error::{Error, Result};
use crate::kb::{Relation, NUM_RELATIONS};
use crate::story::StoryInstance;

pub const PAD: usize = 0;
/// Padding, one token per entity slot, one per relation.
pub const VOCAB_SIZE: usize = 1 + NUM_SLOTS + NUM_RELATIONS;

pub fn entity_token(slot: usize) -> usize {
    1 + slot
}

pub fn relation_token(r: Relation) -> usize {
    1 + NUM_SLOTS + r.index()
}

/// SPO tokens of every fact in stored order (path first, then noise) and
/// the SO query pair, with entity `i` in slot `i`.
pub fn linearize(inst: &StoryInstance) -> Result<(Vec<usize>, [usize; 2])> {
    let slots: Vec<usize> = (0..inst.num_entities()).collect();
    linearize_with(inst, &slots)
}

fn linearize_with(inst: &StoryInstance, slots: &[usize]) -> Result<(Vec<usize>, [usize; 2])> {
    let ent = |e: usize| -> Result<usize> {
        match slots.get(e) {
            Some(&s) if s < NUM_SLOTS => Ok(entity_token(s)),
            _ => Err(Error::Batch(format!(
                "entity {e} has no slot below {NUM_SLOTS}"
            ))),
        }
    };
    let mut facts = Vec::with_capacity(3 * inst.facts.len());
    for f in &inst.facts {
        facts.extend([ent(f.src)?, relation_token(f.rel), ent(f.dst)?]);
    }
    Ok((facts, [ent(inst.query.0)?, ent(inst.query.1)?]))
}

/// Padded token matrices for a minibatch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch_size: usize,
    /// Padded fact length `L`.
    pub max_len: usize,
    /// `[B, L]`, row-major, padded with [`PAD`].
    pub fact_tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    /// `[B, 2]`.
    pub query_tokens: Vec<usize>,
}

impl TokenBatch {
    pub fn from_batch(batch: &Batch) -> Result<TokenBatch> {
        let mut seqs = Vec::with_capacity(batch.len());
        let mut query_tokens = Vec::with_capacity(2 * batch.len());
        for (inst, slots) in batch.items.iter().zip(&batch.slots) {
            let (f, q) = linearize_with(inst, slots)?;
            seqs.push(f);
            query_tokens.extend(q);
        }
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        let mut fact_tokens = vec![PAD; batch.len() * max_len];
        for (b, s) in seqs.iter().enumerate() {
            fact_tokens[b * max_len..b * max_len + s.len()].copy_from_slice(s);
        }
        Ok(TokenBatch {
            batch_size: batch.len(),
            max_len,
            fact_tokens,
            lengths,
            query_tokens,
        })
    }

    /// Extends every row with padding up to `len`.
    pub fn pad_to(&self, len: usize) -> TokenBatch {
        let len = len.max(self.max_len);
        let mut fact_tokens = vec![PAD; self.batch_size * len];
        for b in 0..self.batch_size {
            let src = &self.fact_tokens[b * self.max_len..(b + 1) * self.max_len];
            fact_tokens[b * len..b * len + self.max_len].copy_from_slice(src);
        }
        TokenBatch {
            max_len: len,
            fact_tokens,
            ..self.clone()
        }
    }
}
