use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::kb::{KnowledgeBase, Relation};
use crate::story::{generate_instance, DatasetConfig, Fact, Noise, StoryInstance};

fn rel(s: &str) -> Relation {
    s.parse().unwrap()
}

fn father_chain() -> StoryInstance {
    StoryInstance {
        facts: vec![(0, rel("father"), 1).into(), (1, rel("father"), 2).into()],
        query: (0, 2),
        target: rel("grandfather"),
        k: 2,
        noise: Noise::Clean,
        seed: 0,
    }
}

fn model(variant: SeqVariant, hidden: usize, seed: u64) -> SeqModel {
    SeqModel::new(SeqConfig::new(variant, hidden), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn noisy(k: usize, seed: u64) -> StoryInstance {
    let cfg = DatasetConfig {
        noise: Noise::Irrelevant,
        ..DatasetConfig::default()
    };
    generate_instance(&cfg, &KnowledgeBase::default(), k, seed).unwrap()
}

fn logits(m: &SeqModel, t: &TokenBatch) -> Tensor {
    let mut tape = Tape::new();
    let out = m.forward_tokens(&mut tape, t).unwrap();
    tape.value(out).clone()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn linearize_father_chain() {
    let (facts, query) = linearize(&father_chain()).unwrap();
    let (e, f) = (entity_token, relation_token(rel("father")));
    assert_eq!(facts, vec![e(0), f, e(1), e(1), f, e(2)]);
    assert_eq!(query, [e(0), e(2)]);
}

#[test]
fn linearize_ignores_original_entity_names() {
    let renamed = StoryInstance {
        facts: vec![(17, rel("father"), 4).into(), (4, rel("father"), 9).into()],
        query: (17, 9),
        ..father_chain()
    };
    assert_eq!(linearize(&renamed.canonicalize()).unwrap(), linearize(&father_chain()).unwrap());
}

#[test]
fn clean_k10_has_thirty_tokens() {
    let inst = generate_instance(&DatasetConfig::default(), &KnowledgeBase::default(), 10, 3).unwrap();
    assert_eq!(linearize(&inst).unwrap().0.len(), 30);
}

#[test]
fn out_of_range_slot_is_an_error() {
    let mut inst = father_chain();
    inst.facts.push(Fact {
        src: 2,
        rel: rel("son"),
        dst: 40,
    });
    assert!(linearize(&inst).is_err());
}

#[test]
fn encoder_and_classifier_widths() {
    let inst = noisy(3, 1);
    let batch = Batch::new(vec![&inst, &inst, &inst]);
    let tokens = TokenBatch::from_batch(&batch).unwrap();
    for hidden in [4, 10, 100] {
        for v in SeqVariant::ALL {
            let m = model(v, hidden, 0);
            let width = match v {
                SeqVariant::BiRnn | SeqVariant::BiLstm | SeqVariant::BiGru => 2 * hidden,
                _ => hidden,
            };
            assert_eq!(m.config().output_width(), width, "{v}");
            let mut tape = Tape::new();
            let enc = m.encode_seq(&mut tape, &tokens.fact_tokens, &tokens.lengths).unwrap();
            assert_eq!(tape.shape(enc), &[3, width], "{v} {hidden}");
            let w = m.params().value(m.classifier_weight());
            assert_eq!(w.shape(), &[2 * width, NUM_CLASSES], "{v} {hidden}");
            assert_eq!(logits(&m, &tokens).shape(), &[3, NUM_CLASSES]);
        }
    }
}

#[test]
fn lstm_hidden_100_concatenates_to_200() {
    assert_eq!(2 * SeqConfig::new(SeqVariant::Lstm, 100).output_width(), 200);
    assert_eq!(2 * SeqConfig::new(SeqVariant::BiLstm, 100).output_width(), 400);
}

#[test]
fn trailing_padding_is_ignored() {
    let a = noisy(3, 2);
    let b = noisy(4, 3);
    let tokens = TokenBatch::from_batch(&Batch::new(vec![&a, &b])).unwrap();
    let padded = tokens.pad_to(tokens.max_len + 7);
    for v in SeqVariant::ALL {
        let m = model(v, 6, 1);
        let d = max_diff(&logits(&m, &tokens), &logits(&m, &padded));
        assert!(d <= 1e-12, "{v}: {d}");
    }
}

#[test]
fn zero_classifier_gives_uniform_distribution() {
    let mut m = model(SeqVariant::Gru, 8, 0);
    let id = m.classifier_weight();
    *m.params_mut().value_mut(id) = Tensor::zeros(&[16, NUM_CLASSES]);
    let inst = father_chain();
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, &Batch::new(vec![&inst])).unwrap();
    let p = tape.softmax(out).unwrap();
    for &x in tape.value(p).data() {
        assert!((x - 1.0 / NUM_CLASSES as f64).abs() < 1e-15);
    }
}

#[test]
fn recurrent_encoders_depend_on_order() {
    let inst = noisy(4, 5);
    let mut shuffled = inst.clone();
    shuffled.facts.reverse();
    let m = model(SeqVariant::Gru, 8, 2);
    let a = logits(&m, &TokenBatch::from_batch(&Batch::new(vec![&inst])).unwrap());
    let b = logits(&m, &TokenBatch::from_batch(&Batch::new(vec![&shuffled])).unwrap());
    assert!(max_diff(&a, &b) > 1e-6);
}

#[test]
fn long_sequences_rejected_by_attention() {
    let m = model(SeqVariant::Mha, 4, 0);
    let mut tape = Tape::new();
    let tokens = vec![1; MAX_POSITIONS + 1];
    assert!(m.encode_seq(&mut tape, &tokens, &[MAX_POSITIONS + 1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bag_of_embeddings_ignores_fact_order(seed in any::<u64>(), perm in any::<u64>(), k in 2usize..7) {
        let inst = noisy(k, seed);
        let mut moved = inst.clone();
        moved.facts.shuffle(&mut ChaCha8Rng::seed_from_u64(perm));
        let m = model(SeqVariant::Boe, 6, seed);
        let a = logits(&m, &TokenBatch::from_batch(&Batch::new(vec![&inst])).unwrap());
        let b = logits(&m, &TokenBatch::from_batch(&Batch::new(vec![&moved])).unwrap());
        prop_assert!(max_diff(&a, &b) <= 1e-12);
    }
}
