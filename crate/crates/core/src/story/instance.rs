use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::FamilyGraph;
use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, Relation};

/// Node expansions allowed per call to [`sample_chain`].
const SEARCH_BUDGET: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    Clean,
    Supporting,
    Irrelevant,
    Disconnected,
}

impl Noise {
    pub const ALL: [Noise; 4] = [
        Noise::Clean,
        Noise::Supporting,
        Noise::Irrelevant,
        Noise::Disconnected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Noise::Clean => "clean",
            Noise::Supporting => "supporting",
            Noise::Irrelevant => "irrelevant",
            Noise::Disconnected => "disconnected",
        }
    }
}

impl fmt::Display for Noise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Noise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Noise> {
        Noise::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::UnknownNoise(s.to_string()))
    }
}

/// `dst` is src's `rel`. Serialised as `[src, "rel", dst]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, Relation, usize)", into = "(usize, Relation, usize)")]
pub struct Fact {
    pub src: usize,
    pub rel: Relation,
    pub dst: usize,
}

impl From<(usize, Relation, usize)> for Fact {
    fn from((src, rel, dst): (usize, Relation, usize)) -> Self {
        Fact { src, rel, dst }
    }
}

impl From<Fact> for (usize, Relation, usize) {
    fn from(f: Fact) -> Self {
        (f.src, f.rel, f.dst)
    }
}

/// One example. The first `k` facts are the query path in order; any noise
/// facts follow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryInstance {
    pub facts: Vec<Fact>,
    pub query: (usize, usize),
    pub target: Relation,
    pub k: usize,
    pub noise: Noise,
    pub seed: u64,
}

impl StoryInstance {
    pub fn path(&self) -> &[Fact] {
        &self.facts[..self.k.min(self.facts.len())]
    }

    pub fn noise_facts(&self) -> &[Fact] {
        &self.facts[self.k.min(self.facts.len())..]
    }

    pub fn num_entities(&self) -> usize {
        self.facts
            .iter()
            .map(|f| f.src.max(f.dst) + 1)
            .max()
            .unwrap_or(0)
    }

    /// Relabels every entity id by order of first appearance in `facts`.
    pub fn canonicalize(mut self) -> StoryInstance {
        let mut map: Vec<(usize, usize)> = Vec::new();
        let mut id = |old: usize| match map.iter().find(|(o, _)| *o == old) {
            Some(&(_, new)) => new,
            None => {
                map.push((old, map.len()));
                map.len() - 1
            }
        };
        for f in &mut self.facts {
            f.src = id(f.src);
            f.dst = id(f.dst);
        }
        self.query = (id(self.query.0), id(self.query.1));
        self
    }

    /// Checks every structural invariant an emitted instance must satisfy.
    pub fn check(&self, kb: &KnowledgeBase) -> std::result::Result<(), String> {
        let path = self.path();
        if path.len() != self.k || self.k == 0 {
            return Err(format!("need {} path facts, found {}", self.k, path.len()));
        }
        let mut nodes = vec![self.query.0];
        for f in path {
            if f.src != *nodes.last().unwrap() {
                return Err("path facts are not chained head to tail".into());
            }
            nodes.push(f.dst);
        }
        if *nodes.last().unwrap() != self.query.1 {
            return Err("path does not end at the query tail".into());
        }
        let on_path: BTreeSet<usize> = nodes.iter().copied().collect();
        if on_path.len() != nodes.len() {
            return Err("path revisits an entity".into());
        }
        let chain: Vec<Relation> = path.iter().map(|f| f.rel).collect();
        match kb.resolve_chain(&chain) {
            Ok(Some(t)) if t == self.target => {}
            other => return Err(format!("chain resolves to {other:?}, target {}", self.target)),
        }
        if self.clone().canonicalize() != *self {
            return Err("entity ids are not canonical".into());
        }
        let noise = self.noise_facts();
        let touches = |f: &Fact| on_path.contains(&f.src) as usize + on_path.contains(&f.dst) as usize;
        let ok = match self.noise {
            Noise::Clean => noise.is_empty(),
            Noise::Supporting => noise.iter().all(|f| touches(f) == 2),
            Noise::Irrelevant => noise.iter().all(|f| touches(f) == 1),
            Noise::Disconnected => noise.iter().all(|f| touches(f) == 0),
        };
        if !ok {
            return Err(format!("noise facts violate the {} regime", self.noise));
        }
        Ok(())
    }
}

/// A resolvable simple path through a [`FamilyGraph`], in graph ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chain {
    pub nodes: Vec<usize>,
    pub relations: Vec<Relation>,
    pub target: Relation,
    pub seed: u64,
}

impl Chain {
    pub fn k(&self) -> usize {
        self.relations.len()
    }

    fn path_facts(&self) -> Vec<Fact> {
        self.nodes
            .windows(2)
            .zip(&self.relations)
            .map(|(w, &rel)| Fact {
                src: w[0],
                rel,
                dst: w[1],
            })
            .collect()
    }

    fn story(&self, facts: Vec<Fact>, noise: Noise) -> StoryInstance {
        StoryInstance {
            facts,
            query: (self.nodes[0], *self.nodes.last().unwrap()),
            target: self.target,
            k: self.k(),
            noise,
            seed: self.seed,
        }
        .canonicalize()
    }

    /// The noise-free instance.
    pub fn to_instance(&self) -> StoryInstance {
        self.story(self.path_facts(), Noise::Clean)
    }
}

/// Draws a simple path of `k` parent/child/sibling/spouse steps whose
/// every prefix resolves in `kb`.
pub fn sample_chain(graph: &FamilyGraph, kb: &KnowledgeBase, k: usize, seed: u64) -> Result<Chain> {
    if !(1..graph.len()).contains(&k) {
        return Err(Error::Story(format!(
            "no simple {k}-step path fits in a family of {}",
            graph.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<usize> = (0..graph.len()).collect();
    starts.shuffle(&mut rng);
    let mut search = Search {
        graph,
        kb,
        k,
        budget: SEARCH_BUDGET,
        nodes: Vec::with_capacity(k + 1),
        relations: Vec::with_capacity(k),
    };
    for start in starts {
        search.nodes.clear();
        search.relations.clear();
        search.nodes.push(start);
        if let Some(target) = search.extend(None, &mut rng) {
            return Ok(Chain {
                nodes: search.nodes,
                relations: search.relations,
                target,
                seed,
            });
        }
        if search.budget == 0 {
            break;
        }
    }
    Err(Error::Story(format!("no resolvable {k}-step path found")))
}

struct Search<'a> {
    graph: &'a FamilyGraph,
    kb: &'a KnowledgeBase,
    k: usize,
    budget: usize,
    nodes: Vec<usize>,
    relations: Vec<Relation>,
}

impl Search<'_> {
    fn extend(&mut self, acc: Option<Relation>, rng: &mut impl Rng) -> Option<Relation> {
        if self.relations.len() == self.k {
            return acc;
        }
        if self.budget == 0 {
            return None;
        }
        self.budget -= 1;
        let at = *self.nodes.last().unwrap();
        let mut next: Vec<_> = self
            .graph
            .basic_neighbours(at)
            .filter(|(y, _)| !self.nodes.contains(y))
            .collect();
        next.shuffle(rng);
        for (y, kin) in next {
            let r = Relation::base(kin);
            let Some(folded) = acc.map_or(Some(r), |a| self.kb.compose(a, r)) else {
                continue;
            };
            self.nodes.push(y);
            self.relations.push(r);
            if let Some(t) = self.extend(Some(folded), rng) {
                return Some(t);
            }
            self.nodes.pop();
            self.relations.pop();
        }
        None
    }
}

/// Default noise-fact count for a chain of length `k`: `ceil(k / 2)`.
pub fn default_noise_facts(k: usize) -> usize {
    k.div_ceil(2)
}

/// Adds `count` noise facts of the given regime drawn from `graph`, then
/// re-canonicalises. Fails for [`Noise::Clean`] and when the family offers
/// too few candidates.
pub fn add_noise(
    chain: &Chain,
    graph: &FamilyGraph,
    regime: Noise,
    count: usize,
    seed: u64,
) -> Result<StoryInstance> {
    if regime == Noise::Clean {
        return Err(Error::UnknownNoise(regime.to_string()));
    }
    let on_path: BTreeSet<usize> = chain.nodes.iter().copied().collect();
    let (head, tail) = (chain.nodes[0], *chain.nodes.last().unwrap());
    let path = chain.path_facts();
    let mut candidates: Vec<Fact> = Vec::new();
    for (src, rel, dst) in graph.edges() {
        let fact = Fact { src, rel, dst };
        let touching = on_path.contains(&src) as usize + on_path.contains(&dst) as usize;
        let keep = match regime {
            Noise::Clean => false,
            Noise::Supporting => {
                let query_pair = (src, dst) == (head, tail) || (dst, src) == (head, tail);
                touching == 2 && !query_pair && !path.iter().any(|f| (f.src, f.dst) == (src, dst))
            }
            Noise::Irrelevant => touching == 1 && rel.kinship().is_basic(),
            Noise::Disconnected => touching == 0 && rel.kinship().is_basic(),
        };
        if keep {
            candidates.push(fact);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let mut pairs = BTreeSet::new();
    let mut facts = path;
    let mut added = 0;
    for f in candidates {
        if added == count {
            break;
        }
        if pairs.insert((f.src.min(f.dst), f.src.max(f.dst))) {
            facts.push(f);
            added += 1;
        }
    }
    if added < count {
        return Err(Error::Story(format!(
            "only {added} of {count} {regime} noise facts available"
        )));
    }
    Ok(chain.story(facts, regime))
}
