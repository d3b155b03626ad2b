use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{FamilyTree, Gender, Kinship, Relation};

/// Knobs for [`sample_family_graph`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphParams {
    /// Hard cap on people in one family.
    pub max_entities: usize,
    /// Children per married couple, inclusive bounds.
    pub min_children: usize,
    pub max_children: usize,
    /// Generations below the founding couple that may have children.
    pub max_generations: usize,
    /// Chance that a child born into the family marries.
    pub marriage_prob: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            max_entities: 30,
            min_children: 3,
            max_children: 5,
            max_generations: 3,
            marriage_prob: 0.8,
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("graph params: {m}")));
        if self.max_entities < 3 {
            return bad("max_entities must be at least 3");
        }
        if self.max_children == 0 || self.min_children > self.max_children {
            return bad("need 0 <= min_children <= max_children and max_children >= 1");
        }
        if self.max_generations == 0 {
            return bad("max_generations must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.marriage_prob) {
            return bad("marriage_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

/// A sampled family together with every kinship edge between its members.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FamilyGraph {
    tree: FamilyTree,
    kinship: Vec<Vec<Option<Kinship>>>,
}

impl FamilyGraph {
    pub fn from_tree(tree: FamilyTree) -> FamilyGraph {
        let kinship = tree.kinship_matrix();
        FamilyGraph { tree, kinship }
    }

    pub fn tree(&self) -> &FamilyTree {
        &self.tree
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn entities(&self) -> impl Iterator<Item = (usize, Gender)> + '_ {
        (0..self.len()).map(|i| (i, self.tree.gender(i)))
    }

    /// Label of `y` relative to `x` ("y is x's ...").
    pub fn kinship(&self, x: usize, y: usize) -> Option<Kinship> {
        self.kinship[x][y]
    }

    /// Every `(x, r, y)` with `r` a base relation.
    pub fn edges(&self) -> impl Iterator<Item = (usize, Relation, usize)> + '_ {
        (0..self.len()).flat_map(move |x| {
            (0..self.len())
                .filter_map(move |y| self.kinship[x][y].map(|k| (x, Relation::base(k), y)))
        })
    }

    /// Neighbours of `x` through a parent, child, sibling or spouse label.
    pub fn basic_neighbours(&self, x: usize) -> impl Iterator<Item = (usize, Kinship)> + '_ {
        (0..self.len()).filter_map(move |y| {
            self.kinship[x][y]
                .filter(|k| k.is_basic())
                .map(|k| (y, k))
        })
    }
}

/// Grows a random family breadth-first from one founding couple.
pub fn sample_family_graph(seed: u64, params: &GraphParams) -> Result<FamilyGraph> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(FamilyGraph::from_tree(grow(&mut rng, params)))
}

fn random_gender(rng: &mut impl Rng) -> Gender {
    if rng.gen_bool(0.5) {
        Gender::Male
    } else {
        Gender::Female
    }
}

pub(crate) fn grow(rng: &mut impl Rng, params: &GraphParams) -> FamilyTree {
    let mut tree = FamilyTree::new();
    let founder = tree.add_person(Gender::Male);
    let partner = tree.add_person(Gender::Female);
    tree.marry(founder, partner);

    let mut couples = std::collections::VecDeque::from([(founder, 0usize)]);
    while let Some((parent, generation)) = couples.pop_front() {
        let wanted = rng.gen_range(params.min_children..=params.max_children);
        let room = params.max_entities - tree.len();
        let mut born = Vec::new();
        for _ in 0..wanted.min(room) {
            let g = random_gender(rng);
            born.push(tree.add_child(parent, g));
        }
        if generation + 1 >= params.max_generations {
            continue;
        }
        for child in born {
            if tree.len() < params.max_entities && rng.gen_bool(params.marriage_prob) {
                let spouse = tree.add_person(tree.gender(child).swap());
                tree.marry(child, spouse);
                couples.push_back((child, generation + 1));
            }
        }
    }
    tree
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_graph() {
        let p = GraphParams::default();
        assert_eq!(
            sample_family_graph(7, &p).unwrap(),
            sample_family_graph(7, &p).unwrap()
        );
    }

    #[test]
    fn entity_cap_is_respected() {
        let p = GraphParams {
            max_entities: 12,
            ..GraphParams::default()
        };
        for seed in 0..200 {
            assert!(sample_family_graph(seed, &p).unwrap().len() <= 12);
        }
    }

    #[test]
    fn sampled_graphs_have_one_label_per_pair() {
        let p = GraphParams::default();
        for seed in 0..50 {
            let g = sample_family_graph(seed, &p).unwrap();
            for x in 0..g.len() {
                for y in 0..g.len() {
                    assert!(g.tree().labels(x, y).len() <= 1);
                }
            }
        }
    }

    #[test]
    fn edge_gender_matches_object() {
        let g = sample_family_graph(3, &GraphParams::default()).unwrap();
        for (_, r, y) in g.edges() {
            assert_eq!(r.gender(), g.tree().gender(y));
        }
    }

    #[test]
    fn bad_params_rejected() {
        let p = GraphParams {
            min_children: 4,
            max_children: 2,
            ..GraphParams::default()
        };
        assert!(sample_family_graph(0, &p).is_err());
    }
}
