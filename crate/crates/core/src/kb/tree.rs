//! Ground family trees and the kinship labels read directly off them.
//!
//! This is the semantic ground truth that rule tables are checked against: a
//! label between two people is decided from parent and spouse links alone,
//! never from composition rules.

use super::relation::{Gender, Kinship, Relation};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Person {
    pub gender: Gender,
    pub father: Option<usize>,
    pub mother: Option<usize>,
    pub spouse: Option<usize>,
}

/// Monogamous family tree: every child has a married father and mother, or
/// no recorded parents at all (people who married into the family).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FamilyTree {
    people: Vec<Person>,
}

impl FamilyTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.people.len()
    }

    pub fn is_empty(&self) -> bool {
        self.people.is_empty()
    }

    pub fn person(&self, id: usize) -> &Person {
        &self.people[id]
    }

    pub fn gender(&self, id: usize) -> Gender {
        self.people[id].gender
    }

    /// Adds someone with no recorded parents.
    pub fn add_person(&mut self, gender: Gender) -> usize {
        self.people.push(Person {
            gender,
            father: None,
            mother: None,
            spouse: None,
        });
        self.people.len() - 1
    }

    /// Marries two unmarried people of opposite gender.
    pub fn marry(&mut self, a: usize, b: usize) {
        assert_ne!(self.people[a].gender, self.people[b].gender);
        assert!(self.people[a].spouse.is_none() && self.people[b].spouse.is_none());
        self.people[a].spouse = Some(b);
        self.people[b].spouse = Some(a);
    }

    /// Adds a child of the married couple `parent` and their spouse.
    pub fn add_child(&mut self, parent: usize, gender: Gender) -> usize {
        let other = self.people[parent].spouse.expect("children need a married couple");
        let (father, mother) = match self.people[parent].gender {
            Gender::Male => (parent, other),
            Gender::Female => (other, parent),
        };
        self.people.push(Person {
            gender,
            father: Some(father),
            mother: Some(mother),
            spouse: None,
        });
        self.people.len() - 1
    }

    fn parents(&self, x: usize) -> impl Iterator<Item = usize> + '_ {
        let p = &self.people[x];
        p.father.into_iter().chain(p.mother)
    }

    fn is_parent(&self, x: usize, y: usize) -> bool {
        self.parents(x).any(|p| p == y)
    }

    fn is_sibling(&self, x: usize, y: usize) -> bool {
        let (a, b) = (&self.people[x], &self.people[y]);
        x != y && a.father.is_some() && a.father == b.father && a.mother == b.mother
    }

    /// Every label that describes `y` relative to `x` ("y is x's ...").
    /// A well-formed tree yields at most one.
    pub fn labels(&self, x: usize, y: usize) -> Vec<Kinship> {
        if x == y {
            return Vec::new();
        }
        let g = self.people[y].gender;
        let mut out = Vec::new();
        let mut add = |cond: bool, k: Kinship| {
            if cond {
                out.push(k.with_gender(g));
            }
        };
        add(self.is_parent(x, y), Kinship::Father);
        add(self.is_parent(y, x), Kinship::Son);
        add(self.is_sibling(x, y), Kinship::Brother);
        add(self.people[x].spouse == Some(y), Kinship::Husband);
        add(
            self.parents(x).any(|p| self.is_parent(p, y)),
            Kinship::Grandfather,
        );
        add(
            self.parents(y).any(|p| self.is_parent(p, x)),
            Kinship::Grandson,
        );
        add(
            self.parents(x).any(|p| self.is_sibling(p, y)),
            Kinship::Uncle,
        );
        add(
            self.parents(y).any(|p| self.is_sibling(x, p)),
            Kinship::Nephew,
        );
        add(
            self.people[x]
                .spouse
                .is_some_and(|s| self.is_parent(s, y)),
            Kinship::FatherInLaw,
        );
        add(
            self.people[y]
                .spouse
                .is_some_and(|s| self.is_parent(s, x)),
            Kinship::SonInLaw,
        );
        out
    }

    /// The unique label of `y` relative to `x`, if any.
    pub fn kinship(&self, x: usize, y: usize) -> Option<Kinship> {
        let labels = self.labels(x, y);
        match labels.as_slice() {
            [k] => Some(*k),
            _ => None,
        }
    }

    /// Whether `r` holds between `x` and `y` in this tree.
    pub fn holds(&self, x: usize, r: Relation, y: usize) -> bool {
        let (s, o) = if r.is_inverse() { (y, x) } else { (x, y) };
        self.kinship(s, o) == Some(r.kinship())
    }

    /// `n × n` table of `kinship(x, y)`.
    pub fn kinship_matrix(&self) -> Vec<Vec<Option<Kinship>>> {
        (0..self.len())
            .map(|x| (0..self.len()).map(|y| self.kinship(x, y)).collect())
            .collect()
    }

    /// Hand-built four-generation reference family used to validate rules.
    ///
    /// ```text
    /// gen 1   A(m)=B(f)                    C(m)=D(f)
    /// gen 2   E(m)=H(f)  F(f)=I(m)  G(m)   H  J(m)=K(f)  L(f)
    ///                                      (H is C=D's daughter)
    /// gen 3   children of E=H: M(m)=P(f), N(f)=Q(m), O(m)
    ///         children of I=F: R(f)=S(m), T(m)
    ///         children of J=K: U(m), V(f), V'(f)
    /// gen 4   children of M=P: W(m), X(f); of S=R: Y(f), Z(m); of N=Q: AA(m), AB(f)
    /// ```
    pub fn reference() -> FamilyTree {
        use Gender::{Female as F, Male as M};
        let mut t = FamilyTree::new();
        let a = t.add_person(M);
        let b = t.add_person(F);
        t.marry(a, b);
        let c = t.add_person(M);
        let d = t.add_person(F);
        t.marry(c, d);

        let e = t.add_child(a, M);
        let f = t.add_child(a, F);
        let _g = t.add_child(a, M);
        let h = t.add_child(c, F);
        let j = t.add_child(c, M);
        let _l = t.add_child(c, F);
        t.marry(e, h);
        let i = t.add_person(M);
        t.marry(f, i);
        let k = t.add_person(F);
        t.marry(j, k);

        let m = t.add_child(e, M);
        let n = t.add_child(e, F);
        let _o = t.add_child(e, M);
        let r = t.add_child(f, F);
        let _t = t.add_child(f, M);
        let _u = t.add_child(j, M);
        let _v = t.add_child(j, F);
        let _v2 = t.add_child(j, F);
        let p = t.add_person(F);
        t.marry(m, p);
        let q = t.add_person(M);
        t.marry(n, q);
        let s = t.add_person(M);
        t.marry(r, s);

        t.add_child(m, M);
        t.add_child(m, F);
        t.add_child(r, F);
        t.add_child(r, M);
        t.add_child(n, M);
        t.add_child(n, F);
        t
    }
}

/// Outcome of checking one composition against every embedding in a tree.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CompositionWitness {
    /// Number of `(x, y, z)` with `y` = x's `first` and `z` = y's `second`.
    pub embeddings: usize,
    /// Distinct labels of `z` relative to `x` over those embeddings
    /// (`None` when no label applies, including `z == x`).
    pub outcomes: Vec<Option<Kinship>>,
}

impl CompositionWitness {
    /// The label every embedding agrees on, if there is exactly one.
    pub fn unique(&self) -> Option<Kinship> {
        match self.outcomes.as_slice() {
            [Some(k)] => Some(*k),
            _ => None,
        }
    }
}

/// Enumerates every embedding of the two-step chain `(first, second)` in a tree.
pub fn witness(
    matrix: &[Vec<Option<Kinship>>],
    first: Kinship,
    second: Kinship,
) -> CompositionWitness {
    let n = matrix.len();
    let mut w = CompositionWitness::default();
    for x in 0..n {
        for y in (0..n).filter(|&y| matrix[x][y] == Some(first)) {
            for z in (0..n).filter(|&z| matrix[y][z] == Some(second)) {
                w.embeddings += 1;
                let out = matrix[x][z];
                if !w.outcomes.contains(&out) {
                    w.outcomes.push(out);
                }
            }
        }
    }
    w.outcomes.sort();
    w
}
