use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn swap(self) -> Gender {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
        }
    }
}

/// Gendered kinship label. `Kinship::X` between a subject `s` and an object
/// `o` reads "o is s's X".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kinship {
    Father,
    Mother,
    Son,
    Daughter,
    Brother,
    Sister,
    Husband,
    Wife,
    Grandfather,
    Grandmother,
    Grandson,
    Granddaughter,
    Uncle,
    Aunt,
    Nephew,
    Niece,
    FatherInLaw,
    MotherInLaw,
    SonInLaw,
    DaughterInLaw,
}

impl Kinship {
    pub const ALL: [Kinship; 20] = [
        Kinship::Father,
        Kinship::Mother,
        Kinship::Son,
        Kinship::Daughter,
        Kinship::Brother,
        Kinship::Sister,
        Kinship::Husband,
        Kinship::Wife,
        Kinship::Grandfather,
        Kinship::Grandmother,
        Kinship::Grandson,
        Kinship::Granddaughter,
        Kinship::Uncle,
        Kinship::Aunt,
        Kinship::Nephew,
        Kinship::Niece,
        Kinship::FatherInLaw,
        Kinship::MotherInLaw,
        Kinship::SonInLaw,
        Kinship::DaughterInLaw,
    ];

    /// Labels that stories state directly as facts (one parent, child,
    /// sibling or spouse step).
    pub const BASIC: [Kinship; 8] = [
        Kinship::Father,
        Kinship::Mother,
        Kinship::Son,
        Kinship::Daughter,
        Kinship::Brother,
        Kinship::Sister,
        Kinship::Husband,
        Kinship::Wife,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Kinship> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Kinship::Father => "father",
            Kinship::Mother => "mother",
            Kinship::Son => "son",
            Kinship::Daughter => "daughter",
            Kinship::Brother => "brother",
            Kinship::Sister => "sister",
            Kinship::Husband => "husband",
            Kinship::Wife => "wife",
            Kinship::Grandfather => "grandfather",
            Kinship::Grandmother => "grandmother",
            Kinship::Grandson => "grandson",
            Kinship::Granddaughter => "granddaughter",
            Kinship::Uncle => "uncle",
            Kinship::Aunt => "aunt",
            Kinship::Nephew => "nephew",
            Kinship::Niece => "niece",
            Kinship::FatherInLaw => "father-in-law",
            Kinship::MotherInLaw => "mother-in-law",
            Kinship::SonInLaw => "son-in-law",
            Kinship::DaughterInLaw => "daughter-in-law",
        }
    }

    /// Gender of the person the label names.
    pub fn gender(self) -> Gender {
        // male/female labels alternate in `ALL`
        if self.index().is_multiple_of(2) {
            Gender::Male
        } else {
            Gender::Female
        }
    }

    pub fn swap_gender(self) -> Kinship {
        Self::ALL[self.index() ^ 1]
    }

    pub fn with_gender(self, g: Gender) -> Kinship {
        if self.gender() == g {
            self
        } else {
            self.swap_gender()
        }
    }

    pub fn is_basic(self) -> bool {
        self.index() < 8
    }
}

/// A kinship label in child-to-parent (base) form or its `inv-` dual.
///
/// `Relation::base(Father)` between `x` and `y` means "y is x's father";
/// `inv-father` between `x` and `y` means "x is y's father".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Relation {
    kinship: Kinship,
    inverse: bool,
}

/// Number of distinct relation symbols, base and `inv-` together.
pub const NUM_RELATIONS: usize = 40;
/// Number of base relations; the classification targets.
pub const NUM_BASE: usize = 20;

impl Relation {
    pub const fn base(kinship: Kinship) -> Relation {
        Relation {
            kinship,
            inverse: false,
        }
    }

    pub fn kinship(self) -> Kinship {
        self.kinship
    }

    pub fn is_inverse(self) -> bool {
        self.inverse
    }

    pub fn invert(self) -> Relation {
        Relation {
            kinship: self.kinship,
            inverse: !self.inverse,
        }
    }

    pub fn gender(self) -> Gender {
        self.kinship.gender()
    }

    pub fn swap_gender(self) -> Relation {
        Relation {
            kinship: self.kinship.swap_gender(),
            inverse: self.inverse,
        }
    }

    /// Base relations take `0..20`, their duals `20..40`.
    pub fn index(self) -> usize {
        self.kinship.index() + if self.inverse { NUM_BASE } else { 0 }
    }

    pub fn from_index(i: usize) -> Option<Relation> {
        let kinship = Kinship::from_index(i % NUM_BASE)?;
        (i < NUM_RELATIONS).then_some(Relation {
            kinship,
            inverse: i >= NUM_BASE,
        })
    }

    pub fn all() -> impl Iterator<Item = Relation> {
        (0..NUM_RELATIONS).filter_map(Relation::from_index)
    }

    pub fn all_base() -> impl Iterator<Item = Relation> {
        Kinship::ALL.into_iter().map(Relation::base)
    }
}

impl From<Kinship> for Relation {
    fn from(k: Kinship) -> Self {
        Relation::base(k)
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.inverse {
            write!(f, "inv-{}", self.kinship.name())
        } else {
            f.write_str(self.kinship.name())
        }
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let (inverse, name) = match s.strip_prefix("inv-") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        Kinship::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .map(|kinship| Relation { kinship, inverse })
            .ok_or_else(|| Error::UnknownRelation(s.to_string()))
    }
}

impl Serialize for Relation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Relation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invert_is_an_involution_on_every_relation() {
        let all: Vec<Relation> = Relation::all().collect();
        assert_eq!(all.len(), 40);
        for r in all {
            assert_eq!(r.invert().invert(), r);
            assert_ne!(r.invert(), r);
        }
    }

    #[test]
    fn invert_father_is_inv_father() {
        let f = Relation::base(Kinship::Father);
        assert_eq!(f.invert().to_string(), "inv-father");
        assert_eq!("inv-father".parse::<Relation>().unwrap(), f.invert());
    }

    #[test]
    fn gender_swap_is_a_perfect_matching() {
        for k in Kinship::ALL {
            let s = k.swap_gender();
            assert_ne!(s, k);
            assert_eq!(s.swap_gender(), k);
            assert_ne!(s.gender(), k.gender());
        }
        assert_eq!(Kinship::Father.swap_gender(), Kinship::Mother);
        assert_eq!(Kinship::SonInLaw.swap_gender(), Kinship::DaughterInLaw);
    }

    #[test]
    fn names_round_trip_and_unknown_rejected() {
        for r in Relation::all() {
            assert_eq!(r.to_string().parse::<Relation>().unwrap(), r);
            assert_eq!(Relation::from_index(r.index()), Some(r));
        }
        assert!("cousin".parse::<Relation>().is_err());
        assert!("Father".parse::<Relation>().is_err());
    }
}
