//! Kinship vocabulary, binary composition rules and the family-tree oracle.

mod relation;
mod tree;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

pub use relation::{Gender, Kinship, Relation, NUM_BASE, NUM_RELATIONS};
pub use tree::{witness, CompositionWitness, FamilyTree, Person};

use crate::error::{Error, Result};

const DEFAULT_RULES: &str = include_str!("default_rules.tsv");

/// `(lhs1, lhs2) -> rhs`: if `y` is x's `lhs1` and `z` is y's `lhs2`, then
/// `z` is x's `rhs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rule {
    pub lhs1: Relation,
    pub lhs2: Relation,
    pub rhs: Relation,
}

impl Rule {
    pub fn new(lhs1: impl Into<Relation>, lhs2: impl Into<Relation>, rhs: impl Into<Relation>) -> Rule {
        Rule {
            lhs1: lhs1.into(),
            lhs2: lhs2.into(),
            rhs: rhs.into(),
        }
    }

    /// The same rule with every relation's gender flipped.
    pub fn swap_gender(self) -> Rule {
        Rule {
            lhs1: self.lhs1.swap_gender(),
            lhs2: self.lhs2.swap_gender(),
            rhs: self.rhs.swap_gender(),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.lhs1, self.lhs2, self.rhs)
    }
}

/// Immutable rule set with an `O(1)` composition table.
#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    rules: Vec<Rule>,
    table: Vec<Option<Relation>>,
}

impl KnowledgeBase {
    /// Builds a KB from raw rules. Pairs with conflicting right-hand sides
    /// compose to nothing; [`validate_kb`] reports them.
    pub fn from_rules(rules: impl IntoIterator<Item = Rule>) -> KnowledgeBase {
        let mut rules: Vec<Rule> = rules.into_iter().collect();
        rules.sort();
        rules.dedup();
        let mut rhs: BTreeMap<(usize, usize), Vec<Relation>> = BTreeMap::new();
        for r in &rules {
            rhs.entry((r.lhs1.index(), r.lhs2.index()))
                .or_default()
                .push(r.rhs);
        }
        let mut table = vec![None; NUM_RELATIONS * NUM_RELATIONS];
        for ((a, b), outs) in rhs {
            if let [only] = outs.as_slice() {
                table[a * NUM_RELATIONS + b] = Some(*only);
            }
        }
        KnowledgeBase { rules, table }
    }

    /// Parses `lhs1 <TAB> lhs2 <TAB> rhs` lines. Blank lines and lines starting
    /// with `#` are skipped.
    pub fn parse(text: &str) -> Result<KnowledgeBase> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [a, b, c] = fields.as_slice() else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            };
            let parse = |s: &str| {
                s.trim().parse::<Relation>().map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
            };
            rules.push(Rule {
                lhs1: parse(a)?,
                lhs2: parse(b)?,
                rhs: parse(c)?,
            });
        }
        Ok(KnowledgeBase::from_rules(rules))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
        KnowledgeBase::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        self.rules.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn relations(&self) -> impl Iterator<Item = Relation> {
        Relation::all()
    }

    pub fn compose(&self, r1: Relation, r2: Relation) -> Option<Relation> {
        self.table[r1.index() * NUM_RELATIONS + r2.index()]
    }

    /// Left fold of [`compose`](Self::compose) over the chain.
    pub fn resolve_chain(&self, chain: &[Relation]) -> Result<Option<Relation>> {
        let (first, rest) = chain.split_first().ok_or(Error::EmptyChain)?;
        Ok(rest
            .iter()
            .try_fold(*first, |acc, &r| self.compose(acc, r)))
    }
}

impl Default for KnowledgeBase {
    /// The embedded rule table, derived from and validated against
    /// [`FamilyTree::reference`].
    fn default() -> Self {
        KnowledgeBase::parse(DEFAULT_RULES).expect("embedded rule table parses")
    }
}

/// A rule that disagrees with the family-tree oracle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleViolation {
    pub rule: Rule,
    /// Embeddings of `(lhs1, lhs2)` in the reference tree.
    pub embeddings: usize,
    /// Embeddings whose endpoints are not related by `rhs`.
    pub contradictions: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    /// Pairs of rules sharing a left-hand side but not a right-hand side.
    pub functional: Vec<(Rule, Rule)>,
    /// Rules whose gender-swapped counterpart is missing.
    pub closure: Vec<Rule>,
    /// Rules unwitnessed by, or contradicting, the reference tree.
    pub oracle: Vec<OracleViolation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.functional.is_empty() && self.closure.is_empty() && self.oracle.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (a, b) in &self.functional {
            writeln!(f, "functional: {a} conflicts with {b}")?;
        }
        for r in &self.closure {
            writeln!(f, "closure: {r} has no gender-swapped counterpart")?;
        }
        for v in &self.oracle {
            writeln!(
                f,
                "oracle: {} contradicted by {} of {} embeddings",
                v.rule, v.contradictions, v.embeddings
            )?;
        }
        Ok(())
    }
}

/// Whether `r` relates `x` to `y` according to a kinship matrix.
fn related(m: &[Vec<Option<Kinship>>], x: usize, r: Relation, y: usize) -> bool {
    let (s, o) = if r.is_inverse() { (y, x) } else { (x, y) };
    m[s][o] == Some(r.kinship())
}

/// Checks one rule against every embedding of its left-hand side.
pub fn check_rule(m: &[Vec<Option<Kinship>>], rule: Rule) -> OracleViolation {
    let n = m.len();
    let mut v = OracleViolation {
        rule,
        embeddings: 0,
        contradictions: 0,
    };
    for x in 0..n {
        for y in (0..n).filter(|&y| related(m, x, rule.lhs1, y)) {
            for z in (0..n).filter(|&z| related(m, y, rule.lhs2, z)) {
                v.embeddings += 1;
                if !related(m, x, rule.rhs, z) {
                    v.contradictions += 1;
                }
            }
        }
    }
    v
}

pub fn validate_kb(kb: &KnowledgeBase) -> ValidationReport {
    validate_against(kb, &FamilyTree::reference())
}

pub fn validate_against(kb: &KnowledgeBase, tree: &FamilyTree) -> ValidationReport {
    let mut report = ValidationReport::default();
    let rules = kb.rules();
    for (i, a) in rules.iter().enumerate() {
        for b in &rules[i + 1..] {
            if (a.lhs1, a.lhs2) == (b.lhs1, b.lhs2) && a.rhs != b.rhs {
                report.functional.push((*a, *b));
            }
        }
        if rules.binary_search(&a.swap_gender()).is_err() {
            report.closure.push(*a);
        }
    }
    let m = tree.kinship_matrix();
    for r in rules {
        let v = check_rule(&m, *r);
        if v.embeddings == 0 || v.contradictions > 0 {
            report.oracle.push(v);
        }
    }
    report
}

/// Result of comparing [`KnowledgeBase::resolve_chain`] with labels read off
/// a tree, over every walk of base relations up to some length.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChainCheck {
    /// Distinct relation sequences realised by at least one walk.
    pub chains: usize,
    /// Chains the KB resolves.
    pub resolved: usize,
    /// Walks enumerated.
    pub walks: usize,
    /// Resolved chains with some walk whose endpoints carry another label.
    pub mismatches: Vec<(Vec<Relation>, Relation, Option<Kinship>)>,
}

/// Enumerates every walk `x0 -r1-> x1 ... -rk-> xk` with `k <= max_len` in
/// the tree and checks that whenever the chain resolves to `c`, `xk` is
/// x0's `c`.
pub fn check_chains(kb: &KnowledgeBase, tree: &FamilyTree, max_len: usize) -> ChainCheck {
    let m = tree.kinship_matrix();
    let mut check = ChainCheck::default();
    let mut seen = std::collections::BTreeSet::new();
    let mut chain = Vec::new();
    for x in 0..m.len() {
        walk(kb, &m, x, x, &mut chain, max_len, &mut check, &mut seen);
    }
    check.chains = seen.len();
    check
}

#[allow(clippy::too_many_arguments)]
fn walk(
    kb: &KnowledgeBase,
    m: &[Vec<Option<Kinship>>],
    start: usize,
    at: usize,
    chain: &mut Vec<Relation>,
    max_len: usize,
    check: &mut ChainCheck,
    seen: &mut std::collections::BTreeSet<Vec<Relation>>,
) {
    if chain.len() == max_len {
        return;
    }
    for next in 0..m.len() {
        let Some(k) = m[at][next] else { continue };
        chain.push(Relation::base(k));
        check.walks += 1;
        let resolved = kb.resolve_chain(chain).expect("chain is non-empty");
        if seen.insert(chain.clone()) && resolved.is_some() {
            check.resolved += 1;
        }
        if let Some(c) = resolved {
            if !related(m, start, c, next) {
                check.mismatches.push((chain.clone(), c, m[start][next]));
            }
        }
        walk(kb, m, start, next, chain, max_len, check, seen);
        chain.pop();
    }
}

/// Every base-relation rule the tree witnesses at least once without a
/// single counterexample.
pub fn derive_rules(tree: &FamilyTree) -> Vec<Rule> {
    let m = tree.kinship_matrix();
    let mut out = Vec::new();
    for a in Kinship::ALL {
        for b in Kinship::ALL {
            if let Some(c) = witness(&m, a, b).unique() {
                out.push(Rule::new(a, b, c));
            }
        }
    }
    out
}
