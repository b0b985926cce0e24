//! Exhaustive generation and counting of testing procedures.
//!
//! Internally an outcome set over `n ≤ 6` samples is a single `u64` whose bit
//! `o` is set when outcome mask `o` is still possible.

use std::collections::HashMap;
use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::procedure::{Node, Procedure};
use crate::model::{compress, full_mask, pools_in_order, Outcome, Permutation, Pool};

/// Largest n accepted by the generation stream.
pub const ENUMERATION_LIMIT: usize = 4;
/// Largest n accepted by the counting routine (outcome sets must fit one word).
pub const COUNT_LIMIT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pruning {
    /// Label each test with its largest equivalent pool (all clean-decided samples added).
    pub maximal_pools: bool,
    /// Skip a node when some pool earlier than its own splits both children
    /// exactly as they are split; swapping the two levels gives an equal-length
    /// tree that is kept.
    pub interchange: bool,
}

impl Pruning {
    pub const NONE: Pruning = Pruning {
        maximal_pools: false,
        interchange: false,
    };
    pub const ALL: Pruning = Pruning {
        maximal_pools: true,
        interchange: true,
    };
}

/// Word of all outcomes of `n` samples.
pub(crate) fn universe_word(n: usize) -> u64 {
    if n == 6 {
        u64::MAX
    } else {
        (1u64 << (1u32 << n)) - 1
    }
}

/// For each pool mask `t`, the word of outcomes clean on every member of `t`.
pub(crate) fn clean_words(n: usize) -> Vec<u64> {
    let size = 1usize << n;
    (0..size as u64)
        .map(|t| {
            (0..size as u64)
                .filter(|o| o & t == 0)
                .fold(0u64, |w, o| w | 1 << o)
        })
        .collect()
}

/// One admissible test at a node: the first pool in the core order producing
/// its partition, plus the two parts.
#[derive(Debug, Clone, Copy)]
struct Choice {
    base: u64,
    pool: u64,
    neg: u64,
    pos: u64,
}

fn choices(n: usize, set: u64, clean: &[u64], pruning: Pruning) -> Vec<Choice> {
    let mut out: Vec<Choice> = Vec::new();
    let clean_decided = if pruning.maximal_pools {
        decided_word(n, set).0
    } else {
        0
    };
    for &t in pools_in_order(n) {
        let neg = set & clean[t as usize];
        if neg == 0 || neg == set || out.iter().any(|c| c.neg == neg) {
            continue;
        }
        out.push(Choice {
            base: t,
            pool: t | clean_decided,
            neg,
            pos: set & !neg,
        });
    }
    out
}

/// `(clean_decided, infected_decided)` sample masks of a non-empty set word.
fn decided_word(n: usize, set: u64) -> (u64, u64) {
    let mut any = 0u64;
    let mut all = full_mask(n);
    let mut w = set;
    while w != 0 {
        let o = w.trailing_zeros() as u64;
        any |= o;
        all &= o;
        w &= w - 1;
    }
    (full_mask(n) & !any, all)
}

/// Lazy, deterministic stream of every procedure on `n` samples.
pub struct ProcedureStream {
    n: usize,
    root: SubtreeIter,
}

impl Iterator for ProcedureStream {
    type Item = Procedure;

    fn next(&mut self) -> Option<Procedure> {
        self.root
            .next()
            .map(|root| Procedure::new_unchecked(self.n, root))
    }
}

impl fmt::Debug for ProcedureStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProcedureStream").field("n", &self.n).finish()
    }
}

struct Shared {
    n: usize,
    clean: Vec<u64>,
    pruning: Pruning,
}

impl Shared {
    /// True when a pool before `choice.base` in the core order induces the
    /// same split on both children.
    fn swappable(&self, choice: &Choice, neg: &Node, pos: &Node) -> bool {
        let (Some(a), Some(b)) = (neg.pool(), pos.pool()) else {
            return false;
        };
        let split_neg = choice.neg & self.clean[a.mask() as usize];
        let split_pos = choice.pos & self.clean[b.mask() as usize];
        pools_in_order(self.n)
            .iter()
            .take_while(|&&t| t != choice.base)
            .any(|&t| {
                choice.neg & self.clean[t as usize] == split_neg
                    && choice.pos & self.clean[t as usize] == split_pos
            })
    }
}

enum SubtreeIter {
    Leaf(Option<Node>),
    Split(Box<SplitIter>),
}

struct SplitIter {
    shared: std::sync::Arc<Shared>,
    choices: Vec<Choice>,
    idx: usize,
    neg_iter: Option<SubtreeIter>,
    current_neg: Option<Node>,
    pos_iter: Option<SubtreeIter>,
}

impl SubtreeIter {
    fn new(shared: &std::sync::Arc<Shared>, set: u64) -> SubtreeIter {
        if set.count_ones() == 1 {
            let o = Outcome::new_unchecked(shared.n, set.trailing_zeros() as u64);
            return SubtreeIter::Leaf(Some(Node::Leaf(o)));
        }
        SubtreeIter::Split(Box::new(SplitIter {
            choices: choices(shared.n, set, &shared.clean, shared.pruning),
            shared: shared.clone(),
            idx: 0,
            neg_iter: None,
            current_neg: None,
            pos_iter: None,
        }))
    }
}

impl Iterator for SubtreeIter {
    type Item = Node;

    fn next(&mut self) -> Option<Node> {
        match self {
            SubtreeIter::Leaf(leaf) => leaf.take(),
            SubtreeIter::Split(split) => split.next(),
        }
    }
}

impl SplitIter {
    fn next(&mut self) -> Option<Node> {
        loop {
            let choice = *self.choices.get(self.idx)?;
            if self.neg_iter.is_none() {
                self.neg_iter = Some(SubtreeIter::new(&self.shared, choice.neg));
            }
            if self.current_neg.is_none() {
                match self.neg_iter.as_mut().unwrap().next() {
                    Some(node) => {
                        self.current_neg = Some(node);
                        self.pos_iter = Some(SubtreeIter::new(&self.shared, choice.pos));
                    }
                    None => {
                        self.idx += 1;
                        self.neg_iter = None;
                        continue;
                    }
                }
            }
            match self.pos_iter.as_mut().unwrap().next() {
                Some(pos) => {
                    let neg = self.current_neg.as_ref().unwrap();
                    if self.shared.pruning.interchange && self.shared.swappable(&choice, neg, &pos) {
                        continue;
                    }
                    let pool = Pool::new_unchecked(self.shared.n, choice.pool);
                    return Some(Node::test(pool, neg.clone(), pos));
                }
                None => self.current_neg = None,
            }
        }
    }
}

pub fn enumerate_procedures(n: usize, pruning: Pruning) -> Result<ProcedureStream> {
    if n == 0 || n > ENUMERATION_LIMIT {
        return Err(Error::unsupported("procedure enumeration", n, ENUMERATION_LIMIT));
    }
    let shared = std::sync::Arc::new(Shared {
        n,
        clean: clean_words(n),
        pruning,
    });
    Ok(ProcedureStream {
        n,
        root: SubtreeIter::new(&shared, universe_word(n)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMethod {
    Exhaustive,
    Dp,
    Formula,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountResult {
    pub n: usize,
    #[serde(with = "biguint_string")]
    pub value: BigUint,
    pub method: CountMethod,
}

impl fmt::Display for CountResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value)
    }
}

mod biguint_string {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Counts the stream exhaustively.
pub fn count_by_enumeration(n: usize, pruning: Pruning) -> Result<CountResult> {
    let count = enumerate_procedures(n, pruning)?.count();
    Ok(CountResult {
        n,
        value: BigUint::from(count),
        method: CountMethod::Exhaustive,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct CountOptions {
    pub max_memo_entries: usize,
}

impl Default for CountOptions {
    fn default() -> Self {
        CountOptions {
            max_memo_entries: 50_000_000,
        }
    }
}

/// Memoized count over decided-point projections, up to relabeling of samples.
pub fn count_procedures(n: usize) -> Result<CountResult> {
    count_procedures_with(n, CountOptions::default())
}

pub fn count_procedures_with(n: usize, options: CountOptions) -> Result<CountResult> {
    if n == 0 || n > COUNT_LIMIT {
        return Err(Error::unsupported("procedure counting", n, COUNT_LIMIT));
    }
    let mut counter = Counter::new(n, options);
    let value = counter.count(n, universe_word(n))?;
    Ok(CountResult {
        n,
        value,
        method: CountMethod::Dp,
    })
}

struct Counter {
    options: CountOptions,
    /// Per sample count m: clean words and outcome maps for every permutation.
    clean: Vec<Vec<u64>>,
    perm_maps: Vec<Vec<Vec<u8>>>,
    memo: HashMap<(u8, u64), BigUint>,
}

impl Counter {
    fn new(n: usize, options: CountOptions) -> Counter {
        let clean = (0..=n).map(clean_words).collect();
        let perm_maps = (0..=n)
            .map(|m| {
                Permutation::all(m)
                    .iter()
                    .map(|sigma| (0..1u64 << m).map(|o| sigma.apply_mask(o) as u8).collect())
                    .collect()
            })
            .collect();
        Counter {
            options,
            clean,
            perm_maps,
            memo: HashMap::new(),
        }
    }

    fn count(&mut self, n: usize, set: u64) -> Result<BigUint> {
        if set.count_ones() == 1 {
            return Ok(BigUint::one());
        }
        let (m, projected) = project_word(n, set);
        let key = (m as u8, self.canonical(m, projected));
        if let Some(v) = self.memo.get(&key) {
            return Ok(v.clone());
        }
        let set = key.1;
        let mut total = BigUint::zero();
        let mut seen: Vec<u64> = Vec::new();
        for &t in pools_in_order(m) {
            let neg = set & self.clean[m][t as usize];
            if neg == 0 || neg == set || seen.contains(&neg) {
                continue;
            }
            seen.push(neg);
            let a = self.count(m, neg)?;
            if a.is_zero() {
                continue;
            }
            let b = self.count(m, set & !neg)?;
            total += a * b;
        }
        if self.memo.len() >= self.options.max_memo_entries {
            return Err(Error::ResourceExhausted(format!(
                "count memo exceeded {} entries",
                self.options.max_memo_entries
            )));
        }
        self.memo.insert(key, total.clone());
        Ok(total)
    }

    fn canonical(&self, m: usize, set: u64) -> u64 {
        self.perm_maps[m]
            .iter()
            .map(|map| {
                let mut out = 0u64;
                let mut w = set;
                while w != 0 {
                    out |= 1 << map[w.trailing_zeros() as usize];
                    w &= w - 1;
                }
                out
            })
            .min()
            .unwrap_or(set)
    }
}

/// Drops decided samples; returns the live sample count and the projected word.
pub(crate) fn project_word(n: usize, set: u64) -> (usize, u64) {
    let (clean, infected) = decided_word(n, set);
    let live = full_mask(n) & !(clean | infected);
    if live == full_mask(n) {
        return (n, set);
    }
    let mut out = 0u64;
    let mut w = set;
    while w != 0 {
        let o = w.trailing_zeros() as u64;
        out |= 1 << compress(o, live);
        w &= w - 1;
    }
    (live.count_ones() as usize, out)
}

/// Number of naive procedures, `∏_{k=1..n} k^(2^(n−k))`.
pub fn count_naive(n: usize) -> Result<CountResult> {
    if n == 0 || n > 24 {
        return Err(Error::unsupported("naive-procedure count", n, 24));
    }
    let mut value = BigUint::one();
    for k in 1..=n {
        value *= BigUint::from(k).pow(1u32 << (n - k));
    }
    Ok(CountResult {
        n,
        value,
        method: CountMethod::Formula,
    })
}

/// The t-th Catalan number, `binom(2t, t) / (t + 1)`.
pub fn catalan(t: u64) -> BigUint {
    let mut binom = BigUint::one();
    for i in 0..t {
        binom = binom * BigUint::from(2 * t - i) / BigUint::from(i + 1);
    }
    binom / BigUint::from(t + 1)
}

/// `C_t · P(n)`, with `t = 2^n` unless given.
pub fn catalan_upper_bound(n: usize, t: Option<u64>) -> Result<CountResult> {
    if n == 0 || n > 16 {
        return Err(Error::unsupported("Catalan bound", n, 16));
    }
    let t = t.unwrap_or(1u64 << n);
    Ok(CountResult {
        n,
        value: catalan(t) * count_naive(n)?.value,
        method: CountMethod::Formula,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probability::length_vector;

    #[test]
    fn small_counts_by_enumeration() {
        for (n, expected) in [(1, 1u32), (2, 4), (3, 312)] {
            let got = count_by_enumeration(n, Pruning::NONE).unwrap();
            assert_eq!(got.value, BigUint::from(expected), "n = {n}");
        }
    }

    #[test]
    fn dp_matches_enumeration() {
        for (n, expected) in [(1, 1u64), (2, 4), (3, 312)] {
            assert_eq!(count_procedures(n).unwrap().value, BigUint::from(expected));
        }
    }

    #[test]
    fn stream_yields_valid_distinct_trees() {
        let trees: Vec<_> = enumerate_procedures(2, Pruning::NONE).unwrap().collect();
        let encodings: std::collections::BTreeSet<_> =
            trees.iter().map(|t| t.to_string()).collect();
        assert_eq!(encodings.len(), 4);
        for t in &trees {
            assert!(t.validate().is_valid(), "{t}");
        }
    }

    #[test]
    fn pruned_stream_is_smaller_and_valid() {
        let pruned: Vec<_> = enumerate_procedures(3, Pruning::ALL).unwrap().collect();
        assert!(pruned.len() < 312);
        for t in &pruned {
            assert!(t.validate().is_valid(), "{t}");
        }
        // pruning keeps every distinct length vector
        let all: std::collections::BTreeSet<_> = enumerate_procedures(3, Pruning::NONE)
            .unwrap()
            .map(|t| length_vector(&t))
            .collect();
        let kept: std::collections::BTreeSet<_> = pruned.iter().map(length_vector).collect();
        assert_eq!(all, kept);
    }

    #[test]
    fn naive_counts() {
        let p: Vec<u64> = (1..=4)
            .map(|n| count_naive(n).unwrap().value.try_into().unwrap())
            .collect();
        assert_eq!(p, vec![1, 2, 12, 576]);
        for n in 1..10 {
            let a = count_naive(n).unwrap().value;
            let b = count_naive(n + 1).unwrap().value;
            assert_eq!(b, BigUint::from(n + 1) * &a * &a);
        }
    }

    #[test]
    fn catalan_numbers() {
        let c: Vec<u64> = [1, 4, 8, 16].iter().map(|&t| catalan(t).try_into().unwrap()).collect();
        assert_eq!(c, vec![1, 14, 1430, 35357670]);
    }

    #[test]
    fn size_limits() {
        assert!(matches!(
            enumerate_procedures(5, Pruning::NONE),
            Err(Error::UnsupportedSize { limit: 4, .. })
        ));
        assert!(enumerate_procedures(0, Pruning::NONE).is_err());
        assert!(count_procedures(7).is_err());
    }

    #[test]
    fn memo_limit_is_reported() {
        let r = count_procedures_with(3, CountOptions { max_memo_entries: 1 });
        assert!(matches!(r, Err(Error::ResourceExhausted(_))));
    }

    #[test]
    fn count_result_json() {
        let json = serde_json::to_string(&count_naive(3).unwrap()).unwrap();
        assert_eq!(json, r#"{"n":3,"value":"12","method":"formula"}"#);
    }
}
