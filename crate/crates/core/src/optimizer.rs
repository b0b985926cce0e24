//! Optimal procedure at a prior point, by memoized search over outcome sets.
//!
//! The value of a node-set is the sum of the probabilities of the node-sets of
//! all tests below it, which equals its probability times its conditional
//! expected length. Ties are broken by the pool order at the root, then
//! recursively in the negative subtree, then the positive one.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::OnceLock;

use num_rational::BigRational;
use rustc_hash::FxHashMap;
use smallvec::SmallVec;

use crate::enumeration::{enumerate_procedures, Pruning};
use crate::error::{Error, Result};
use crate::model::procedure::{Node, Procedure};
use crate::model::{compress, expand, full_mask, pools_in_order, Outcome, OutcomeSet, Pool};
use crate::probability::{
    length_vector, probability_table, EvalMode, LengthVector, PriorVector, Scalar, Value,
};

/// Largest n for a full-universe search.
pub const OPTIMIZER_LIMIT: usize = 8;
/// Largest n for the brute-force oracle.
pub const BRUTE_FORCE_LIMIT: usize = 3;

#[derive(Debug, Clone)]
pub struct Optimum<S> {
    pub procedure: Procedure,
    /// Expected number of tests.
    pub value: S,
}

pub fn find_optimal<S: Scalar>(priors: &PriorVector) -> Result<Optimum<S>> {
    let n = priors.n();
    if n > OPTIMIZER_LIMIT {
        return Err(Error::UnsupportedSize {
            what: "optimal search",
            n,
            limit: OPTIMIZER_LIMIT,
            hint: Some("use the greedy or pairing heuristics for larger sample counts"),
        });
    }
    let mut ctx = OptimizerContext::<S>::new(priors.clone());
    let universe = OutcomeSet::full(n)?;
    let value = ctx.value_of(&universe);
    let root = ctx.reconstruct(&universe);
    Ok(Optimum {
        procedure: Procedure::new_unchecked(n, root),
        value,
    })
}

pub fn find_optimal_in(priors: &PriorVector, mode: EvalMode) -> Result<(Procedure, Value)> {
    Ok(match mode {
        EvalMode::Float => {
            let o = find_optimal::<f64>(priors)?;
            (o.procedure, Value::Float(o.value))
        }
        EvalMode::Exact => {
            let o = find_optimal::<BigRational>(priors)?;
            (o.procedure, Value::Exact(o.value))
        }
    })
}

/// Optimal subtree on a node-set. The value is unnormalized: divide by the
/// set's probability for the conditional expected length.
pub fn find_optimal_on<S: Scalar>(priors: &PriorVector, outcomes: &OutcomeSet) -> Result<(Node, S)> {
    if priors.n() != outcomes.n() {
        return Err(Error::SizeMismatch {
            expected: priors.n(),
            actual: outcomes.n(),
        });
    }
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument("outcome set is empty".into()));
    }
    if outcomes.n() > OPTIMIZER_LIMIT {
        return Err(Error::unsupported("optimal search", outcomes.n(), OPTIMIZER_LIMIT));
    }
    let mut ctx = OptimizerContext::<S>::new(priors.clone());
    let value = ctx.value_of(outcomes);
    Ok((ctx.reconstruct(outcomes), value))
}

type Key = (SmallVec<[u8; 8]>, SmallVec<[u64; 4]>);
/// Live sample count and prior classes packed in one word, then the set word.
type SmallKey = (u64, u64);

/// Sets over at most this many live samples take the single-word path.
const WORD_SAMPLES: usize = 6;

struct WordTables {
    /// `clean[m][t]`: outcomes of `m` samples clean on pool `t`.
    clean: Vec<Vec<u64>>,
    /// `infected[m][j]`: outcomes of `m` samples with sample `j` infected.
    infected: Vec<Vec<u64>>,
}

fn word_tables() -> &'static WordTables {
    static TABLES: OnceLock<WordTables> = OnceLock::new();
    TABLES.get_or_init(|| WordTables {
        clean: (0..=WORD_SAMPLES).map(crate::enumeration::clean_words).collect(),
        infected: (0..=WORD_SAMPLES)
            .map(|m| {
                (0..m)
                    .map(|j| {
                        (0..1u64 << m)
                            .filter(|o| o >> j & 1 == 1)
                            .fold(0u64, |w, o| w | 1 << o)
                    })
                    .collect()
            })
            .collect(),
    })
}

struct Entry<S> {
    value: S,
    /// Best pool in the coordinates of the projected set.
    pool: u64,
}

/// Search state for one prior vector. Subproblems are solved on projections
/// onto their undecided samples and keyed by those samples' prior values.
pub struct OptimizerContext<S: Scalar> {
    priors: PriorVector,
    /// Samples with equal exact priors share a class.
    class: Vec<u8>,
    memo: HashMap<Key, Entry<S>>,
    small_memo: FxHashMap<SmallKey, Entry<S>>,
    tables: FxHashMap<u64, Vec<S>>,
}

impl<S: Scalar> OptimizerContext<S> {
    pub fn new(priors: PriorVector) -> Self {
        let exact = priors.exact_values();
        let class = (0..exact.len())
            .map(|i| exact.iter().position(|r| *r == exact[i]).unwrap() as u8)
            .collect();
        OptimizerContext {
            priors,
            class,
            memo: HashMap::new(),
            small_memo: FxHashMap::default(),
            tables: FxHashMap::default(),
        }
    }

    pub fn memo_len(&self) -> usize {
        self.memo.len() + self.small_memo.len()
    }

    fn prior(&self, live: u64, local: usize) -> S {
        S::prior(&self.priors, expand(1 << local, live).trailing_zeros() as usize)
    }

    fn table(&mut self, live: u64) -> &[S] {
        let priors = &self.priors;
        self.tables.entry(live).or_insert_with(|| {
            probability_table::<S>(&priors.restrict(live))
                .expect("live samples are within the search limit")
        })
    }

    fn set_probability(&mut self, live: u64, set: &OutcomeSet) -> S {
        let table = self.table(live);
        set.masks()
            .fold(S::zero(), |acc, m| acc + table[m as usize].clone())
    }

    fn decided_factor(&self, live: u64, m: usize, clean: u64, infected: u64) -> S {
        let mut factor = S::one();
        for local in 0..m {
            if clean >> local & 1 == 1 {
                factor = factor * (S::one() - self.prior(live, local));
            } else if infected >> local & 1 == 1 {
                factor = factor * self.prior(live, local);
            }
        }
        factor
    }

    fn small_key(&self, live: u64, m: usize, set: u64) -> SmallKey {
        let mut packed = (m as u64) << 56;
        for (k, i) in crate::model::BitIter(live).enumerate() {
            packed |= (self.class[i] as u64) << (8 * k);
        }
        (packed, set)
    }

    fn value_small(&mut self, live: u64, m: usize, set: u64) -> S {
        if set.count_ones() <= 1 {
            return S::zero();
        }
        let tables = word_tables();
        let (mut clean, mut infected) = (0u64, 0u64);
        for j in 0..m {
            let inf = tables.infected[m][j];
            if set & inf == 0 {
                clean |= 1 << j;
            } else if set & !inf == 0 {
                infected |= 1 << j;
            }
        }
        if clean | infected != 0 {
            let factor = self.decided_factor(live, m, clean, infected);
            let keep = full_mask(m) & !(clean | infected);
            let mut sub = 0u64;
            let mut w = set;
            while w != 0 {
                sub |= 1 << compress(w.trailing_zeros() as u64, keep);
                w &= w - 1;
            }
            return factor * self.value_small(expand(keep, live), keep.count_ones() as usize, sub);
        }
        let key = self.small_key(live, m, set);
        if let Some(entry) = self.small_memo.get(&key) {
            return entry.value.clone();
        }
        let mut best: Option<(S, u64)> = None;
        for &t in pools_in_order(m) {
            let neg = set & tables.clean[m][t as usize];
            if neg == 0 || neg == set {
                continue;
            }
            let v = self.value_small(live, m, neg) + self.value_small(live, m, set & !neg);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, t));
            }
        }
        let (children, pool) = best.expect("a set with two outcomes and no decided sample has a split");
        let table = self.table(live);
        let mut p = S::zero();
        let mut w = set;
        while w != 0 {
            p = p + table[w.trailing_zeros() as usize].clone();
            w &= w - 1;
        }
        let value = p + children;
        self.small_memo.insert(
            key,
            Entry {
                value: value.clone(),
                pool,
            },
        );
        value
    }

    /// Value of a node-set over all samples.
    pub fn value_of(&mut self, set: &OutcomeSet) -> S {
        self.value(full_mask(set.n()), set)
    }

    /// `set` is over the samples in `live`, renumbered consecutively.
    fn value(&mut self, live: u64, set: &OutcomeSet) -> S {
        let m = set.n();
        if m <= WORD_SAMPLES {
            return self.value_small(live, m, set.first_word());
        }
        if set.len() <= 1 {
            return S::zero();
        }
        let (clean, infected) = set.decided();
        if clean | infected != 0 {
            let factor = self.decided_factor(live, m, clean, infected);
            let keep = full_mask(m) & !(clean | infected);
            let sub = set.project(keep);
            return factor * self.value(expand(keep, live), &sub);
        }
        let key = self.key(live, set);
        if let Some(entry) = self.memo.get(&key) {
            return entry.value.clone();
        }
        let mut best: Option<(S, u64)> = None;
        for &t in pools_in_order(m) {
            let (neg, pos) = set.split_mask(t);
            if neg.is_empty() || pos.is_empty() {
                continue;
            }
            let v = self.value(live, &neg) + self.value(live, &pos);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, t));
            }
        }
        let (children, pool) = best.expect("a set with two outcomes and no decided sample has a split");
        let value = self.set_probability(live, set) + children;
        self.memo.insert(
            key,
            Entry {
                value: value.clone(),
                pool,
            },
        );
        value
    }

    fn key(&self, live: u64, set: &OutcomeSet) -> Key {
        let classes = crate::model::BitIter(live).map(|i| self.class[i]).collect();
        (classes, SmallVec::from_slice(set.words()))
    }

    /// Rebuilds the optimal subtree for a node-set already valued by `value_of`.
    fn reconstruct(&self, set: &OutcomeSet) -> Node {
        let n = set.n();
        if let Some(o) = set.only() {
            return Node::Leaf(o);
        }
        let (clean, infected) = set.decided();
        let live = full_mask(n) & !(clean | infected);
        let projected = set.project(live);
        let local = if projected.n() <= WORD_SAMPLES {
            self.small_memo[&self.small_key(live, projected.n(), projected.first_word())].pool
        } else {
            self.memo[&self.key(live, &projected)].pool
        };
        let pool = expand(local, live);
        let (neg, pos) = set.split_mask(pool);
        Node::test(
            Pool::new_unchecked(n, pool),
            self.reconstruct(&neg),
            self.reconstruct(&pos),
        )
    }
}

/// The reachable node-sets of one n with their distinct splits, built once
/// and then valued bottom-up for many prior points.
pub struct PreparedOptimizer {
    n: usize,
    /// Sorted by size, so every split refers to earlier states.
    states: Vec<PreparedState>,
}

struct PreparedState {
    set: u64,
    /// `(pool, negative state, positive state)`, first pool per partition.
    choices: Vec<(u64, u32, u32)>,
}

/// Largest n for [`PreparedOptimizer`].
pub const PREPARED_LIMIT: usize = 5;

impl PreparedOptimizer {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n > PREPARED_LIMIT {
            return Err(Error::unsupported("prepared optimizer", n, PREPARED_LIMIT));
        }
        let clean = crate::enumeration::clean_words(n);
        let universe = crate::enumeration::universe_word(n);
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack = vec![universe];
        seen.insert(universe, ());
        let mut sets = Vec::new();
        while let Some(set) = stack.pop() {
            sets.push(set);
            if set.count_ones() == 1 {
                continue;
            }
            for &t in pools_in_order(n) {
                let neg = set & clean[t as usize];
                if neg == 0 || neg == set {
                    continue;
                }
                for part in [neg, set & !neg] {
                    if seen.insert(part, ()).is_none() {
                        stack.push(part);
                    }
                }
            }
        }
        sets.sort_by_key(|s| (s.count_ones(), *s));
        let index: HashMap<u64, u32> = sets.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect();
        let states = sets
            .iter()
            .map(|&set| {
                let mut choices: Vec<(u64, u32, u32)> = Vec::new();
                let mut negs: Vec<u64> = Vec::new();
                if set.count_ones() > 1 {
                    for &t in pools_in_order(n) {
                        let neg = set & clean[t as usize];
                        if neg == 0 || neg == set || negs.contains(&neg) {
                            continue;
                        }
                        negs.push(neg);
                        choices.push((t, index[&neg], index[&(set & !neg)]));
                    }
                }
                PreparedState { set, choices }
            })
            .collect();
        Ok(PreparedOptimizer { n, states })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn solve<S: Scalar>(&self, priors: &PriorVector) -> Result<Optimum<S>> {
        if priors.n() != self.n {
            return Err(Error::SizeMismatch {
                expected: self.n,
                actual: priors.n(),
            });
        }
        Ok(self.solve_table(&probability_table::<S>(priors)?))
    }

    /// Like [`solve`](Self::solve) from a table of outcome probabilities indexed by mask.
    pub fn solve_table<S: Scalar>(&self, table: &[S]) -> Optimum<S> {
        assert_eq!(table.len(), 1 << self.n, "probability table size");
        let mut values: Vec<S> = Vec::with_capacity(self.states.len());
        let mut best: Vec<u32> = Vec::with_capacity(self.states.len());
        for state in &self.states {
            if state.choices.is_empty() {
                values.push(S::zero());
                best.push(u32::MAX);
                continue;
            }
            let mut arg = 0usize;
            let mut min: Option<S> = None;
            for (k, &(_, a, b)) in state.choices.iter().enumerate() {
                let v = values[a as usize].clone() + values[b as usize].clone();
                if min.as_ref().is_none_or(|m| v < *m) {
                    min = Some(v);
                    arg = k;
                }
            }
            let mut p = S::zero();
            let mut w = state.set;
            while w != 0 {
                p = p + table[w.trailing_zeros() as usize].clone();
                w &= w - 1;
            }
            values.push(p + min.unwrap());
            best.push(arg as u32);
        }
        let root = self.states.len() - 1;
        Optimum {
            procedure: Procedure::new_unchecked(self.n, self.build(root, &best)),
            value: values[root].clone(),
        }
    }

    fn build(&self, state: usize, best: &[u32]) -> Node {
        let s = &self.states[state];
        if s.choices.is_empty() {
            return Node::Leaf(Outcome::new_unchecked(self.n, s.set.trailing_zeros() as u64));
        }
        let (pool, a, b) = s.choices[best[state] as usize];
        Node::test(
            Pool::new_unchecked(self.n, pool),
            self.build(a as usize, best),
            self.build(b as usize, best),
        )
    }
}

/// Every distinct length vector of one n, each with its least tree in preorder.
pub struct BruteForce {
    n: usize,
    candidates: Vec<(LengthVector, Procedure)>,
}

impl BruteForce {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n > BRUTE_FORCE_LIMIT {
            return Err(Error::unsupported("brute-force search", n, BRUTE_FORCE_LIMIT));
        }
        let mut by_lengths: HashMap<LengthVector, Procedure> = HashMap::new();
        for proc in enumerate_procedures(n, Pruning::NONE)? {
            let lv = length_vector(&proc);
            match by_lengths.get(&lv) {
                Some(kept) if kept.root().cmp_preorder(proc.root()) != Ordering::Greater => {}
                _ => {
                    by_lengths.insert(lv, proc);
                }
            }
        }
        let mut candidates: Vec<_> = by_lengths.into_iter().collect();
        candidates.sort_by(|a, b| a.1.root().cmp_preorder(b.1.root()));
        Ok(BruteForce { n, candidates })
    }

    pub fn candidates(&self) -> impl Iterator<Item = (&LengthVector, &Procedure)> {
        self.candidates.iter().map(|(lv, p)| (lv, p))
    }

    pub fn best<S: Scalar>(&self, priors: &PriorVector) -> Result<Optimum<S>> {
        if priors.n() != self.n {
            return Err(Error::SizeMismatch {
                expected: self.n,
                actual: priors.n(),
            });
        }
        let table = probability_table::<S>(priors)?;
        let mut best: Option<(S, usize)> = None;
        // candidates are in preorder, so the first minimum wins ties
        for (k, (lv, _)) in self.candidates.iter().enumerate() {
            let v = lv.evaluate_with(&table);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, k));
            }
        }
        let (value, k) = best.expect("at least one procedure exists");
        Ok(Optimum {
            procedure: self.candidates[k].1.clone(),
            value,
        })
    }
}

pub fn brute_force_optimal<S: Scalar>(priors: &PriorVector) -> Result<Optimum<S>> {
    BruteForce::new(priors.n())?.best(priors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::codec::decode;
    use crate::probability::expected_length;
    use num_traits::One;

    const FIG9_LEFT: &str = "P{1,2,3}[L(000),P{1,2}[L(001),P{1,3}[L(010),P{1}[L(011),P{2,3}[L(100),P{2}[L(101),P{3}[L(110),L(111)]]]]]]]";

    fn priors(text: &str) -> PriorVector {
        PriorVector::parse(text).unwrap().0
    }

    #[test]
    fn single_sample_needs_one_test() {
        for p in ["0", "0.3", "1"] {
            let o = find_optimal::<f64>(&priors(p)).unwrap();
            assert_eq!(o.value, 1.0);
            assert_eq!(o.procedure.to_string(), "P{1}[L(0),L(1)]");
        }
    }

    #[test]
    fn high_priors_give_naive() {
        let o = find_optimal::<BigRational>(&priors("0.9,0.9")).unwrap();
        assert_eq!(o.value, BigRational::from_integer(2.into()));
        assert_eq!(o.procedure, Procedure::naive(2).unwrap());
    }

    #[test]
    fn low_priors_give_pool_left() {
        let o = find_optimal::<BigRational>(&priors("0.1,0.2")).unwrap();
        assert_eq!(o.procedure.to_string(), "P{1,2}[L(00),P{1}[L(01),P{2}[L(10),L(11)]]]");
        assert_eq!(o.value, BigRational::new(138.into(), 100.into()));
    }

    #[test]
    fn fig9_point() {
        let p = priors("0.01,0.17,0.51");
        let o = find_optimal::<BigRational>(&p).unwrap();
        assert_eq!(o.procedure, decode(FIG9_LEFT).unwrap());
        assert_eq!(o.value, expected_length::<BigRational>(&o.procedure, &p).unwrap());
        assert!((o.value.to_f64() - 1.889).abs() < 1e-3);
    }

    #[test]
    fn diagonal_tie_prefers_pool_left() {
        let o = find_optimal::<BigRational>(&priors("0.3,0.3")).unwrap();
        assert_eq!(o.procedure.to_string(), "P{1,2}[L(00),P{1}[L(01),P{2}[L(10),L(11)]]]");
        let b = brute_force_optimal::<BigRational>(&priors("0.3,0.3")).unwrap();
        assert_eq!(b.procedure, o.procedure);
    }

    #[test]
    fn prepared_matches_direct_search() {
        let prep = PreparedOptimizer::new(3).unwrap();
        for text in ["0.01,0.17,0.51", "0.2,0.2,0.2", "0.5,0.5,0.5", "0.05,0.4,0.3", "0,0.2,1"] {
            let p = priors(text);
            let a = prep.solve::<BigRational>(&p).unwrap();
            let b = find_optimal::<BigRational>(&p).unwrap();
            assert_eq!(a.value, b.value, "{text}");
            // with priors of 0 or 1 some branches weigh nothing and any tree ties there
            if p.values().iter().all(|&x| x > 0.0 && x < 1.0) {
                assert_eq!(a.procedure, b.procedure, "{text}");
            }
        }
    }

    #[test]
    fn uniform_point_value_is_n() {
        for n in 1..=4 {
            let p = PriorVector::from_f64(&vec![0.5; n]).unwrap();
            let o = find_optimal::<BigRational>(&p).unwrap();
            assert_eq!(o.value, BigRational::from_integer(n.into()));
        }
    }

    #[test]
    fn subtree_search_on_a_node_set() {
        let p = priors("0.01,0.17,0.51");
        let set = OutcomeSet::from_bit_strings(3, &["010", "011", "100", "101", "110", "111"]).unwrap();
        let (node, value) = find_optimal_on::<BigRational>(&p, &set).unwrap();
        assert_eq!(node.pool().unwrap().indices(), vec![1, 3]);
        let weighted = crate::probability::subtree_weighted_length::<BigRational>(&node, &p).unwrap();
        assert_eq!(weighted, value);
    }

    #[test]
    fn limits() {
        let p = PriorVector::from_f64(&[0.1; 9]).unwrap();
        assert!(matches!(
            find_optimal::<f64>(&p),
            Err(Error::UnsupportedSize { limit: 8, .. })
        ));
        assert!(brute_force_optimal::<f64>(&priors("0.1,0.1,0.1,0.1")).is_err());
    }

    #[test]
    fn probabilities_at_the_boundary() {
        // an infected-for-sure sample still needs its own test
        let o = find_optimal::<BigRational>(&priors("1,0.5")).unwrap();
        assert_eq!(o.value, BigRational::from_integer(2.into()));
        let o = find_optimal::<BigRational>(&priors("0,0")).unwrap();
        assert!(o.value >= BigRational::one());
        assert!(o.procedure.validate().is_valid());
    }
}
