//! Pools, outcomes, outcome sets and permutations.
//!
//! Encoding used throughout the crate: outcome bit `i` set means sample `i + 1`
//! is INFECTED, cleared means CLEAN. A pooled test on pool `T` is POSITIVE iff
//! some sample in `T` is infected. Priors are infection probabilities. This is
//! the bitwise complement of the leaf labels used in the classic and-test
//! formulation (where `1` marks a negative sample); the two are isomorphic and
//! every structural property carries over unchanged.
//!
//! External representations use 1-based sample indices; outcome strings list
//! sample 1 first (`"01"` = sample 2 infected).

pub mod codec;
pub mod procedure;

use std::cmp::Ordering;
use std::fmt;
use std::sync::OnceLock;

use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Largest sample count representable by a [`Pool`] or [`Outcome`].
pub const MAX_SAMPLES: usize = 64;

/// Largest sample count for which outcome sets (`2^n` bits) are materialized.
pub const MAX_SET_SAMPLES: usize = 16;

#[inline]
pub(crate) fn full_mask(n: usize) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n == 0 || n > MAX_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "sample count must be in 1..={MAX_SAMPLES}, got {n}"
        )));
    }
    Ok(())
}

/// Compare two pool masks in the fixed total order: smaller cardinality
/// first, then lexicographic on the ascending index lists.
pub fn cmp_pool_masks(a: u64, b: u64) -> Ordering {
    a.count_ones().cmp(&b.count_ones()).then_with(|| {
        let diff = a ^ b;
        if diff == 0 {
            Ordering::Equal
        } else if a & (diff & diff.wrapping_neg()) != 0 {
            Ordering::Less
        } else {
            Ordering::Greater
        }
    })
}

/// All non-empty pool masks over `n` samples, in the fixed total order.
pub fn pools_in_order(n: usize) -> &'static [u64] {
    static CACHE: [OnceLock<Vec<u64>>; MAX_SET_SAMPLES + 1] = [const { OnceLock::new() }; MAX_SET_SAMPLES + 1];
    assert!(n <= MAX_SET_SAMPLES, "pool enumeration limited to n <= {MAX_SET_SAMPLES}");
    CACHE[n].get_or_init(|| {
        let mut pools: Vec<u64> = (1..=full_mask(n)).collect();
        pools.sort_by(|&a, &b| cmp_pool_masks(a, b));
        pools
    })
}

fn write_indices(f: &mut fmt::Formatter<'_>, mask: u64) -> fmt::Result {
    let mut first = true;
    for i in BitIter(mask) {
        if !first {
            f.write_str(",")?;
        }
        write!(f, "{}", i + 1)?;
        first = false;
    }
    Ok(())
}

/// Iterator over set bit positions, ascending.
#[derive(Clone, Copy)]
pub(crate) struct BitIter(pub u64);

impl Iterator for BitIter {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            return None;
        }
        let i = self.0.trailing_zeros() as usize;
        self.0 &= self.0 - 1;
        Some(i)
    }
}

/// A non-empty set of samples submitted to one pooled test.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Pool {
    n: u8,
    mask: u64,
}

impl Pool {
    pub fn from_mask(n: usize, mask: u64) -> Result<Self> {
        check_samples(n)?;
        if mask == 0 {
            return Err(Error::InvalidArgument("pool must not be empty".into()));
        }
        if mask & !full_mask(n) != 0 {
            return Err(Error::InvalidArgument(format!(
                "pool {mask:#b} references samples beyond n = {n}"
            )));
        }
        Ok(Pool { n: n as u8, mask })
    }

    /// Build a pool from 1-based sample indices.
    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut mask = 0u64;
        for &i in indices {
            if i == 0 || i > n {
                return Err(Error::InvalidArgument(format!(
                    "sample index {i} outside 1..={n}"
                )));
            }
            mask |= 1 << (i - 1);
        }
        Self::from_mask(n, mask)
    }

    pub(crate) fn new_unchecked(n: usize, mask: u64) -> Self {
        debug_assert!(mask != 0 && mask & !full_mask(n) == 0);
        Pool { n: n as u8, mask }
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn mask(&self) -> u64 {
        self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, sample: usize) -> bool {
        sample >= 1 && sample <= self.n() && self.mask & (1 << (sample - 1)) != 0
    }

    /// Ascending 1-based member indices.
    pub fn indices(&self) -> Vec<usize> {
        BitIter(self.mask).map(|i| i + 1).collect()
    }

    /// Result of testing this pool against a ground truth.
    pub fn test(&self, truth: Outcome) -> TestResult {
        if self.mask & truth.mask() != 0 {
            TestResult::Positive
        } else {
            TestResult::Negative
        }
    }
}

impl Ord for Pool {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_pool_masks(self.mask, other.mask).then(self.n.cmp(&other.n))
    }
}

impl PartialOrd for Pool {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        write_indices(f, self.mask)?;
        f.write_str("}")
    }
}

/// Outcome of one pooled test.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestResult {
    Negative,
    Positive,
}

impl TestResult {
    pub fn is_positive(self) -> bool {
        self == TestResult::Positive
    }
}

impl std::str::FromStr for TestResult {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "-" | "neg" | "negative" | "n" | "0" => Ok(TestResult::Negative),
            "+" | "pos" | "positive" | "p" | "1" => Ok(TestResult::Positive),
            other => Err(Error::InvalidArgument(format!("unknown test result {other:?}"))),
        }
    }
}

/// The infection status of every sample, one bit per sample (1 = infected).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Outcome {
    n: u8,
    mask: u64,
}

impl Outcome {
    pub fn from_mask(n: usize, mask: u64) -> Result<Self> {
        check_samples(n)?;
        if mask & !full_mask(n) != 0 {
            return Err(Error::InvalidArgument(format!(
                "outcome {mask:#b} has bits beyond n = {n}"
            )));
        }
        Ok(Outcome { n: n as u8, mask })
    }

    pub(crate) fn new_unchecked(n: usize, mask: u64) -> Self {
        Outcome { n: n as u8, mask }
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn mask(&self) -> u64 {
        self.mask
    }

    /// Whether 1-based sample `i` is infected.
    pub fn is_infected(&self, sample: usize) -> bool {
        self.mask & (1 << (sample - 1)) != 0
    }

    pub fn to_bit_string(&self) -> String {
        (0..self.n())
            .map(|i| if self.mask & (1 << i) != 0 { '1' } else { '0' })
            .collect()
    }

    pub fn parse(bits: &str) -> Result<Self> {
        let n = bits.len();
        let mut mask = 0u64;
        for (i, c) in bits.chars().enumerate() {
            match c {
                '0' => {}
                '1' => mask |= 1 << i,
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "outcome string {bits:?} must contain only 0 and 1"
                    )))
                }
            }
        }
        Self::from_mask(n, mask)
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

/// Outcomes whose bits are disjoint from `pool`, restricted to the 64 outcomes
/// of word `word` in an `n`-sample universe.
#[inline]
fn negative_word_mask(n: usize, pool: u64, word: usize) -> u64 {
    let low_bits = n.min(6);
    if (word as u64) & (pool >> 6) != 0 {
        return 0;
    }
    let mut m = 1u64;
    for j in 0..low_bits {
        if pool & (1 << j) == 0 {
            m |= m << (1u32 << j);
        }
    }
    m
}

/// A set of outcomes over `n` samples, stored as a `2^n`-bit bitmap indexed
/// by outcome mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct OutcomeSet {
    n: u8,
    words: SmallVec<[u64; 4]>,
}

impl OutcomeSet {
    fn word_count(n: usize) -> usize {
        if n <= 6 {
            1
        } else {
            1 << (n - 6)
        }
    }

    fn check_n(n: usize) -> Result<()> {
        if n > MAX_SET_SAMPLES {
            return Err(Error::unsupported("outcome sets", n, MAX_SET_SAMPLES));
        }
        Ok(())
    }

    pub fn empty(n: usize) -> Result<Self> {
        Self::check_n(n)?;
        Ok(OutcomeSet {
            n: n as u8,
            words: SmallVec::from_elem(0, Self::word_count(n)),
        })
    }

    /// All `2^n` outcomes.
    pub fn full(n: usize) -> Result<Self> {
        let mut s = Self::empty(n)?;
        if n < 6 {
            s.words[0] = (1u64 << (1 << n)) - 1;
        } else {
            s.words.iter_mut().for_each(|w| *w = u64::MAX);
        }
        Ok(s)
    }

    pub fn from_outcomes<I: IntoIterator<Item = Outcome>>(n: usize, outcomes: I) -> Result<Self> {
        let mut s = Self::empty(n)?;
        for o in outcomes {
            if o.n() != n {
                return Err(Error::SizeMismatch {
                    expected: n,
                    actual: o.n(),
                });
            }
            s.insert_mask(o.mask());
        }
        Ok(s)
    }

    /// Parse a list of bit strings, e.g. `["010", "011"]`.
    pub fn from_bit_strings(n: usize, items: &[&str]) -> Result<Self> {
        let outcomes = items.iter().map(|s| Outcome::parse(s)).collect::<Result<Vec<_>>>()?;
        Self::from_outcomes(n, outcomes)
    }

    pub(crate) fn from_words(n: usize, words: SmallVec<[u64; 4]>) -> Self {
        OutcomeSet { n: n as u8, words }
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub(crate) fn words(&self) -> &[u64] {
        &self.words
    }

    /// Low 64 bits of the bitmap; the whole set when `n <= 6`.
    pub fn first_word(&self) -> u64 {
        self.words[0]
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn is_singleton(&self) -> bool {
        self.len() == 1
    }

    pub fn contains(&self, outcome: Outcome) -> bool {
        outcome.n() == self.n() && self.contains_mask(outcome.mask())
    }

    #[inline]
    pub(crate) fn contains_mask(&self, mask: u64) -> bool {
        self.words[(mask >> 6) as usize] & (1 << (mask & 63)) != 0
    }

    #[inline]
    pub(crate) fn insert_mask(&mut self, mask: u64) {
        self.words[(mask >> 6) as usize] |= 1 << (mask & 63);
    }

    pub fn insert(&mut self, outcome: Outcome) -> Result<()> {
        if outcome.n() != self.n() {
            return Err(Error::SizeMismatch {
                expected: self.n(),
                actual: outcome.n(),
            });
        }
        self.insert_mask(outcome.mask());
        Ok(())
    }

    /// Outcome masks in ascending order.
    pub fn masks(&self) -> impl Iterator<Item = u64> + '_ {
        self.words
            .iter()
            .enumerate()
            .flat_map(|(w, &bits)| BitIter(bits).map(move |b| ((w as u64) << 6) | b as u64))
    }

    pub fn iter(&self) -> impl Iterator<Item = Outcome> + '_ {
        let n = self.n();
        self.masks().map(move |m| Outcome::new_unchecked(n, m))
    }

    /// The single member, if this set has exactly one.
    pub fn only(&self) -> Option<Outcome> {
        if self.is_singleton() {
            self.iter().next()
        } else {
            None
        }
    }

    /// Split by a pool test: `(negative part, positive part)`. The negative
    /// part holds the outcomes where every pool member is clean.
    pub fn split(&self, pool: &Pool) -> Result<(OutcomeSet, OutcomeSet)> {
        if pool.n() != self.n() {
            return Err(Error::SizeMismatch {
                expected: self.n(),
                actual: pool.n(),
            });
        }
        Ok(self.split_mask(pool.mask()))
    }

    #[inline]
    pub(crate) fn split_mask(&self, pool: u64) -> (OutcomeSet, OutcomeSet) {
        let n = self.n();
        let mut neg = self.words.clone();
        let mut pos = self.words.clone();
        for (w, (nw, pw)) in neg.iter_mut().zip(pos.iter_mut()).enumerate() {
            let m = negative_word_mask(n, pool, w);
            *nw &= m;
            *pw &= !m;
        }
        (Self::from_words(n, neg), Self::from_words(n, pos))
    }

    /// `(clean-decided, infected-decided)` sample masks: samples clean in
    /// every member, and samples infected in every member.
    pub fn decided(&self) -> (u64, u64) {
        let mut and = full_mask(self.n());
        let mut or = 0u64;
        for m in self.masks() {
            and &= m;
            or |= m;
        }
        if self.is_empty() {
            return (0, 0);
        }
        (!or & full_mask(self.n()), and)
    }

    /// Restrict every outcome to the samples in `live`, renumbering them
    /// consecutively in ascending order.
    pub fn project(&self, live: u64) -> OutcomeSet {
        let k = live.count_ones() as usize;
        let mut out = OutcomeSet::empty(k).expect("projection never grows n");
        for m in self.masks() {
            out.insert_mask(compress(m, live));
        }
        out
    }

    /// Relabel every outcome by `sigma`.
    pub fn permute(&self, sigma: &Permutation) -> Result<OutcomeSet> {
        if sigma.len() != self.n() {
            return Err(Error::SizeMismatch {
                expected: self.n(),
                actual: sigma.len(),
            });
        }
        let mut out = OutcomeSet::empty(self.n())?;
        for m in self.masks() {
            out.insert_mask(sigma.apply_mask(m));
        }
        Ok(out)
    }

    pub fn union(&self, other: &OutcomeSet) -> OutcomeSet {
        let words = self.words.iter().zip(&other.words).map(|(a, b)| a | b).collect();
        Self::from_words(self.n(), words)
    }
}

impl fmt::Debug for OutcomeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(|o| o.to_bit_string())).finish()
    }
}

/// Gather the bits of `value` selected by `select` into the low bits.
#[inline]
pub(crate) fn compress(value: u64, select: u64) -> u64 {
    let mut out = 0u64;
    for (k, i) in BitIter(select).enumerate() {
        out |= ((value >> i) & 1) << k;
    }
    out
}

/// Scatter the low bits of `value` to the positions selected by `select`.
#[inline]
pub(crate) fn expand(value: u64, select: u64) -> u64 {
    let mut out = 0u64;
    for (k, i) in BitIter(select).enumerate() {
        out |= ((value >> k) & 1) << i;
    }
    out
}

/// Clean-decided and infected-decided samples of an outcome set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecidedPoints {
    /// 1-based samples clean in every outcome.
    pub clean: Vec<usize>,
    /// 1-based samples infected in every outcome.
    pub infected: Vec<usize>,
}

pub fn decided_points(outcomes: &OutcomeSet) -> DecidedPoints {
    let (clean, infected) = outcomes.decided();
    DecidedPoints {
        clean: BitIter(clean).map(|i| i + 1).collect(),
        infected: BitIter(infected).map(|i| i + 1).collect(),
    }
}

pub fn split(outcomes: &OutcomeSet, pool: &Pool) -> Result<(OutcomeSet, OutcomeSet)> {
    outcomes.split(pool)
}

/// A bijection on the samples; `image[i]` is where sample `i` (0-based) goes.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Permutation {
    image: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            image: (0..n).collect(),
        }
    }

    /// From 0-based images.
    pub fn new(image: Vec<usize>) -> Result<Self> {
        let n = image.len();
        let mut seen = vec![false; n];
        for &j in &image {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(Error::InvalidArgument(format!("{image:?} is not a permutation")));
            }
        }
        Ok(Permutation { image })
    }

    /// From 1-based images, e.g. `[2, 1, 3]` swaps samples 1 and 2.
    pub fn from_one_based(images: &[usize]) -> Result<Self> {
        if images.contains(&0) {
            return Err(Error::InvalidArgument("permutation images are 1-based".into()));
        }
        Self::new(images.iter().map(|&j| j - 1).collect())
    }

    pub fn transposition(n: usize, a: usize, b: usize) -> Result<Self> {
        if a == 0 || b == 0 || a > n || b > n {
            return Err(Error::InvalidArgument(format!("transposition ({a} {b}) outside 1..={n}")));
        }
        let mut image: Vec<usize> = (0..n).collect();
        image.swap(a - 1, b - 1);
        Ok(Permutation { image })
    }

    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }

    /// 0-based image of 0-based sample `i`.
    pub fn image(&self, i: usize) -> usize {
        self.image[i]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.image.len()];
        for (i, &j) in self.image.iter().enumerate() {
            inv[j] = i;
        }
        Permutation { image: inv }
    }

    /// `self` after `other`: sample `i` goes to `self(other(i))`.
    pub fn compose(&self, other: &Permutation) -> Self {
        Permutation {
            image: other.image.iter().map(|&j| self.image[j]).collect(),
        }
    }

    #[inline]
    pub fn apply_mask(&self, mask: u64) -> u64 {
        let mut out = 0u64;
        for i in BitIter(mask) {
            out |= 1 << self.image[i];
        }
        out
    }

    /// Coordinates rearranged so that `L_{σ(T)}(x) = L_T(σ·x)`:
    /// `(σ·x)[i] = x[σ(i)]`.
    pub fn act_on<T: Clone>(&self, x: &[T]) -> Vec<T> {
        self.image.iter().map(|&j| x[j].clone()).collect()
    }

    /// Every permutation of `n` samples in lexicographic order of images.
    pub fn all(n: usize) -> Vec<Permutation> {
        let mut out = Vec::new();
        let mut current: Vec<usize> = (0..n).collect();
        loop {
            out.push(Permutation {
                image: current.clone(),
            });
            // next lexicographic permutation
            let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| current[i] < current[i + 1]) else {
                break;
            };
            let j = (i + 1..n).rev().find(|&j| current[j] > current[i]).unwrap();
            current.swap(i, j);
            current[i + 1..].reverse();
        }
        out
    }
}
