//! Near-optimal strategies for sizes the optimizer cannot reach: the greedy
//! information-gain procedure and block pairing with small metaprocedures.

use num_rational::BigRational;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::procedure::{Node, Procedure};
use crate::model::{full_mask, pools_in_order, Outcome, OutcomeSet, Pool};
use crate::probability::{probability_table, EvalMode, PriorVector, Scalar, EXPLICIT_EVAL_LIMIT};
use crate::zones::{ZoneMap, ZONE_LIMIT};

pub const GREEDY_LIMIT: usize = EXPLICIT_EVAL_LIMIT;

#[inline]
fn cost_masks(s: u64, and: u64, or: u64, full: u64) -> u32 {
    let f = (s & !and).count_ones();
    let g = (!s & or & full != 0) as u32;
    f + g
}

fn and_or(masks: impl Iterator<Item = u64>, full: u64) -> (u64, u64) {
    masks.fold((full, 0), |(a, o), m| (a & m, o | m))
}

/// Remaining-work estimate for `s` within `outcomes`: the number of samples
/// infected in `s` but not everywhere, plus one if some sample clean in `s`
/// is infected elsewhere.
pub fn cost(s: Outcome, outcomes: &OutcomeSet) -> Result<u32> {
    if s.n() != outcomes.n() {
        return Err(Error::SizeMismatch {
            expected: outcomes.n(),
            actual: s.n(),
        });
    }
    if !outcomes.contains(s) {
        return Err(Error::InvalidArgument(format!("{s} is not in the outcome set")));
    }
    let full = full_mask(s.n());
    let (and, or) = and_or(outcomes.masks(), full);
    Ok(cost_masks(s.mask(), and, or, full))
}

struct Greedy<S> {
    n: usize,
    table: Vec<S>,
}

impl<S: Scalar> Greedy<S> {
    fn new(priors: &PriorVector) -> Result<Self> {
        let n = priors.n();
        if n > GREEDY_LIMIT {
            return Err(Error::unsupported("greedy procedure", n, GREEDY_LIMIT));
        }
        Ok(Greedy {
            n,
            table: probability_table(priors)?,
        })
    }

    /// `None` when the pool leaves one side empty.
    fn gain(&self, pool: u64, masks: &[u64], totals: &[u32]) -> Option<S> {
        let full = full_mask(self.n);
        let (mut neg_and, mut neg_or, mut pos_and, mut pos_or) = (full, 0, full, 0);
        let mut negatives = 0usize;
        for &m in masks {
            if m & pool == 0 {
                neg_and &= m;
                neg_or |= m;
                negatives += 1;
            } else {
                pos_and &= m;
                pos_or |= m;
            }
        }
        if negatives == 0 || negatives == masks.len() {
            return None;
        }
        let mut acc = S::zero();
        for (&m, &total) in masks.iter().zip(totals) {
            if total == 0 {
                continue;
            }
            let part = if m & pool == 0 {
                cost_masks(m, neg_and, neg_or, full)
            } else {
                cost_masks(m, pos_and, pos_or, full)
            };
            acc = acc
                + S::from_u32(total - part) / S::from_u32(total) * self.table[m as usize].clone();
        }
        Some(acc)
    }

    fn totals(&self, masks: &[u64]) -> Vec<u32> {
        let full = full_mask(self.n);
        let (and, or) = and_or(masks.iter().copied(), full);
        masks.iter().map(|&m| cost_masks(m, and, or, full)).collect()
    }

    /// First pool in pool order with the largest gain among informative pools.
    fn choose(&self, masks: &[u64]) -> Option<u64> {
        if masks.len() < 2 {
            return None;
        }
        let totals = self.totals(masks);
        let mut best: Option<(u64, S)> = None;
        for &pool in pools_in_order(self.n) {
            if let Some(g) = self.gain(pool, masks, &totals) {
                if best.as_ref().is_none_or(|(_, b)| g.exceeds(b)) {
                    best = Some((pool, g));
                }
            }
        }
        best.map(|(p, _)| p)
    }

    fn build(&self, masks: Vec<u64>) -> Node {
        match self.choose(&masks) {
            None => Node::Leaf(Outcome::new_unchecked(self.n, masks[0])),
            Some(pool) => {
                let (neg, pos) = masks.into_iter().partition(|m| m & pool == 0);
                Node::test(
                    Pool::new_unchecked(self.n, pool),
                    self.build(neg),
                    self.build(pos),
                )
            }
        }
    }
}

fn check_sizes(outcomes: &OutcomeSet, priors: &PriorVector) -> Result<()> {
    if outcomes.n() != priors.n() {
        return Err(Error::SizeMismatch {
            expected: priors.n(),
            actual: outcomes.n(),
        });
    }
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument("empty outcome set".into()));
    }
    Ok(())
}

/// Information gain of testing `pool` on `outcomes`. Zero when the test
/// leaves one side empty.
pub fn gain<S: Scalar>(pool: &Pool, outcomes: &OutcomeSet, priors: &PriorVector) -> Result<S> {
    check_sizes(outcomes, priors)?;
    if pool.n() != priors.n() || pool.is_empty() {
        return Err(Error::InvalidArgument(format!("{pool} is not a pool over {} samples", priors.n())));
    }
    let greedy = Greedy::<S>::new(priors)?;
    let masks: Vec<u64> = outcomes.masks().collect();
    let totals = greedy.totals(&masks);
    Ok(greedy.gain(pool.mask(), &masks, &totals).unwrap_or_else(S::zero))
}

/// Gains of every pool at one node, in pool order.
#[derive(Debug, Clone, PartialEq)]
pub struct GainTable<S> {
    pub entries: Vec<(Pool, S)>,
}

impl<S: Scalar> GainTable<S> {
    pub fn get(&self, pool: &Pool) -> Option<&S> {
        self.entries.iter().find(|(p, _)| p == pool).map(|(_, g)| g)
    }

    /// The pool the greedy procedure tests here, if any test is informative.
    pub fn best(&self, outcomes: &OutcomeSet) -> Option<&Pool> {
        let mut best: Option<&(Pool, S)> = None;
        for e in &self.entries {
            let (neg, pos) = outcomes.split_mask(e.0.mask());
            if neg.is_empty() || pos.is_empty() {
                continue;
            }
            if best.is_none_or(|b| e.1.exceeds(&b.1)) {
                best = Some(e);
            }
        }
        best.map(|(p, _)| p)
    }
}

pub fn gain_table<S: Scalar>(outcomes: &OutcomeSet, priors: &PriorVector) -> Result<GainTable<S>> {
    check_sizes(outcomes, priors)?;
    let greedy = Greedy::<S>::new(priors)?;
    let masks: Vec<u64> = outcomes.masks().collect();
    let totals = greedy.totals(&masks);
    let entries = pools_in_order(priors.n())
        .iter()
        .map(|&p| {
            let g = greedy.gain(p, &masks, &totals).unwrap_or_else(S::zero);
            (Pool::new_unchecked(priors.n(), p), g)
        })
        .collect();
    Ok(GainTable { entries })
}

/// The greedy pool for one node, `None` once the set is a singleton.
pub fn greedy_choice<S: Scalar>(outcomes: &OutcomeSet, priors: &PriorVector) -> Result<Option<Pool>> {
    check_sizes(outcomes, priors)?;
    let greedy = Greedy::<S>::new(priors)?;
    let masks: Vec<u64> = outcomes.masks().collect();
    Ok(greedy.choose(&masks).map(|p| Pool::new_unchecked(priors.n(), p)))
}

pub fn greedy_procedure<S: Scalar>(priors: &PriorVector) -> Result<Procedure> {
    let greedy = Greedy::<S>::new(priors)?;
    let root = greedy.build((0..1u64 << priors.n()).collect());
    Ok(Procedure::new_unchecked(priors.n(), root))
}

/// Greedy subtree resolving `outcomes`.
pub fn greedy_node<S: Scalar>(outcomes: &OutcomeSet, priors: &PriorVector) -> Result<Node> {
    check_sizes(outcomes, priors)?;
    let greedy = Greedy::<S>::new(priors)?;
    Ok(greedy.build(outcomes.masks().collect()))
}

pub fn greedy_procedure_in(priors: &PriorVector, mode: EvalMode) -> Result<Procedure> {
    match mode {
        EvalMode::Float => greedy_procedure::<f64>(priors),
        EvalMode::Exact => greedy_procedure::<BigRational>(priors),
    }
}

/// Random partition of the samples into blocks of `k`, the last one possibly smaller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingPlan {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    /// 0-based sample indices, ascending within each block.
    pub blocks: Vec<Vec<usize>>,
}

impl PairingPlan {
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > 64 {
            return Err(Error::unsupported("pairing", n, 64));
        }
        if k == 0 || k > ZONE_LIMIT {
            return Err(Error::InvalidArgument(format!(
                "block size must be in 1..={ZONE_LIMIT}, got {k}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let blocks = order
            .chunks(k)
            .map(|c| {
                let mut b = c.to_vec();
                b.sort_unstable();
                b
            })
            .collect();
        Ok(PairingPlan { n, k, seed, blocks })
    }

    pub fn block_mask(&self, b: usize) -> u64 {
        self.blocks[b].iter().fold(0, |m, &i| m | 1 << i)
    }

    /// Pool of block `b`'s local procedure, renumbered to all samples.
    pub fn to_global(&self, b: usize, local: &Pool) -> Pool {
        let mask = local
            .indices()
            .iter()
            .fold(0u64, |m, &i| m | 1 << self.blocks[b][i - 1]);
        Pool::new_unchecked(self.n, mask)
    }
}

/// A pairing plan with the procedure chosen for each block.
#[derive(Debug, Clone, PartialEq)]
pub struct Pairing {
    pub plan: PairingPlan,
    pub procedures: Vec<Procedure>,
    /// Expected tests per block.
    pub expected: Vec<f64>,
}

impl Pairing {
    pub fn expected_length(&self) -> f64 {
        self.expected.iter().sum()
    }
}

/// Splits the samples into seeded random blocks of `k` and gives each block
/// the best procedure of the zone map for its size, evaluated at the block's
/// priors. Blocks of one sample are tested alone and need no map.
pub fn pairing_strategy(priors: &PriorVector, k: usize, seed: u64, maps: &[&ZoneMap]) -> Result<Pairing> {
    let plan = PairingPlan::new(priors.n(), k, seed)?;
    let mut procedures = Vec::with_capacity(plan.blocks.len());
    let mut expected = Vec::with_capacity(plan.blocks.len());
    for b in 0..plan.blocks.len() {
        let local = priors.restrict(plan.block_mask(b));
        let size = local.n();
        if size == 1 {
            procedures.push(Procedure::naive(1)?);
            expected.push(1.0);
            continue;
        }
        let map = maps
            .iter()
            .find(|m| m.n() == size)
            .ok_or(Error::MissingZoneMap(size))?;
        let (proc, value) = map.evaluate_metaprocedure(local.values())?;
        procedures.push(proc);
        expected.push(value);
    }
    Ok(Pairing {
        plan,
        procedures,
        expected,
    })
}
