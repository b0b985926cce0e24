//! Running a strategy one test at a time, and Monte Carlo simulation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heuristics::{greedy_choice, greedy_node, greedy_procedure, pairing_strategy, PairingPlan, GREEDY_LIMIT};
use crate::model::codec;
use crate::model::procedure::{Node, Procedure};
use crate::model::{Outcome, OutcomeSet, Pool, TestResult};
use crate::optimizer::{find_optimal, OPTIMIZER_LIMIT};
use crate::probability::{mask_probability, PriorVector};
use crate::zones::ZoneMap;

/// How a session picks its tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Strategy {
    /// One sample at a time, in index order.
    Naive,
    Optimal,
    Greedy,
    /// The zone-map procedure for the priors; needs a map for n.
    Metaprocedure,
    Pairing { k: usize, seed: u64 },
    /// A procedure supplied by the caller.
    Custom,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Naive => write!(f, "naive"),
            Strategy::Optimal => write!(f, "optimal"),
            Strategy::Greedy => write!(f, "greedy"),
            Strategy::Metaprocedure => write!(f, "metaprocedure"),
            Strategy::Pairing { k, seed } => write!(f, "pairing:{k}:{seed}"),
            Strategy::Custom => write!(f, "custom"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// `naive`, `optimal`, `greedy`, `metaprocedure`, or `pairing:K[:SEED]`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let mut parts = lower.split(':');
        let head = parts.next().unwrap_or_default();
        let strategy = match head {
            "naive" => Strategy::Naive,
            "optimal" => Strategy::Optimal,
            "greedy" => Strategy::Greedy,
            "metaprocedure" | "meta" => Strategy::Metaprocedure,
            "custom" => Strategy::Custom,
            "pairing" => {
                let bad = || Error::InvalidArgument(format!("expected pairing:K[:SEED], got '{s}'"));
                let k = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                let seed = match parts.next() {
                    Some(t) => t.parse().map_err(|_| bad())?,
                    None => 0,
                };
                Strategy::Pairing { k, seed }
            }
            _ => return Err(Error::InvalidArgument(format!("unknown strategy '{s}'"))),
        };
        if parts.next().is_some() {
            return Err(Error::InvalidArgument(format!("unknown strategy '{s}'")));
        }
        Ok(strategy)
    }
}

/// What a session may use besides the priors.
#[derive(Debug, Clone, Copy)]
pub struct SessionContext<'a> {
    pub zone_maps: &'a [&'a ZoneMap],
    pub optimizer_limit: usize,
}

impl Default for SessionContext<'_> {
    fn default() -> Self {
        SessionContext {
            zone_maps: &[],
            optimizer_limit: OPTIMIZER_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Plan {
    Naive,
    Tree(Node),
    /// Chooses each pool when asked; `outcomes` is the surviving set.
    Greedy { outcomes: OutcomeSet },
    Pairing {
        plan: PairingPlan,
        trees: Vec<Node>,
        expected: Vec<f64>,
        /// Local outcomes of the finished blocks.
        finished: Vec<Outcome>,
        /// Results inside the current block.
        path: Vec<TestResult>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based sample indices.
    #[serde(with = "pool_indices")]
    pub pool: Pool,
    pub result: TestResult,
}

mod pool_indices {
    use super::Pool;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(pool: &Pool, s: S) -> Result<S::Ok, S::Error> {
        pool.indices().serialize(s)
    }

    /// The sample count is not known here; it is fixed up by `Session::restore`.
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pool, D::Error> {
        let indices = Vec::<usize>::deserialize(d)?;
        Pool::from_indices(64, &indices).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Complete,
}

/// Either the next pool to test or the final answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Next {
    Test(Pool),
    Complete(Outcome),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    id: String,
    priors: PriorVector,
    strategy: Strategy,
    plan: Plan,
    history: Vec<Step>,
}

fn node_at<'a>(root: &'a Node, path: &[TestResult]) -> &'a Node {
    path.iter()
        .fold(root, |node, &r| node.child(r).expect("paths only follow test nodes"))
}

/// Expected further tests below `node`, conditional on reaching it. When the
/// node cannot be reached under the priors, leaves count equally.
fn conditional_remaining(node: &Node, priors: &PriorVector) -> f64 {
    let (mut weighted, mut mass, mut depth_sum, mut leaves) = (0.0, 0.0, 0.0, 0.0);
    node.for_each_leaf(&mut |o, d| {
        let p: f64 = mask_probability(o.mask(), priors);
        weighted += d as f64 * p;
        mass += p;
        depth_sum += d as f64;
        leaves += 1.0;
    });
    if mass > 0.0 {
        weighted / mass
    } else {
        depth_sum / leaves
    }
}

fn leaf_masks(node: &Node) -> (u64, u64, u64) {
    let (mut and, mut or, mut count) = (u64::MAX, 0u64, 0u64);
    node.for_each_leaf(&mut |o, _| {
        and &= o.mask();
        or |= o.mask();
        count += 1;
    });
    (and, or, count)
}

fn zone_map_for<'a>(ctx: &SessionContext<'a>, n: usize) -> Result<&'a ZoneMap> {
    ctx.zone_maps
        .iter()
        .copied()
        .find(|m| m.n() == n)
        .ok_or(Error::MissingZoneMap(n))
}

impl Session {
    pub fn start(id: impl Into<String>, priors: PriorVector, strategy: Strategy, ctx: &SessionContext) -> Result<Self> {
        let plan = Self::initial_plan(&priors, strategy, ctx, None)?;
        Ok(Session {
            id: id.into(),
            priors,
            strategy,
            plan,
            history: Vec::new(),
        })
    }

    fn initial_plan(
        priors: &PriorVector,
        strategy: Strategy,
        ctx: &SessionContext,
        stored: Option<&[Node]>,
    ) -> Result<Plan> {
        let n = priors.n();
        Ok(match strategy {
            Strategy::Naive => Plan::Naive,
            Strategy::Optimal | Strategy::Metaprocedure | Strategy::Custom
                if stored.is_some_and(|s| s.len() == 1) =>
            {
                Plan::Tree(stored.expect("checked")[0].clone())
            }
            Strategy::Custom => {
                return Err(Error::InvalidArgument("a custom session needs its procedure".into()))
            }
            Strategy::Optimal => {
                if n > ctx.optimizer_limit {
                    return Err(Error::unsupported("optimal sessions", n, ctx.optimizer_limit));
                }
                Plan::Tree(find_optimal::<f64>(priors)?.procedure.into_root())
            }
            Strategy::Metaprocedure => {
                let map = zone_map_for(ctx, n)?;
                Plan::Tree(map.evaluate_metaprocedure(priors.values())?.0.into_root())
            }
            Strategy::Greedy => {
                if n > GREEDY_LIMIT {
                    return Err(Error::unsupported("greedy sessions", n, GREEDY_LIMIT));
                }
                Plan::Greedy {
                    outcomes: OutcomeSet::full(n)?,
                }
            }
            Strategy::Pairing { k, seed } => {
                let plan = PairingPlan::new(n, k, seed)?;
                let (trees, expected) = match stored {
                    Some(trees) if trees.len() == plan.blocks.len() => {
                        let expected = trees
                            .iter()
                            .enumerate()
                            .map(|(b, t)| conditional_remaining(t, &priors.restrict(plan.block_mask(b))))
                            .collect();
                        (trees.to_vec(), expected)
                    }
                    _ => {
                        let pairing = pairing_strategy(priors, k, seed, ctx.zone_maps)?;
                        let trees = pairing.procedures.into_iter().map(|p| p.into_root()).collect();
                        (trees, pairing.expected)
                    }
                };
                Plan::Pairing {
                    plan,
                    trees,
                    expected,
                    finished: Vec::new(),
                    path: Vec::new(),
                }
            }
        })
    }

    /// Session that follows a given procedure.
    pub fn from_procedure(id: impl Into<String>, priors: PriorVector, procedure: Procedure) -> Result<Self> {
        if procedure.n() != priors.n() {
            return Err(Error::SizeMismatch {
                expected: priors.n(),
                actual: procedure.n(),
            });
        }
        Ok(Session {
            id: id.into(),
            priors,
            strategy: Strategy::Custom,
            plan: Plan::Tree(procedure.into_root()),
            history: Vec::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n(&self) -> usize {
        self.priors.n()
    }

    pub fn priors(&self) -> &PriorVector {
        &self.priors
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn history(&self) -> &[Step] {
        &self.history
    }

    pub fn tests_used(&self) -> usize {
        self.history.len()
    }

    pub fn status(&self) -> Status {
        match self.next() {
            Next::Test(_) => Status::Running,
            Next::Complete(_) => Status::Complete,
        }
    }

    pub fn next(&self) -> Next {
        let n = self.n();
        match &self.plan {
            Plan::Naive => {
                let k = self.history.len();
                if k < n {
                    Next::Test(Pool::new_unchecked(n, 1 << k))
                } else {
                    let mask = self
                        .history
                        .iter()
                        .enumerate()
                        .fold(0u64, |m, (i, s)| m | (s.result.is_positive() as u64) << i);
                    Next::Complete(Outcome::new_unchecked(n, mask))
                }
            }
            Plan::Tree(root) => {
                let path: Vec<TestResult> = self.history.iter().map(|s| s.result).collect();
                match node_at(root, &path) {
                    Node::Leaf(o) => Next::Complete(*o),
                    Node::Test { pool, .. } => Next::Test(*pool),
                }
            }
            Plan::Greedy { outcomes } => match outcomes.only() {
                Some(o) => Next::Complete(o),
                None => Next::Test(
                    greedy_choice::<f64>(outcomes, &self.priors)
                        .expect("sizes were checked at start")
                        .expect("a set with two outcomes has an informative pool"),
                ),
            },
            Plan::Pairing {
                plan,
                trees,
                finished,
                path,
                ..
            } => {
                let b = finished.len();
                if b == trees.len() {
                    let mask = finished.iter().enumerate().fold(0u64, |m, (b, o)| {
                        plan.blocks[b]
                            .iter()
                            .enumerate()
                            .fold(m, |m, (j, &i)| m | (o.mask() >> j & 1) << i)
                    });
                    return Next::Complete(Outcome::new_unchecked(n, mask));
                }
                match node_at(&trees[b], path) {
                    Node::Test { pool, .. } => Next::Test(plan.to_global(b, pool)),
                    Node::Leaf(_) => unreachable!("finished blocks advance immediately"),
                }
            }
        }
    }

    pub fn next_pool(&self) -> Option<Pool> {
        match self.next() {
            Next::Test(p) => Some(p),
            Next::Complete(_) => None,
        }
    }

    pub fn outcome(&self) -> Option<Outcome> {
        match self.next() {
            Next::Complete(o) => Some(o),
            Next::Test(_) => None,
        }
    }

    pub fn record_result(&mut self, result: TestResult) -> Result<Next> {
        let pool = match self.next() {
            Next::Complete(_) => return Err(Error::SessionComplete),
            Next::Test(p) => p,
        };
        match &mut self.plan {
            Plan::Naive | Plan::Tree(_) => {}
            Plan::Greedy { outcomes } => {
                let (neg, pos) = outcomes.split(&pool)?;
                *outcomes = if result.is_positive() { pos } else { neg };
            }
            Plan::Pairing {
                trees,
                finished,
                path,
                ..
            } => {
                path.push(result);
                let b = finished.len();
                if let Node::Leaf(o) = node_at(&trees[b], path) {
                    finished.push(*o);
                    path.clear();
                }
            }
        }
        self.history.push(Step { pool, result });
        Ok(self.next())
    }

    /// Expected number of further tests given the results so far.
    pub fn expected_remaining(&self) -> Result<f64> {
        let n = self.n();
        Ok(match &self.plan {
            Plan::Naive => (n - self.history.len()) as f64,
            Plan::Tree(root) => {
                let path: Vec<TestResult> = self.history.iter().map(|s| s.result).collect();
                conditional_remaining(node_at(root, &path), &self.priors)
            }
            Plan::Greedy { outcomes } => {
                conditional_remaining(&greedy_node::<f64>(outcomes, &self.priors)?, &self.priors)
            }
            Plan::Pairing {
                plan,
                trees,
                expected,
                finished,
                path,
            } => {
                let b = finished.len();
                if b == trees.len() {
                    0.0
                } else {
                    let local = self.priors.restrict(plan.block_mask(b));
                    conditional_remaining(node_at(&trees[b], path), &local)
                        + expected[b + 1..].iter().sum::<f64>()
                }
            }
        })
    }

    /// Per-sample status: `0` known clean, `1` known infected, `?` still open.
    pub fn known(&self) -> String {
        let n = self.n();
        let (clean, infected) = match &self.plan {
            Plan::Naive => self.history.iter().enumerate().fold((0u64, 0u64), |(c, i), (k, s)| {
                if s.result.is_positive() {
                    (c, i | 1 << k)
                } else {
                    (c | 1 << k, i)
                }
            }),
            Plan::Tree(root) => {
                let path: Vec<TestResult> = self.history.iter().map(|s| s.result).collect();
                let (and, or, _) = leaf_masks(node_at(root, &path));
                (!or, and)
            }
            Plan::Greedy { outcomes } => outcomes.decided(),
            Plan::Pairing {
                plan,
                trees,
                finished,
                path,
                ..
            } => {
                let mut known = (0u64, 0u64);
                let mut put = |b: usize, clean_local: u64, inf_local: u64| {
                    for (j, &i) in plan.blocks[b].iter().enumerate() {
                        known.0 |= (clean_local >> j & 1) << i;
                        known.1 |= (inf_local >> j & 1) << i;
                    }
                };
                for (b, o) in finished.iter().enumerate() {
                    put(b, !o.mask(), o.mask());
                }
                if finished.len() < trees.len() {
                    let (and, or, _) = leaf_masks(node_at(&trees[finished.len()], path));
                    put(finished.len(), !or, and);
                }
                known
            }
        };
        (0..n)
            .map(|i| match (clean >> i & 1, infected >> i & 1) {
                (1, _) => '0',
                (_, 1) => '1',
                _ => '?',
            })
            .collect()
    }

    /// Number of outcomes still consistent with the results, if it fits.
    pub fn remaining_outcomes(&self) -> Option<u64> {
        match &self.plan {
            Plan::Tree(root) => {
                let path: Vec<TestResult> = self.history.iter().map(|s| s.result).collect();
                Some(leaf_masks(node_at(root, &path)).2)
            }
            Plan::Greedy { outcomes } => Some(outcomes.len() as u64),
            _ => {
                let open = self.known().chars().filter(|&c| c == '?').count() as u32;
                if let Plan::Pairing { trees, finished, path, .. } = &self.plan {
                    if finished.len() < trees.len() {
                        let block = &trees[finished.len()];
                        let (and, or, count) = leaf_masks(node_at(block, path));
                        let block_open = (and ^ or).count_ones();
                        let rest = open - block_open;
                        return 1u64.checked_shl(rest).and_then(|r| r.checked_mul(count));
                    }
                }
                1u64.checked_shl(open)
            }
        }
    }

    /// Encoding of the part of a materialized procedure still ahead.
    pub fn remaining_tree(&self) -> Option<String> {
        match &self.plan {
            Plan::Tree(root) => {
                let path: Vec<TestResult> = self.history.iter().map(|s| s.result).collect();
                Some(codec::encode_node(node_at(root, &path)))
            }
            Plan::Pairing { trees, finished, path, .. } if finished.len() < trees.len() => {
                Some(codec::encode_node(node_at(&trees[finished.len()], path)))
            }
            _ => None,
        }
    }

    fn stored_trees(&self) -> Vec<String> {
        match &self.plan {
            Plan::Tree(root) => vec![codec::encode_node(root)],
            Plan::Pairing { trees, .. } => trees.iter().map(codec::encode_node).collect(),
            _ => Vec::new(),
        }
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let next = self.next();
        SessionSnapshot {
            id: self.id.clone(),
            n: self.n(),
            priors: self.priors.to_strings(),
            strategy: self.strategy,
            step: self.history.len(),
            history: self.history.clone(),
            status: self.status(),
            next_pool: match next {
                Next::Test(p) => Some(p.indices()),
                Next::Complete(_) => None,
            },
            outcome: match next {
                Next::Complete(o) => Some(o.to_bit_string()),
                Next::Test(_) => None,
            },
            known: self.known(),
            remaining_outcomes: self.remaining_outcomes(),
            expected_remaining: self.expected_remaining().ok(),
            remaining_tree: self.remaining_tree(),
            procedures: self.stored_trees(),
        }
    }

    /// Rebuilds a session from its snapshot, reusing stored procedures and
    /// replaying the history.
    pub fn restore(snapshot: &SessionSnapshot, ctx: &SessionContext) -> Result<Self> {
        let (priors, _) = PriorVector::parse_components(&snapshot.priors)?;
        if priors.n() != snapshot.n {
            return Err(Error::SizeMismatch {
                expected: snapshot.n,
                actual: priors.n(),
            });
        }
        let stored: Vec<Node> = snapshot
            .procedures
            .iter()
            .map(|t| {
                let (n, node) = codec::decode_unchecked(t)?;
                let pairing = matches!(snapshot.strategy, Strategy::Pairing { .. });
                if !pairing && n != snapshot.n {
                    return Err(Error::SizeMismatch {
                        expected: snapshot.n,
                        actual: n,
                    });
                }
                Ok(Procedure::new(n, node)?.into_root())
            })
            .collect::<Result<_>>()?;
        let plan = Self::initial_plan(&priors, snapshot.strategy, ctx, (!stored.is_empty()).then_some(&stored[..]))?;
        let mut session = Session {
            id: snapshot.id.clone(),
            priors,
            strategy: snapshot.strategy,
            plan,
            history: Vec::new(),
        };
        for step in &snapshot.history {
            let expected = session.next_pool().ok_or(Error::SessionComplete)?;
            if expected.indices() != step.pool.indices() {
                return Err(Error::InvalidArgument(format!(
                    "history step {} tested {} but the strategy asks for {expected}",
                    session.history.len() + 1,
                    step.pool
                )));
            }
            session.record_result(step.result)?;
        }
        Ok(session)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub id: String,
    pub n: usize,
    pub priors: Vec<String>,
    pub strategy: Strategy,
    /// Number of recorded results.
    pub step: usize,
    pub history: Vec<Step>,
    pub status: Status,
    pub next_pool: Option<Vec<usize>>,
    pub outcome: Option<String>,
    pub known: String,
    pub remaining_outcomes: Option<u64>,
    pub expected_remaining: Option<f64>,
    pub remaining_tree: Option<String>,
    /// Materialized procedures (one tree, or one per pairing block).
    #[serde(default)]
    pub procedures: Vec<String>,
}

pub const MAX_TRIALS: u64 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub trials: u64,
    pub mean_tests: f64,
    pub std_error: f64,
    /// `histogram[t]` trials used exactly `t` tests.
    pub histogram: Vec<u64>,
    /// Exact expectation of the strategy at these priors.
    pub expected_tests: f64,
}

enum Runner {
    Naive(usize),
    Tree(Node),
    Blocks(PairingPlan, Vec<Node>),
}

impl Runner {
    fn max_tests(&self) -> usize {
        match self {
            Runner::Naive(n) => *n,
            Runner::Tree(t) => t.height(),
            Runner::Blocks(_, ts) => ts.iter().map(Node::height).sum(),
        }
    }

    fn run(&self, truth: u64, n: usize) -> u32 {
        match self {
            Runner::Naive(n) => *n as u32,
            Runner::Tree(t) => t.execute(Outcome::new_unchecked(n, truth)).1,
            Runner::Blocks(plan, trees) => trees
                .iter()
                .enumerate()
                .map(|(b, t)| {
                    let local = plan.blocks[b]
                        .iter()
                        .enumerate()
                        .fold(0u64, |m, (j, &i)| m | (truth >> i & 1) << j);
                    t.execute(Outcome::new_unchecked(plan.blocks[b].len(), local)).1
                })
                .sum(),
        }
    }
}

/// Draws ground truths from the priors and runs the strategy on each. Trial
/// `t` uses its own ChaCha8 stream `t` under `seed`, so results do not depend
/// on thread count.
pub fn simulate(
    priors: &PriorVector,
    strategy: Strategy,
    trials: u64,
    seed: u64,
    ctx: &SessionContext,
) -> Result<SimulationReport> {
    check_trials(trials)?;
    let (runner, expected_tests) = runner_for(priors, strategy, ctx)?;
    Ok(run_trials(priors, strategy, &runner, expected_tests, trials, seed))
}

fn runner_for(priors: &PriorVector, strategy: Strategy, ctx: &SessionContext) -> Result<(Runner, f64)> {
    let n = priors.n();
    Ok(match strategy {
        Strategy::Naive => (Runner::Naive(n), n as f64),
        Strategy::Greedy => {
            let tree = greedy_procedure::<f64>(priors)?.into_root();
            let e = conditional_remaining(&tree, priors);
            (Runner::Tree(tree), e)
        }
        _ => match Session::initial_plan(priors, strategy, ctx, None)? {
            Plan::Tree(tree) => {
                let e = conditional_remaining(&tree, priors);
                (Runner::Tree(tree), e)
            }
            Plan::Pairing { plan, trees, expected, .. } => (Runner::Blocks(plan, trees), expected.iter().sum()),
            _ => unreachable!("other strategies have trees"),
        },
    })
}

pub const MAX_UNIFORM_TRIALS: u64 = 1_000_000;

/// Like [`simulate`], but each trial first draws its priors uniformly from
/// `[0, 1]^n` and builds the strategy for them. `expected_tests` is the mean
/// exact expectation over the drawn priors.
pub fn simulate_uniform(
    n: usize,
    strategy: Strategy,
    trials: u64,
    seed: u64,
    ctx: &SessionContext,
) -> Result<SimulationReport> {
    if trials == 0 || trials > MAX_UNIFORM_TRIALS {
        return Err(Error::InvalidArgument(format!("trials must be in 1..={MAX_UNIFORM_TRIALS}")));
    }
    if n == 0 || n > 64 {
        return Err(Error::unsupported("simulation", n, 64));
    }
    if matches!(strategy, Strategy::Custom) {
        return Err(Error::InvalidArgument("uniform simulation needs a named strategy".into()));
    }
    let per_trial = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t);
            let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let priors = PriorVector::from_f64(&p)?;
            let (runner, e) = runner_for(&priors, strategy, ctx)?;
            let truth = p
                .iter()
                .enumerate()
                .fold(0u64, |m, (i, &pi)| m | ((rng.random::<f64>() < pi) as u64) << i);
            Ok((runner.run(truth, n), e))
        })
        .collect::<Result<Vec<_>>>()?;
    let bins = per_trial.iter().map(|&(t, _)| t as usize).max().unwrap_or(0) + 1;
    let mut histogram = vec![0u64; bins];
    for &(t, _) in &per_trial {
        histogram[t as usize] += 1;
    }
    let expected_tests = per_trial.iter().map(|&(_, e)| e).sum::<f64>() / trials as f64;
    Ok(report(strategy, seed, trials, histogram, expected_tests))
}

/// Zone map sizes a strategy needs for `n` samples.
pub fn required_zone_maps(strategy: Strategy, n: usize) -> Result<Vec<usize>> {
    Ok(match strategy {
        Strategy::Metaprocedure => vec![n],
        Strategy::Pairing { k, seed } => {
            let mut sizes: Vec<usize> = PairingPlan::new(n, k, seed)?
                .blocks
                .iter()
                .map(Vec::len)
                .filter(|&s| s > 1)
                .collect();
            sizes.sort_unstable();
            sizes.dedup();
            sizes
        }
        _ => Vec::new(),
    })
}

/// [`simulate`] for a given procedure.
pub fn simulate_procedure(priors: &PriorVector, procedure: &Procedure, trials: u64, seed: u64) -> Result<SimulationReport> {
    check_trials(trials)?;
    if procedure.n() != priors.n() {
        return Err(Error::SizeMismatch {
            expected: priors.n(),
            actual: procedure.n(),
        });
    }
    let tree = procedure.root().clone();
    let e = conditional_remaining(&tree, priors);
    Ok(run_trials(priors, Strategy::Custom, &Runner::Tree(tree), e, trials, seed))
}

fn check_trials(trials: u64) -> Result<()> {
    if trials == 0 || trials > MAX_TRIALS {
        return Err(Error::InvalidArgument(format!("trials must be in 1..={MAX_TRIALS}")));
    }
    Ok(())
}

fn run_trials(
    priors: &PriorVector,
    strategy: Strategy,
    runner: &Runner,
    expected_tests: f64,
    trials: u64,
    seed: u64,
) -> SimulationReport {
    let n = priors.n();
    let p = priors.values().to_vec();
    let bins = runner.max_tests() + 1;
    let histogram = (0..trials)
        .into_par_iter()
        .fold(
            || vec![0u64; bins],
            |mut h, t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t);
                let truth = p
                    .iter()
                    .enumerate()
                    .fold(0u64, |m, (i, &pi)| m | ((rng.random::<f64>() < pi) as u64) << i);
                h[runner.run(truth, n) as usize] += 1;
                h
            },
        )
        .reduce(
            || vec![0u64; bins],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    report(strategy, seed, trials, histogram, expected_tests)
}

fn report(strategy: Strategy, seed: u64, trials: u64, histogram: Vec<u64>, expected_tests: f64) -> SimulationReport {
    let total = trials as f64;
    let mean = histogram.iter().enumerate().map(|(t, &c)| t as f64 * c as f64).sum::<f64>() / total;
    let var = histogram
        .iter()
        .enumerate()
        .map(|(t, &c)| (t as f64 - mean).powi(2) * c as f64)
        .sum::<f64>()
        / (total - 1.0).max(1.0);
    SimulationReport {
        strategy,
        seed,
        trials,
        mean_tests: mean,
        std_error: (var / total).sqrt(),
        histogram,
        expected_tests,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn priors(s: &str) -> PriorVector {
        PriorVector::parse(s).unwrap().0
    }

    fn start(p: &str, strategy: Strategy) -> Session {
        Session::start("t", priors(p), strategy, &SessionContext::default()).unwrap()
    }

    #[test]
    fn strategy_text() {
        for s in ["naive", "optimal", "greedy", "metaprocedure", "pairing:2:9", "custom"] {
            assert_eq!(s.parse::<Strategy>().unwrap().to_string(), s);
        }
        assert_eq!("pairing:3".parse::<Strategy>().unwrap(), Strategy::Pairing { k: 3, seed: 0 });
        assert!("pairing".parse::<Strategy>().is_err());
        assert!("best".parse::<Strategy>().is_err());
        let json = serde_json::to_string(&Strategy::Pairing { k: 2, seed: 1 }).unwrap();
        assert_eq!(json, r#"{"kind":"pairing","k":2,"seed":1}"#);
    }

    #[test]
    fn optimal_session_at_the_counterexample_point() {
        let mut s = start("0.01,0.17,0.51", Strategy::Optimal);
        assert_eq!(s.next_pool().unwrap().indices(), vec![1, 2, 3]);
        let next = s.record_result(TestResult::Negative).unwrap();
        assert_eq!(next, Next::Complete(Outcome::parse("000").unwrap()));
        assert_eq!(s.tests_used(), 1);
        assert_eq!(s.expected_remaining().unwrap(), 0.0);
        assert!(matches!(s.record_result(TestResult::Positive), Err(Error::SessionComplete)));
    }

    #[test]
    fn naive_region_starts_with_single_samples() {
        let s = start("0.9,0.9", Strategy::Optimal);
        assert_eq!(s.next_pool().unwrap().indices(), vec![1]);
        let mut s = start("0.9,0.9", Strategy::Naive);
        s.record_result(TestResult::Positive).unwrap();
        assert_eq!(s.next_pool().unwrap().indices(), vec![2]);
        assert_eq!(s.known(), "1?");
        assert_eq!(start("0.3", Strategy::Optimal).next_pool().unwrap().indices(), vec![1]);
    }

    #[test]
    fn expected_remaining_after_positive_pool() {
        let mut s = start("0.1,0.2", Strategy::Optimal);
        let root = s.expected_remaining().unwrap();
        assert!((root - 1.38).abs() < 1e-12);
        s.record_result(TestResult::Positive).unwrap();
        // survivors 01, 10, 11 with further depths 1, 2, 2
        let (p01, p10, p11) = (0.9 * 0.2, 0.1 * 0.8, 0.1 * 0.2);
        let want = (p01 + 2.0 * p10 + 2.0 * p11) / (p01 + p10 + p11);
        assert!((s.expected_remaining().unwrap() - want).abs() < 1e-12);
        assert_eq!(s.remaining_outcomes(), Some(3));
        assert_eq!(s.known(), "??");
    }

    #[test]
    fn greedy_session_follows_greedy_tree() {
        let p = priors("0.01,0.17,0.51");
        let tree = greedy_procedure::<f64>(&p).unwrap();
        for truth in 0..8u64 {
            let mut s = start("0.01,0.17,0.51", Strategy::Greedy);
            let o = Outcome::from_mask(3, truth).unwrap();
            while let Some(pool) = s.next_pool() {
                s.record_result(pool.test(o)).unwrap();
            }
            assert_eq!(s.outcome(), Some(o));
            assert_eq!(s.tests_used() as u32, tree.execute(o).1);
        }
    }

    #[test]
    fn pairing_session_walks_blocks() {
        let mut s = start("0.9,0.9,0.9,0.9", Strategy::Pairing { k: 1, seed: 3 });
        let truth = Outcome::parse("1010").unwrap();
        let first = s.next_pool().unwrap();
        assert_eq!(first.len(), 1);
        while let Some(pool) = s.next_pool() {
            s.record_result(pool.test(truth)).unwrap();
        }
        assert_eq!(s.outcome(), Some(truth));
        assert_eq!(s.tests_used(), 4);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = start("0.1,0.2,0.3", Strategy::Optimal);
        s.record_result(TestResult::Positive).unwrap();
        let snap = s.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let back: SessionSnapshot = serde_json::from_str(&json).unwrap();
        let restored = Session::restore(&back, &SessionContext::default()).unwrap();
        assert_eq!(restored, s);
        assert_eq!(restored.snapshot(), snap);
    }

    #[test]
    fn uniform_simulation() {
        let ctx = SessionContext::default();
        let naive = simulate_uniform(3, Strategy::Naive, 500, 1, &ctx).unwrap();
        assert_eq!(naive.mean_tests, 3.0);
        assert_eq!(naive.expected_tests, 3.0);
        let a = simulate_uniform(2, Strategy::Optimal, 2000, 4, &ctx).unwrap();
        assert_eq!(a, simulate_uniform(2, Strategy::Optimal, 2000, 4, &ctx).unwrap());
        assert!(a.expected_tests < 2.0 && a.expected_tests > 1.5);
        assert!((a.mean_tests - a.expected_tests).abs() < 4.0 * a.std_error + 0.02);
        assert!(simulate_uniform(2, Strategy::Metaprocedure, 10, 0, &ctx).is_err());
        assert!(simulate_uniform(2, Strategy::Custom, 10, 0, &ctx).is_err());
    }

    #[test]
    fn zone_maps_needed() {
        assert_eq!(required_zone_maps(Strategy::Optimal, 3).unwrap(), Vec::<usize>::new());
        assert_eq!(required_zone_maps(Strategy::Metaprocedure, 3).unwrap(), vec![3]);
        assert_eq!(required_zone_maps(Strategy::Pairing { k: 3, seed: 0 }, 7).unwrap(), vec![3]);
        assert_eq!(required_zone_maps(Strategy::Pairing { k: 3, seed: 0 }, 5).unwrap(), vec![2, 3]);
        assert_eq!(required_zone_maps(Strategy::Pairing { k: 2, seed: 0 }, 1).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn simulation_is_reproducible() {
        let p = priors("0.1,0.2,0.3");
        let ctx = SessionContext::default();
        let a = simulate(&p, Strategy::Optimal, 2000, 5, &ctx).unwrap();
        let b = simulate(&p, Strategy::Optimal, 2000, 5, &ctx).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.histogram.iter().sum::<u64>(), 2000);
        let naive = simulate(&p, Strategy::Naive, 10, 0, &ctx).unwrap();
        assert_eq!(naive.mean_tests, 3.0);
        assert!(simulate(&p, Strategy::Naive, 0, 0, &ctx).is_err());
    }
}
