//! Testing procedures: binary decision trees over pooled tests.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::model::{full_mask, Outcome, OutcomeSet, Permutation, Pool, TestResult};

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub enum Node {
    Leaf(Outcome),
    Test {
        pool: Pool,
        negative: Box<Node>,
        positive: Box<Node>,
    },
}

impl Node {
    pub fn test(pool: Pool, negative: Node, positive: Node) -> Node {
        Node::Test {
            pool,
            negative: Box::new(negative),
            positive: Box::new(positive),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf(_))
    }

    pub fn pool(&self) -> Option<&Pool> {
        match self {
            Node::Test { pool, .. } => Some(pool),
            Node::Leaf(_) => None,
        }
    }

    pub fn child(&self, result: TestResult) -> Option<&Node> {
        match self {
            Node::Test {
                negative, positive, ..
            } => Some(match result {
                TestResult::Negative => negative,
                TestResult::Positive => positive,
            }),
            Node::Leaf(_) => None,
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            Node::Leaf(_) => 1,
            Node::Test {
                negative, positive, ..
            } => negative.leaf_count() + positive.leaf_count(),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Node::Leaf(_) => 0,
            Node::Test {
                negative, positive, ..
            } => 1 + negative.height().max(positive.height()),
        }
    }

    /// Calls `f(leaf outcome, depth)` for every leaf.
    pub fn for_each_leaf(&self, f: &mut impl FnMut(Outcome, u32)) {
        fn go(node: &Node, depth: u32, f: &mut impl FnMut(Outcome, u32)) {
            match node {
                Node::Leaf(o) => f(*o, depth),
                Node::Test {
                    negative, positive, ..
                } => {
                    go(negative, depth + 1, f);
                    go(positive, depth + 1, f);
                }
            }
        }
        go(self, 0, f)
    }

    /// Follow the tree against a ground truth; returns the leaf reached and
    /// the number of tests performed.
    pub fn execute(&self, truth: Outcome) -> (Outcome, u32) {
        let mut node = self;
        let mut tests = 0;
        loop {
            match node {
                Node::Leaf(o) => return (*o, tests),
                Node::Test {
                    pool,
                    negative,
                    positive,
                } => {
                    tests += 1;
                    node = match pool.test(truth) {
                        TestResult::Negative => negative,
                        TestResult::Positive => positive,
                    };
                }
            }
        }
    }

    pub fn permuted(&self, sigma: &Permutation) -> Node {
        match self {
            Node::Leaf(o) => Node::Leaf(Outcome::new_unchecked(o.n(), sigma.apply_mask(o.mask()))),
            Node::Test {
                pool,
                negative,
                positive,
            } => Node::test(
                Pool::new_unchecked(pool.n(), sigma.apply_mask(pool.mask())),
                negative.permuted(sigma),
                positive.permuted(sigma),
            ),
        }
    }

    /// Deterministic tie-break order: compare pools in preorder (root, then
    /// negative subtree, then positive subtree) under the pool total order.
    pub fn cmp_preorder(&self, other: &Node) -> Ordering {
        match (self, other) {
            (Node::Leaf(a), Node::Leaf(b)) => a.mask().cmp(&b.mask()),
            (Node::Leaf(_), Node::Test { .. }) => Ordering::Less,
            (Node::Test { .. }, Node::Leaf(_)) => Ordering::Greater,
            (
                Node::Test {
                    pool: pa,
                    negative: na,
                    positive: qa,
                },
                Node::Test {
                    pool: pb,
                    negative: nb,
                    positive: qb,
                },
            ) => pa
                .cmp(pb)
                .then_with(|| na.cmp_preorder(nb))
                .then_with(|| qa.cmp_preorder(qb)),
        }
    }
}

/// A complete testing procedure over `n` samples: its leaves are in
/// one-to-one correspondence with all `2^n` outcomes.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Procedure {
    n: usize,
    root: Node,
}

impl Procedure {
    /// Build and validate.
    pub fn new(n: usize, root: Node) -> Result<Self> {
        let report = validate_node(&root, &OutcomeSet::full(n)?);
        if !report.is_valid() {
            return Err(Error::InvalidProcedure(report));
        }
        Ok(Procedure { n, root })
    }

    pub(crate) fn new_unchecked(n: usize, root: Node) -> Self {
        Procedure { n, root }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn into_root(self) -> Node {
        self.root
    }

    /// Test every sample individually in index order.
    pub fn naive(n: usize) -> Result<Self> {
        if n > crate::model::MAX_SET_SAMPLES {
            return Err(Error::unsupported("naive procedure materialization", n, crate::model::MAX_SET_SAMPLES));
        }
        fn build(n: usize, i: usize, prefix: u64) -> Node {
            if i == n {
                return Node::Leaf(Outcome::new_unchecked(n, prefix));
            }
            Node::test(
                Pool::new_unchecked(n, 1 << i),
                build(n, i + 1, prefix),
                build(n, i + 1, prefix | 1 << i),
            )
        }
        Ok(Procedure {
            n,
            root: build(n, 0, 0),
        })
    }

    pub fn execute(&self, truth: Outcome) -> (Outcome, u32) {
        self.root.execute(truth)
    }

    /// Relabel every pool and leaf by `sigma`.
    pub fn apply_permutation(&self, sigma: &Permutation) -> Result<Procedure> {
        if sigma.len() != self.n {
            return Err(Error::SizeMismatch {
                expected: self.n,
                actual: sigma.len(),
            });
        }
        Ok(Procedure {
            n: self.n,
            root: self.root.permuted(sigma),
        })
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self, self.n)
    }

    /// Normal form with identical expected length everywhere: pools reduced
    /// to their undecided members, stacked equal child tests interchanged so
    /// the smaller pool comes first, then every pool extended with all
    /// samples clean-decided at its node. Idempotent.
    pub fn canonicalize(&self) -> Procedure {
        let full = OutcomeSet::full(self.n).expect("valid procedure has materializable n");
        let mut root = self.root.clone();
        reduce_pools(&mut root, &full);
        interchange_to_fixpoint(&mut root, &full);
        extend_pools(&mut root, &full);
        Procedure { n: self.n, root }
    }
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&crate::model::codec::encode_node(&self.root))
    }
}

fn reduce_pools(node: &mut Node, set: &OutcomeSet) {
    if let Node::Test {
        pool,
        negative,
        positive,
    } = node
    {
        let (clean, _) = set.decided();
        let reduced = pool.mask() & !clean;
        let (neg, pos) = set.split_mask(pool.mask());
        if reduced != 0 {
            *pool = Pool::new_unchecked(pool.n(), reduced);
        }
        reduce_pools(negative, &neg);
        reduce_pools(positive, &pos);
    }
}

fn extend_pools(node: &mut Node, set: &OutcomeSet) {
    if let Node::Test {
        pool,
        negative,
        positive,
    } = node
    {
        let (clean, _) = set.decided();
        let (neg, pos) = set.split_mask(pool.mask());
        *pool = Pool::new_unchecked(pool.n(), pool.mask() | clean);
        extend_pools(negative, &neg);
        extend_pools(positive, &pos);
    }
}

/// Swap `T1 -> (T2, T2)` into `T2 -> (T1, T1)` whenever `T2 < T1`, bottom-up,
/// until no node qualifies. Pools must already be reduced.
fn interchange_to_fixpoint(node: &mut Node, set: &OutcomeSet) {
    let Node::Test {
        pool,
        negative,
        positive,
    } = node
    else {
        return;
    };
    let (neg_set, pos_set) = set.split_mask(pool.mask());
    interchange_to_fixpoint(negative, &neg_set);
    interchange_to_fixpoint(positive, &pos_set);

    let outer = *pool;
    let inner = match (negative.pool(), positive.pool()) {
        (Some(a), Some(b)) if a == b && *a < outer => *a,
        _ => return,
    };
    let take = |child: &mut Box<Node>| match std::mem::replace(child.as_mut(), Node::Leaf(Outcome::new_unchecked(0, 0))) {
        Node::Test {
            negative, positive, ..
        } => (*negative, *positive),
        Node::Leaf(_) => unreachable!(),
    };
    // outcome groups indexed (outer result, inner result)
    let (nn, np) = take(negative);
    let (pn, pp) = take(positive);
    let mut swapped = Node::test(
        inner,
        Node::test(outer, nn, pn),
        Node::test(outer, np, pp),
    );
    // the outer pool may lose members that the inner negative result decides
    reduce_pools(&mut swapped, set);
    if let Node::Test {
        negative, positive, ..
    } = &mut swapped
    {
        let (neg_set, pos_set) = set.split_mask(inner.mask());
        interchange_to_fixpoint(negative, &neg_set);
        interchange_to_fixpoint(positive, &pos_set);
    }
    *node = swapped;
}

/// One problem found by [`validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    SizeMismatch { path: String, expected: usize, actual: usize },
    EmptySplit { path: String, pool: String, empty_side: TestResult },
    UnresolvedLeaf { path: String, leaf: String, remaining: usize },
    WrongLeaf { path: String, leaf: String },
    LeafCount { expected: usize, actual: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SizeMismatch { path, expected, actual } => {
                write!(f, "{path}: node built for n = {actual}, expected {expected}")
            }
            Violation::EmptySplit { path, pool, empty_side } => {
                write!(f, "{path}: pool {pool} leaves the {empty_side:?} branch empty")
            }
            Violation::UnresolvedLeaf { path, leaf, remaining } => {
                write!(f, "{path}: leaf {leaf} reached while {remaining} outcomes remain")
            }
            Violation::WrongLeaf { path, leaf } => {
                write!(f, "{path}: leaf {leaf} is not reachable at this node")
            }
            Violation::LeafCount { expected, actual } => {
                write!(f, "tree has {actual} leaves, expected {expected}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Check a procedure against every structural invariant for `n` samples.
pub fn validate(proc: &Procedure, n: usize) -> ValidationReport {
    match OutcomeSet::full(n) {
        Ok(full) => validate_node(proc.root(), &full),
        Err(_) => ValidationReport {
            violations: vec![Violation::SizeMismatch {
                path: "root".into(),
                expected: n,
                actual: proc.n(),
            }],
        },
    }
}

/// Check a (sub)tree whose root node-set is `set`.
pub fn validate_node(root: &Node, set: &OutcomeSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    walk(root, set, &mut String::from("root"), &mut report);
    let expected = set.len();
    let actual = root.leaf_count();
    if expected != actual {
        report.violations.push(Violation::LeafCount { expected, actual });
    }
    report
}

fn walk(node: &Node, set: &OutcomeSet, path: &mut String, report: &mut ValidationReport) {
    let n = set.n();
    match node {
        Node::Leaf(o) => {
            if o.n() != n {
                report.violations.push(Violation::SizeMismatch {
                    path: path.clone(),
                    expected: n,
                    actual: o.n(),
                });
            } else if !set.contains(*o) {
                report.violations.push(Violation::WrongLeaf {
                    path: path.clone(),
                    leaf: o.to_bit_string(),
                });
            } else if set.len() > 1 {
                report.violations.push(Violation::UnresolvedLeaf {
                    path: path.clone(),
                    leaf: o.to_bit_string(),
                    remaining: set.len(),
                });
            }
        }
        Node::Test {
            pool,
            negative,
            positive,
        } => {
            if pool.n() != n || pool.mask() & !full_mask(n) != 0 {
                report.violations.push(Violation::SizeMismatch {
                    path: path.clone(),
                    expected: n,
                    actual: pool.n(),
                });
                return;
            }
            let (neg, pos) = set.split_mask(pool.mask());
            for (side, part) in [(TestResult::Negative, &neg), (TestResult::Positive, &pos)] {
                if part.is_empty() {
                    report.violations.push(Violation::EmptySplit {
                        path: path.clone(),
                        pool: pool.to_string(),
                        empty_side: side,
                    });
                }
            }
            let len = path.len();
            path.push_str(".neg");
            walk(negative, &neg, path, report);
            path.truncate(len);
            path.push_str(".pos");
            walk(positive, &pos, path, report);
            path.truncate(len);
        }
    }
}

pub fn apply_permutation(proc: &Procedure, sigma: &Permutation) -> Result<Procedure> {
    proc.apply_permutation(sigma)
}

pub fn canonicalize(proc: &Procedure) -> Procedure {
    proc.canonicalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::codec::decode;

    fn p(text: &str) -> Procedure {
        decode(text).unwrap()
    }

    const FIG2_LEFT: &str = "P{1,2}[L(00),P{1}[L(01),P{2}[L(10),L(11)]]]";
    const FIG2_RIGHT: &str = "P{1,2}[L(00),P{2}[L(10),P{1}[L(01),L(11)]]]";

    #[test]
    fn naive_two_is_valid() {
        let naive = Procedure::naive(2).unwrap();
        assert!(naive.validate().is_valid());
        assert_eq!(naive.to_string(), "P{1}[P{2}[L(00),L(01)],P{2}[L(10),L(11)]]");
    }

    #[test]
    fn repeated_pool_is_invalid() {
        let n = 2;
        let pool = Pool::from_indices(n, &[1, 2]).unwrap();
        let leaf = |s: &str| Node::Leaf(Outcome::parse(s).unwrap());
        let root = Node::test(
            pool,
            leaf("00"),
            Node::test(pool, leaf("01"), Node::test(Pool::from_indices(2, &[1]).unwrap(), leaf("10"), leaf("11"))),
        );
        let report = validate_node(&root, &OutcomeSet::full(n).unwrap());
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::EmptySplit { empty_side: TestResult::Negative, .. })));
    }

    #[test]
    fn three_leaves_is_invalid() {
        let leaf = |s: &str| Node::Leaf(Outcome::parse(s).unwrap());
        let root = Node::test(
            Pool::from_indices(2, &[1, 2]).unwrap(),
            leaf("00"),
            Node::test(Pool::from_indices(2, &[1]).unwrap(), leaf("01"), leaf("10")),
        );
        let report = validate_node(&root, &OutcomeSet::full(2).unwrap());
        assert!(!report.is_valid());
        assert!(report
            .violations
            .contains(&Violation::LeafCount { expected: 4, actual: 3 }));
    }

    #[test]
    fn swap_maps_fig2_left_to_right() {
        let left = p(FIG2_LEFT);
        let swap = Permutation::transposition(2, 1, 2).unwrap();
        assert_eq!(left.apply_permutation(&swap).unwrap(), p(FIG2_RIGHT));
        assert_eq!(
            left.apply_permutation(&swap).unwrap().apply_permutation(&swap).unwrap(),
            left
        );
        assert_eq!(left.apply_permutation(&Permutation::identity(2)).unwrap(), left);
    }

    #[test]
    fn execute_reaches_every_leaf() {
        let t = p(FIG2_LEFT);
        for m in 0..4 {
            let truth = Outcome::from_mask(2, m).unwrap();
            assert_eq!(t.execute(truth).0, truth);
        }
    }

    #[test]
    fn naive_variants_share_canonical_form() {
        let a = p("P{1}[P{2}[L(00),L(01)],P{2}[L(10),L(11)]]");
        let b = p("P{2}[P{1}[L(00),L(10)],P{1}[L(01),L(11)]]");
        assert_eq!(a.canonicalize(), b.canonicalize());
        assert_eq!(a.canonicalize().canonicalize(), a.canonicalize());
    }

    #[test]
    fn canonical_pools_absorb_clean_decided_samples() {
        // after {1} negative, sample 1 is clean-decided so {2} becomes {1,2}
        let a = p("P{1}[P{2}[L(00),L(01)],P{2}[L(10),L(11)]]");
        let c = a.canonicalize();
        match c.root() {
            Node::Test { negative, positive, .. } => {
                assert_eq!(negative.pool().unwrap().indices(), [1, 2]);
                assert_eq!(positive.pool().unwrap().indices(), [2]);
            }
            _ => panic!(),
        }
    }
}
