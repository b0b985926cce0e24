//! Property tests over random trees, priors and sessions.

use std::sync::OnceLock;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pooltest::heuristics::{greedy_procedure, PairingPlan};
use pooltest::model::pools_in_order;
use pooltest::optimizer::{find_optimal, BruteForce, PreparedOptimizer};
use pooltest::probability::{expected_length, length_vector, outcome_probability};
use pooltest::session::{simulate, Status, Strategy as Plan};
use pooltest::zones::{classify_n2, compute_metaprocedure, FrontierN2};
use pooltest::{
    codec, Node, Outcome, OutcomeSet, Permutation, Pool, PriorVector, Procedure, Session, SessionContext, ZoneMap, ZoneOptions,
};

fn random_node(set: &OutcomeSet, rng: &mut ChaCha8Rng) -> Node {
    if let Some(o) = set.only() {
        return Node::Leaf(o);
    }
    let n = set.n();
    let splitting: Vec<(OutcomeSet, OutcomeSet, Pool)> = pools_in_order(n)
        .iter()
        .filter_map(|&m| {
            let pool = Pool::from_mask(n, m).unwrap();
            let (neg, pos) = set.split(&pool).unwrap();
            (!neg.is_empty() && !pos.is_empty()).then_some((neg, pos, pool))
        })
        .collect();
    let (neg, pos, pool) = splitting.choose(rng).unwrap();
    Node::test(*pool, random_node(neg, rng), random_node(pos, rng))
}

fn random_tree(n: usize, seed: u64) -> Procedure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Procedure::new(n, random_node(&OutcomeSet::full(n).unwrap(), &mut rng)).unwrap()
}

/// Priors on the grid `k / 20`, endpoints included.
fn priors(n: usize) -> impl Strategy<Value = PriorVector> {
    prop::collection::vec(0i64..=20, n).prop_map(|ks| {
        let exact = ks
            .into_iter()
            .map(|k| BigRational::new(BigInt::from(k), BigInt::from(20)))
            .collect();
        PriorVector::from_exact(exact).unwrap()
    })
}

fn sized_priors(max: usize) -> impl Strategy<Value = PriorVector> {
    (1..=max).prop_flat_map(priors)
}

fn permutation(n: usize) -> impl Strategy<Value = Permutation> {
    Just((0..n).collect::<Vec<_>>())
        .prop_shuffle()
        .prop_map(|image| Permutation::new(image).unwrap())
}

fn brute_force(n: usize) -> &'static BruteForce {
    static MAPS: OnceLock<Vec<BruteForce>> = OnceLock::new();
    &MAPS.get_or_init(|| (1..=3).map(|k| BruteForce::new(k).unwrap()).collect())[n - 1]
}

fn zone_map_n3() -> &'static ZoneMap {
    static MAP: OnceLock<ZoneMap> = OnceLock::new();
    MAP.get_or_init(|| {
        let mut options = ZoneOptions::new(3);
        options.resolution = 12;
        compute_metaprocedure(3, options).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_trees_are_valid_and_round_trip(n in 1usize..=4, seed: u64) {
        let tree = random_tree(n, seed);
        prop_assert!(tree.validate().is_valid());
        let text = codec::encode(&tree);
        prop_assert_eq!(&codec::decode(&text).unwrap(), &tree);
        prop_assert_eq!(&codec::decode_json(&codec::encode_json(&tree)).unwrap(), &tree);
        prop_assert!(tree.canonicalize().validate().is_valid());
    }

    #[test]
    fn execution_reaches_the_truth_at_its_depth(n in 1usize..=4, seed: u64) {
        let tree = random_tree(n, seed);
        let lengths = length_vector(&tree);
        for truth in OutcomeSet::full(n).unwrap().iter() {
            let (found, tests) = tree.execute(truth);
            prop_assert_eq!(found, truth);
            prop_assert_eq!(tests, lengths.depth(truth));
            prop_assert!(tests >= 1);
            prop_assert!((tests as usize) < (1 << n));
        }
    }

    #[test]
    fn outcome_probabilities_sum_to_one(p in sized_priors(6)) {
        let total = OutcomeSet::full(p.n())
            .unwrap()
            .iter()
            .map(|o| outcome_probability::<BigRational>(o, &p).unwrap())
            .fold(BigRational::zero(), |a, b| a + b);
        prop_assert_eq!(total, BigRational::one());
    }

    #[test]
    fn relabeling_a_tree_matches_permuting_the_priors(
        (p, sigma) in (1usize..=4).prop_flat_map(|n| (priors(n), permutation(n))),
        seed: u64,
    ) {
        let tree = random_tree(p.n(), seed);
        let relabeled = tree.apply_permutation(&sigma).unwrap();
        prop_assert!(relabeled.validate().is_valid());
        prop_assert_eq!(
            expected_length::<BigRational>(&relabeled, &p).unwrap(),
            expected_length::<BigRational>(&tree, &p.permuted(&sigma).unwrap()).unwrap()
        );
        prop_assert_eq!(length_vector(&relabeled), length_vector(&tree).permuted(&sigma));
    }

    #[test]
    fn no_tree_beats_the_optimum(p in sized_priors(4), seed: u64) {
        let best = find_optimal::<BigRational>(&p).unwrap();
        let tree = random_tree(p.n(), seed);
        prop_assert!(expected_length::<BigRational>(&tree, &p).unwrap() >= best.value);
        prop_assert_eq!(expected_length::<BigRational>(&best.procedure, &p).unwrap(), best.value);
    }

    #[test]
    fn greedy_is_valid_and_never_better_than_optimal(p in sized_priors(4)) {
        let greedy = greedy_procedure::<BigRational>(&p).unwrap();
        prop_assert!(greedy.validate().is_valid());
        let optimum = find_optimal::<BigRational>(&p).unwrap().value;
        prop_assert!(expected_length::<BigRational>(&greedy, &p).unwrap() >= optimum);
    }

    #[test]
    fn pairing_plans_are_seeded_partitions(n in 1usize..=40, k in 1usize..=4, seed: u64) {
        let plan = PairingPlan::new(n, k, seed).unwrap();
        prop_assert_eq!(&plan, &PairingPlan::new(n, k, seed).unwrap());
        let mut all: Vec<usize> = plan.blocks.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let (last, full) = plan.blocks.split_last().unwrap();
        prop_assert!(full.iter().all(|b| b.len() == k));
        prop_assert!(!last.is_empty() && last.len() <= k);
        prop_assert!(plan.blocks.iter().all(|b| b.windows(2).all(|w| w[0] < w[1])));
    }

    #[test]
    fn two_sample_zones_match_the_optimizer(p in priors(2)) {
        let best = find_optimal::<BigRational>(&p).unwrap();
        prop_assert_eq!(FrontierN2::tag_of(&best.procedure), Some(classify_n2(&p).unwrap()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn optimizer_matches_brute_force(p in sized_priors(3)) {
        let direct = find_optimal::<BigRational>(&p).unwrap();
        let brute = brute_force(p.n()).best::<BigRational>(&p).unwrap();
        prop_assert_eq!(direct.value, brute.value);
    }

    #[test]
    fn prepared_optimizer_matches_direct(p in sized_priors(5)) {
        let direct = find_optimal::<BigRational>(&p).unwrap();
        let prepared = PreparedOptimizer::new(p.n()).unwrap().solve::<BigRational>(&p).unwrap();
        prop_assert_eq!(prepared.value, direct.value);
        // with a prior of 0 or 1 the trees may differ inside zero-probability branches
        if p.values().iter().all(|&x| x > 0.0 && x < 1.0) {
            prop_assert_eq!(codec::encode(&prepared.procedure), codec::encode(&direct.procedure));
        }
    }

    #[test]
    fn metaprocedure_value_is_symmetric(
        x in prop::array::uniform3(0.0f64..=1.0),
        sigma in permutation(3),
    ) {
        let map = zone_map_n3();
        let (proc, v) = map.evaluate_metaprocedure(&x).unwrap();
        let (_, w) = map.evaluate_metaprocedure(&sigma.act_on(&x)).unwrap();
        prop_assert!((v - w).abs() < 1e-12);
        let p = PriorVector::from_f64(&x).unwrap();
        prop_assert!((expected_length::<f64>(&proc, &p).unwrap() - v).abs() < 1e-12);
        prop_assert!(map.lookup(&x).unwrap().validate().is_valid());
    }

    #[test]
    fn sessions_find_the_truth_and_survive_restore(
        p in sized_priors(4),
        strategy in prop_oneof![
            Just(Plan::Naive),
            Just(Plan::Optimal),
            Just(Plan::Greedy),
        ],
        truth_bits: u64,
        pause in 0usize..4,
    ) {
        let n = p.n();
        let truth = Outcome::from_mask(n, truth_bits & ((1 << n) - 1)).unwrap();
        let ctx = SessionContext::default();
        let mut session = Session::start("s", p.clone(), strategy, &ctx).unwrap();
        let mut steps = 0;
        while let Some(pool) = session.next_pool() {
            if steps == pause {
                let restored = Session::restore(&session.snapshot(), &ctx).unwrap();
                prop_assert_eq!(restored.snapshot(), session.snapshot());
                session = restored;
            }
            session.record_result(pool.test(truth)).unwrap();
            steps += 1;
        }
        prop_assert_eq!(session.status(), Status::Complete);
        prop_assert_eq!(session.outcome(), Some(truth));
        prop_assert_eq!(session.tests_used(), steps);
        if strategy == Plan::Optimal {
            let tree = find_optimal::<f64>(&p).unwrap().procedure;
            prop_assert_eq!(steps as u32, tree.execute(truth).1);
        }
    }

    #[test]
    fn simulations_are_reproducible_and_converge(p in sized_priors(4), seed: u64) {
        let ctx = SessionContext::default();
        let a = simulate(&p, Plan::Optimal, 20_000, seed, &ctx).unwrap();
        let b = simulate(&p, Plan::Optimal, 20_000, seed, &ctx).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.histogram.iter().sum::<u64>(), 20_000);
        let tolerance = 5.0 * a.std_error + 1e-9;
        prop_assert!((a.mean_tests - a.expected_tests).abs() <= tolerance,
            "mean {} expected {} se {}", a.mean_tests, a.expected_tests, a.std_error);
    }
}
