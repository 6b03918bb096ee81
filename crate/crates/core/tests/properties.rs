use fuzzqe::fuzzy::{negate, tconorm, tnorm};
use fuzzqe::gen::sample_structure_instance;
use fuzzqe::model::{embed_node, entity_embedding, score};
use fuzzqe::oracle::split_answers;
use fuzzqe::synth::random_kg;
use fuzzqe::{FuzzyVec, GraphView, Logic, ModelConfig, NormMode, Parameters, Query, QueryNode, Structure};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fuzzy(d: usize) -> impl Strategy<Value = FuzzyVec> {
    prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0f64], d)
        .prop_map(|v| FuzzyVec::new(v).unwrap())
}

fn logic() -> impl Strategy<Value = Logic> {
    prop_oneof![Just(Logic::Product), Just(Logic::Godel), Just(Logic::Lukasiewicz)]
}

fn bits(v: &FuzzyVec) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn operators_stay_in_unit_cube_and_commute(l in logic(), a in fuzzy(12), b in fuzzy(12)) {
        let t = tnorm(l, &a, &b).unwrap();
        let s = tconorm(l, &a, &b).unwrap();
        prop_assert!(t.iter().chain(s.iter()).all(|x| (0.0..=1.0).contains(x)));
        prop_assert_eq!(bits(&t), bits(&tnorm(l, &b, &a).unwrap()));
        prop_assert_eq!(bits(&s), bits(&tconorm(l, &b, &a).unwrap()));
    }

    #[test]
    fn de_morgan_and_involution(l in logic(), a in fuzzy(12), b in fuzzy(12)) {
        let s = tconorm(l, &a, &b).unwrap();
        let dual = negate(&tnorm(l, &negate(&a), &negate(&b)).unwrap());
        for (x, y) in s.iter().zip(dual.iter()) {
            prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
        }
        prop_assert_eq!(bits(&negate(&negate(&a))), bits(&a));
    }

    #[test]
    fn boundary_and_monotonicity(l in logic(), a in fuzzy(12), b in fuzzy(12), c in fuzzy(12)) {
        let one = FuzzyVec::universe(12);
        let zero = FuzzyVec::empty(12);
        prop_assert_eq!(bits(&tnorm(l, &a, &one).unwrap()), bits(&a));
        prop_assert_eq!(bits(&tconorm(l, &a, &zero).unwrap()), bits(&a));
        // b' = max(b, c) ≥ b elementwise.
        let hi = FuzzyVec::new(b.iter().zip(c.iter()).map(|(x, y)| x.max(*y)).collect()).unwrap();
        let (t0, t1) = (tnorm(l, &a, &b).unwrap(), tnorm(l, &a, &hi).unwrap());
        let (s0, s1) = (tconorm(l, &a, &b).unwrap(), tconorm(l, &a, &hi).unwrap());
        prop_assert!(t0.iter().zip(t1.iter()).all(|(x, y)| x <= y));
        prop_assert!(s0.iter().zip(s1.iter()).all(|(x, y)| x <= y));
    }

    #[test]
    fn query_encoding_round_trips(seed in any::<u64>(), k in 0usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Structure::ALL[k].random_query(&mut rng, 1000, 50);
        let text = q.encode();
        let back = Query::parse(&text).unwrap();
        prop_assert_eq!(&back, &q);
        prop_assert_eq!(back.encode(), text);
        prop_assert_eq!(back.structure(), Some(Structure::ALL[k]));
        let v: serde_json::Value = serde_json::from_str(&q.to_json().to_string()).unwrap();
        prop_assert_eq!(Query::from_json(v).unwrap(), q);
    }

    #[test]
    fn and_or_children_commute(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Structure::P2.random_query(&mut rng, 100, 5).root().clone();
        let b = Structure::P1.random_query(&mut rng, 100, 5).root().clone();
        let x = Query::new(QueryNode::and(vec![a.clone(), b.clone()])).unwrap();
        let y = Query::new(QueryNode::and(vec![b, a])).unwrap();
        prop_assert_eq!(x.encode(), y.encode());
    }

    #[test]
    fn easy_and_hard_are_disjoint(seed in any::<u64>(), k in 0usize..14) {
        let kg = random_kg(40, 3, 300, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        if let Some(q) = sample_structure_instance(&mut rng, &kg, GraphView::Train, Structure::ALL[k]) {
            let (easy, hard) = split_answers(&kg, q.root(), GraphView::Train);
            prop_assert!(easy.iter().all(|e| hard.binary_search(e).is_err()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_respect_the_operators(seed in any::<u64>(), k in 0usize..14, godel in any::<bool>(), l2 in any::<bool>()) {
        let logic = if godel { Logic::Godel } else { Logic::Product };
        let norm = if l2 { NormMode::L2 } else { NormMode::L1 };
        let cfg = ModelConfig { dim: 8, num_bases: 2, logic, norm, ..ModelConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Parameters::init(&cfg, 20, 4, &mut rng);
        let q = Structure::ALL[k].random_query(&mut rng, 20, 4).root().clone();
        let e = (seed % 20) as u32;
        let p = entity_embedding(&params, &cfg, e).unwrap();
        let sq = embed_node(&params, &cfg, &q).unwrap();
        prop_assert!(sq.iter().all(|x| (0.0..=1.0).contains(x)));

        let phi = score(&sq, &p).unwrap();
        let neg = score(&embed_node(&params, &cfg, &QueryNode::not(q.clone())).unwrap(), &p).unwrap();
        let twice = score(&embed_node(&params, &cfg, &QueryNode::not(QueryNode::not(q.clone()))).unwrap(), &p).unwrap();
        prop_assert_eq!(twice.to_bits(), phi.to_bits());
        let l1: f64 = p.iter().sum();
        prop_assert!((phi + neg - l1).abs() <= 1e-9);

        let other = Structure::P1.random_query(&mut rng, 20, 4).root().clone();
        let phi2 = score(&embed_node(&params, &cfg, &other).unwrap(), &p).unwrap();
        let and = score(&embed_node(&params, &cfg, &QueryNode::and(vec![q.clone(), other.clone()])).unwrap(), &p).unwrap();
        let or = score(&embed_node(&params, &cfg, &QueryNode::or(vec![q, other])).unwrap(), &p).unwrap();
        prop_assert!(and <= phi.min(phi2));
        prop_assert!(or >= phi.max(phi2));
    }
}
