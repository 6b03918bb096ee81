use fuzzqe::eval::{evaluate_with, filtered_rank, query_metrics, random_baseline, random_baseline_mrr, QuerySets};
use fuzzqe::gen::{generate, GenConfig, Split};
use fuzzqe::model::Encoder;
use fuzzqe::synth::{synthetic_kg, SynthConfig};
use fuzzqe::{LabeledQuery, ModelConfig, Parameters, Query, QueryNode, Structure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_queries() -> (usize, QuerySets) {
    let kg = synthetic_kg(&SynthConfig { num_entities: 100, ..SynthConfig::default() }).unwrap();
    let cfg = GenConfig { seed: 2, ..GenConfig::default() }.with_counts(
        Split::Test,
        &[Structure::P1, Structure::P2, Structure::I2, Structure::In2],
        15,
    );
    (kg.num_entities(), generate(&kg, &cfg).unwrap().split(Split::Test))
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn harmonic_baseline_example() {
    let lq = LabeledQuery::new(Query::new(QueryNode::proj(0, QueryNode::anchor(0))).unwrap(), vec![], vec![5]).unwrap();
    let h100: f64 = (1..=100).map(|r| 1.0 / r as f64).sum();
    let mrr = random_baseline_mrr(100, &[lq]);
    assert!((mrr - h100 / 100.0).abs() < 1e-15);
    assert!((mrr - 0.0519).abs() < 5e-5);
}

#[test]
fn uniform_scores_match_the_exact_baseline() {
    let (ne, sets) = toy_queries();
    let expected = random_baseline(ne, &sets);
    let mut samples = Vec::new();
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for lq in sets.values().flatten() {
            let scores: Vec<f64> = (0..ne).map(|_| rng.gen()).collect();
            samples.push(query_metrics(&scores, lq).unwrap().mrr);
        }
    }
    let (mean, se) = mean_and_se(&samples);
    let n_queries: usize = sets.values().map(Vec::len).sum();
    let exact = sets.values().flatten().map(|lq| random_baseline_mrr(ne, std::slice::from_ref(lq))).sum::<f64>()
        / n_queries as f64;
    assert!((mean - exact).abs() <= 3.0 * se, "mean {mean}, exact {exact}, se {se}");
    // Report-level baseline agrees with the per-query one.
    for (s, qs) in &sets {
        assert!((expected.per_structure[s].mrr - random_baseline_mrr(ne, qs)).abs() < 1e-12);
    }
}

#[test]
fn random_models_score_like_chance() {
    // Entity parameters are i.i.d., so over model draws every ranking is equally likely.
    let (ne, sets) = toy_queries();
    let cfg = ModelConfig { dim: 16, num_bases: 2, ..ModelConfig::default() };
    let mut samples = Vec::new();
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Parameters::init(&cfg, ne, 6, &mut rng);
        let enc = Encoder::new(&params, &cfg).unwrap();
        for lq in sets.values().flatten() {
            let scores = enc.score_all(&enc.embed(&lq.query).unwrap());
            samples.push(query_metrics(&scores, lq).unwrap().mrr);
        }
    }
    let (mean, se) = mean_and_se(&samples);
    let n: usize = sets.values().map(Vec::len).sum();
    let exact = sets.values().flatten().map(|lq| random_baseline_mrr(ne, std::slice::from_ref(lq))).sum::<f64>() / n as f64;
    assert!((mean - exact).abs() <= 3.0 * se, "mean {mean}, exact {exact}, se {se}");
}

#[test]
fn perfect_and_reversed_scorers_bound_the_metrics() {
    let (ne, sets) = toy_queries();
    let answers = |q: &Query| -> Vec<u32> {
        sets.values().flatten().find(|lq| &lq.query == q).unwrap().all_answers()
    };
    let perfect = evaluate_with(
        |q| {
            let a = answers(q);
            Ok((0..ne as u32).map(|e| if a.binary_search(&e).is_ok() { 1.0 } else { 0.0 }).collect())
        },
        &sets,
    )
    .unwrap();
    for m in perfect.per_structure.values() {
        assert_eq!((m.mrr, m.hits1, m.hits3, m.hits10), (1.0, 1.0, 1.0, 1.0));
    }
    let worst = evaluate_with(
        |q| {
            let a = answers(q);
            Ok((0..ne as u32).map(|e| if a.binary_search(&e).is_ok() { 0.0 } else { 1.0 }).collect())
        },
        &sets,
    )
    .unwrap();
    let chance = random_baseline(ne, &sets);
    for (s, m) in &worst.per_structure {
        assert!(m.mrr < chance.per_structure[s].mrr);
        assert_eq!(m.hits1, 0.0);
    }
    assert!(perfect.avg_epfo.is_some() && perfect.avg_neg.is_some());
}

#[test]
fn filtered_rank_ignores_other_answers() {
    let scores = [0.9, 0.5, 0.1, 0.1, 0.95];
    assert_eq!(filtered_rank(&scores, 2, &[1]).unwrap(), 3.5);
    assert_eq!(filtered_rank(&scores, 2, &[0, 1, 4]).unwrap(), 1.5);
    assert_eq!(filtered_rank(&scores, 4, &[]).unwrap(), 1.0);
}
