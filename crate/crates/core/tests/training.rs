use std::collections::BTreeMap;

use fuzzqe::eval::QuerySets;
use fuzzqe::grad::{backward, Example, LossConfig};
use fuzzqe::synth::{benchmark, synthetic_kg, Benchmark, BenchmarkCounts, SynthConfig};
use fuzzqe::train::{read_log, sample_negatives, step_rng, train, Precision, RunPaths, TrainConfig, TrainError};
use fuzzqe::{EntityId, ModelConfig, Parameters, Structure};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_p(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

fn negative_counts(answers: &[EntityId], seed: u64) -> BTreeMap<EntityId, u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = BTreeMap::new();
    for _ in 0..1000 {
        for e in sample_negatives(&mut rng, 50, answers, 100).unwrap() {
            *counts.entry(e).or_insert(0) += 1;
        }
    }
    counts
}

#[test]
fn negatives_are_uniform_over_non_answers() {
    // Sparse answers use rejection sampling, dense ones the explicit pool.
    let sparse: Vec<EntityId> = vec![3, 10, 11, 42];
    let dense: Vec<EntityId> = (0..50).filter(|e| e % 5 != 0).collect();
    for (answers, seed) in [(sparse, 1), (dense, 2)] {
        let counts = negative_counts(&answers, seed);
        assert_eq!(counts.values().sum::<u64>(), 100_000);
        assert!(counts.keys().all(|e| answers.binary_search(e).is_err()));
        assert_eq!(counts.len(), 50 - answers.len(), "every non-answer is drawn");
        let p = chi_square_p(&counts.values().copied().collect::<Vec<_>>());
        assert!(p > 0.001, "χ² p-value {p}");
    }
}

#[test]
fn saturated_answer_set_is_an_error() {
    let all: Vec<EntityId> = (0..10).collect();
    let mut rng = step_rng(0, 0);
    assert!(matches!(sample_negatives(&mut rng, 10, &all, 3), Err(TrainError::Saturated)));
}

fn small_bench() -> Benchmark {
    let kg = synthetic_kg(&SynthConfig { num_entities: 100, ..SynthConfig::default() }).unwrap();
    benchmark(kg, BenchmarkCounts { train: 200, valid: 10, test: 10, seed: 1 }).unwrap()
}

fn small_setup(bench: &Benchmark) -> (ModelConfig, TrainConfig, Parameters) {
    let model = ModelConfig { dim: 12, num_bases: 3, ..ModelConfig::default() };
    let cfg = TrainConfig {
        batch_size: 16,
        k_neg: 8,
        lr: 5e-3,
        max_steps: 60,
        patience_steps: 60,
        eval_every: 20,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let init = Parameters::init(&model, bench.kg.num_entities(), bench.kg.num_relations(), &mut rng);
    (model, cfg, init)
}

#[test]
fn training_is_deterministic() {
    let bench = small_bench();
    let (model, cfg, init) = small_setup(&bench);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let x = train(&model, &cfg, &bench.kg, init.clone(), &bench.train, &bench.valid, a.path(), false).unwrap();
    let y = train(&model, &cfg, &bench.kg, init, &bench.train, &bench.valid, b.path(), false).unwrap();
    assert_eq!(x.last, y.last);
    assert_eq!(x.log, y.log);
    assert_eq!(x.steps, 60);
    assert_eq!(x.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 20, 40, 60]);
}

#[test]
fn resume_continues_bit_identically() {
    let bench = small_bench();
    let (model, cfg, init) = small_setup(&bench);
    let straight_dir = tempfile::tempdir().unwrap();
    let straight = train(&model, &cfg, &bench.kg, init.clone(), &bench.train, &bench.valid, straight_dir.path(), false)
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let half = TrainConfig { max_steps: 40, patience_steps: 40, ..cfg.clone() };
    train(&model, &half, &bench.kg, init.clone(), &bench.train, &bench.valid, dir.path(), false).unwrap();
    let resumed = train(&model, &cfg, &bench.kg, init, &bench.train, &bench.valid, dir.path(), true).unwrap();

    assert_eq!(resumed.steps, 60);
    assert_eq!(resumed.last, straight.last);
    assert_eq!(resumed.best, straight.best);
    assert_eq!(read_log(&RunPaths::new(dir.path()).log()).unwrap(), straight.log);
}

#[test]
fn missing_structure_is_rejected() {
    let bench = small_bench();
    let (model, cfg, init) = small_setup(&bench);
    let mut only_1p = bench.train.clone();
    only_1p.retain(|s, _| *s == Structure::P1);
    let dir = tempfile::tempdir().unwrap();
    let err = train(&model, &cfg, &bench.kg, init, &only_1p, &bench.valid, dir.path(), false).unwrap_err();
    assert!(matches!(err, TrainError::MissingStructure(_)), "{err}");
}

#[test]
fn f32_mode_keeps_parameters_on_the_f32_grid() {
    let bench = small_bench();
    let (model, cfg, init) = small_setup(&bench);
    let cfg = TrainConfig { precision: Precision::F32, max_steps: 20, patience_steps: 20, ..cfg };
    let dir = tempfile::tempdir().unwrap();
    let out = train(&model, &cfg, &bench.kg, init, &bench.train, &bench.valid, dir.path(), false).unwrap();
    for t in out.last.tensors() {
        assert!(t.iter().all(|x| (*x as f32) as f64 == *x));
    }
}

#[test]
fn gradients_do_not_depend_on_thread_count() {
    let bench = small_bench();
    let (model, _, init) = small_setup(&bench);
    let qs: Vec<_> = bench.train.values().flatten().take(100).collect();
    let batch: Vec<Example> = qs
        .iter()
        .enumerate()
        .map(|(i, lq)| Example {
            query: &lq.query,
            positive: lq.all_answers()[0],
            negatives: vec![(i % 100) as u32, ((i * 7) % 100) as u32],
        })
        .collect();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| backward(&init, &model, &LossConfig::default(), &batch).unwrap())
    };
    let (l1, g1) = run(1);
    let (l4, g4) = run(4);
    assert_eq!(l1.to_bits(), l4.to_bits());
    assert_eq!(g1, g4);
}

#[test]
fn loss_falls_and_link_prediction_improves() {
    let kg = synthetic_kg(&SynthConfig::default()).unwrap();
    let bench = benchmark(kg, BenchmarkCounts { train: 300, valid: 30, test: 10, seed: 0 }).unwrap();
    let model = ModelConfig { dim: 32, num_bases: 6, ..ModelConfig::default() };
    let cfg = TrainConfig {
        batch_size: 64,
        k_neg: 16,
        lr: 5e-3,
        max_steps: 1500,
        patience_steps: 1500,
        eval_every: 500,
        structures: vec![Structure::P1],
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let init = Parameters::init(&model, 300, 6, &mut rng);
    let valid_1p: QuerySets = bench.valid.iter().filter(|(s, _)| **s == Structure::P1).map(|(s, v)| (*s, v.clone())).collect();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&model, &cfg, &bench.kg, init, &bench.train, &valid_1p, dir.path(), false).unwrap();
    let losses: Vec<f64> = out.log.iter().filter_map(|r| r.train_loss).collect();
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
    let mrr0 = out.log[0].per_structure_mrr[&Structure::P1];
    let best = out.log.iter().map(|r| r.per_structure_mrr[&Structure::P1]).fold(0.0, f64::max);
    assert!(best > 2.0 * mrr0, "step-0 MRR {mrr0}, best {best}");
}
