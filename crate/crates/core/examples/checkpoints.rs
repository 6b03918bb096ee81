//! Train briefly, save a checkpoint, reload it and answer a query with the
//! cached inference engine.
//!
//!     cargo run --release --example checkpoints

use fuzzqe::model::{load_checkpoint, save_checkpoint};
use fuzzqe::synth::{benchmark, synthetic_kg, BenchmarkCounts, SynthConfig};
use fuzzqe::train::{train, RunPaths, TrainConfig};
use fuzzqe::{Encoder, ModelConfig, Parameters, Structure};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let kg = synthetic_kg(&SynthConfig { num_entities: 150, ..SynthConfig::default() })?;
    let bench = benchmark(kg, BenchmarkCounts { train: 300, valid: 10, test: 10, seed: 0 })?;
    let model = ModelConfig { dim: 16, num_bases: 4, ..ModelConfig::default() };
    let cfg = TrainConfig {
        batch_size: 64,
        k_neg: 16,
        lr: 5e-3,
        max_steps: 400,
        patience_steps: 400,
        eval_every: 200,
        structures: vec![Structure::P1, Structure::P2, Structure::In2],
        ..TrainConfig::default()
    };
    let init = Parameters::init(&model, 150, 6, &mut ChaCha8Rng::seed_from_u64(0));
    let dir = tempfile::tempdir()?;
    let out = train(&model, &cfg, &bench.kg, init, &bench.train, &bench.valid, dir.path(), false)?;
    let paths = RunPaths::new(dir.path());
    println!("best step {} (valid MRR {:.4}); files:", out.best_step, out.best_valid_mrr);
    for p in [paths.best(), paths.last(), paths.optimizer(), paths.state(), paths.log()] {
        println!("  {} ({} bytes)", p.display(), std::fs::metadata(&p)?.len());
    }

    let copy = dir.path().join("copy.ckpt");
    save_checkpoint(&copy, &out.best, &model)?;
    let (params, loaded) = load_checkpoint(&copy)?;
    assert_eq!(params, out.best);
    assert_eq!(loaded, model);

    let enc = Encoder::new(&params, &loaded)?;
    let lq = &bench.test[&Structure::P2][0];
    let top = enc.answer(&lq.query, 5, &lq.easy)?;
    println!("{} → top 5 (easy answers excluded) {top:?}; hard answers {:?}", lq.query, lq.hard);
    Ok(())
}
