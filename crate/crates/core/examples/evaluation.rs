//! Filtered ranking metrics for a few scorers against the exact random baseline.
//!
//!     cargo run --release --example evaluation

use fuzzqe::eval::{evaluate, evaluate_with, random_baseline, EvalReport};
use fuzzqe::gen::{generate, GenConfig, Split};
use fuzzqe::synth::{synthetic_kg, SynthConfig};
use fuzzqe::{ModelConfig, Parameters, Structure};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn line(name: &str, r: &EvalReport) {
    let f = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:.4}"));
    println!("{name:<14} avg_epfo {}  avg_neg {}", f(r.avg_epfo), f(r.avg_neg));
}

fn main() -> anyhow::Result<()> {
    let kg = synthetic_kg(&SynthConfig::default())?;
    let cfg = GenConfig::default().with_counts(Split::Test, &Structure::ALL, 30);
    let test = generate(&kg, &cfg)?.split(Split::Test);

    let baseline = random_baseline(kg.num_entities(), &test);
    line("random (exact)", &baseline);

    let model = ModelConfig { dim: 32, num_bases: 4, ..ModelConfig::default() };
    let params = Parameters::init(&model, kg.num_entities(), kg.num_relations(), &mut ChaCha8Rng::seed_from_u64(3));
    line("untrained", &evaluate(&params, &model, &test)?);

    // Scores every entity by its degree: a query-agnostic popularity prior.
    let mut degree = vec![0.0; kg.num_entities()];
    kg.train_edges().iter().for_each(|t| degree[t.tail as usize] += 1.0);
    let popularity = evaluate_with(|_| Ok(degree.clone()), &test)?;
    line("popularity", &popularity);

    print!("\n{}", popularity.to_csv());
    Ok(())
}
