//! Finite differences against the hand-derived backward pass for one batch.
//!
//!     cargo run --release --example gradient_check -- 3in godel

use fuzzqe::grad::{backward, grad_check, Example, GradCheckOptions, LossConfig};
use fuzzqe::{Logic, ModelConfig, Parameters, Structure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let structure: Structure = args.next().as_deref().unwrap_or("pin").parse()?;
    let logic: Logic = args.next().as_deref().unwrap_or("product").parse().map_err(anyhow::Error::msg)?;
    let cfg = ModelConfig { dim: 8, num_bases: 2, logic, ..ModelConfig::default() };
    let (ne, nr) = (20, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = Parameters::init(&cfg, ne, nr, &mut rng);
    let queries: Vec<_> = (0..3).map(|_| structure.random_query(&mut rng, ne, nr)).collect();
    let batch: Vec<Example> = queries
        .iter()
        .map(|q| Example {
            query: q,
            positive: rng.gen_range(0..ne as u32),
            negatives: (0..5).map(|_| rng.gen_range(0..ne as u32)).collect(),
        })
        .collect();

    let (loss, grads) = backward(&params, &cfg, &LossConfig::default(), &batch)?;
    println!("{structure} / {logic}: batch loss {loss:.6}, gradient norm {:.4e}", grads.tensors().iter().flat_map(|t| t.iter()).map(|g| g * g).sum::<f64>().sqrt());
    let rep = grad_check(&params, &cfg, &LossConfig::default(), &batch, &GradCheckOptions::default())?;
    println!(
        "checked {} coordinates ({} excluded at kinks), per tensor {:?}",
        rep.checked, rep.excluded, rep.per_tensor
    );
    println!("max relative error {:.3e} (plain formula {:.3e})", rep.max_rel_error, rep.raw_max_rel_error);
    if let Some(w) = rep.worst {
        println!("worst: {}[{}] analytic {:.6e} numeric {:.6e}", w.tensor, w.offset, w.analytic, w.numeric);
    }
    Ok(())
}
