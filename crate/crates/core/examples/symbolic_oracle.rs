//! The fuzzy operators evaluated symbolically over the graph: crisp inputs
//! reproduce set semantics exactly.
//!
//!     cargo run --release --example symbolic_oracle

use fuzzqe::gen::sample_structure_instance;
use fuzzqe::oracle::{answer_query, indicator, symbolic_fuzzy_eval};
use fuzzqe::synth::random_kg;
use fuzzqe::verify::oracle_agreement;
use fuzzqe::{GraphView, Logic, Structure};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let kg = random_kg(50, 4, 200, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for s in [Structure::Ip, Structure::Up, Structure::Pni] {
        let Some(q) = sample_structure_instance(&mut rng, &kg, GraphView::Full, s) else { continue };
        let answers = answer_query(&kg, GraphView::Full, q.root());
        let want = indicator(&answers, 50);
        for logic in [Logic::Product, Logic::Godel, Logic::Lukasiewicz] {
            let got = symbolic_fuzzy_eval(&kg, GraphView::Full, q.root(), logic)?;
            println!("{:>3} {:>11}: {} answers, agrees {}", s.to_string(), logic.to_string(), answers.len(), got == want);
        }
    }
    print!("{}", oracle_agreement(20, 50, 0));
    Ok(())
}
