//! Sample labeled query workloads from a graph and write them as JSON Lines.
//!
//!     cargo run --release --example query_generation -- /tmp/queries

use std::path::PathBuf;

use fuzzqe::gen::{generate, GenConfig, Split};
use fuzzqe::synth::{synthetic_kg, SynthConfig};
use fuzzqe::Structure;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fuzzqe-queries"));
    let kg = synthetic_kg(&SynthConfig::default())?;
    let cfg = GenConfig { seed: 7, max_answers: 50, ..GenConfig::default() }
        .with_counts(Split::Train, &Structure::TRAINING, 200)
        .with_counts(Split::Valid, &Structure::ALL, 20)
        .with_counts(Split::Test, &Structure::ALL, 20);
    let generated = generate(&kg, &cfg)?;
    generated.write(&out)?;

    for (split, by_tag) in &generated.queries {
        let sizes: Vec<String> = by_tag.iter().map(|(s, q)| format!("{s}:{}", q.len())).collect();
        println!("{split:<5} {}", sizes.join(" "));
    }
    let test = generated.split(Split::Test);
    let lq = &test[&Structure::Pni][0];
    println!("example test pni query: {}", lq.to_json_line());
    if let Some(m) = &generated.manifest {
        for (split, s, want, got) in m.shortfalls() {
            println!("shortfall {split}-{s}: {got}/{want}");
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
