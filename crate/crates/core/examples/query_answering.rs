//! Exact answers by graph traversal next to model rankings, on a small graph.
//!
//!     cargo run --release --example query_answering

use fuzzqe::oracle::{answer_query, split_answers};
use fuzzqe::synth::{synthetic_kg, SynthConfig};
use fuzzqe::{Encoder, GraphView, ModelConfig, Parameters, Query, QueryNode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let kg = synthetic_kg(&SynthConfig { num_entities: 60, ..SynthConfig::default() })?;

    // "Which entities are reached from 4 by r0 then r1, but not from 12 by r2?"
    let chain = QueryNode::proj(1, QueryNode::proj(0, QueryNode::anchor(4)));
    let q = Query::new(QueryNode::and(vec![chain, QueryNode::not(QueryNode::proj(2, QueryNode::anchor(12)))]))?;
    println!("query ({}): {q}", q.tag());

    let full = answer_query(&kg, GraphView::Full, q.root());
    let (easy, hard) = split_answers(&kg, q.root(), GraphView::TrainValid);
    println!("answers on the full graph: {full:?}");
    println!("  reachable with train+valid edges: {easy:?}; needing test edges: {hard:?}");

    // An untrained model ranks arbitrarily; see synthetic_end_to_end for a trained one.
    let cfg = ModelConfig { dim: 32, num_bases: 4, ..ModelConfig::default() };
    let params = Parameters::init(&cfg, kg.num_entities(), kg.num_relations(), &mut ChaCha8Rng::seed_from_u64(0));
    let enc = Encoder::new(&params, &cfg)?;
    let emb = enc.embed(&q)?;
    println!("query embedding (first 6 of {}): {:?}", emb.dim(), &emb[..6]);
    for (rank, (e, s)) in enc.answer(&q, 5, &[])?.into_iter().enumerate() {
        let mark = if full.binary_search(&e).is_ok() { "answer" } else { "" };
        println!("  #{:<2} {:>4} {:<5} {s:.4} {mark}", rank + 1, e, kg.entity_name(e).unwrap_or("?"));
    }
    Ok(())
}
