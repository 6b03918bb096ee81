//! Synthetic knowledge graphs with learnable compositional structure.
//!
//! Entities are partitioned into clusters; each relation maps every cluster
//! to a fixed image cluster, and each head links to a few members of the
//! image. Held-out edges are therefore predictable from the cluster pattern,
//! and multi-hop queries compose the cluster maps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::QuerySets;
use crate::gen::{generate, GenConfig, GenError, Manifest, Split};
use crate::kg::{EntityId, GraphView, KgError, KnowledgeGraph, RelationId, Triple};
use crate::query::Structure;
use crate::train::make_1p_queries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_entities: usize,
    pub num_relations: usize,
    pub cluster_size: usize,
    /// Tails per (head, relation), drawn from the image cluster.
    pub fanout: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_entities: 300,
            num_relations: 6,
            cluster_size: 5,
            fanout: 3,
            valid_fraction: 0.05,
            test_fraction: 0.05,
            seed: 0,
        }
    }
}

/// Builds the graph. Held-out edges are chosen so that every entity keeps at
/// least one training edge in each direction it had one.
pub fn synthetic_kg(cfg: &SynthConfig) -> Result<KnowledgeGraph, KgError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.cluster_size.max(1);
    let num_clusters = cfg.num_entities.div_ceil(size);
    let members = |c: usize| (c * size..((c + 1) * size).min(cfg.num_entities)).map(|e| e as EntityId);

    let mut edges = Vec::new();
    for r in 0..cfg.num_relations {
        let mut image: Vec<usize> = (0..num_clusters).collect();
        image.shuffle(&mut rng);
        for h in 0..cfg.num_entities {
            let target: Vec<EntityId> = members(image[h / size]).collect();
            for &t in target.choose_multiple(&mut rng, cfg.fanout.min(target.len())) {
                edges.push(Triple::new(h as EntityId, r as RelationId, t));
            }
        }
    }
    edges.shuffle(&mut rng);

    let n_valid = (edges.len() as f64 * cfg.valid_fraction).round() as usize;
    let n_test = (edges.len() as f64 * cfg.test_fraction).round() as usize;
    let mut out_deg = vec![0usize; cfg.num_entities];
    let mut in_deg = vec![0usize; cfg.num_entities];
    for t in &edges {
        out_deg[t.head as usize] += 1;
        in_deg[t.tail as usize] += 1;
    }
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for t in edges {
        let removable = out_deg[t.head as usize] > 1 && in_deg[t.tail as usize] > 1;
        if removable && valid.len() < n_valid {
            valid.push(t);
        } else if removable && test.len() < n_test {
            test.push(t);
        } else {
            train.push(t);
            continue;
        }
        out_deg[t.head as usize] -= 1;
        in_deg[t.tail as usize] -= 1;
    }
    KnowledgeGraph::from_edges(cfg.num_entities, cfg.num_relations, train, valid, test)
}

/// Uniformly random graph (no structure) with `num_edges` distinct training edges.
pub fn random_kg(
    num_entities: usize,
    num_relations: usize,
    num_edges: usize,
    seed: u64,
) -> Result<KnowledgeGraph, KgError> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = num_entities * num_entities * num_relations;
    let mut set = std::collections::BTreeSet::new();
    while set.len() < num_edges.min(cap) {
        set.insert(Triple::new(
            rng.gen_range(0..num_entities) as EntityId,
            rng.gen_range(0..num_relations) as RelationId,
            rng.gen_range(0..num_entities) as EntityId,
        ));
    }
    KnowledgeGraph::from_edges(num_entities, num_relations, set.into_iter().collect(), vec![], vec![])
}

/// A graph with train / valid / test query sets.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub kg: KnowledgeGraph,
    pub train: QuerySets,
    pub valid: QuerySets,
    pub test: QuerySets,
    pub manifest: Manifest,
}

/// Query counts for [`benchmark`].
#[derive(Debug, Clone, Copy)]
pub struct BenchmarkCounts {
    /// Per training structure; 1p training queries are always the full edge set.
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

/// Generates training queries for [`Structure::TRAINING`] and evaluation
/// queries for all fourteen structures.
pub fn benchmark(kg: KnowledgeGraph, counts: BenchmarkCounts) -> Result<Benchmark, GenError> {
    let complex: Vec<Structure> = Structure::TRAINING.iter().copied().filter(|s| *s != Structure::P1).collect();
    let cfg = GenConfig { seed: counts.seed, ..GenConfig::default() }
        .with_counts(Split::Train, &complex, counts.train)
        .with_counts(Split::Valid, &Structure::ALL, counts.valid)
        .with_counts(Split::Test, &Structure::ALL, counts.test);
    let mut out = generate(&kg, &cfg)?;
    let mut train = out.split(Split::Train);
    train.insert(Structure::P1, make_1p_queries(&kg, GraphView::Train));
    let valid = out.split(Split::Valid);
    let test = out.split(Split::Test);
    let manifest = out.manifest.take().expect("generate fills the manifest");
    Ok(Benchmark { kg, train, valid, test, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Direction, GraphView};

    #[test]
    fn shape_and_split_sizes() {
        let kg = synthetic_kg(&SynthConfig::default()).unwrap();
        assert_eq!(kg.num_entities(), 300);
        assert_eq!(kg.num_relations(), 6);
        let total = kg.train_edges().len() + kg.valid_edges().len() + kg.test_edges().len();
        assert_eq!(total, 300 * 6 * 3);
        assert_eq!(kg.valid_edges().len(), 270);
        assert_eq!(kg.test_edges().len(), 270);
        for e in 0..300 {
            assert!(!kg.incident(GraphView::Train, e, Direction::Forward).is_empty());
        }
    }

    #[test]
    fn heads_in_a_cluster_share_the_image() {
        let kg = synthetic_kg(&SynthConfig::default()).unwrap();
        let image = |h: EntityId, r| {
            let t = kg.neighbors(GraphView::Full, h, r, Direction::Forward).unwrap();
            t.iter().map(|x| x / 5).collect::<std::collections::BTreeSet<_>>()
        };
        for r in 0..6 {
            assert_eq!(image(10, r).len(), 1);
            assert_eq!(image(10, r), image(14, r));
        }
    }

    #[test]
    fn deterministic() {
        let a = synthetic_kg(&SynthConfig::default()).unwrap();
        let b = synthetic_kg(&SynthConfig::default()).unwrap();
        assert_eq!(a.edges(GraphView::Full), b.edges(GraphView::Full));
        assert_eq!(random_kg(50, 4, 200, 3).unwrap().train_edges().len(), 200);
    }
}
