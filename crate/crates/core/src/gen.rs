//! Labeled query generation by backward random walks.
//!
//! Each query is built answer-first: a target entity is chosen, then every
//! projection walks an incoming edge backwards to its source. Evaluation
//! queries route their top projection through a held-out edge so that at
//! least one answer needs a missing link.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{Direction, EntityId, GraphView, KnowledgeGraph, RelationId};
use crate::oracle::{answer_query, intersect, split_answers};
use crate::query::{write_labeled, LabeledQuery, Query, QueryError, QueryNode, Shape, Structure};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("unknown split `{0}` (expected train, valid or test)")]
    UnknownSplit(String),
    #[error("max_answers must be at least 1")]
    BadMaxAnswers,
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    /// View the walk runs on.
    pub fn sampling_view(self) -> GraphView {
        match self {
            Split::Train => GraphView::Train,
            Split::Valid => GraphView::TrainValid,
            Split::Test => GraphView::Full,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(GenError::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub counts: BTreeMap<Split, BTreeMap<Structure, usize>>,
    /// Answer cap for valid/test queries.
    pub max_answers: usize,
    /// Answer cap for train queries (`None` = unlimited).
    pub train_max_answers: Option<usize>,
    pub seed: u64,
    /// Consecutive failed attempts tolerated before giving up on a (split, structure) pair.
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { counts: BTreeMap::new(), max_answers: 100, train_max_answers: None, seed: 0, max_retries: 128 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.max_answers == 0 || self.train_max_answers == Some(0) {
            return Err(GenError::BadMaxAnswers);
        }
        Ok(())
    }

    /// Same count for every listed structure in one split.
    pub fn with_counts(mut self, split: Split, structures: &[Structure], n: usize) -> Self {
        let entry = self.counts.entry(split).or_default();
        for s in structures {
            entry.insert(*s, n);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountEntry {
    pub requested: usize,
    pub achieved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub max_answers: usize,
    pub counts: BTreeMap<Split, BTreeMap<Structure, CountEntry>>,
}

impl Manifest {
    /// `(split, structure, requested, achieved)` for every shortfall.
    pub fn shortfalls(&self) -> Vec<(Split, Structure, usize, usize)> {
        let mut out = Vec::new();
        for (split, m) in &self.counts {
            for (s, c) in m {
                if c.achieved < c.requested {
                    out.push((*split, *s, c.requested, c.achieved));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct Generated {
    pub queries: BTreeMap<Split, BTreeMap<Structure, Vec<LabeledQuery>>>,
    pub manifest: Option<Manifest>,
}

impl Generated {
    pub fn split(&self, split: Split) -> BTreeMap<Structure, Vec<LabeledQuery>> {
        self.queries.get(&split).cloned().unwrap_or_default()
    }

    /// Writes `<split>-<tag>.jsonl` files and `manifest.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), GenError> {
        let dir = dir.as_ref();
        let io = |source| GenError::Io { path: dir.display().to_string(), source };
        fs::create_dir_all(dir).map_err(io)?;
        for (split, by_tag) in &self.queries {
            for (s, qs) in by_tag {
                write_labeled(dir.join(format!("{split}-{s}.jsonl")), qs)?;
            }
        }
        if let Some(m) = &self.manifest {
            let path = dir.join("manifest.json");
            let text = serde_json::to_string_pretty(m).expect("manifest serializes") + "\n";
            fs::write(&path, text).map_err(|source| GenError::Io { path: path.display().to_string(), source })?;
        }
        Ok(())
    }
}

/// Independent RNG stream per (seed, split, structure).
fn job_rng(seed: u64, split: Split, s: Structure) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = s.as_str().bytes().fold(0u64, |h, b| (h << 8) | u64::from(b));
    rng.set_stream(tag ^ ((split as u64 + 1) << 56));
    rng
}

/// Instantiates `shape` so that `target` is among its answers on `view`,
/// or `None` on a dead end. `forced` pins the first positive projection to an edge.
fn instantiate<R: Rng + ?Sized>(
    rng: &mut R,
    kg: &KnowledgeGraph,
    view: GraphView,
    shape: &Shape,
    target: EntityId,
    forced: Option<(EntityId, RelationId)>,
) -> Option<QueryNode> {
    match shape {
        Shape::Anchor => Some(QueryNode::anchor(target)),
        Shape::Proj(child) => {
            let (src, r) = match forced {
                Some(edge) => edge,
                None => {
                    let &(r, src) = kg.incident(view, target, Direction::Inverse).choose(rng)?;
                    (src, r)
                }
            };
            Some(QueryNode::proj(r, instantiate(rng, kg, view, child, src, None)?))
        }
        Shape::And(children) => {
            let mut forced = forced;
            let mut positive = Vec::new();
            for c in children.iter().filter(|c| !matches!(c, Shape::Not(_))) {
                positive.push(instantiate(rng, kg, view, c, target, forced.take())?);
            }
            if has_duplicates(&positive) {
                return None;
            }
            let mut candidates = answer_query(kg, view, &positive[0]);
            for p in &positive[1..] {
                candidates = intersect(&candidates, &answer_query(kg, view, p));
            }
            let mut out = positive;
            for c in children {
                let Shape::Not(inner) = c else { continue };
                // Anchor the negated branch at another candidate so it removes something.
                let others: Vec<EntityId> = candidates.iter().copied().filter(|&e| e != target).collect();
                let pivot = match others.choose(rng) {
                    Some(e) => *e,
                    None => random_tail(rng, kg, view)?,
                };
                let neg = instantiate(rng, kg, view, inner, pivot, None)?;
                if answer_query(kg, view, &neg).binary_search(&target).is_ok() {
                    return None;
                }
                out.push(QueryNode::not(neg));
            }
            Some(QueryNode::And(out))
        }
        Shape::Or(children) => {
            let mut out = vec![instantiate(rng, kg, view, &children[0], target, forced)?];
            for c in &children[1..] {
                let other = random_tail(rng, kg, view)?;
                out.push(instantiate(rng, kg, view, c, other, None)?);
            }
            if has_duplicates(&out) {
                return None;
            }
            Some(QueryNode::Or(out))
        }
        Shape::Not(_) => None,
    }
}

fn has_duplicates(nodes: &[QueryNode]) -> bool {
    let canon: Vec<QueryNode> = nodes.iter().map(QueryNode::canonical).collect();
    (1..canon.len()).any(|i| canon[..i].contains(&canon[i]))
}

fn random_tail<R: Rng + ?Sized>(rng: &mut R, kg: &KnowledgeGraph, view: GraphView) -> Option<EntityId> {
    kg.edges(view).choose(rng).map(|t| t.tail)
}

/// One query of the given structure whose answers on `view` include the tail
/// of a uniformly drawn edge; `None` on a dead-end walk.
pub fn sample_structure_instance<R: Rng + ?Sized>(
    rng: &mut R,
    kg: &KnowledgeGraph,
    view: GraphView,
    structure: Structure,
) -> Option<Query> {
    let edge = *kg.edges(view).choose(rng)?;
    sample_through_edge(rng, kg, view, structure, (edge.head, edge.relation, edge.tail))
}

fn sample_through_edge<R: Rng + ?Sized>(
    rng: &mut R,
    kg: &KnowledgeGraph,
    view: GraphView,
    structure: Structure,
    (h, r, t): (EntityId, RelationId, EntityId),
) -> Option<Query> {
    let node = instantiate(rng, kg, view, &structure.template(), t, Some((h, r)))?;
    if answer_query(kg, view, &node).binary_search(&t).is_err() {
        return None;
    }
    Query::new(node).ok()
}

/// Labels one instance for `split`, applying the split's acceptance rules.
fn label(kg: &KnowledgeGraph, split: Split, q: Query, cfg: &GenConfig) -> Option<LabeledQuery> {
    let (easy, hard, cap) = match split {
        Split::Train => (answer_query(kg, GraphView::Train, q.root()), Vec::new(), cfg.train_max_answers),
        Split::Valid => {
            let (e, h) = split_answers(kg, q.root(), GraphView::Train);
            (e, h, Some(cfg.max_answers))
        }
        Split::Test => {
            let (e, h) = split_answers(kg, q.root(), GraphView::TrainValid);
            (e, h, Some(cfg.max_answers))
        }
    };
    let total = easy.len() + hard.len();
    if total == 0 || cap.is_some_and(|c| total > c) || (split != Split::Train && hard.is_empty()) {
        return None;
    }
    LabeledQuery::new(q, easy, hard).ok()
}

/// Generates `n` distinct labeled queries of one structure; stops early if
/// `max_retries` consecutive attempts fail.
pub fn generate_one(
    kg: &KnowledgeGraph,
    split: Split,
    structure: Structure,
    n: usize,
    cfg: &GenConfig,
) -> Vec<LabeledQuery> {
    let mut rng = job_rng(cfg.seed, split, structure);
    let view = split.sampling_view();
    let pool = match split {
        Split::Train => kg.train_edges(),
        Split::Valid => kg.valid_edges(),
        Split::Test => kg.test_edges(),
    };
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut failures = 0;
    while out.len() < n && failures < cfg.max_retries && !pool.is_empty() {
        let e = pool[rng.gen_range(0..pool.len())];
        let labeled = sample_through_edge(&mut rng, kg, view, structure, (e.head, e.relation, e.tail))
            .and_then(|q| label(kg, split, q, cfg))
            .filter(|lq| seen.insert(lq.query.encode()));
        match labeled {
            Some(lq) => {
                out.push(lq);
                failures = 0;
            }
            None => failures += 1,
        }
    }
    if out.len() < n {
        warn!("{split}-{structure}: generated {} of {n} queries", out.len());
    }
    out
}

/// Runs every (split, structure) job in `cfg.counts`.
pub fn generate(kg: &KnowledgeGraph, cfg: &GenConfig) -> Result<Generated, GenError> {
    cfg.validate()?;
    let jobs: Vec<(Split, Structure, usize)> = cfg
        .counts
        .iter()
        .flat_map(|(split, m)| m.iter().map(move |(s, n)| (*split, *s, *n)))
        .collect();
    let results: Vec<Vec<LabeledQuery>> =
        jobs.par_iter().map(|&(split, s, n)| generate_one(kg, split, s, n, cfg)).collect();
    let mut out = Generated::default();
    let mut manifest = Manifest { seed: cfg.seed, max_answers: cfg.max_answers, counts: BTreeMap::new() };
    for ((split, s, n), qs) in jobs.into_iter().zip(results) {
        manifest
            .counts
            .entry(split)
            .or_default()
            .insert(s, CountEntry { requested: n, achieved: qs.len() });
        out.queries.entry(split).or_default().insert(s, qs);
    }
    out.manifest = Some(manifest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;

    // a=0 b=1 c=2 d=3; r=0 s=1
    fn toy() -> KnowledgeGraph {
        let train = vec![Triple::new(0, 0, 1), Triple::new(0, 0, 2), Triple::new(1, 1, 3)];
        KnowledgeGraph::from_edges(4, 2, train, vec![], vec![]).unwrap()
    }

    #[test]
    fn one_hop_is_an_edge() {
        let kg = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let q = sample_structure_instance(&mut rng, &kg, GraphView::Train, Structure::P1).unwrap();
            let QueryNode::Proj(r, a) = q.root() else { panic!() };
            let QueryNode::Anchor(h) = **a else { panic!() };
            assert!(kg.train_edges().iter().any(|t| t.head == h && t.relation == *r));
        }
    }

    #[test]
    fn two_hop_chain_is_forced() {
        let kg = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let want = QueryNode::proj(1, QueryNode::proj(0, QueryNode::anchor(0)));
        let mut found = 0;
        for _ in 0..30 {
            if let Some(q) = sample_structure_instance(&mut rng, &kg, GraphView::Train, Structure::P2) {
                assert_eq!(q.root(), &want);
                found += 1;
            }
        }
        assert!(found > 0);
    }

    #[test]
    fn train_counts_and_answers() {
        let kg = toy();
        let cfg = GenConfig::default().with_counts(Split::Train, &[Structure::P1], 3);
        let out = generate(&kg, &cfg).unwrap();
        let qs = &out.queries[&Split::Train][&Structure::P1];
        // Only (a,r) and (b,s) exist; the third request is a reported shortfall.
        assert_eq!(qs.len(), 2);
        assert!(qs.iter().all(|lq| !lq.easy.is_empty() && lq.hard.is_empty()));
        let m = out.manifest.unwrap();
        assert_eq!(m.counts[&Split::Train][&Structure::P1], CountEntry { requested: 3, achieved: 2 });
        assert_eq!(m.shortfalls(), vec![(Split::Train, Structure::P1, 3, 2)]);
    }

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("dev".parse::<Split>().is_err());
    }
}
