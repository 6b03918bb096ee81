//! Knowledge graph storage with nested train / train+valid / full views.
//!
//! Entity and relation ids are dense and 0-based. Each view keeps two
//! compressed adjacency indices: forward (head -> sorted `(relation, tail)`)
//! and inverse (tail -> sorted `(relation, head)`). Lookups for a single
//! `(entity, relation)` pair are a binary search inside the entity's slice.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type EntityId = u32;
pub type RelationId = u32;

/// A directed labelled edge `(head, relation, tail)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self { head, relation, tail }
    }
}

/// Which edge splits are visible. `Train < TrainValid < Full`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GraphView {
    Train,
    TrainValid,
    Full,
}

impl GraphView {
    pub const ALL: [GraphView; 3] = [GraphView::Train, GraphView::TrainValid, GraphView::Full];

    fn index(self) -> usize {
        match self {
            GraphView::Train => 0,
            GraphView::TrainValid => 1,
            GraphView::Full => 2,
        }
    }
}

impl fmt::Display for GraphView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GraphView::Train => "train",
            GraphView::TrainValid => "train+valid",
            GraphView::Full => "full",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: duplicate vocabulary entry `{entry}`")]
    DuplicateVocab {
        path: PathBuf,
        line: usize,
        entry: String,
    },
    #[error("{path}:{line}: dangling {kind} id {id} (vocabulary has {limit})")]
    Dangling {
        path: PathBuf,
        line: usize,
        kind: &'static str,
        id: u64,
        limit: usize,
    },
    #[error("{kind} id {id} out of range (< {limit} required)")]
    OutOfRange {
        kind: &'static str,
        id: u64,
        limit: usize,
    },
}

/// Compressed sparse rows keyed by entity; each row holds sorted `(relation, other)`.
#[derive(Debug, Clone, Default)]
struct Csr {
    offsets: Vec<usize>,
    entries: Vec<(RelationId, EntityId)>,
}

impl Csr {
    fn build(num_entities: usize, pairs: impl Iterator<Item = (EntityId, RelationId, EntityId)>) -> Self {
        let mut rows: Vec<(EntityId, RelationId, EntityId)> = pairs.collect();
        rows.sort_unstable();
        rows.dedup();
        let mut offsets = vec![0usize; num_entities + 1];
        for &(key, _, _) in &rows {
            offsets[key as usize + 1] += 1;
        }
        for i in 0..num_entities {
            offsets[i + 1] += offsets[i];
        }
        let entries = rows.into_iter().map(|(_, r, o)| (r, o)).collect();
        Self { offsets, entries }
    }

    fn row(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        let e = e as usize;
        &self.entries[self.offsets[e]..self.offsets[e + 1]]
    }

    fn with_relation(&self, e: EntityId, r: RelationId) -> &[(RelationId, EntityId)] {
        let row = self.row(e);
        let lo = row.partition_point(|&(rel, _)| rel < r);
        let hi = row.partition_point(|&(rel, _)| rel <= r);
        &row[lo..hi]
    }
}

#[derive(Debug, Clone, Default)]
struct ViewIndex {
    edges: Vec<Triple>,
    forward: Csr,
    inverse: Csr,
}

/// An immutable knowledge graph. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    views: [ViewIndex; 3],
}

fn normalize_split(mut edges: Vec<Triple>) -> Vec<Triple> {
    edges.sort_unstable();
    edges.dedup();
    edges
}

impl KnowledgeGraph {
    /// Builds a graph from in-memory vocabularies and edge splits.
    pub fn from_parts(
        entity_names: Vec<String>,
        relation_names: Vec<String>,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self, KgError> {
        let ne = entity_names.len();
        let nr = relation_names.len();
        for t in train.iter().chain(&valid).chain(&test) {
            check_range("entity", t.head as u64, ne)?;
            check_range("entity", t.tail as u64, ne)?;
            check_range("relation", t.relation as u64, nr)?;
        }
        let train = normalize_split(train);
        let valid = normalize_split(valid);
        let test = normalize_split(test);

        let mut tv = train.clone();
        tv.extend_from_slice(&valid);
        let tv = normalize_split(tv);
        let mut full = tv.clone();
        full.extend_from_slice(&test);
        let full = normalize_split(full);

        let index = |edges: Vec<Triple>| {
            let forward = Csr::build(ne, edges.iter().map(|t| (t.head, t.relation, t.tail)));
            let inverse = Csr::build(ne, edges.iter().map(|t| (t.tail, t.relation, t.head)));
            ViewIndex { edges, forward, inverse }
        };
        Ok(Self {
            entity_names,
            relation_names,
            views: [index(train.clone()), index(tv), index(full)],
            train,
            valid,
            test,
        })
    }

    /// Convenience constructor with generated names `e<i>` / `r<j>`.
    pub fn from_edges(
        num_entities: usize,
        num_relations: usize,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self, KgError> {
        let ents = (0..num_entities).map(|i| format!("e{i}")).collect();
        let rels = (0..num_relations).map(|i| format!("r{i}")).collect();
        Self::from_parts(ents, rels, train, valid, test)
    }

    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn entity_name(&self, e: EntityId) -> Option<&str> {
        self.entity_names.get(e as usize).map(String::as_str)
    }

    pub fn relation_name(&self, r: RelationId) -> Option<&str> {
        self.relation_names.get(r as usize).map(String::as_str)
    }

    pub fn train_edges(&self) -> &[Triple] {
        &self.train
    }

    pub fn valid_edges(&self) -> &[Triple] {
        &self.valid
    }

    pub fn test_edges(&self) -> &[Triple] {
        &self.test
    }

    /// All edges visible in `view`, sorted and deduplicated.
    pub fn edges(&self, view: GraphView) -> &[Triple] {
        &self.views[view.index()].edges
    }

    /// Tails (forward) or heads (inverse) adjacent to `e` through `r`, sorted ascending.
    pub fn neighbors(
        &self,
        view: GraphView,
        e: EntityId,
        r: RelationId,
        direction: Direction,
    ) -> Result<Vec<EntityId>, KgError> {
        check_range("entity", e as u64, self.num_entities())?;
        check_range("relation", r as u64, self.num_relations())?;
        Ok(self.neighbors_unchecked(view, e, r, direction).map(|(_, o)| o).collect())
    }

    /// Iterator form of [`neighbors`](Self::neighbors) for in-range ids.
    pub(crate) fn neighbors_unchecked(
        &self,
        view: GraphView,
        e: EntityId,
        r: RelationId,
        direction: Direction,
    ) -> impl Iterator<Item = (RelationId, EntityId)> + '_ {
        let v = &self.views[view.index()];
        let csr = match direction {
            Direction::Forward => &v.forward,
            Direction::Inverse => &v.inverse,
        };
        csr.with_relation(e, r).iter().copied()
    }

    /// Every `(relation, neighbor)` incident to `e` in the given direction.
    pub fn incident(&self, view: GraphView, e: EntityId, direction: Direction) -> &[(RelationId, EntityId)] {
        let v = &self.views[view.index()];
        match direction {
            Direction::Forward => v.forward.row(e),
            Direction::Inverse => v.inverse.row(e),
        }
    }

    /// Loads `entities.tsv`, `relations.tsv`, `train.tsv`, `valid.tsv`, `test.tsv` from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, KgError> {
        let dir = dir.as_ref();
        let entities = read_vocab(&dir.join("entities.tsv"))?;
        let relations = read_vocab(&dir.join("relations.tsv"))?;
        let mut splits = Vec::with_capacity(3);
        for name in ["train.tsv", "valid.tsv", "test.tsv"] {
            splits.push(read_triples(&dir.join(name), entities.len(), relations.len())?);
        }
        let test = splits.pop().unwrap_or_default();
        let valid = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        let kg = Self::from_parts(entities, relations, train, valid, test)?;
        log::info!(
            "loaded {}: {} entities, {} relations, {}/{}/{} train/valid/test edges",
            dir.display(),
            kg.num_entities(),
            kg.num_relations(),
            kg.train.len(),
            kg.valid.len(),
            kg.test.len()
        );
        Ok(kg)
    }

    /// Writes the graph in the same TSV layout [`load`](Self::load) reads.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), KgError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| KgError::Io { path: dir.to_path_buf(), source })?;
        write_vocab(&dir.join("entities.tsv"), &self.entity_names)?;
        write_vocab(&dir.join("relations.tsv"), &self.relation_names)?;
        write_triples(&dir.join("train.tsv"), &self.train)?;
        write_triples(&dir.join("valid.tsv"), &self.valid)?;
        write_triples(&dir.join("test.tsv"), &self.test)?;
        Ok(())
    }
}

fn check_range(kind: &'static str, id: u64, limit: usize) -> Result<(), KgError> {
    if id as usize >= limit || id > u32::MAX as u64 {
        return Err(KgError::OutOfRange { kind, id, limit });
    }
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String, KgError> {
    fs::read_to_string(path).map_err(|source| KgError::Io { path: path.to_path_buf(), source })
}

fn read_vocab(path: &Path) -> Result<Vec<String>, KgError> {
    let text = read_to_string(path)?;
    let mut names = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: &str| KgError::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            reason: reason.to_string(),
        };
        let (id, name) = line.split_once('\t').ok_or_else(|| malformed("expected `id<TAB>name`"))?;
        let id: usize = id.trim().parse().map_err(|_| malformed("id is not a non-negative integer"))?;
        if id < names.len() {
            return Err(KgError::DuplicateVocab {
                path: path.to_path_buf(),
                line: lineno,
                entry: id.to_string(),
            });
        }
        if id != names.len() {
            return Err(malformed(&format!("ids must be contiguous from 0; expected {}", names.len())));
        }
        if !seen.insert(name.to_string()) {
            return Err(KgError::DuplicateVocab {
                path: path.to_path_buf(),
                line: lineno,
                entry: name.to_string(),
            });
        }
        names.push(name.to_string());
    }
    Ok(names)
}

fn read_triples(path: &Path, ne: usize, nr: usize) -> Result<Vec<Triple>, KgError> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::Malformed {
                path: path.to_path_buf(),
                line: lineno,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let mut ids = [0u64; 3];
        for (slot, f) in ids.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| KgError::Malformed {
                path: path.to_path_buf(),
                line: lineno,
                reason: format!("`{f}` is not a non-negative integer"),
            })?;
        }
        let dangling = |kind, id, limit| KgError::Dangling {
            path: path.to_path_buf(),
            line: lineno,
            kind,
            id,
            limit,
        };
        if ids[0] as usize >= ne {
            return Err(dangling("entity", ids[0], ne));
        }
        if ids[1] as usize >= nr {
            return Err(dangling("relation", ids[1], nr));
        }
        if ids[2] as usize >= ne {
            return Err(dangling("entity", ids[2], ne));
        }
        out.push(Triple::new(ids[0] as u32, ids[1] as u32, ids[2] as u32));
    }
    Ok(out)
}

fn write_file(path: &Path, body: &str) -> Result<(), KgError> {
    let mut f = fs::File::create(path).map_err(|source| KgError::Io { path: path.to_path_buf(), source })?;
    f.write_all(body.as_bytes())
        .map_err(|source| KgError::Io { path: path.to_path_buf(), source })
}

fn write_vocab(path: &Path, names: &[String]) -> Result<(), KgError> {
    let body: String = names.iter().enumerate().map(|(i, n)| format!("{i}\t{n}\n")).collect();
    write_file(path, &body)
}

fn write_triples(path: &Path, edges: &[Triple]) -> Result<(), KgError> {
    let body: String = edges
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
        .collect();
    write_file(path, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    // a=0, b=1, c=2, d=3; r=0, s=1
    fn toy() -> KnowledgeGraph {
        let train = vec![Triple::new(0, 0, 1), Triple::new(0, 0, 2), Triple::new(1, 1, 3)];
        KnowledgeGraph::from_edges(4, 2, train, vec![], vec![]).unwrap()
    }

    #[test]
    fn toy_neighbors() {
        let kg = toy();
        assert_eq!(kg.neighbors(GraphView::Full, 0, 0, Direction::Forward).unwrap(), vec![1, 2]);
        assert!(kg.neighbors(GraphView::Full, 3, 0, Direction::Forward).unwrap().is_empty());
        assert_eq!(kg.neighbors(GraphView::Full, 3, 1, Direction::Inverse).unwrap(), vec![1]);
    }

    #[test]
    fn out_of_range_lookup() {
        let kg = toy();
        assert!(matches!(
            kg.neighbors(GraphView::Train, 9, 0, Direction::Forward),
            Err(KgError::OutOfRange { kind: "entity", .. })
        ));
        assert!(matches!(
            kg.neighbors(GraphView::Train, 0, 7, Direction::Forward),
            Err(KgError::OutOfRange { kind: "relation", .. })
        ));
    }

    #[test]
    fn empty_eval_splits_collapse_views() {
        let kg = toy();
        assert!(kg.valid_edges().is_empty() && kg.test_edges().is_empty());
        assert_eq!(kg.edges(GraphView::Train), kg.edges(GraphView::TrainValid));
        assert_eq!(kg.edges(GraphView::Train), kg.edges(GraphView::Full));
    }

    #[test]
    fn splits_dedup_and_nest() {
        let train = vec![Triple::new(1, 0, 2), Triple::new(0, 0, 1), Triple::new(0, 0, 1)];
        let valid = vec![Triple::new(2, 0, 0), Triple::new(0, 0, 1)];
        let test = vec![Triple::new(2, 1, 1)];
        let kg = KnowledgeGraph::from_edges(3, 2, train, valid, test).unwrap();
        assert_eq!(kg.train_edges(), &[Triple::new(0, 0, 1), Triple::new(1, 0, 2)]);
        assert_eq!(kg.edges(GraphView::TrainValid).len(), 3);
        assert_eq!(kg.edges(GraphView::Full).len(), 4);
        assert!(kg.neighbors(GraphView::Train, 2, 1, Direction::Forward).unwrap().is_empty());
        assert_eq!(kg.neighbors(GraphView::Full, 2, 1, Direction::Forward).unwrap(), vec![1]);
    }

    #[test]
    fn rejects_dangling_ids_in_memory() {
        let err = KnowledgeGraph::from_edges(2, 1, vec![Triple::new(0, 0, 5)], vec![], vec![]);
        assert!(matches!(err, Err(KgError::OutOfRange { .. })));
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let kg = toy();
        kg.save(dir.path()).unwrap();
        let back = KnowledgeGraph::load(dir.path()).unwrap();
        assert_eq!(back.num_entities(), 4);
        assert_eq!(back.edges(GraphView::Full), kg.edges(GraphView::Full));
        assert_eq!(back.entity_name(2), Some("e2"));

        fs::write(dir.path().join("valid.tsv"), "0\t0\t1\n0\t0\n").unwrap();
        match KnowledgeGraph::load(dir.path()) {
            Err(KgError::Malformed { line, path, .. }) => {
                assert_eq!(line, 2);
                assert!(path.ends_with("valid.tsv"));
            }
            other => panic!("expected malformed error, got {other:?}"),
        }

        fs::write(dir.path().join("valid.tsv"), "0\t0\t9\n").unwrap();
        assert!(matches!(KnowledgeGraph::load(dir.path()), Err(KgError::Dangling { id: 9, .. })));

        fs::write(dir.path().join("valid.tsv"), "").unwrap();
        fs::write(dir.path().join("relations.tsv"), "0\tr\n1\tr\n").unwrap();
        assert!(matches!(KnowledgeGraph::load(dir.path()), Err(KgError::DuplicateVocab { line: 2, .. })));

        fs::write(dir.path().join("relations.tsv"), "0\tr\n0\ts\n").unwrap();
        assert!(matches!(KnowledgeGraph::load(dir.path()), Err(KgError::DuplicateVocab { .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = KnowledgeGraph::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("entities.tsv"));
    }
}
