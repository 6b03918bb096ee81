//! Query trees over entities and relations.
//!
//! A query is a tree whose leaves are anchor entities and whose interior
//! nodes are relation projections, n-ary conjunction / disjunction, and
//! negation. Trees are kept in a canonical form: children of `And` / `Or`
//! are sorted by a structural hash (ties broken by the derived order), so two
//! queries that differ only by child order compare equal.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, RelationId};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("invalid query JSON: {0}")]
    Json(serde_json::Error),
    #[error("`{op}` needs {expected} argument(s), found {found}")]
    Arity {
        op: &'static str,
        expected: &'static str,
        found: usize,
    },
    #[error("{kind} id {id} out of range (< {limit} required)")]
    OutOfRange {
        kind: &'static str,
        id: u64,
        limit: usize,
    },
    #[error("query root must not be a bare {0}")]
    BadRoot(&'static str),
    #[error("unknown structure tag `{0}`")]
    UnknownTag(String),
    #[error("tag `{tag}` does not match the query shape (classified as `{actual}`)")]
    TagMismatch { tag: String, actual: String },
    #[error("easy and hard answer sets overlap at entity {0}")]
    OverlappingAnswers(EntityId),
    #[error("{path}:{line}: {source}")]
    Line {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<QueryError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<serde_json::Error> for QueryError {
    fn from(e: serde_json::Error) -> Self {
        Self::Json(e)
    }
}

/// One node of a query tree.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QueryNode {
    Anchor(EntityId),
    Proj(RelationId, Box<QueryNode>),
    And(Vec<QueryNode>),
    Or(Vec<QueryNode>),
    Not(Box<QueryNode>),
}

impl QueryNode {
    pub fn anchor(e: EntityId) -> Self {
        QueryNode::Anchor(e)
    }

    pub fn proj(r: RelationId, arg: QueryNode) -> Self {
        QueryNode::Proj(r, Box::new(arg))
    }

    pub fn and(args: Vec<QueryNode>) -> Self {
        QueryNode::And(args)
    }

    pub fn or(args: Vec<QueryNode>) -> Self {
        QueryNode::Or(args)
    }

    pub fn not(arg: QueryNode) -> Self {
        QueryNode::Not(Box::new(arg))
    }

    fn op_name(&self) -> &'static str {
        match self {
            QueryNode::Anchor(_) => "anchor",
            QueryNode::Proj(..) => "proj",
            QueryNode::And(_) => "and",
            QueryNode::Or(_) => "or",
            QueryNode::Not(_) => "not",
        }
    }

    /// FNV-1a over a pre-order walk; children of And/Or must already be canonical.
    pub fn structural_hash(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        fn mix(h: u64, x: u64) -> u64 {
            x.to_le_bytes().iter().fold(h, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
        }
        fn walk(n: &QueryNode, h: u64) -> u64 {
            match n {
                QueryNode::Anchor(e) => mix(mix(h, 1), u64::from(*e)),
                QueryNode::Proj(r, c) => walk(c, mix(mix(h, 2), u64::from(*r))),
                QueryNode::And(cs) => cs.iter().fold(mix(mix(h, 3), cs.len() as u64), |h, c| walk(c, h)),
                QueryNode::Or(cs) => cs.iter().fold(mix(mix(h, 4), cs.len() as u64), |h, c| walk(c, h)),
                QueryNode::Not(c) => walk(c, mix(h, 5)),
            }
        }
        walk(self, 0xcbf2_9ce4_8422_2325)
    }

    /// Returns a copy with every And/Or child list sorted canonically.
    pub fn canonical(&self) -> QueryNode {
        match self {
            QueryNode::Anchor(e) => QueryNode::Anchor(*e),
            QueryNode::Proj(r, c) => QueryNode::proj(*r, c.canonical()),
            QueryNode::And(cs) => QueryNode::And(sort_children(cs)),
            QueryNode::Or(cs) => QueryNode::Or(sort_children(cs)),
            QueryNode::Not(c) => QueryNode::not(c.canonical()),
        }
    }

    /// Checks arity rules and, when given, id ranges.
    pub fn validate(&self, limits: Option<(usize, usize)>) -> Result<(), QueryError> {
        match self {
            QueryNode::Anchor(e) => {
                if let Some((ne, _)) = limits {
                    if *e as usize >= ne {
                        return Err(QueryError::OutOfRange { kind: "entity", id: u64::from(*e), limit: ne });
                    }
                }
                Ok(())
            }
            QueryNode::Proj(r, c) => {
                if let Some((_, nr)) = limits {
                    if *r as usize >= nr {
                        return Err(QueryError::OutOfRange { kind: "relation", id: u64::from(*r), limit: nr });
                    }
                }
                c.validate(limits)
            }
            QueryNode::And(cs) | QueryNode::Or(cs) => {
                if cs.len() < 2 {
                    return Err(QueryError::Arity { op: self.op_name(), expected: "at least 2", found: cs.len() });
                }
                cs.iter().try_for_each(|c| c.validate(limits))
            }
            QueryNode::Not(c) => c.validate(limits),
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            QueryNode::Anchor(_) => Shape::Anchor,
            QueryNode::Proj(_, c) => Shape::Proj(Box::new(c.shape())),
            QueryNode::And(cs) => Shape::And(cs.iter().map(QueryNode::shape).collect()),
            QueryNode::Or(cs) => Shape::Or(cs.iter().map(QueryNode::shape).collect()),
            QueryNode::Not(c) => Shape::Not(Box::new(c.shape())),
        }
        .canonical()
    }

    /// Anchor entities in pre-order.
    pub fn anchors(&self) -> Vec<EntityId> {
        let mut out = Vec::new();
        self.visit(&mut |n| {
            if let QueryNode::Anchor(e) = n {
                out.push(*e);
            }
        });
        out
    }

    pub fn num_nodes(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    fn visit(&self, f: &mut impl FnMut(&QueryNode)) {
        f(self);
        match self {
            QueryNode::Anchor(_) => {}
            QueryNode::Proj(_, c) | QueryNode::Not(c) => c.visit(f),
            QueryNode::And(cs) | QueryNode::Or(cs) => cs.iter().for_each(|c| c.visit(f)),
        }
    }
}

fn sort_children(cs: &[QueryNode]) -> Vec<QueryNode> {
    let mut keyed: Vec<(u64, QueryNode)> = cs
        .iter()
        .map(|c| {
            let c = c.canonical();
            (c.structural_hash(), c)
        })
        .collect();
    keyed.sort();
    keyed.into_iter().map(|(_, c)| c).collect()
}

/// A query tree with ids erased.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Anchor,
    Proj(Box<Shape>),
    And(Vec<Shape>),
    Or(Vec<Shape>),
    Not(Box<Shape>),
}

impl Shape {
    fn p(inner: Shape) -> Shape {
        Shape::Proj(Box::new(inner))
    }

    fn n(inner: Shape) -> Shape {
        Shape::Not(Box::new(inner))
    }

    pub fn canonical(&self) -> Shape {
        match self {
            Shape::Anchor => Shape::Anchor,
            Shape::Proj(c) => Shape::p(c.canonical()),
            Shape::Not(c) => Shape::n(c.canonical()),
            Shape::And(cs) => {
                let mut cs: Vec<Shape> = cs.iter().map(Shape::canonical).collect();
                cs.sort();
                Shape::And(cs)
            }
            Shape::Or(cs) => {
                let mut cs: Vec<Shape> = cs.iter().map(Shape::canonical).collect();
                cs.sort();
                Shape::Or(cs)
            }
        }
    }

    /// Fills the shape with ids drawn by `entity` / `relation`.
    pub fn instantiate(
        &self,
        entity: &mut impl FnMut() -> EntityId,
        relation: &mut impl FnMut() -> RelationId,
    ) -> QueryNode {
        match self {
            Shape::Anchor => QueryNode::Anchor(entity()),
            Shape::Proj(c) => {
                let r = relation();
                QueryNode::proj(r, c.instantiate(entity, relation))
            }
            Shape::Not(c) => QueryNode::not(c.instantiate(entity, relation)),
            Shape::And(cs) => QueryNode::And(cs.iter().map(|c| c.instantiate(entity, relation)).collect()),
            Shape::Or(cs) => QueryNode::Or(cs.iter().map(|c| c.instantiate(entity, relation)).collect()),
        }
    }
}

/// The fourteen benchmark query structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Structure {
    #[serde(rename = "1p")]
    P1,
    #[serde(rename = "2p")]
    P2,
    #[serde(rename = "3p")]
    P3,
    #[serde(rename = "2i")]
    I2,
    #[serde(rename = "3i")]
    I3,
    #[serde(rename = "ip")]
    Ip,
    #[serde(rename = "pi")]
    Pi,
    #[serde(rename = "2u")]
    U2,
    #[serde(rename = "up")]
    Up,
    #[serde(rename = "2in")]
    In2,
    #[serde(rename = "3in")]
    In3,
    #[serde(rename = "inp")]
    Inp,
    #[serde(rename = "pin")]
    Pin,
    #[serde(rename = "pni")]
    Pni,
}

impl Structure {
    pub const ALL: [Structure; 14] = [
        Structure::P1,
        Structure::P2,
        Structure::P3,
        Structure::I2,
        Structure::I3,
        Structure::Ip,
        Structure::Pi,
        Structure::U2,
        Structure::Up,
        Structure::In2,
        Structure::In3,
        Structure::Inp,
        Structure::Pin,
        Structure::Pni,
    ];

    /// Negation-free structures, averaged into `avg_epfo`.
    pub const EPFO: [Structure; 9] = [
        Structure::P1,
        Structure::P2,
        Structure::P3,
        Structure::I2,
        Structure::I3,
        Structure::Pi,
        Structure::Ip,
        Structure::U2,
        Structure::Up,
    ];

    /// Structures containing negation, averaged into `avg_neg`.
    pub const NEGATION: [Structure; 5] =
        [Structure::In2, Structure::In3, Structure::Inp, Structure::Pin, Structure::Pni];

    /// Structures used for training in the full-FOL regime.
    pub const TRAINING: [Structure; 10] = [
        Structure::P1,
        Structure::P2,
        Structure::P3,
        Structure::I2,
        Structure::I3,
        Structure::In2,
        Structure::In3,
        Structure::Inp,
        Structure::Pin,
        Structure::Pni,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::P1 => "1p",
            Structure::P2 => "2p",
            Structure::P3 => "3p",
            Structure::I2 => "2i",
            Structure::I3 => "3i",
            Structure::Ip => "ip",
            Structure::Pi => "pi",
            Structure::U2 => "2u",
            Structure::Up => "up",
            Structure::In2 => "2in",
            Structure::In3 => "3in",
            Structure::Inp => "inp",
            Structure::Pin => "pin",
            Structure::Pni => "pni",
        }
    }

    pub fn has_negation(self) -> bool {
        Self::NEGATION.contains(&self)
    }

    /// The template tree for this structure (not canonicalized).
    pub fn template(self) -> Shape {
        use Shape::{And, Anchor, Or};
        let p = Shape::p;
        let n = Shape::n;
        let pa = || p(Anchor);
        match self {
            Structure::P1 => pa(),
            Structure::P2 => p(pa()),
            Structure::P3 => p(p(pa())),
            Structure::I2 => And(vec![pa(), pa()]),
            Structure::I3 => And(vec![pa(), pa(), pa()]),
            Structure::Ip => p(And(vec![pa(), pa()])),
            Structure::Pi => And(vec![p(pa()), pa()]),
            Structure::U2 => Or(vec![pa(), pa()]),
            Structure::Up => p(Or(vec![pa(), pa()])),
            Structure::In2 => And(vec![pa(), n(pa())]),
            Structure::In3 => And(vec![pa(), pa(), n(pa())]),
            Structure::Inp => p(And(vec![pa(), n(pa())])),
            Structure::Pin => And(vec![p(pa()), n(pa())]),
            Structure::Pni => And(vec![n(p(pa())), pa()]),
        }
    }

    /// A query of this structure with uniformly random ids.
    pub fn random_query<R: Rng + ?Sized>(self, rng: &mut R, num_entities: usize, num_relations: usize) -> Query {
        let mut ents = Vec::new();
        let mut rels = Vec::new();
        // Draw ids first so the closures below don't both borrow `rng`.
        let shape = self.template();
        let n = shape_size(&shape);
        for _ in 0..n {
            ents.push(rng.gen_range(0..num_entities) as EntityId);
            rels.push(rng.gen_range(0..num_relations) as RelationId);
        }
        let (mut ei, mut ri) = (0, 0);
        let root = shape.instantiate(
            &mut || {
                ei += 1;
                ents[ei - 1]
            },
            &mut || {
                ri += 1;
                rels[ri - 1]
            },
        );
        Query::new(root).expect("templates are valid")
    }
}

fn shape_size(s: &Shape) -> usize {
    match s {
        Shape::Anchor => 1,
        Shape::Proj(c) | Shape::Not(c) => 1 + shape_size(c),
        Shape::And(cs) | Shape::Or(cs) => 1 + cs.iter().map(shape_size).sum::<usize>(),
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Structure {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Structure::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| QueryError::UnknownTag(s.to_string()))
    }
}

/// Parses a comma-separated structure list such as `1p,2p,2in`.
pub fn parse_structure_list(s: &str) -> Result<Vec<Structure>, QueryError> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect()
}

/// Tag -> template for all fourteen structures.
pub fn canonical_templates() -> BTreeMap<Structure, Shape> {
    Structure::ALL.into_iter().map(|t| (t, t.template())).collect()
}

/// Returns the structure whose template matches `node` up to child order.
pub fn classify(node: &QueryNode) -> Option<Structure> {
    let shape = node.shape();
    Structure::ALL.into_iter().find(|t| t.template().canonical() == shape)
}

/// A validated, canonicalized query.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Query {
    root: QueryNode,
    structure: Option<Structure>,
}

impl Query {
    /// Validates arity and root rules, then canonicalizes.
    pub fn new(root: QueryNode) -> Result<Self, QueryError> {
        match &root {
            QueryNode::Anchor(_) => return Err(QueryError::BadRoot("anchor")),
            QueryNode::Not(_) => return Err(QueryError::BadRoot("negation")),
            _ => {}
        }
        root.validate(None)?;
        let root = root.canonical();
        let structure = classify(&root);
        Ok(Self { root, structure })
    }

    pub fn root(&self) -> &QueryNode {
        &self.root
    }

    pub fn structure(&self) -> Option<Structure> {
        self.structure
    }

    /// Canonical tag, or `"custom"`.
    pub fn tag(&self) -> &'static str {
        self.structure.map_or("custom", Structure::as_str)
    }

    pub fn check_ids(&self, num_entities: usize, num_relations: usize) -> Result<(), QueryError> {
        self.root.validate(Some((num_entities, num_relations)))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(Wire::from(&self.root)).expect("wire encoding is infallible")
    }

    /// Compact single-line JSON; equal queries produce identical strings.
    pub fn encode(&self) -> String {
        serde_json::to_string(&Wire::from(&self.root)).expect("wire encoding is infallible")
    }

    pub fn parse(text: &str) -> Result<Self, QueryError> {
        let wire: Wire = serde_json::from_str(text)?;
        Self::from_wire(wire)
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, QueryError> {
        let wire: Wire = serde_json::from_value(value)?;
        Self::from_wire(wire)
    }

    fn from_wire(wire: Wire) -> Result<Self, QueryError> {
        Self::new(wire.into_node()?)
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
enum Wire {
    Anchor { ent: u64 },
    Proj { rel: u64, arg: Box<Wire> },
    And { args: Vec<Wire> },
    Or { args: Vec<Wire> },
    Not { arg: Box<Wire> },
}

impl From<&QueryNode> for Wire {
    fn from(n: &QueryNode) -> Self {
        match n {
            QueryNode::Anchor(e) => Wire::Anchor { ent: u64::from(*e) },
            QueryNode::Proj(r, c) => Wire::Proj { rel: u64::from(*r), arg: Box::new(Wire::from(&**c)) },
            QueryNode::And(cs) => Wire::And { args: cs.iter().map(Wire::from).collect() },
            QueryNode::Or(cs) => Wire::Or { args: cs.iter().map(Wire::from).collect() },
            QueryNode::Not(c) => Wire::Not { arg: Box::new(Wire::from(&**c)) },
        }
    }
}

impl Wire {
    fn into_node(self) -> Result<QueryNode, QueryError> {
        let id = |kind, v: u64| {
            u32::try_from(v).map_err(|_| QueryError::OutOfRange { kind, id: v, limit: u32::MAX as usize })
        };
        Ok(match self {
            Wire::Anchor { ent } => QueryNode::Anchor(id("entity", ent)?),
            Wire::Proj { rel, arg } => QueryNode::proj(id("relation", rel)?, arg.into_node()?),
            Wire::Not { arg } => QueryNode::not(arg.into_node()?),
            Wire::And { args } => QueryNode::And(args.into_iter().map(Wire::into_node).collect::<Result<_, _>>()?),
            Wire::Or { args } => QueryNode::Or(args.into_iter().map(Wire::into_node).collect::<Result<_, _>>()?),
        })
    }
}

/// A query with its easy (observable) and hard (needs a missing edge) answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledQuery {
    pub query: Query,
    pub easy: Vec<EntityId>,
    pub hard: Vec<EntityId>,
}

#[derive(Serialize, Deserialize)]
struct LabeledLine {
    tag: String,
    query: serde_json::Value,
    easy: Vec<EntityId>,
    hard: Vec<EntityId>,
}

impl LabeledQuery {
    /// Sorts and dedups both sets; rejects overlap.
    pub fn new(query: Query, mut easy: Vec<EntityId>, mut hard: Vec<EntityId>) -> Result<Self, QueryError> {
        easy.sort_unstable();
        easy.dedup();
        hard.sort_unstable();
        hard.dedup();
        if let Some(x) = crate::oracle::intersect(&easy, &hard).first() {
            return Err(QueryError::OverlappingAnswers(*x));
        }
        Ok(Self { query, easy, hard })
    }

    /// Sorted union of easy and hard answers.
    pub fn all_answers(&self) -> Vec<EntityId> {
        crate::oracle::union(&self.easy, &self.hard)
    }

    pub fn to_json_line(&self) -> String {
        let line = LabeledLine {
            tag: self.query.tag().to_string(),
            query: self.query.to_json(),
            easy: self.easy.clone(),
            hard: self.hard.clone(),
        };
        serde_json::to_string(&line).expect("labeled query encoding is infallible")
    }

    pub fn from_json_line(text: &str) -> Result<Self, QueryError> {
        let line: LabeledLine = serde_json::from_str(text)?;
        let query = Query::from_json(line.query)?;
        if line.tag != "custom" {
            let tag: Structure = line.tag.parse()?;
            if query.structure() != Some(tag) {
                return Err(QueryError::TagMismatch { tag: line.tag, actual: query.tag().to_string() });
            }
        }
        Self::new(query, line.easy, line.hard)
    }
}

/// Reads a JSON-Lines file of labeled queries.
pub fn read_labeled(path: impl AsRef<Path>) -> Result<Vec<LabeledQuery>, QueryError> {
    let path = path.as_ref();
    let io = |source| QueryError::Io { path: path.to_path_buf(), source };
    let file = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let q = LabeledQuery::from_json_line(&line).map_err(|e| QueryError::Line {
            path: path.to_path_buf(),
            line: i + 1,
            source: Box::new(e),
        })?;
        out.push(q);
    }
    Ok(out)
}

pub fn write_labeled(path: impl AsRef<Path>, queries: &[LabeledQuery]) -> Result<(), QueryError> {
    let path = path.as_ref();
    let io = |source| QueryError::Io { path: path.to_path_buf(), source };
    let mut buf = String::new();
    for q in queries {
        buf.push_str(&q.to_json_line());
        buf.push('\n');
    }
    fs::File::create(path).map_err(io)?.write_all(buf.as_bytes()).map_err(io)
}
