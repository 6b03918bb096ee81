//! Entity embeddings, relation projection, query encoding and scoring.
//!
//! Entities live in the fuzzy space as normalized vectors `p_e` derived from
//! free parameters `θ_e` (softmax for L1, normalized logistic for L2).
//! A relation projection maps a fuzzy vector `x` to
//! `g(LN(W_r x + b_r))`, where `W_r` and `b_r` are combinations of `K`
//! shared bases weighted by per-relation coefficients. Conjunction,
//! disjunction and negation are elementwise t-norm / t-conorm / `1 - x`.

use std::borrow::Cow;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuzzy::{snap, FuzzyVec, Logic};
use crate::kg::{EntityId, RelationId};
use crate::query::{Query, QueryNode};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(
        "the Łukasiewicz logic is not supported for query embedding: its outputs concentrate \
         on {{0, 1}}, which starves the embedding of gradient; use product or godel"
    )]
    UnsupportedLogic,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{kind} id {id} out of range (< {limit} required)")]
    OutOfRange { kind: &'static str, id: u64, limit: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// How entity parameters are normalized into the fuzzy space.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Softmax: entries sum to one.
    #[default]
    L1,
    /// Logistic then unit L2 norm: squared entries sum to one.
    L2,
}

/// The squashing map `g` applied after layer normalization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Logistic,
    BoundedRectifier,
}

impl NormMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::L1 => "l1",
            NormMode::L2 => "l2",
        }
    }
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Logistic => "logistic",
            Activation::BoundedRectifier => "bounded_rectifier",
        }
    }

    #[inline]
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Logistic => sigmoid(x),
            Activation::BoundedRectifier => x.clamp(0.0, 1.0),
        }
    }

    /// Derivative; for the rectifier it is 1 on (0, 1) and 0 elsewhere, kinks included.
    #[inline]
    pub(crate) fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Logistic => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::BoundedRectifier => {
                if x > 0.0 && x < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for NormMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(NormMode::L1),
            "l2" => Ok(NormMode::L2),
            other => Err(format!("unknown norm mode `{other}`")),
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "logistic" | "sigmoid" => Ok(Activation::Logistic),
            "bounded_rectifier" | "rectifier" | "clamp" => Ok(Activation::BoundedRectifier),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_bases: usize,
    pub logic: Logic,
    pub norm: NormMode,
    pub activation: Activation,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 800,
            num_bases: 150,
            logic: Logic::Product,
            norm: NormMode::L1,
            activation: Activation::Logistic,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim < 2 {
            return Err(ModelError::Config(format!("dim must be >= 2, got {}", self.dim)));
        }
        if self.num_bases < 1 {
            return Err(ModelError::Config("num_bases must be >= 1".into()));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(ModelError::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        if self.logic == Logic::Lukasiewicz {
            return Err(ModelError::UnsupportedLogic);
        }
        Ok(())
    }
}

/// All learnable tensors, stored flat and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub num_entities: usize,
    pub num_relations: usize,
    pub dim: usize,
    pub num_bases: usize,
    /// `|E| × d`, unconstrained.
    pub entity_theta: Vec<f64>,
    /// `K × d × d`; basis `j` is row-major `d × d`.
    pub bases_m: Vec<f64>,
    /// `K × d`.
    pub bases_v: Vec<f64>,
    /// `|R| × K`.
    pub rel_coeff: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = Parameters;

pub const TENSOR_NAMES: [&str; 6] = ["entity_theta", "bases_m", "bases_v", "rel_coeff", "ln_gain", "ln_bias"];

impl Parameters {
    pub fn zeros(num_entities: usize, num_relations: usize, dim: usize, num_bases: usize) -> Self {
        Self {
            num_entities,
            num_relations,
            dim,
            num_bases,
            entity_theta: vec![0.0; num_entities * dim],
            bases_m: vec![0.0; num_bases * dim * dim],
            bases_v: vec![0.0; num_bases * dim],
            rel_coeff: vec![0.0; num_relations * num_bases],
            ln_gain: vec![0.0; dim],
            ln_bias: vec![0.0; dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_entities, self.num_relations, self.dim, self.num_bases)
    }

    /// Random initialization: Gaussian entity parameters, Glorot-uniform bases,
    /// coefficients with variance `1/K`, identity layer-norm affine.
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        num_entities: usize,
        num_relations: usize,
        rng: &mut R,
    ) -> Self {
        let d = config.dim;
        let k = config.num_bases;
        let mut p = Self::zeros(num_entities, num_relations, d, k);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        p.entity_theta.iter_mut().for_each(|x| *x = unit.sample(rng));
        let glorot = (6.0 / (2 * d) as f64).sqrt();
        let m = Uniform::new_inclusive(-glorot, glorot);
        p.bases_m.iter_mut().for_each(|x| *x = m.sample(rng));
        let vb = (1.0 / d as f64).sqrt();
        let v = Uniform::new_inclusive(-vb, vb);
        p.bases_v.iter_mut().for_each(|x| *x = v.sample(rng));
        let a = Normal::new(0.0, (1.0 / k as f64).sqrt()).expect("valid normal");
        p.rel_coeff.iter_mut().for_each(|x| *x = a.sample(rng));
        p.ln_gain.iter_mut().for_each(|x| *x = 1.0);
        p
    }

    pub fn check_config(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.dim != config.dim || self.num_bases != config.num_bases {
            return Err(ModelError::Config(format!(
                "parameters have d={} K={}, config has d={} K={}",
                self.dim, self.num_bases, config.dim, config.num_bases
            )));
        }
        Ok(())
    }

    /// Tensors in canonical order (see [`TENSOR_NAMES`]).
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            &self.entity_theta,
            &self.bases_m,
            &self.bases_v,
            &self.rel_coeff,
            &self.ln_gain,
            &self.ln_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.entity_theta,
            &mut self.bases_m,
            &mut self.bases_v,
            &mut self.rel_coeff,
            &mut self.ln_gain,
            &mut self.ln_bias,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index `i` -> (tensor, offset).
    pub fn locate(&self, mut i: usize) -> Option<(usize, usize)> {
        for (t, tensor) in self.tensors().iter().enumerate() {
            if i < tensor.len() {
                return Some((t, i));
            }
            i -= tensor.len();
        }
        None
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        let (t, o) = self.locate(i).expect("flat index in range");
        self.tensors()[t][o]
    }

    pub fn set_flat(&mut self, i: usize, value: f64) {
        let (t, o) = self.locate(i).expect("flat index in range");
        self.tensors_mut()[t][o] = value;
    }

    /// `self += other`, tensor by tensor in canonical order.
    pub fn add_assign(&mut self, other: &Parameters) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn theta(&self, e: EntityId) -> &[f64] {
        let d = self.dim;
        &self.entity_theta[e as usize * d..(e as usize + 1) * d]
    }

    pub fn basis_matrix(&self, j: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.bases_m[j * dd..(j + 1) * dd]
    }

    pub fn basis_vector(&self, j: usize) -> &[f64] {
        &self.bases_v[j * self.dim..(j + 1) * self.dim]
    }

    pub fn coefficients(&self, r: RelationId) -> &[f64] {
        let k = self.num_bases;
        &self.rel_coeff[r as usize * k..(r as usize + 1) * k]
    }

    fn check_entity(&self, e: EntityId) -> Result<(), ModelError> {
        if e as usize >= self.num_entities {
            return Err(ModelError::OutOfRange { kind: "entity", id: u64::from(e), limit: self.num_entities });
        }
        Ok(())
    }

    fn check_relation(&self, r: RelationId) -> Result<(), ModelError> {
        if r as usize >= self.num_relations {
            return Err(ModelError::OutOfRange { kind: "relation", id: u64::from(r), limit: self.num_relations });
        }
        Ok(())
    }
}

/// Normalizes raw entity parameters into `out` (unsnapped).
pub(crate) fn normalize_entity(norm: NormMode, theta: &[f64], out: &mut [f64]) {
    match norm {
        NormMode::L1 => {
            let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, t) in out.iter_mut().zip(theta) {
                *o = (t - max).exp();
                sum += *o;
            }
            out.iter_mut().for_each(|o| *o /= sum);
        }
        NormMode::L2 => {
            let mut sq = 0.0;
            for (o, t) in out.iter_mut().zip(theta) {
                *o = sigmoid(*t);
                sq += *o * *o;
            }
            let n = sq.sqrt();
            out.iter_mut().for_each(|o| *o /= n);
        }
    }
}

/// `p_e`: the entity's normalized fuzzy vector.
pub fn entity_embedding(params: &Parameters, config: &ModelConfig, e: EntityId) -> Result<FuzzyVec, ModelError> {
    params.check_entity(e)?;
    let theta = params.theta(e);
    if !theta.iter().all(|x| x.is_finite()) {
        return Err(ModelError::NonFinite("entity parameters"));
    }
    let mut out = vec![0.0; params.dim];
    normalize_entity(config.norm, theta, &mut out);
    Ok(FuzzyVec::from_unit(out))
}

/// The per-relation affine map `(W_r, b_r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMap {
    pub dim: usize,
    /// Row-major `d × d`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `W_r = Σ_j α_{r,j} M_j`, `b_r = Σ_j α_{r,j} v_j`.
pub fn relation_map(params: &Parameters, r: RelationId) -> Result<RelationMap, ModelError> {
    params.check_relation(r)?;
    Ok(relation_map_unchecked(params, r))
}

pub(crate) fn relation_map_unchecked(params: &Parameters, r: RelationId) -> RelationMap {
    let d = params.dim;
    let mut weight = vec![0.0; d * d];
    let mut bias = vec![0.0; d];
    for (j, &a) in params.coefficients(r).iter().enumerate() {
        weight.iter_mut().zip(params.basis_matrix(j)).for_each(|(w, m)| *w += a * m);
        bias.iter_mut().zip(params.basis_vector(j)).for_each(|(b, v)| *b += a * v);
    }
    RelationMap { dim: d, weight, bias }
}

/// Intermediate values of one projection, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ProjCache {
    pub zhat: Vec<f64>,
    pub inv_std: f64,
    pub pre: Vec<f64>,
}

/// `out = g(gain ∘ LN(W x + b) + bias)`; returns the cache for backward.
pub(crate) fn project_into(
    params: &Parameters,
    config: &ModelConfig,
    map: &RelationMap,
    x: &[f64],
    out: &mut Vec<f64>,
) -> ProjCache {
    let d = map.dim;
    let mut z = map.bias.clone();
    for (i, zi) in z.iter_mut().enumerate() {
        *zi += fast_dot(&map.weight[i * d..(i + 1) * d], x);
    }
    let mean = z.iter().sum::<f64>() / d as f64;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv_std = 1.0 / (var + config.ln_eps).sqrt();
    let zhat: Vec<f64> = z.iter().map(|v| (v - mean) * inv_std).collect();
    let pre: Vec<f64> = zhat
        .iter()
        .zip(&params.ln_gain)
        .zip(&params.ln_bias)
        .map(|((zh, g), b)| g * zh + b)
        .collect();
    out.clear();
    out.extend(pre.iter().map(|&y| snap(config.activation.apply(y))));
    ProjCache { zhat, inv_std, pre }
}

/// Projects fuzzy set `s` through relation `r`.
pub fn project(params: &Parameters, config: &ModelConfig, r: RelationId, s: &FuzzyVec) -> Result<FuzzyVec, ModelError> {
    if s.dim() != params.dim {
        return Err(ModelError::DimensionMismatch(s.dim(), params.dim));
    }
    let map = relation_map(params, r)?;
    let mut out = Vec::with_capacity(params.dim);
    let cache = project_into(params, config, &map, s, &mut out);
    if !cache.pre.iter().all(|x| x.is_finite()) {
        return Err(ModelError::NonFinite("projection"));
    }
    Ok(FuzzyVec::from_unit(out))
}

/// Four-lane dot product; the lane split lets the compiler vectorize.
#[inline]
pub(crate) fn fast_dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Source of entity embeddings and relation maps for a forward pass.
pub(crate) trait Resolver {
    fn entity(&self, e: EntityId) -> Cow<'_, [f64]>;
    fn relation(&self, r: RelationId) -> Cow<'_, RelationMap>;
}

/// Computes everything on demand from the parameters.
pub(crate) struct DirectResolver<'a> {
    pub params: &'a Parameters,
    pub config: &'a ModelConfig,
}

impl Resolver for DirectResolver<'_> {
    fn entity(&self, e: EntityId) -> Cow<'_, [f64]> {
        let mut out = vec![0.0; self.params.dim];
        normalize_entity(self.config.norm, self.params.theta(e), &mut out);
        out.iter_mut().for_each(|x| *x = snap(*x));
        Cow::Owned(out)
    }

    fn relation(&self, r: RelationId) -> Cow<'_, RelationMap> {
        Cow::Owned(relation_map_unchecked(self.params, r))
    }
}

#[derive(Debug, Clone)]
pub(crate) enum TapeOp {
    Anchor(EntityId),
    Proj { rel: RelationId, child: usize, cache: ProjCache },
    And(Vec<usize>),
    Or(Vec<usize>),
    Not(usize),
}

#[derive(Debug, Clone)]
pub(crate) struct TapeNode {
    pub op: TapeOp,
    pub out: Vec<f64>,
}

/// Post-order record of a query's forward pass; the root is the last node.
#[derive(Debug, Clone)]
pub(crate) struct Tape {
    pub nodes: Vec<TapeNode>,
}

impl Tape {
    /// Evaluates a canonical query tree. Ids must be in range.
    pub fn record(node: &QueryNode, params: &Parameters, config: &ModelConfig, res: &impl Resolver) -> Tape {
        let mut tape = Tape { nodes: Vec::with_capacity(node.num_nodes()) };
        tape.push(node, params, config, res);
        tape
    }

    pub fn root(&self) -> &[f64] {
        &self.nodes.last().expect("non-empty tape").out
    }

    fn push(&mut self, node: &QueryNode, params: &Parameters, config: &ModelConfig, res: &impl Resolver) -> usize {
        let (op, out) = match node {
            QueryNode::Anchor(e) => (TapeOp::Anchor(*e), res.entity(*e).into_owned()),
            QueryNode::Proj(r, c) => {
                let child = self.push(c, params, config, res);
                let map = res.relation(*r);
                let mut out = Vec::with_capacity(params.dim);
                let cache = project_into(params, config, &map, &self.nodes[child].out, &mut out);
                (TapeOp::Proj { rel: *r, child, cache }, out)
            }
            QueryNode::And(cs) | QueryNode::Or(cs) => {
                let ids: Vec<usize> = cs.iter().map(|c| self.push(c, params, config, res)).collect();
                let is_and = matches!(node, QueryNode::And(_));
                let mut out = self.nodes[ids[0]].out.clone();
                for &i in &ids[1..] {
                    let other = &self.nodes[i].out;
                    for (o, x) in out.iter_mut().zip(other) {
                        *o = if is_and { config.logic.t(*o, *x) } else { config.logic.s(*o, *x) };
                    }
                }
                out.iter_mut().for_each(|x| *x = snap(*x));
                (if is_and { TapeOp::And(ids) } else { TapeOp::Or(ids) }, out)
            }
            QueryNode::Not(c) => {
                let child = self.push(c, params, config, res);
                let out = self.nodes[child].out.iter().map(|x| 1.0 - x).collect();
                (TapeOp::Not(child), out)
            }
        };
        self.nodes.push(TapeNode { op, out });
        self.nodes.len() - 1
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        for n in &self.nodes {
            if let TapeOp::Proj { cache, .. } = &n.op {
                if !cache.pre.iter().all(|x| x.is_finite()) || !cache.inv_std.is_finite() {
                    return Err(ModelError::NonFinite("projection"));
                }
            }
            if !n.out.iter().all(|x| x.is_finite()) {
                return Err(ModelError::NonFinite("query embedding"));
            }
        }
        Ok(())
    }
}

fn check_node_ids(params: &Parameters, node: &QueryNode) -> Result<(), ModelError> {
    node.validate(Some((params.num_entities, params.num_relations))).map_err(|e| match e {
        crate::query::QueryError::OutOfRange { kind, id, limit } => ModelError::OutOfRange { kind, id, limit },
        other => ModelError::Config(other.to_string()),
    })
}

/// Embeds a query: anchors → `p_e`, then projections and fuzzy operators bottom-up.
pub fn embed_query(params: &Parameters, config: &ModelConfig, q: &Query) -> Result<FuzzyVec, ModelError> {
    embed_canonical(params, config, q.root())
}

/// Embeds an arbitrary query tree (e.g. one rooted at a negation).
pub fn embed_node(params: &Parameters, config: &ModelConfig, node: &QueryNode) -> Result<FuzzyVec, ModelError> {
    embed_canonical(params, config, &node.canonical())
}

fn embed_canonical(params: &Parameters, config: &ModelConfig, node: &QueryNode) -> Result<FuzzyVec, ModelError> {
    config.validate()?;
    params.check_config(config)?;
    check_node_ids(params, node)?;
    if !params.all_finite() {
        return Err(ModelError::NonFinite("parameters"));
    }
    let tape = Tape::record(node, params, config, &DirectResolver { params, config });
    tape.check_finite()?;
    Ok(FuzzyVec::from_unit(tape.root().to_vec()))
}

/// `φ(q, e) = S_q · p_e`.
pub fn score(query: &FuzzyVec, entity: &FuzzyVec) -> Result<f64, ModelError> {
    if query.dim() != entity.dim() {
        return Err(ModelError::DimensionMismatch(query.dim(), entity.dim()));
    }
    Ok(fast_dot(query, entity))
}

/// Materialized `|E| × d` matrix of entity embeddings.
#[derive(Debug, Clone)]
pub struct EntityTable {
    dim: usize,
    data: Vec<f64>,
}

impl EntityTable {
    pub fn build(params: &Parameters, config: &ModelConfig) -> Self {
        let d = params.dim;
        let mut data = vec![0.0; params.num_entities * d];
        for (e, row) in data.chunks_mut(d).enumerate() {
            normalize_entity(config.norm, params.theta(e as EntityId), row);
            row.iter_mut().for_each(|x| *x = snap(*x));
        }
        Self { dim: d, data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, e: EntityId) -> &[f64] {
        &self.data[e as usize * self.dim..(e as usize + 1) * self.dim]
    }

    /// One matrix–vector product: scores of every entity against `query`.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        self.data.chunks_exact(self.dim).map(|row| fast_dot(query, row)).collect()
    }
}

/// Scores every entity against a query embedding.
pub fn score_all(params: &Parameters, config: &ModelConfig, query: &FuzzyVec) -> Result<Vec<f64>, ModelError> {
    if query.dim() != params.dim {
        return Err(ModelError::DimensionMismatch(query.dim(), params.dim));
    }
    Ok(EntityTable::build(params, config).scores(query))
}

/// The `k` best entities outside `exclude`, by descending score then ascending id.
pub fn top_k(scores: &[f64], k: usize, exclude: &[EntityId]) -> Vec<(EntityId, f64)> {
    let mut excluded = vec![false; scores.len()];
    for &e in exclude {
        if let Some(x) = excluded.get_mut(e as usize) {
            *x = true;
        }
    }
    let mut cands: Vec<(EntityId, f64)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded[*i])
        .map(|(i, s)| (i as EntityId, *s))
        .collect();
    let order = |a: &(EntityId, f64), b: &(EntityId, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k == 0 {
        return Vec::new();
    }
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, order);
        cands.truncate(k);
    }
    cands.sort_unstable_by(order);
    cands
}

/// Read-only inference engine: entity table built once, relation maps built on first use.
pub struct Encoder<'a> {
    params: &'a Parameters,
    config: ModelConfig,
    entities: EntityTable,
    relations: Vec<OnceLock<RelationMap>>,
}

impl<'a> Encoder<'a> {
    pub fn new(params: &'a Parameters, config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        params.check_config(config)?;
        if !params.all_finite() {
            return Err(ModelError::NonFinite("parameters"));
        }
        Ok(Self {
            params,
            config: *config,
            entities: EntityTable::build(params, config),
            relations: (0..params.num_relations).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn entities(&self) -> &EntityTable {
        &self.entities
    }

    pub fn embed(&self, q: &Query) -> Result<FuzzyVec, ModelError> {
        check_node_ids(self.params, q.root())?;
        let tape = Tape::record(q.root(), self.params, &self.config, self);
        tape.check_finite()?;
        Ok(FuzzyVec::from_unit(tape.root().to_vec()))
    }

    pub fn score_all(&self, query: &FuzzyVec) -> Vec<f64> {
        self.entities.scores(query)
    }

    /// Embeds, scores and returns the top `k` entities.
    pub fn answer(&self, q: &Query, k: usize, exclude: &[EntityId]) -> Result<Vec<(EntityId, f64)>, ModelError> {
        let s = self.embed(q)?;
        Ok(top_k(&self.score_all(&s), k, exclude))
    }
}

impl Resolver for Encoder<'_> {
    fn entity(&self, e: EntityId) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.entities.row(e))
    }

    fn relation(&self, r: RelationId) -> Cow<'_, RelationMap> {
        Cow::Borrowed(self.relations[r as usize].get_or_init(|| relation_map_unchecked(self.params, r)))
    }
}

/// Writes the binary checkpoint: one header line, then little-endian f64 tensors.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &Parameters, config: &ModelConfig) -> Result<(), ModelError> {
    let path = path.as_ref();
    let io = |source| ModelError::Io { path: path.to_path_buf(), source };
    let header = format!(
        "FZQE1 d={} K={} E={} R={} logic={} norm={} g={} ln_eps={}\n",
        params.dim,
        params.num_bases,
        params.num_entities,
        params.num_relations,
        config.logic,
        config.norm,
        config.activation,
        config.ln_eps
    );
    let mut buf = Vec::with_capacity(header.len() + params.len() * 8);
    buf.extend_from_slice(header.as_bytes());
    for t in params.tensors() {
        for x in t {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp).and_then(|mut f| f.write_all(&buf)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Parameters, ModelConfig), ModelError> {
    let path = path.as_ref();
    let bad = |reason: String| ModelError::Checkpoint { path: path.to_path_buf(), reason };
    let file = fs::File::open(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("FZQE1") {
        return Err(bad("missing FZQE1 magic".into()));
    }
    let mut config = ModelConfig::default();
    let (mut ne, mut nr) = (None, None);
    for f in fields {
        let (key, value) = f.split_once('=').ok_or_else(|| bad(format!("bad header field `{f}`")))?;
        let num = || value.parse::<usize>().map_err(|_| bad(format!("bad value for {key}: `{value}`")));
        match key {
            "d" => config.dim = num()?,
            "K" => config.num_bases = num()?,
            "E" => ne = Some(num()?),
            "R" => nr = Some(num()?),
            "logic" => config.logic = value.parse().map_err(bad)?,
            "norm" => config.norm = value.parse().map_err(bad)?,
            "g" => config.activation = value.parse().map_err(bad)?,
            "ln_eps" => config.ln_eps = value.parse().map_err(|_| bad(format!("bad ln_eps `{value}`")))?,
            other => return Err(bad(format!("unknown header field `{other}`"))),
        }
    }
    let ne = ne.ok_or_else(|| bad("missing E".into()))?;
    let nr = nr.ok_or_else(|| bad("missing R".into()))?;
    let mut params = Parameters::zeros(ne, nr, config.dim, config.num_bases);
    let mut body = Vec::new();
    reader
        .read_to_end(&mut body)
        .map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    if body.len() != params.len() * 8 {
        return Err(bad(format!("expected {} payload bytes, found {}", params.len() * 8, body.len())));
    }
    let mut words = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|x| *x = words.next().expect("length checked"));
    }
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::Structure;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize, k: usize) -> ModelConfig {
        ModelConfig { dim: d, num_bases: k, ..ModelConfig::default() }
    }

    fn random_model(seed: u64, config: &ModelConfig, ne: usize, nr: usize) -> Parameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Parameters::init(config, ne, nr, &mut rng)
    }

    #[test]
    fn entity_embedding_examples() {
        let c = cfg(4, 1);
        let p = Parameters::zeros(1, 1, 4, 1);
        assert_eq!(entity_embedding(&p, &c, 0).unwrap().as_slice(), &[0.25; 4]);
        let c2 = ModelConfig { norm: NormMode::L2, ..c };
        assert_eq!(entity_embedding(&p, &c2, 0).unwrap().as_slice(), &[0.5; 4]);

        let mut p = Parameters::zeros(1, 1, 2, 1);
        p.entity_theta = vec![3f64.ln(), 0.0];
        let e = entity_embedding(&p, &cfg(2, 1), 0).unwrap();
        assert!((e[0] - 0.75).abs() < 1e-15 && (e[1] - 0.25).abs() < 1e-15);
        assert!(entity_embedding(&p, &cfg(2, 1), 1).is_err());
        p.entity_theta[0] = f64::NAN;
        assert!(matches!(entity_embedding(&p, &cfg(2, 1), 0), Err(ModelError::NonFinite(_))));
    }

    #[test]
    fn normalization_holds_for_random_parameters() {
        let c = cfg(16, 2);
        let p = random_model(3, &c, 50, 2);
        for e in 0..50 {
            let l1 = entity_embedding(&p, &c, e).unwrap();
            assert!((l1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let l2 = entity_embedding(&p, &ModelConfig { norm: NormMode::L2, ..c }, e).unwrap();
            assert!((l2.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(l1.iter().chain(l2.iter()).all(|x| *x > 0.0 && *x <= 1.0));
        }
    }

    #[test]
    fn relation_map_examples() {
        let c = cfg(3, 2);
        let mut p = random_model(1, &c, 2, 2);
        p.rel_coeff = vec![1.0, 0.0, 0.0, 0.0];
        let m = relation_map(&p, 0).unwrap();
        assert_eq!(m.weight, p.basis_matrix(0));
        assert_eq!(m.bias, p.basis_vector(0));
        let z = relation_map(&p, 1).unwrap();
        assert!(z.weight.iter().chain(&z.bias).all(|x| *x == 0.0));

        let m1 = p.basis_matrix(0).to_vec();
        p.bases_m[9..18].copy_from_slice(&m1);
        p.rel_coeff = vec![1.0, -1.0, 0.0, 0.0];
        assert!(relation_map(&p, 0).unwrap().weight.iter().all(|x| *x == 0.0));
        assert!(relation_map(&p, 2).is_err());
    }

    #[test]
    fn projection_zero_map() {
        let mut c = cfg(4, 1);
        let mut p = Parameters::zeros(1, 1, 4, 1);
        p.ln_gain = vec![1.0; 4];
        let s = FuzzyVec::new(vec![0.2, 0.4, 0.1, 0.3]).unwrap();
        assert_eq!(project(&p, &c, 0, &s).unwrap().as_slice(), &[0.5; 4]);
        c.activation = Activation::BoundedRectifier;
        assert_eq!(project(&p, &c, 0, &s).unwrap().as_slice(), &[0.0; 4]);
        assert!(project(&p, &c, 0, &FuzzyVec::new(vec![0.1]).unwrap()).is_err());
    }

    #[test]
    fn projection_output_in_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..1000 {
            let act = if trial % 2 == 0 { Activation::Logistic } else { Activation::BoundedRectifier };
            let c = ModelConfig { activation: act, ..cfg(6, 2) };
            let mut p = Parameters::init(&c, 3, 2, &mut rng);
            p.bases_m.iter_mut().for_each(|x| *x *= 10.0);
            p.ln_bias.iter_mut().for_each(|x| *x = rng.gen_range(-3.0..3.0));
            let s = FuzzyVec::new((0..6).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let out = project(&p, &c, rng.gen_range(0..2), &s).unwrap();
            assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn embed_examples() {
        let c = cfg(6, 2);
        let p = random_model(5, &c, 10, 3);
        let one_p = Query::new(QueryNode::proj(2, QueryNode::anchor(4))).unwrap();
        let direct = project(&p, &c, 2, &entity_embedding(&p, &c, 4).unwrap()).unwrap();
        assert_eq!(embed_query(&p, &c, &one_p).unwrap(), direct);

        let b = QueryNode::proj(1, QueryNode::anchor(3));
        let nn = QueryNode::not(QueryNode::not(b.clone()));
        assert_eq!(embed_node(&p, &c, &nn).unwrap(), embed_node(&p, &c, &b).unwrap());

        let g = ModelConfig { logic: Logic::Godel, ..c };
        let twice = QueryNode::and(vec![b.clone(), b.clone()]);
        assert_eq!(embed_node(&p, &g, &twice).unwrap(), embed_node(&p, &g, &b).unwrap());

        let bad = Query::new(QueryNode::proj(7, QueryNode::anchor(0))).unwrap();
        assert!(matches!(embed_query(&p, &c, &bad), Err(ModelError::OutOfRange { kind: "relation", .. })));
        let luk = ModelConfig { logic: Logic::Lukasiewicz, ..c };
        assert!(matches!(embed_query(&p, &luk, &one_p), Err(ModelError::UnsupportedLogic)));
    }

    #[test]
    fn score_examples() {
        let s = FuzzyVec::new(vec![0.2, 0.7, 0.4]).unwrap();
        let one_hot = FuzzyVec::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(score(&s, &one_hot).unwrap(), 0.7);
        let pe = FuzzyVec::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert_eq!(score(&FuzzyVec::universe(3), &pe).unwrap(), 1.0);
        assert_eq!(score(&FuzzyVec::empty(3), &pe).unwrap(), 0.0);
        assert!(score(&s, &FuzzyVec::universe(2)).is_err());
    }

    #[test]
    fn score_all_matches_per_entity() {
        let c = cfg(8, 2);
        let p = random_model(2, &c, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Structure::Pi.random_query(&mut rng, 5, 2);
        let s = embed_query(&p, &c, &q).unwrap();
        let all = score_all(&p, &c, &s).unwrap();
        let mut best = (0, f64::NEG_INFINITY);
        for e in 0..5u32 {
            let one = score(&s, &entity_embedding(&p, &c, e).unwrap()).unwrap();
            assert!((all[e as usize] - one).abs() <= 1e-12);
            if one > best.1 {
                best = (e, one);
            }
        }
        assert_eq!(top_k(&all, 1, &[])[0].0, best.0);
        assert!(score_all(&p, &c, &FuzzyVec::empty(8)).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn top_k_examples() {
        let s = [0.1, 0.9, 0.5];
        assert_eq!(top_k(&s, 2, &[]), vec![(1, 0.9), (2, 0.5)]);
        assert_eq!(top_k(&s, 2, &[1]), vec![(2, 0.5), (0, 0.1)]);
        assert_eq!(top_k(&[0.3; 4], 3, &[]), vec![(0, 0.3), (1, 0.3), (2, 0.3)]);
        assert_eq!(top_k(&s, 10, &[0]).len(), 2);
    }

    #[test]
    fn encoder_matches_direct_path() {
        let c = ModelConfig { logic: Logic::Godel, ..cfg(8, 3) };
        let p = random_model(8, &c, 12, 4);
        let enc = Encoder::new(&p, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in Structure::ALL {
            let q = t.random_query(&mut rng, 12, 4);
            assert_eq!(enc.embed(&q).unwrap(), embed_query(&p, &c, &q).unwrap(), "{t}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = ModelConfig {
            norm: NormMode::L2,
            activation: Activation::BoundedRectifier,
            logic: Logic::Godel,
            ln_eps: 1e-7,
            ..cfg(5, 2)
        };
        let p = random_model(1, &c, 7, 3);
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &p, &c).unwrap();
        let text = fs::read(&path).unwrap();
        let header = String::from_utf8_lossy(&text[..text.iter().position(|b| *b == b'\n').unwrap()]).to_string();
        assert_eq!(header, "FZQE1 d=5 K=2 E=7 R=3 logic=godel norm=l2 g=bounded_rectifier ln_eps=0.0000001");
        let (p2, c2) = load_checkpoint(&path).unwrap();
        assert_eq!(p2, p);
        assert_eq!(c2, c);

        fs::write(&path, &text[..text.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint { .. })));
    }
}
