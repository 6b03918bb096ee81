//! Reverse-mode gradients of the margin loss, a finite-difference checker,
//! and the AdamW optimizer.
//!
//! The forward pass is recorded on a [`Tape`]; the backward pass walks it
//! in reverse, handling each operation with its own hand-derived adjoint.
//! Relation-level adjoints `∂L/∂W_r`, `∂L/∂b_r` are accumulated per used
//! relation and folded into the basis tensors once per batch.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuzzy::Logic;
use crate::kg::{EntityId, RelationId};
use crate::model::{
    fast_dot, normalize_entity, relation_map_unchecked, sigmoid, Activation, EntityTable, Gradients, ModelConfig,
    ModelError, NormMode, Parameters, RelationMap, Resolver, Tape, TapeOp, TENSOR_NAMES,
};
use crate::query::{Query, QueryNode};

/// Examples per gradient shard. Shards are reduced in order, so the result does
/// not depend on how many threads ran them.
pub const SHARD_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum GradError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {what} (query {query}, positive {positive})")]
    NonFinite {
        what: &'static str,
        query: String,
        positive: EntityId,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("example for query {0} has no negatives")]
    NoNegatives(String),
    #[error("optimizer state {path}: {reason}")]
    State { path: String, reason: String },
}

/// Margin and the floor of the query-norm scaling factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub zq_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 0.375, zq_eps: 1e-9 }
    }
}

/// One training example: a query, one answer and `k` sampled non-answers.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub query: &'a Query,
    pub positive: EntityId,
    pub negatives: Vec<EntityId>,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct LossTerms {
    loss: f64,
    /// ∂L/∂S_q
    d_query: Vec<f64>,
    /// ∂L/∂φ for the positive, then each negative.
    d_scores: Vec<f64>,
    /// Whether ‖S_q‖ was above the floor (part of the branch signature).
    norm_active: bool,
}

/// `-log σ(φ⁺/Z - γ) - (1/k) Σ log σ(γ - φ⁻/Z)` with `Z = max(‖S‖₂, zq_eps)`.
fn loss_terms(s: &[f64], pos: &[f64], negs: &[&[f64]], loss: &LossConfig, want_grad: bool) -> LossTerms {
    let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_active = norm > loss.zq_eps;
    let z = if norm_active { norm } else { loss.zq_eps };
    let k = negs.len() as f64;
    let phi_pos = fast_dot(s, pos);
    let u = phi_pos / z - loss.gamma;
    let mut total = softplus(-u);
    let mut d_scores = Vec::with_capacity(negs.len() + 1);
    let d_pos = (sigmoid(u) - 1.0) / z;
    d_scores.push(d_pos);
    let mut d_z = -(sigmoid(u) - 1.0) * phi_pos / (z * z);
    let mut phis = Vec::with_capacity(negs.len());
    for n in negs {
        let phi = fast_dot(s, n);
        let v = loss.gamma - phi / z;
        total += softplus(-v) / k;
        let sv = sigmoid(-v);
        d_scores.push(sv / (k * z));
        d_z -= sv * phi / (k * z * z);
        phis.push(phi);
    }
    let mut d_query = Vec::new();
    if want_grad {
        d_query = pos.iter().map(|p| d_pos * p).collect();
        for (n, ds) in negs.iter().zip(&d_scores[1..]) {
            d_query.iter_mut().zip(n.iter()).for_each(|(g, p)| *g += ds * p);
        }
        if norm_active {
            d_query.iter_mut().zip(s).for_each(|(g, x)| *g += d_z * x / norm);
        }
    }
    LossTerms { loss: total, d_query, d_scores, norm_active }
}

/// Per-step lookup tables: materialized entity embeddings and the maps of
/// every relation used in the batch.
pub(crate) struct StepResolver {
    entities: EntityTable,
    relations: Vec<Option<RelationMap>>,
}

impl StepResolver {
    fn new(params: &Parameters, config: &ModelConfig, batch: &[Example<'_>]) -> Self {
        let mut used = vec![false; params.num_relations];
        for ex in batch {
            mark_relations(ex.query.root(), &mut used);
        }
        let relations = used
            .iter()
            .enumerate()
            .map(|(r, u)| u.then(|| relation_map_unchecked(params, r as RelationId)))
            .collect();
        Self { entities: EntityTable::build(params, config), relations }
    }
}

fn mark_relations(node: &QueryNode, used: &mut [bool]) {
    match node {
        QueryNode::Anchor(_) => {}
        QueryNode::Proj(r, c) => {
            used[*r as usize] = true;
            mark_relations(c, used);
        }
        QueryNode::Not(c) => mark_relations(c, used),
        QueryNode::And(cs) | QueryNode::Or(cs) => cs.iter().for_each(|c| mark_relations(c, used)),
    }
}

impl Resolver for StepResolver {
    fn entity(&self, e: EntityId) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.entities.row(e))
    }

    fn relation(&self, r: RelationId) -> Cow<'_, RelationMap> {
        Cow::Borrowed(self.relations[r as usize].as_ref().expect("relation marked as used"))
    }
}

/// Sparse adjoint accumulator for one shard.
#[derive(Default)]
struct Accum {
    loss: f64,
    entity: BTreeMap<EntityId, Vec<f64>>,
    weight: BTreeMap<RelationId, (Vec<f64>, Vec<f64>)>,
    ln_gain: Vec<f64>,
    ln_bias: Vec<f64>,
}

impl Accum {
    fn new(d: usize) -> Self {
        Self { ln_gain: vec![0.0; d], ln_bias: vec![0.0; d], ..Default::default() }
    }

    fn entity_row(&mut self, e: EntityId, d: usize) -> &mut Vec<f64> {
        self.entity.entry(e).or_insert_with(|| vec![0.0; d])
    }

    fn merge(&mut self, other: Accum) {
        self.loss += other.loss;
        for (e, g) in other.entity {
            match self.entity.get_mut(&e) {
                Some(row) => row.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.entity.insert(e, g);
                }
            }
        }
        for (r, (gw, gb)) in other.weight {
            match self.weight.get_mut(&r) {
                Some((w, b)) => {
                    w.iter_mut().zip(&gw).for_each(|(a, x)| *a += x);
                    b.iter_mut().zip(&gb).for_each(|(a, x)| *a += x);
                }
                None => {
                    self.weight.insert(r, (gw, gb));
                }
            }
        }
        self.ln_gain.iter_mut().zip(&other.ln_gain).for_each(|(a, b)| *a += b);
        self.ln_bias.iter_mut().zip(&other.ln_bias).for_each(|(a, b)| *a += b);
    }
}

/// Propagates `d_root` through the tape into `acc`.
fn backprop_tape(
    tape: &Tape,
    d_root: Vec<f64>,
    params: &Parameters,
    config: &ModelConfig,
    res: &StepResolver,
    acc: &mut Accum,
) {
    let d = params.dim;
    let n = tape.nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    grads[n - 1] = Some(d_root);
    let add_into = |slot: &mut Option<Vec<f64>>, g: &[f64], sign: f64| match slot {
        Some(v) => v.iter_mut().zip(g).for_each(|(a, b)| *a += sign * b),
        None => *slot = Some(g.iter().map(|x| sign * x).collect()),
    };
    for idx in (0..n).rev() {
        let Some(g) = grads[idx].take() else { continue };
        let node = &tape.nodes[idx];
        match &node.op {
            TapeOp::Anchor(e) => {
                acc.entity_row(*e, d).iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            TapeOp::Proj { rel, child, cache } => {
                let gy: Vec<f64> = g
                    .iter()
                    .zip(&cache.pre)
                    .map(|(gi, y)| gi * config.activation.derivative(*y))
                    .collect();
                let mut mean_g = 0.0;
                let mut mean_gz = 0.0;
                let mut gzhat = vec![0.0; d];
                for i in 0..d {
                    acc.ln_bias[i] += gy[i];
                    acc.ln_gain[i] += gy[i] * cache.zhat[i];
                    gzhat[i] = gy[i] * params.ln_gain[i];
                    mean_g += gzhat[i];
                    mean_gz += gzhat[i] * cache.zhat[i];
                }
                mean_g /= d as f64;
                mean_gz /= d as f64;
                let gz: Vec<f64> = (0..d)
                    .map(|i| cache.inv_std * (gzhat[i] - mean_g - cache.zhat[i] * mean_gz))
                    .collect();
                let x = &tape.nodes[*child].out;
                let (gw, gb) = acc
                    .weight
                    .entry(*rel)
                    .or_insert_with(|| (vec![0.0; d * d], vec![0.0; d]));
                for i in 0..d {
                    gb[i] += gz[i];
                    let row = &mut gw[i * d..(i + 1) * d];
                    row.iter_mut().zip(x).for_each(|(w, xj)| *w += gz[i] * xj);
                }
                let map = res.relation(*rel);
                let mut gx = vec![0.0; d];
                for i in 0..d {
                    let row = &map.weight[i * d..(i + 1) * d];
                    gx.iter_mut().zip(row).for_each(|(a, w)| *a += gz[i] * w);
                }
                add_into(&mut grads[*child], &gx, 1.0);
            }
            TapeOp::And(ids) | TapeOp::Or(ids) => {
                let is_and = matches!(node.op, TapeOp::And(_));
                match config.logic {
                    Logic::Product => {
                        for (pos, &ci) in ids.iter().enumerate() {
                            let mut gc = g.clone();
                            for (other_pos, &cj) in ids.iter().enumerate() {
                                if other_pos == pos {
                                    continue;
                                }
                                let o = &tape.nodes[cj].out;
                                gc.iter_mut().zip(o).for_each(|(a, x)| *a *= if is_and { *x } else { 1.0 - x });
                            }
                            add_into(&mut grads[ci], &gc, 1.0);
                        }
                    }
                    Logic::Godel | Logic::Lukasiewicz => {
                        // The gradient flows to the first child attaining the min / max.
                        let mut routed: Vec<Vec<f64>> = vec![vec![0.0; d]; ids.len()];
                        for k in 0..d {
                            let pick = ids
                                .iter()
                                .position(|&c| tape.nodes[c].out[k] == node.out[k])
                                .unwrap_or(0);
                            routed[pick][k] = g[k];
                        }
                        for (gc, &ci) in routed.iter().zip(ids) {
                            add_into(&mut grads[ci], gc, 1.0);
                        }
                    }
                }
            }
            TapeOp::Not(child) => add_into(&mut grads[*child], &g, -1.0),
        }
    }
}

fn example_forward<'t>(
    ex: &Example<'_>,
    params: &Parameters,
    config: &ModelConfig,
    loss: &LossConfig,
    res: &'t StepResolver,
    want_grad: bool,
) -> Result<(Tape, LossTerms), GradError> {
    if ex.negatives.is_empty() {
        return Err(GradError::NoNegatives(ex.query.encode()));
    }
    let tape = Tape::record(ex.query.root(), params, config, res);
    tape.check_finite()?;
    let s = tape.root();
    let pos = res.entities.row(ex.positive);
    let negs: Vec<&[f64]> = ex.negatives.iter().map(|&n| res.entities.row(n)).collect();
    let terms = loss_terms(s, pos, &negs, loss, want_grad);
    if !terms.loss.is_finite() {
        return Err(GradError::NonFinite { what: "loss", query: ex.query.encode(), positive: ex.positive });
    }
    Ok((tape, terms))
}

fn shard_backward(
    shard: &[Example<'_>],
    params: &Parameters,
    config: &ModelConfig,
    loss: &LossConfig,
    res: &StepResolver,
) -> Result<Accum, GradError> {
    let d = params.dim;
    let mut acc = Accum::new(d);
    for ex in shard {
        let (tape, terms) = example_forward(ex, params, config, loss, res, true)?;
        acc.loss += terms.loss;
        let s = tape.root();
        for (e, ds) in std::iter::once(&ex.positive).chain(&ex.negatives).zip(&terms.d_scores) {
            acc.entity_row(*e, d).iter_mut().zip(s).for_each(|(a, x)| *a += ds * x);
        }
        backprop_tape(&tape, terms.d_query, params, config, res, &mut acc);
    }
    Ok(acc)
}

/// Mean batch loss and its exact gradient with respect to every parameter.
pub fn backward(
    params: &Parameters,
    config: &ModelConfig,
    loss: &LossConfig,
    batch: &[Example<'_>],
) -> Result<(f64, Gradients), GradError> {
    if batch.is_empty() {
        return Err(GradError::EmptyBatch);
    }
    config.validate()?;
    params.check_config(config)?;
    let res = StepResolver::new(params, config, batch);
    let shards: Vec<Result<Accum, GradError>> = batch
        .par_chunks(SHARD_SIZE)
        .map(|shard| shard_backward(shard, params, config, loss, &res))
        .collect();
    let mut acc = Accum::new(params.dim);
    for s in shards {
        acc.merge(s?);
    }
    let scale = 1.0 / batch.len() as f64;
    let loss_value = acc.loss * scale;
    let mut grads = finish_gradients(params, config, acc);
    grads.scale(scale);
    if !grads.all_finite() {
        return Err(GradError::NonFinite { what: "gradient", query: String::from("<batch>"), positive: 0 });
    }
    Ok((loss_value, grads))
}

/// Converts accumulated adjoints into parameter gradients.
fn finish_gradients(params: &Parameters, config: &ModelConfig, acc: Accum) -> Gradients {
    let d = params.dim;
    let mut g = params.zeros_like();
    for (e, gp) in &acc.entity {
        let theta = params.theta(*e);
        let mut p = vec![0.0; d];
        normalize_entity(config.norm, theta, &mut p);
        let dot_gp = fast_dot(gp, &p);
        let out = &mut g.entity_theta[*e as usize * d..(*e as usize + 1) * d];
        match config.norm {
            NormMode::L1 => {
                for i in 0..d {
                    out[i] = p[i] * (gp[i] - dot_gp);
                }
            }
            NormMode::L2 => {
                let mut sq = 0.0;
                let s: Vec<f64> = theta.iter().map(|t| sigmoid(*t)).collect();
                s.iter().for_each(|x| sq += x * x);
                let norm = sq.sqrt();
                for i in 0..d {
                    let gs = (gp[i] - p[i] * dot_gp) / norm;
                    out[i] = gs * s[i] * (1.0 - s[i]);
                }
            }
        }
    }
    let k = params.num_bases;
    for (r, (gw, gb)) in &acc.weight {
        let alpha = params.coefficients(*r);
        for j in 0..k {
            let a = alpha[j];
            let m = params.basis_matrix(j);
            let v = params.basis_vector(j);
            g.rel_coeff[*r as usize * k + j] = fast_dot(gw, m) + fast_dot(gb, v);
            g.bases_m[j * d * d..(j + 1) * d * d].iter_mut().zip(gw).for_each(|(o, x)| *o += a * x);
            g.bases_v[j * d..(j + 1) * d].iter_mut().zip(gb).for_each(|(o, x)| *o += a * x);
        }
    }
    g.ln_gain = acc.ln_gain;
    g.ln_bias = acc.ln_bias;
    g
}

/// Mean batch loss without gradients.
pub fn batch_loss(
    params: &Parameters,
    config: &ModelConfig,
    loss: &LossConfig,
    batch: &[Example<'_>],
) -> Result<f64, GradError> {
    Ok(batch_loss_with_signature(params, config, loss, batch)?.0)
}

/// Mean batch loss plus a hash of every discrete branch taken (rectifier
/// regions, min/max winners, the `Z_q` floor). Two evaluations with the same
/// signature lie on the same smooth piece of the loss.
pub fn batch_loss_with_signature(
    params: &Parameters,
    config: &ModelConfig,
    loss: &LossConfig,
    batch: &[Example<'_>],
) -> Result<(f64, u64), GradError> {
    if batch.is_empty() {
        return Err(GradError::EmptyBatch);
    }
    let res = StepResolver::new(params, config, batch);
    let mut total = 0.0;
    let mut sig = 0xcbf2_9ce4_8422_2325u64;
    let mut mix = |x: u64| sig = (sig ^ x).wrapping_mul(0x0000_0100_0000_01b3);
    for ex in batch {
        let (tape, terms) = example_forward(ex, params, config, loss, &res, false)?;
        total += terms.loss;
        mix(u64::from(terms.norm_active));
        for node in &tape.nodes {
            match &node.op {
                TapeOp::Proj { cache, .. } if config.activation == Activation::BoundedRectifier => {
                    for y in &cache.pre {
                        mix(if *y <= 0.0 { 0 } else if *y >= 1.0 { 2 } else { 1 });
                    }
                }
                TapeOp::And(ids) | TapeOp::Or(ids) if config.logic != Logic::Product => {
                    for k in 0..node.out.len() {
                        let pick = ids.iter().position(|&c| tape.nodes[c].out[k] == node.out[k]).unwrap_or(0);
                        mix(pick as u64 + 7);
                    }
                }
                _ => {}
            }
        }
    }
    Ok((total / batch.len() as f64, sig))
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Default, Serialize)]
pub struct GradCheckReport {
    /// Largest relative error after discounting the float resolution of the
    /// central difference (see [`resolution`]).
    pub max_rel_error: f64,
    /// Largest plain `|a - n| / max(|a|, |n|, 1e-8)`, for reference.
    pub raw_max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a ±h step crossed a kink.
    pub excluded: usize,
    /// Number of checked coordinates per tensor, in canonical order.
    pub per_tensor: Vec<usize>,
    pub worst: Option<WorstCoordinate>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorstCoordinate {
    pub tensor: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub resolution: f64,
}

impl GradCheckReport {
    fn record(&mut self, tensor: &str, offset: usize, analytic: f64, numeric: f64, resolution: f64) {
        let err = resolved_error(analytic, numeric, resolution);
        self.checked += 1;
        self.raw_max_rel_error = self.raw_max_rel_error.max(relative_error(analytic, numeric));
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(WorstCoordinate { tensor: tensor.to_string(), offset, analytic, numeric, resolution });
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error >= self.max_rel_error {
            self.worst = other.worst.clone().or(self.worst.take());
        }
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.raw_max_rel_error = self.raw_max_rel_error.max(other.raw_max_rel_error);
        self.checked += other.checked;
        self.excluded += other.excluded;
        if self.per_tensor.len() < other.per_tensor.len() {
            self.per_tensor.resize(other.per_tensor.len(), 0);
        }
        self.per_tensor.iter_mut().zip(&other.per_tensor).for_each(|(a, b)| *a += b);
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Rounding in the loss evaluation assumed by [`resolution`], in ulps.
pub const ROUNDOFF_ULPS: f64 = 4.0;

/// Smallest derivative difference a central difference can resolve: the
/// loss values carry about [`ROUNDOFF_ULPS`] ulps of rounding each, which
/// the division by the step amplifies.
pub fn resolution(f_plus: f64, f_minus: f64, step: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * f_plus.abs().max(f_minus.abs()) / step
}

/// [`relative_error`] with the first `resolution` of disagreement forgiven.
pub fn resolved_error(analytic: f64, numeric: f64, resolution: f64) -> f64 {
    ((analytic - numeric).abs() - resolution).max(0.0) / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences of a generic function against a supplied gradient.
/// `f` returns the value and a branch signature; coordinates whose ±h
/// evaluations change the signature are excluded.
pub fn grad_check_fn(
    f: impl Fn(&[f64]) -> (f64, u64),
    x: &[f64],
    analytic: &[f64],
    h: f64,
    coords: &[usize],
) -> GradCheckReport {
    let (_, base_sig) = f(x);
    let mut report = GradCheckReport { per_tensor: vec![0], ..Default::default() };
    let mut xp = x.to_vec();
    for &c in coords {
        xp[c] = x[c] + h;
        let (fp, sp) = f(&xp);
        let hi = xp[c];
        xp[c] = x[c] - h;
        let (fm, sm) = f(&xp);
        let step = hi - xp[c];
        xp[c] = x[c];
        if sp != base_sig || sm != base_sig {
            report.excluded += 1;
            continue;
        }
        report.record("x", c, analytic[c], (fp - fm) / step, resolution(fp, fm, step));
        report.per_tensor[0] += 1;
    }
    report
}

/// Options for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-6, max_per_tensor: None, seed: 0 }
    }
}

/// Compares [`backward`] with central differences of [`batch_loss`].
pub fn grad_check(
    params: &Parameters,
    config: &ModelConfig,
    loss: &LossConfig,
    batch: &[Example<'_>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, GradError> {
    let (_, grads) = backward(params, config, loss, batch)?;
    let (_, base_sig) = batch_loss_with_signature(params, config, loss, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { per_tensor: vec![0; 6], ..Default::default() };
    let mut probe = params.clone();
    let mut flat_offset = 0;
    for (t, tensor) in params.tensors().iter().enumerate() {
        let mut idx: Vec<usize> = (0..tensor.len()).collect();
        if let Some(cap) = opts.max_per_tensor {
            idx.shuffle(&mut rng);
            idx.truncate(cap);
            idx.sort_unstable();
        }
        for o in idx {
            let flat = flat_offset + o;
            let x0 = params.get_flat(flat);
            probe.set_flat(flat, x0 + opts.h);
            let (fp, sp) = batch_loss_with_signature(&probe, config, loss, batch)?;
            probe.set_flat(flat, x0 - opts.h);
            let (fm, sm) = batch_loss_with_signature(&probe, config, loss, batch)?;
            let step = (x0 + opts.h) - (x0 - opts.h);
            probe.set_flat(flat, x0);
            if sp != base_sig || sm != base_sig {
                report.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / step;
            report.record(TENSOR_NAMES[t], o, grads.get_flat(flat), numeric, resolution(fp, fm, step));
            report.per_tensor[t] += 1;
        }
        flat_offset += tensor.len();
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment estimates and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Parameters,
    pub second: Parameters,
}

/// Tensors that receive decoupled weight decay (the relation bases and coefficients).
const DECAYED: [bool; 6] = [false, true, true, true, false, false];

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &Parameters) -> Self {
        Self { config, step: 0, first: params.zeros_like(), second: params.zeros_like() }
    }

    /// One AdamW update of `params` in place.
    pub fn step(&mut self, params: &mut Parameters, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        let firsts = self.first.tensors_mut();
        let seconds = self.second.tensors_mut();
        for (((p, g), (m, v)), decayed) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(firsts.into_iter().zip(seconds))
            .zip(DECAYED)
        {
            for i in 0..p.len() {
                if decayed {
                    p[i] *= decay;
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }

    /// Header line `FZQEOPT1 step=<t>` then first and second moments as little-endian f64.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GradError> {
        let path = path.as_ref();
        let mut buf = format!("FZQEOPT1 step={}\n", self.step).into_bytes();
        for t in self.first.tensors().into_iter().chain(self.second.tensors()) {
            t.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        }
        let err = |e: std::io::Error| GradError::State { path: path.display().to_string(), reason: e.to_string() };
        fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(err)
    }

    pub fn load(path: impl AsRef<Path>, config: AdamWConfig, params: &Parameters) -> Result<Self, GradError> {
        let path = path.as_ref();
        let bad = |reason: String| GradError::State { path: path.display().to_string(), reason };
        let bytes = fs::read(path).map_err(|e| bad(e.to_string()))?;
        let nl = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| bad("missing header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
        let step = header
            .strip_prefix("FZQEOPT1 step=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("bad header `{header}`")))?;
        let mut state = Self::new(config, params);
        state.step = step;
        let body = &bytes[nl + 1..];
        if body.len() != 2 * params.len() * 8 {
            return Err(bad(format!("expected {} payload bytes, found {}", 2 * params.len() * 8, body.len())));
        }
        let mut words = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for t in state.first.tensors_mut().into_iter().chain(state.second.tensors_mut()) {
            t.iter_mut().for_each(|x| *x = words.next().expect("length checked"));
        }
        Ok(state)
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn adamw_step(state: &mut OptimizerState, params: &mut Parameters, grads: &Gradients) {
    state.step(params, grads);
}
