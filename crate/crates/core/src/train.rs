//! Negative-sampled margin training with round-robin structures and
//! validation early stopping.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, EvalError, QuerySets};
use crate::grad::{backward, batch_loss, AdamWConfig, Example, GradError, LossConfig, OptimizerState};
use crate::kg::{EntityId, GraphView, KnowledgeGraph};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelError, Parameters};
use crate::query::{LabeledQuery, Query, QueryNode, Structure};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training queries for structure {0}")]
    MissingStructure(Structure),
    #[error("every entity answers the query; cannot sample negatives")]
    Saturated,
    #[error("non-finite loss at step {step}; parameters dumped to {dump}")]
    NonFinite { step: u64, dump: String },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {reason}")]
    State { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// Arithmetic used for the parameter state between steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Parameters are rounded to 32-bit after every update.
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub k_neg: usize,
    pub gamma: f64,
    pub lr: f64,
    pub max_steps: u64,
    pub patience_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub structures: Vec<Structure>,
    pub zq_eps: f64,
    pub weight_decay: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            k_neg: 128,
            gamma: 0.375,
            lr: 1e-3,
            max_steps: 450_000,
            patience_steps: 15_000,
            eval_every: 1_000,
            seed: 0,
            structures: Structure::TRAINING.to_vec(),
            zq_eps: 1e-9,
            weight_decay: 0.01,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.k_neg == 0 {
            return bad("k_neg must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience_steps > self.max_steps {
            return bad("patience_steps must not exceed max_steps");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.structures.is_empty() {
            return bad("structures must not be empty");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.zq_eps > 0.0) || !self.gamma.is_finite() || !(self.weight_decay >= 0.0) {
            return bad("gamma must be finite, zq_eps positive, weight_decay non-negative");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { gamma: self.gamma, zq_eps: self.zq_eps }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// Loss of a single (query, positive, negatives) example.
pub fn loss_one(
    params: &Parameters,
    config: &ModelConfig,
    loss: &LossConfig,
    q: &Query,
    pos: EntityId,
    negs: &[EntityId],
) -> Result<f64, TrainError> {
    q.check_ids(params.num_entities, params.num_relations)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    Ok(batch_loss(params, config, loss, &[Example { query: q, positive: pos, negatives: negs.to_vec() }])?)
}

/// `k` entities drawn uniformly from `0..num_entities` minus the sorted `answers`.
pub fn sample_negatives<R: Rng + ?Sized>(
    rng: &mut R,
    num_entities: usize,
    answers: &[EntityId],
    k: usize,
) -> Result<Vec<EntityId>, TrainError> {
    if answers.len() >= num_entities {
        return Err(TrainError::Saturated);
    }
    if answers.len() * 2 <= num_entities {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let e = rng.gen_range(0..num_entities) as EntityId;
            if answers.binary_search(&e).is_err() {
                out.push(e);
            }
        }
        Ok(out)
    } else {
        let pool = crate::oracle::difference(&(0..num_entities as EntityId).collect::<Vec<_>>(), answers);
        Ok((0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
    }
}

/// One 1p query per (head, relation) pair in `view`, with its answers as `easy`.
pub fn make_1p_queries(kg: &KnowledgeGraph, view: GraphView) -> Vec<LabeledQuery> {
    let mut out = Vec::new();
    let edges = kg.edges(view);
    let mut i = 0;
    while i < edges.len() {
        let (h, r) = (edges[i].head, edges[i].relation);
        let mut j = i;
        while j < edges.len() && edges[j].head == h && edges[j].relation == r {
            j += 1;
        }
        let answers = edges[i..j].iter().map(|t| t.tail).collect();
        let q = Query::new(QueryNode::proj(r, QueryNode::anchor(h))).expect("valid 1p");
        out.push(LabeledQuery::new(q, answers, Vec::new()).expect("disjoint"));
        i = j;
    }
    out
}

/// Progress persisted next to `last.ckpt` for `--resume`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub best_valid_mrr: f64,
    pub best_step: u64,
    pub steps_since_improvement: u64,
    pub seed: u64,
}

impl TrainState {
    fn new(seed: u64) -> Self {
        Self { step: 0, best_valid_mrr: f64::NEG_INFINITY, best_step: 0, steps_since_improvement: 0, seed }
    }
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    /// Mean loss over the steps since the previous record.
    pub train_loss: Option<f64>,
    pub valid_avg_mrr: f64,
    pub per_structure_mrr: BTreeMap<Structure, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub best_valid_mrr: f64,
    pub best_step: u64,
    pub stopped_early: bool,
    pub log: Vec<LogRecord>,
    /// Parameters at the best validation point.
    pub best: Parameters,
    /// Parameters when training ended.
    pub last: Parameters,
}

/// RNG for the batch at `step`: independent of how the run got there.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Draws the batch for `step`: structure chosen round-robin, queries uniformly
/// with replacement, one uniform positive each, `k_neg` filtered negatives.
pub fn draw_batch<'a>(
    cfg: &TrainConfig,
    num_entities: usize,
    train: &'a BTreeMap<Structure, Vec<LabeledQuery>>,
    step: u64,
) -> Result<(Structure, Vec<Example<'a>>), TrainError> {
    let s = cfg.structures[(step % cfg.structures.len() as u64) as usize];
    let pool = train.get(&s).filter(|p| !p.is_empty()).ok_or(TrainError::MissingStructure(s))?;
    let mut rng = step_rng(cfg.seed, step);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut attempts = 0;
    while batch.len() < cfg.batch_size {
        attempts += 1;
        if attempts > 100 * cfg.batch_size {
            return Err(TrainError::Saturated);
        }
        let lq = &pool[rng.gen_range(0..pool.len())];
        let answers = lq.all_answers();
        if answers.is_empty() {
            continue;
        }
        let positive = answers[rng.gen_range(0..answers.len())];
        match sample_negatives(&mut rng, num_entities, &answers, cfg.k_neg) {
            Ok(negatives) => batch.push(Example { query: &lq.query, positive, negatives }),
            Err(TrainError::Saturated) => warn!("skipping {} query answered by every entity", lq.query),
            Err(e) => return Err(e),
        }
    }
    Ok((s, batch))
}

fn round_to_f32(p: &mut Parameters) {
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
}

/// Files written under the output directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        Self { dir: dir.as_ref().to_path_buf() }
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn optimizer(&self) -> PathBuf {
        self.dir.join("last.opt")
    }
    pub fn state(&self) -> PathBuf {
        self.dir.join("train_state.json")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

/// Trains from `init` (or from `out_dir/last.*` when `resume` is set).
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    kg: &KnowledgeGraph,
    init: Parameters,
    train_queries: &BTreeMap<Structure, Vec<LabeledQuery>>,
    valid: &QuerySets,
    out_dir: impl AsRef<Path>,
    resume: bool,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model.validate()?;
    init.check_config(model)?;
    for s in &cfg.structures {
        if train_queries.get(s).is_none_or(|v| v.is_empty()) {
            return Err(TrainError::MissingStructure(*s));
        }
    }
    let paths = RunPaths::new(&out_dir);
    fs::create_dir_all(&paths.dir).map_err(io_err(&paths.dir))?;
    let loss_cfg = cfg.loss();

    let (mut params, mut opt, mut state, mut log) = if resume {
        let (p, mc) = load_checkpoint(paths.last())?;
        if &mc != model {
            return Err(TrainError::Config("checkpoint model config differs from the requested one".into()));
        }
        let opt = OptimizerState::load(paths.optimizer(), cfg.adamw(), &p)?;
        let state_path = paths.state();
        let text = fs::read_to_string(&state_path).map_err(io_err(&state_path))?;
        let state: TrainState = serde_json::from_str(&text)
            .map_err(|e| TrainError::State { path: state_path.display().to_string(), reason: e.to_string() })?;
        let log = read_log(&paths.log())?;
        info!("resuming at step {}", state.step);
        (p, opt, state, log)
    } else {
        let opt = OptimizerState::new(cfg.adamw(), &init);
        let _ = fs::remove_file(paths.log());
        (init, opt, TrainState::new(cfg.seed), Vec::new())
    };
    if cfg.precision == Precision::F32 {
        round_to_f32(&mut params);
    }
    let mut best = if resume && paths.best().exists() { load_checkpoint(paths.best())?.0 } else { params.clone() };

    let mut window_loss = 0.0;
    let mut window_n = 0u64;
    let mut stopped_early = false;
    if !resume {
        let rec = validate_point(&params, model, valid, 0, None)?;
        on_eval(&paths, &params, model, &opt, &mut state, &mut best, rec, &mut log)?;
    }
    while state.step < cfg.max_steps {
        let (_, batch) = draw_batch(cfg, kg.num_entities(), train_queries, state.step)?;
        let (loss, grads) = match backward(&params, model, &loss_cfg, &batch) {
            Ok(v) => v,
            Err(GradError::NonFinite { .. }) | Err(GradError::Model(ModelError::NonFinite(_))) => {
                let dump = paths.dir.join("nonfinite.ckpt");
                save_checkpoint(&dump, &params, model)?;
                return Err(TrainError::NonFinite { step: state.step, dump: dump.display().to_string() });
            }
            Err(e) => return Err(e.into()),
        };
        opt.step(&mut params, &grads);
        if cfg.precision == Precision::F32 {
            round_to_f32(&mut params);
        }
        state.step += 1;
        window_loss += loss;
        window_n += 1;
        if state.step % cfg.eval_every == 0 || state.step == cfg.max_steps {
            let rec = validate_point(&params, model, valid, state.step, Some(window_loss / window_n as f64))?;
            window_loss = 0.0;
            window_n = 0;
            let since_before = state.steps_since_improvement;
            on_eval(&paths, &params, model, &opt, &mut state, &mut best, rec, &mut log)?;
            if state.steps_since_improvement > since_before && state.steps_since_improvement >= cfg.patience_steps {
                info!("early stop at step {}", state.step);
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        steps: state.step,
        best_valid_mrr: state.best_valid_mrr,
        best_step: state.best_step,
        stopped_early,
        log,
        best,
        last: params,
    })
}

fn validate_point(
    params: &Parameters,
    model: &ModelConfig,
    valid: &QuerySets,
    step: u64,
    train_loss: Option<f64>,
) -> Result<LogRecord, TrainError> {
    let report = evaluate(params, model, valid)?;
    Ok(LogRecord {
        step,
        train_loss,
        valid_avg_mrr: report.mean_mrr(),
        per_structure_mrr: report.per_structure.iter().map(|(s, m)| (*s, m.mrr)).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn on_eval(
    paths: &RunPaths,
    params: &Parameters,
    model: &ModelConfig,
    opt: &OptimizerState,
    state: &mut TrainState,
    best: &mut Parameters,
    rec: LogRecord,
    log: &mut Vec<LogRecord>,
) -> Result<(), TrainError> {
    info!(
        "step {} loss {} valid mrr {:.4}",
        rec.step,
        rec.train_loss.map_or("-".into(), |l| format!("{l:.5}")),
        rec.valid_avg_mrr
    );
    if rec.valid_avg_mrr > state.best_valid_mrr {
        state.best_valid_mrr = rec.valid_avg_mrr;
        state.best_step = rec.step;
        state.steps_since_improvement = 0;
        *best = params.clone();
        save_checkpoint(paths.best(), params, model)?;
    } else if rec.step > 0 {
        let prev = log.last().map_or(0, |r| r.step);
        state.steps_since_improvement += rec.step - prev;
    }
    let log_path = paths.log();
    let mut f = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
    writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io_err(&log_path))?;
    log.push(rec);
    save_checkpoint(paths.last(), params, model)?;
    opt.save(paths.optimizer())?;
    let state_path = paths.state();
    fs::write(&state_path, serde_json::to_string_pretty(state).expect("state serializes"))
        .map_err(io_err(&state_path))?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, TrainError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| TrainError::State { path: path.display().to_string(), reason: e.to_string() })
        })
        .collect()
}
