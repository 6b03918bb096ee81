//! Filtered-rank evaluation: per-structure MRR / HITS@{1,3,10} and the
//! EPFO / negation aggregates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::EntityId;
use crate::model::{Encoder, ModelConfig, ModelError, Parameters};
use crate::oracle::difference;
use crate::query::{LabeledQuery, Query, Structure};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("target {target} out of range for {len} scores")]
    TargetOutOfRange { target: EntityId, len: usize },
    #[error("target {0} is in its own filter set")]
    TargetFiltered(EntityId),
    #[error("{tag} query {query} has no hard answers")]
    NoHardAnswers { tag: String, query: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `1 + #{score > s_t} + 0.5·#{score == s_t}` over entities outside `filter_out ∪ {target}`.
/// `filter_out` must be sorted.
pub fn filtered_rank(scores: &[f64], target: EntityId, filter_out: &[EntityId]) -> Result<f64, EvalError> {
    let t = target as usize;
    if t >= scores.len() {
        return Err(EvalError::TargetOutOfRange { target, len: scores.len() });
    }
    if filter_out.binary_search(&target).is_ok() {
        return Err(EvalError::TargetFiltered(target));
    }
    let st = scores[t];
    let mut f = 0;
    let (mut greater, mut equal) = (0usize, 0usize);
    for (e, s) in scores.iter().enumerate() {
        while f < filter_out.len() && (filter_out[f] as usize) < e {
            f += 1;
        }
        if e == t || (f < filter_out.len() && filter_out[f] as usize == e) {
            continue;
        }
        if *s > st {
            greater += 1;
        } else if *s == st {
            equal += 1;
        }
    }
    Ok(1.0 + greater as f64 + 0.5 * equal as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n_queries: usize,
}

impl Metrics {
    fn from_ranks(ranks: &[f64]) -> Self {
        let n = ranks.len() as f64;
        let mean = |f: &dyn Fn(f64) -> f64| ranks.iter().map(|r| f(*r)).sum::<f64>() / n;
        Self {
            mrr: mean(&|r| 1.0 / r),
            hits1: mean(&|r| f64::from(u8::from(r <= 1.0))),
            hits3: mean(&|r| f64::from(u8::from(r <= 3.0))),
            hits10: mean(&|r| f64::from(u8::from(r <= 10.0))),
            n_queries: 1,
        }
    }

    fn mean_of(items: &[Metrics]) -> Self {
        let n = items.len() as f64;
        let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            mrr: sum(|m| m.mrr),
            hits1: sum(|m| m.hits1),
            hits3: sum(|m| m.hits3),
            hits10: sum(|m| m.hits10),
            n_queries: items.len(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_structure: BTreeMap<Structure, Metrics>,
    /// Mean MRR over the EPFO structures present; `None` if there are none.
    pub avg_epfo: Option<f64>,
    /// Mean MRR over the negation structures present.
    pub avg_neg: Option<f64>,
}

impl EvalReport {
    pub fn from_metrics(per_structure: BTreeMap<Structure, Metrics>) -> Self {
        let avg = |set: &[Structure]| {
            let v: Vec<f64> = set.iter().filter_map(|s| per_structure.get(s)).map(|m| m.mrr).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let avg_epfo = avg(&Structure::EPFO);
        let avg_neg = avg(&Structure::NEGATION);
        Self { per_structure, avg_epfo, avg_neg }
    }

    /// Unweighted mean MRR over every structure present.
    pub fn mean_mrr(&self) -> f64 {
        if self.per_structure.is_empty() {
            return 0.0;
        }
        self.per_structure.values().map(|m| m.mrr).sum::<f64>() / self.per_structure.len() as f64
    }

    pub fn mrr(&self, s: Structure) -> Option<f64> {
        self.per_structure.get(&s).map(|m| m.mrr)
    }

    /// `tag,mrr,hits1,hits3,hits10,n` rows in canonical structure order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tag,mrr,hits1,hits3,hits10,n\n");
        for (s, m) in &self.per_structure {
            let _ = writeln!(out, "{s},{:.6},{:.6},{:.6},{:.6},{}", m.mrr, m.hits1, m.hits3, m.hits10, m.n_queries);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Queries grouped by structure.
pub type QuerySets = BTreeMap<Structure, Vec<LabeledQuery>>;

/// Per-query metrics: filtered rank of every hard answer, averaged.
pub fn query_metrics(scores: &[f64], lq: &LabeledQuery) -> Result<Metrics, EvalError> {
    if lq.hard.is_empty() {
        return Err(EvalError::NoHardAnswers { tag: lq.query.tag().into(), query: lq.query.encode() });
    }
    let answers = lq.all_answers();
    for &a in &answers {
        if a as usize >= scores.len() {
            return Err(EvalError::TargetOutOfRange { target: a, len: scores.len() });
        }
    }
    // Non-answer scores sorted once; each hard answer is located by binary search.
    let mut rest: Vec<f64> = difference(&(0..scores.len() as EntityId).collect::<Vec<_>>(), &answers)
        .into_iter()
        .map(|e| scores[e as usize])
        .collect();
    rest.sort_unstable_by(|a, b| a.total_cmp(b));
    let ranks: Vec<f64> = lq
        .hard
        .iter()
        .map(|&a| {
            let s = scores[a as usize];
            let below_or_eq = rest.partition_point(|x| *x <= s);
            let below = rest.partition_point(|x| *x < s);
            let greater = rest.len() - below_or_eq;
            1.0 + greater as f64 + 0.5 * (below_or_eq - below) as f64
        })
        .collect();
    Ok(Metrics::from_ranks(&ranks))
}

/// Evaluates an arbitrary scorer (one score per entity for each query).
pub fn evaluate_with<F>(scorer: F, sets: &QuerySets) -> Result<EvalReport, EvalError>
where
    F: Fn(&Query) -> Result<Vec<f64>, EvalError> + Sync,
{
    let mut per_structure = BTreeMap::new();
    for (s, queries) in sets {
        if queries.is_empty() {
            continue;
        }
        let metrics: Vec<Metrics> = queries
            .par_iter()
            .map(|lq| query_metrics(&scorer(&lq.query)?, lq))
            .collect::<Result<_, _>>()?;
        per_structure.insert(*s, Metrics::mean_of(&metrics));
    }
    Ok(EvalReport::from_metrics(per_structure))
}

/// Ranks every entity by `φ(q, ·)` under the model.
pub fn evaluate(params: &Parameters, config: &ModelConfig, sets: &QuerySets) -> Result<EvalReport, EvalError> {
    let enc = Encoder::new(params, config)?;
    evaluate_with(|q| Ok(enc.score_all(&enc.embed(q)?)), sets)
}

/// Exact expected metrics of a scorer that ranks candidates uniformly at random.
///
/// For a hard answer competing with `n - 1` non-answers its rank is uniform on
/// `1..=n`, so `E[RR] = H_n / n` and `P(rank ≤ k) = min(k, n) / n`.
pub fn random_baseline(num_entities: usize, sets: &QuerySets) -> EvalReport {
    let mut per_structure = BTreeMap::new();
    for (s, queries) in sets {
        let metrics: Vec<Metrics> = queries
            .iter()
            .filter(|lq| !lq.hard.is_empty())
            .map(|lq| {
                let n = (num_entities - lq.all_answers().len() + 1) as f64;
                let h: f64 = (1..=n as usize).map(|r| 1.0 / r as f64).sum();
                Metrics {
                    mrr: h / n,
                    hits1: 1.0_f64.min(n) / n,
                    hits3: 3.0_f64.min(n) / n,
                    hits10: 10.0_f64.min(n) / n,
                    n_queries: 1,
                }
            })
            .collect();
        if !metrics.is_empty() {
            per_structure.insert(*s, Metrics::mean_of(&metrics));
        }
    }
    EvalReport::from_metrics(per_structure)
}

/// Random-scorer expected MRR over all given queries (macro mean across queries).
pub fn random_baseline_mrr(num_entities: usize, queries: &[LabeledQuery]) -> f64 {
    let mut sets = QuerySets::new();
    for lq in queries {
        if let Some(s) = lq.query.structure() {
            sets.entry(s).or_default().push(lq.clone());
        }
    }
    let report = random_baseline(num_entities, &sets);
    let total: usize = report.per_structure.values().map(|m| m.n_queries).sum();
    report.per_structure.values().map(|m| m.mrr * m.n_queries as f64).sum::<f64>() / total.max(1) as f64
}

/// Groups labeled queries by structure; queries of non-canonical shape are returned separately.
pub fn group_by_structure(queries: Vec<LabeledQuery>) -> (QuerySets, Vec<LabeledQuery>) {
    let mut sets = QuerySets::new();
    let mut other = Vec::new();
    for lq in queries {
        match lq.query.structure() {
            Some(s) => sets.entry(s).or_default().push(lq),
            None => other.push(lq),
        }
    }
    (sets, other)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::QueryNode;

    fn lq(hard: Vec<EntityId>, easy: Vec<EntityId>) -> LabeledQuery {
        let q = Query::new(QueryNode::proj(0, QueryNode::anchor(0))).unwrap();
        LabeledQuery::new(q, easy, hard).unwrap()
    }

    #[test]
    fn rank_examples() {
        let s = [0.9, 0.5, 0.1];
        assert_eq!(filtered_rank(&s, 1, &[]).unwrap(), 2.0);
        assert_eq!(filtered_rank(&s, 2, &[1]).unwrap(), 2.0);
        assert_eq!(filtered_rank(&[0.3; 5], 4, &[]).unwrap(), 3.0);
        assert!(filtered_rank(&s, 3, &[]).is_err());
        assert!(filtered_rank(&s, 1, &[1]).is_err());
    }

    #[test]
    fn query_metrics_matches_filtered_rank() {
        let scores = [0.4, 0.9, 0.4, 0.1, 0.4, 0.7];
        let q = lq(vec![0, 3], vec![1]);
        let m = query_metrics(&scores, &q).unwrap();
        let r0 = filtered_rank(&scores, 0, &[1, 3]).unwrap();
        let r3 = filtered_rank(&scores, 3, &[0, 1]).unwrap();
        assert_eq!(m.mrr, (1.0 / r0 + 1.0 / r3) / 2.0);
        assert_eq!(r0, 3.0);
        assert_eq!(r3, 4.0);
    }

    #[test]
    fn macro_average() {
        let mut sets = QuerySets::new();
        sets.insert(Structure::P1, vec![lq(vec![0], vec![]), lq(vec![1], vec![])]);
        let rep = evaluate_with(|_| Ok(vec![0.9, 0.8, 0.1]), &sets).unwrap();
        let m = rep.per_structure[&Structure::P1];
        assert_eq!(m.mrr, 0.75);
        assert_eq!(m.n_queries, 2);
        assert_eq!(rep.avg_epfo, Some(0.75));
        assert_eq!(rep.avg_neg, None);
        assert!(rep.to_csv().starts_with("tag,mrr,hits1,hits3,hits10,n\n1p,0.750000,0.500000,1.000000,1.000000,2\n"));
    }

    #[test]
    fn missing_hard_answers_is_an_error() {
        let mut sets = QuerySets::new();
        sets.insert(Structure::P1, vec![lq(vec![], vec![1])]);
        assert!(matches!(evaluate_with(|_| Ok(vec![0.0; 3]), &sets), Err(EvalError::NoHardAnswers { .. })));
    }

    #[test]
    fn baseline_examples() {
        let h100: f64 = (1..=100).map(|r| 1.0 / r as f64).sum();
        let b = random_baseline_mrr(100, &[lq(vec![5], vec![])]);
        assert!((b - h100 / 100.0).abs() < 1e-15);
        assert!((b - 0.0519).abs() < 5e-5);
        assert_eq!(random_baseline_mrr(2, &[lq(vec![1], vec![])]), 0.75);
        let filtered = random_baseline_mrr(100, &[lq(vec![5], vec![1, 2, 3])]);
        assert!(filtered > b);
    }

    #[test]
    fn monotone_transform_invariance() {
        let scores: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let q = lq(vec![2, 9, 17], vec![4]);
        assert_eq!(query_metrics(&scores, &q).unwrap(), query_metrics(&mapped, &q).unwrap());
    }
}
