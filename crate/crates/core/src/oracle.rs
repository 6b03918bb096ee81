//! Ground-truth answers: crisp set traversal and an explicit fuzzy-set evaluator.

use thiserror::Error;

use crate::fuzzy::Logic;
use crate::kg::{Direction, EntityId, GraphView, KnowledgeGraph, RelationId};
use crate::query::QueryNode;

/// Default entity-count limit for [`symbolic_fuzzy_eval`].
pub const SYMBOLIC_MAX_ENTITIES: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("graph has {0} entities; the symbolic evaluator is limited to {1}")]
    TooLarge(usize, usize),
}

/// Sorted, deduplicated entity ids.
pub type AnswerSet = Vec<EntityId>;

pub fn intersect(a: &[EntityId], b: &[EntityId]) -> Vec<EntityId> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

pub fn union(a: &[EntityId], b: &[EntityId]) -> Vec<EntityId> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i] < b[j]) {
            out.push(a[i]);
            i += 1;
        } else if i == a.len() || b[j] < a[i] {
            out.push(b[j]);
            j += 1;
        } else {
            out.push(a[i]);
            i += 1;
            j += 1;
        }
    }
    out
}

/// Elements of `a` not in `b`.
pub fn difference(a: &[EntityId], b: &[EntityId]) -> Vec<EntityId> {
    let mut j = 0;
    a.iter()
        .copied()
        .filter(|x| {
            while j < b.len() && b[j] < *x {
                j += 1;
            }
            !(j < b.len() && b[j] == *x)
        })
        .collect()
}

fn complement(a: &[EntityId], n: usize) -> Vec<EntityId> {
    let mut mark = vec![false; n];
    a.iter().for_each(|&x| mark[x as usize] = true);
    (0..n as EntityId).filter(|&x| !mark[x as usize]).collect()
}

/// Crisp answer set of a query tree on `view`. Negation complements against all entities.
pub fn answer_query(kg: &KnowledgeGraph, view: GraphView, node: &QueryNode) -> AnswerSet {
    match node {
        QueryNode::Anchor(e) => vec![*e],
        QueryNode::Proj(r, c) => {
            let src = answer_query(kg, view, c);
            let mut out: Vec<EntityId> = src
                .iter()
                .flat_map(|&x| kg.neighbors_unchecked(view, x, *r, Direction::Forward).map(|(_, t)| t))
                .collect();
            out.sort_unstable();
            out.dedup();
            out
        }
        QueryNode::And(cs) => {
            let mut acc = answer_query(kg, view, &cs[0]);
            for c in &cs[1..] {
                if acc.is_empty() {
                    break;
                }
                acc = intersect(&acc, &answer_query(kg, view, c));
            }
            acc
        }
        QueryNode::Or(cs) => cs
            .iter()
            .fold(Vec::new(), |acc, c| union(&acc, &answer_query(kg, view, c))),
        QueryNode::Not(c) => complement(&answer_query(kg, view, c), kg.num_entities()),
    }
}

/// Splits answers into those visible on `easy_view` and those that only appear
/// one view up (`Train` → `TrainValid`, `TrainValid` → `Full`).
pub fn split_answers(kg: &KnowledgeGraph, node: &QueryNode, easy_view: GraphView) -> (AnswerSet, AnswerSet) {
    let hard_view = match easy_view {
        GraphView::Train => GraphView::TrainValid,
        GraphView::TrainValid | GraphView::Full => GraphView::Full,
    };
    let easy = answer_query(kg, easy_view, node);
    let all = answer_query(kg, hard_view, node);
    let hard = difference(&all, &easy);
    (easy, hard)
}

/// Evaluates the query over explicit fuzzy sets on the whole entity space.
///
/// Anchors are one-hot; a projection onto target `j` folds the logic's
/// t-conorm over all sources `i` with an edge `(i, r, j)` (existential
/// quantification); `And`/`Or`/`Not` are the elementwise t-norm, t-conorm
/// and `1 - s`.
pub fn symbolic_fuzzy_eval(
    kg: &KnowledgeGraph,
    view: GraphView,
    node: &QueryNode,
    logic: Logic,
) -> Result<Vec<f64>, OracleError> {
    symbolic_fuzzy_eval_with_limit(kg, view, node, logic, SYMBOLIC_MAX_ENTITIES)
}

pub fn symbolic_fuzzy_eval_with_limit(
    kg: &KnowledgeGraph,
    view: GraphView,
    node: &QueryNode,
    logic: Logic,
    limit: usize,
) -> Result<Vec<f64>, OracleError> {
    if kg.num_entities() > limit {
        return Err(OracleError::TooLarge(kg.num_entities(), limit));
    }
    Ok(fuzzy_eval(kg, view, node, logic))
}

fn fuzzy_eval(kg: &KnowledgeGraph, view: GraphView, node: &QueryNode, logic: Logic) -> Vec<f64> {
    let n = kg.num_entities();
    match node {
        QueryNode::Anchor(e) => {
            let mut v = vec![0.0; n];
            v[*e as usize] = 1.0;
            v
        }
        QueryNode::Proj(r, c) => fuzzy_project(kg, view, *r, &fuzzy_eval(kg, view, c, logic), logic),
        QueryNode::And(cs) | QueryNode::Or(cs) => {
            let is_and = matches!(node, QueryNode::And(_));
            let mut acc = fuzzy_eval(kg, view, &cs[0], logic);
            for c in &cs[1..] {
                let v = fuzzy_eval(kg, view, c, logic);
                for (a, b) in acc.iter_mut().zip(v) {
                    *a = if is_and { logic.t(*a, b) } else { logic.s(*a, b) };
                }
            }
            acc
        }
        QueryNode::Not(c) => fuzzy_eval(kg, view, c, logic).into_iter().map(|x| 1.0 - x).collect(),
    }
}

/// Fuzzy image of `src` under relation `r`: target `j` gets the t-conorm of
/// `src[i]` over all edges `(i, r, j)`.
pub fn fuzzy_project(kg: &KnowledgeGraph, view: GraphView, r: RelationId, src: &[f64], logic: Logic) -> Vec<f64> {
    (0..kg.num_entities() as EntityId)
        .map(|j| {
            kg.neighbors_unchecked(view, j, r, Direction::Inverse)
                .fold(0.0, |acc, (_, i)| logic.s(acc, src[i as usize]))
        })
        .collect()
}

/// `{0, 1}` indicator of an answer set over `n` entities.
pub fn indicator(answers: &[EntityId], n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    answers.iter().for_each(|&a| v[a as usize] = 1.0);
    v
}
