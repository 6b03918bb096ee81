//! Fuzzy-logic query embedding over knowledge graphs.
//!
//! Entities and queries live in `[0,1]^d`; relations are layer-normalized
//! affine maps built from shared bases; conjunction, disjunction and
//! negation are elementwise fuzzy-logic operators. The crate includes the
//! graph store, the query language, training with hand-derived gradients,
//! filtered-ranking evaluation, a workload generator and symbolic oracles.

pub mod config;
pub mod eval;
pub mod fuzzy;
pub mod gen;
pub mod grad;
pub mod kg;
pub mod model;
pub mod oracle;
pub mod query;
pub mod synth;
pub mod train;
pub mod verify;

pub use fuzzy::{FuzzyVec, Logic};
pub use kg::{Direction, EntityId, GraphView, KnowledgeGraph, RelationId, Triple};
pub use model::{Activation, Encoder, ModelConfig, NormMode, Parameters};
pub use query::{LabeledQuery, Query, QueryNode, Structure};
