//! Answering existential first-order queries over incomplete knowledge graphs.
//!
//! Queries from a closed set of fourteen structures are compiled into
//! Skolem set-logic plans. Plans are evaluated exactly over a triple store by
//! the [`oracle`] and approximately by the learned truth-bound embeddings of
//! [`model`], which [`train`] fits and [`eval`] scores.

pub mod autodiff;
pub mod eval;
pub mod kg;
pub mod logic;
pub mod model;
pub mod oracle;
pub mod query;
pub mod train;

pub use kg::{AdjacencyIndex, EntityId, KnowledgeGraph, RelationId, Split};
pub use logic::{TNormKind, TruthBounds};
pub use query::{QueryInstance, QueryPlan, QueryStructure};
