//! Gradient-graph instruction selection.
//!
//! Training samples are nodes of a graph whose edges are cosine similarities
//! of their (momentum-adjusted) gradient features. Principal components of
//! the validation gradients define the target task's core knowledge, and a
//! constrained greedy walk from per-component anchors picks the subset.
//!
//! Pipeline: [`feature_store`] (GF1 files) → [`projection`] →
//! [`core_knowledge`] (PCA) → [`walk`] over a [`graph::GradientGraph`].
//! [`toy`] supplies a small differentiable model for end-to-end runs, and
//! [`oracle`] is a dense reference implementation used by the tests.

pub mod core_knowledge;
pub mod error;
pub mod feature_store;
pub mod graph;
pub mod kernels;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod projection;
pub mod toy;
pub mod walk;

pub use core_knowledge::{extract_core_knowledge, mean_gradient, CoreKnowledge, KMode, PcaOptions};
pub use error::{Error, Result};
pub use feature_store::{load_features, save_features, FeatureKind, FeatureSet, GradientFeatureMatrix, SampleId};
pub use graph::{GradientGraph, NodeSet, SelectionState};
pub use projection::ProjectionSketch;
pub use walk::{allocate_budgets, run_selection, select_anchor, walk_step, Dedup, Selection, SelectionReport, WalkConfig};
