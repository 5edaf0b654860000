//! Desk-scale machine-unlearning laboratory.
//!
//! The crate trains a miniature character-level transformer on a synthetic
//! QA world, then removes a forget set from it with gradient-based
//! objectives (GA, GD, NPO, NPO+GD), optionally guided by entanglement-aware
//! per-sample loss weights and an over-forgetting proxy penalty, and measures
//! the result with TOFU-style (forget quality, model utility) and MUSE-style
//! (VerbMem, KnowMem, PrivLeak, UtilPres) metric suites.
//!
//! Module map:
//! - [`tensor`] / [`graph`] / [`rng`]: dense `f64` tensors, reverse-mode
//!   differentiation, seeded randomness.
//! - [`model`] / [`vocab`]: the miniature autoregressive LM.
//! - [`corpus`]: synthetic QA world generation, splits, JSONL round trips.
//! - [`eagle`]: entanglement weights and retain-embedding maintenance.
//! - [`proxy`]: proxy-answer generation and the over-forgetting penalty.
//! - [`objectives`]: the four unlearning losses with weights and penalty.
//! - [`engine`]: the unlearning loop, retrain reference, memorization
//!   scores, checkpoint I/O.
//! - [`eval`]: ROUGE-L, KS test, truth ratio, utility and MUSE metrics.

pub mod checkpoint;
pub mod corpus;
pub mod eagle;
pub mod engine;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod par;
pub mod proxy;
pub mod rng;
pub mod tensor;
pub mod util;
pub mod vocab;

pub use graph::{GradMap, Graph, GraphError, ParamMap};
pub use rng::SeededRng;
pub use tensor::Tensor;
