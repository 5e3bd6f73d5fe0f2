//! Multi-turn, layer-localized image editing.
//!
//! The crate is organised around the editing loop:
//!
//! - [`scene`]: symbolic scene states, the deterministic transition operator,
//!   attribute vocabularies and a bit-exact synthetic renderer.
//! - [`store`]: the folded context store (image DAG, transient tool records,
//!   persistent per-turn action records) with content-addressed blobs and a
//!   replayable JSON-lines log.
//! - [`ild`]: the decompose-edit-fuse executor (mask, lossless crop, backend
//!   edit, Gaussian blend) and its backends.
//! - [`dsl`]: the edit-command grammar, parser and printer.
//! - [`planner`]: planning, perception, the quality test and the per-turn
//!   retry/rollback loop.
//! - [`engine`]: seeded benchmark session synthesis.
//! - [`eval`]: state-based IF/IC scores, Otsu-masked fidelity metrics and
//!   drift reporting.
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is on
//! (the default); [`par::Exec`] selects the execution mode explicitly.

pub mod dsl;
pub mod engine;
pub mod eval;
pub mod ild;
pub mod imageio;
pub mod llm;
pub mod mask;
pub mod par;
pub mod pipeline;
pub mod planner;
pub mod scene;
pub mod store;

pub use image::RgbImage;
