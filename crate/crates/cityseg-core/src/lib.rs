//! Desk-scale city point-cloud segmentation with open-vocabulary labels.
//!
//! The pipeline, end to end:
//!
//! 1. [`pcio`] — point-cloud data model, CSPC file I/O, attribute
//!    normalization, and a synthetic multi-domain scene generator.
//! 2. [`sampling`] — voxel-grid downsampling, random/KNN sampling,
//!    space-filling-curve serialization, local/global batch assembly.
//! 3. [`numcore`] — dense f64 tensors, differentiable primitives, a
//!    finite-difference gradient oracle, and parameter snapshots.
//! 4. [`network`] — dual-branch point encoder, local-global cross-attention,
//!    and the decoder producing unit-norm point embeddings.
//! 5. [`hierarchy`] — the label tree, text-embedding providers, and the
//!    graph encoder producing hierarchical text embeddings.
//! 6. [`training`] — cosine/temperature classification, cross-entropy and
//!    sibling-margin hinge losses, the two-stage schedule, replay-based
//!    incremental fine-tuning, and zero-shot inference.
//! 7. [`eval`] — confusion matrices, overall accuracy, and mean IoU.
//!
//! Everything is deterministic for a fixed seed: the hot kernels are
//! data-parallel over independent output elements (rayon when the `parallel`
//! feature is on, plain iterators otherwise), so results are bitwise
//! identical at any thread count.

pub mod error;
pub mod eval;
pub mod fixtures;
pub mod gradsuite;
pub mod hierarchy;
pub mod network;
pub mod numcore;
pub mod pcio;
pub mod sampling;
pub mod training;

pub(crate) mod exec;

pub use error::{Error, Result};
