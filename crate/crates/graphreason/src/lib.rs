//! Region-level scene reasoning with iterated local and global modules.
//!
//! The crate trains a classifier over labeled regions of a feature grid.
//! Alongside a plain per-region head, two reasoning modules refine
//! predictions over a small number of iterations: a convolutional spatial
//! memory that regions write into and read from, and a graph module that
//! propagates evidence along spatial relations and a class knowledge
//! graph. An attention mechanism fuses every intermediate prediction into
//! the final output, and hard examples are up-weighted between iterations.
//!
//! Entry points:
//! - [`tensor`]: the reverse-mode autodiff engine everything runs on.
//! - [`geometry`]: boxes, spatial relation graphs, coverage weights.
//! - examples under `examples/` exercise each capability end to end.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod geometry;
pub mod global;
pub mod gradsuite;
pub mod kg;
pub mod local;
pub mod metrics;
pub mod model;
pub mod scenes;
pub mod train;
pub mod tensor;
