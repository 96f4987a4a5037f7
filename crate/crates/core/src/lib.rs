//! Detection of plantation lines in aerial RGB imagery, modeled as a graph of
//! plants.
//!
//! The pipeline estimates three kinds of knowledge from an image with a small
//! convolutional network — plant confidence maps, line confidence maps, and
//! inter-plant displacement vector fields — then treats every detected plant
//! as a vertex of a complete graph and classifies each edge with three
//! probabilities (visual, vector alignment, line pixels). Edges accepted by
//! all three gates form the detected plantation lines.
//!
//! The crate is organized around five subsystems:
//!
//! - [`diffkernel`]: a minimal deterministic reverse-mode differentiation
//!   kernel providing exactly the primitives the networks need.
//! - [`fieldgen`]: procedural synthetic plantation scenes and the ground-truth
//!   constructions used for training (Gaussian confidence maps, unit
//!   displacement fields, dataset splits).
//! - [`netkem`]: the backbone, the multi-stage knowledge estimation module,
//!   the 1-D edge classification head, and their training loops.
//! - [`linegraph`]: peak detection, complete-graph modeling, edge
//!   probabilities, the triple gate, and line assembly.
//! - [`eval`]: plant- and line-pixel metrics plus the ablation harness.
//!
//! Everything here is deterministic: the same seeds and inputs produce
//! bit-identical outputs regardless of thread count. The crate is
//! `no_std`-compatible (with `alloc`) when built without the default `std`
//! feature; file formats and the CLI live in the companion `rowgraph` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod diffkernel;
pub mod error;
pub mod eval;
pub mod fieldgen;
pub mod linegraph;
pub mod netkem;
pub mod rng;
pub mod scalar;

pub use error::CoreError;
pub use scalar::Scalar;
