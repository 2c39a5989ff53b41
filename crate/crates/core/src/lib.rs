//! Two-stage false-positive-reduction cascade for whole-body PET/CT lesion
//! segmentation, exercised end to end on synthetic phantom volumes.
//!
//! The pipeline is: NIfTI I/O ([`nifti`]) -> intensity normalization and
//! cropping ([`preprocess`]) -> a global segmentation stage that proposes
//! lesion candidates slice by slice, followed by a local refinement stage
//! that re-reads the image together with the first-stage output and removes
//! false positives ([`networks`], [`cascade`]) -> volumetric evaluation and
//! challenge-style ranking ([`metrics`]).
//!
//! Training runs on a small reverse-mode autodiff engine ([`graph`]) built
//! over plain `f64` buffers ([`tensor`]). Everything is deterministic for a
//! fixed seed: parameter maps are ordered, reductions run in a fixed order,
//! and all randomness flows from a single counter-based generator.

// Validation guards spell `!(x >= y)` on purpose: the negated form rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cascade;
pub mod checkpoint;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nifti;
mod numeric;
pub mod phantom;
pub mod preprocess;
pub mod pretrain;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use graph::{ComputeGraph, GraphBuilder, ParamStore};
pub use tensor::Tensor;
pub use volume::{Modality, SliceGrid, Volume3D};
