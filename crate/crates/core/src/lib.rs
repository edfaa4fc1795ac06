//! Camera elevation estimation for single outdoor photographs.
//!
//! The crate estimates the elevation above sea level at which a photograph
//! was taken by retrieving visually similar, elevation-annotated images:
//!
//! - [`bowindex`] + [`geomverify`]: sparse bag-of-visual-words retrieval over
//!   an inverted file, re-ranked by spatial verification. A verified top
//!   result contributes its elevation directly.
//! - [`mvocab`]: short vectors built from several vocabularies and reduced
//!   jointly by PCA, searched by k-NN with a dissimilarity-weighted average.
//! - [`estimate`]: the individual estimators and the hybrid combiner, which
//!   falls back to a secondary estimator (short vectors or external
//!   predictions) when no spatially verified image is retrieved.
//! - [`evaluate`]: RMSE, cumulative accuracy and elevation-binned bias, plus a
//!   synthetic corpus generator for desk-scale experiments.
//!
//! Local features are ingested precomputed ([`features`]); ground-truth
//! elevations come from a DEM ([`corpus`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bowindex;
mod codec;
pub mod corpus;
pub mod error;
pub mod estimate;
pub mod evaluate;
pub mod features;
pub mod geomverify;
pub mod mvocab;
pub mod vocab;

pub use error::{Error, Result};
