//! Relevance propagation for point-cloud classifiers.
//!
//! The crate bundles a small from-scratch classifier stack ([`netcore`]), the
//! point-set operations it is built from ([`pointops`]), and the relevance
//! engine ([`relflow`]) that pushes a class decision back through every layer
//! down to the input points. On top of the per-point salience sit tiered
//! saliency maps ([`saliency`]), plane/part consistency metrics
//! ([`evalmetrics`]), unsupervised part segmentation ([`partseg`]) and
//! saliency-guided region-relocation attacks ([`attack`]).
//!
//! Synthetic labelled shapes come from [`datagen`]; file formats and report
//! persistence live in [`dataio`]; [`cli`] wires everything into the
//! `relflow` binary.

pub mod attack;
pub mod cli;
pub mod datagen;
pub mod dataio;
pub mod error;
pub mod evalmetrics;
pub mod netcore;
pub mod partseg;
pub mod pointops;
pub mod relflow;
pub mod saliency;

pub use error::{Error, Result};
pub use netcore::{ForwardTrace, Model, ModelSpec, ModelWeights, Tensor};
pub use pointops::PointCloud;
