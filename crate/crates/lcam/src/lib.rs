//! Learning-based class activation maps over frozen classifiers.
//!
//! This crate attaches a small trainable attention head to a frozen
//! convolutional image classifier. Once trained, the head turns the
//! network's own feature maps into a class-conditional saliency map in a
//! single forward pass — no per-image gradient probes or perturbation
//! batches at explanation time.
//!
//! See the book under `book/` for a guided tour; the API surface mirrors the
//! pipeline stages:
//!
//! * [`backbone`] — load a classifier and split it at its last convolutional
//!   stage into a frozen feature extractor and a frozen head.
//! * [`attention`] — the trainable class-conditional attention parameters
//!   and the raw activation-map computation.
//! * [`masking`] — normalising maps and applying them to feature maps or to
//!   the input image.
//! * [`losses`] — the composite training objective (total variation + area +
//!   cross-entropy).
//! * [`training`] — the SGD loop that fits the attention head.
//! * [`inference`] — one-pass saliency map extraction and overlay export.
//! * [`evaluation`] — faithfulness metrics (Average Drop / Increase in
//!   Confidence) against maskable baselines.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod book;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod losses;
pub mod masking;
pub mod nn;
pub mod preprocess;
pub mod reports;
pub mod synth;
pub mod tensorfile;
pub mod training;

pub use error::{Error, Result};
