//! countlab: a desk-scale laboratory for studying how a small
//! vision-language transformer counts objects.
//!
//! The crate is organised as five layers that build on each other:
//!
//! - [`synth`] renders the synthetic counting corpora (dots, polygons,
//!   single-object colour/shape scenes) with exact ground truth, pairs them
//!   for activation patching and serializes them to disk.
//! - [`model`] is a pre-norm decoder-only transformer over patch and text
//!   tokens with full activation capture, override hooks and hand-written
//!   reverse-mode gradients.
//! - [`interp`] holds the analysis suite: logit lens, per-layer translators
//!   and per-head decoding, activation patching, mean ablation, head
//!   categorisation, probes and the yes/no band.
//! - [`intervene`] implements the object-focus attention regulariser, head
//!   temperature tuning and head output reweighting.
//! - [`metrics`] parses answers and computes the counting metrics and the
//!   evaluation protocols built on them.

pub mod corpus;
pub mod error;
pub mod interp;
pub mod intervene;
pub mod metrics;
pub mod model;
pub mod report;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
