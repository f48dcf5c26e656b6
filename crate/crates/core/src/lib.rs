//! Modality-incomplete multimodal industrial anomaly detection.
//!
//! The pipeline has two trained stages on top of frozen feature extractors:
//!
//! 1. [`fusion`]: a frozen multimodal transformer conditioned on learnable
//!    per-pattern instruction tokens, followed by hypernetwork-generated
//!    projection MLPs trained with a patch-wise contrastive loss.
//! 2. [`detection`]: a real/pseudo masked attention layer with hybrid
//!    supervision, three nearest-neighbour memory repositories and the
//!    Mahalanobis / one-class SVM decision layer.
//!
//! [`data`] synthesizes RGB + point-grid samples and applies the
//! missing-modality protocol; [`metrics`] holds I-AUROC, P-AUROC and AUPRO;
//! [`harness`] runs experiments and ablations end to end.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detection;
pub mod error;
pub mod features;
pub mod fusion;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod point_encoder;
pub mod rgb_encoder;
pub mod seed;
pub mod tensor;
pub mod tensor_io;

pub use error::{Error, Result};
