//! Knowledge distillation for multilingual and code-mixed visual question
//! answering, at desk scale.
//!
//! A teacher cross-modal transformer is trained on English questions about
//! synthetic scenes, frozen, and distilled into a student that reads questions
//! in several cipher languages and their code-mixed variants.
//!
//! Modules, bottom-up:
//! - [`tensor`]: dense `f64` tensors and reverse-mode autodiff.
//! - [`model`]: question, image and cross-modality encoders plus the answer head.
//! - [`distill`]: the four distillation objectives.
//! - [`trainer`]: Adam with cosine annealing, training loops, evaluation, analyses.
//! - [`corpus`]: the synthetic shapes-world task and dataset I/O.
//! - [`codemix`]: EM word aligner and matrix-language-frame code-mixing.
//! - [`metrics`]: CMI/SPF, BLEU/ROUGE-L/TER, VQA accuracy, representation alignment.
//! - [`config`]: the JSON run configuration.
//! - [`gradcheck`]: finite-difference gradient suite.

pub mod codemix;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
