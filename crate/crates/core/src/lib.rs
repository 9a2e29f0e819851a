//! Disentangled sequential encoding, counterfactual affinity reasoning and
//! missing-modality completion for paired audiovisual feature sequences.

pub mod completion;
pub mod counterfactual;
pub mod error;
pub mod gradsuite;
pub mod harness;
pub mod numerics;
pub mod probe;
pub mod seqvae;
pub mod synth;

pub use error::{Error, Result};
