//! Decoded layer saliency for small encoder-transformer classifiers.
//!
//! Hidden states at any layer are projected through the masked-language-model
//! head into vocabulary space, and feature saliency at that layer is
//! redistributed onto the input tokens through those decoded distributions.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod eval;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod saliency;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use eval::{auc, class_token_ranking, overlap, ClassRankings, EvalCurve, Game, IdfTable, OverlapReport};
pub use graph::{Graph, NodeId};
pub use matrix::Matrix;
pub use model::{ForwardOutput, Model, ModelConfig};
pub use saliency::{decoded_saliency, Decoder, Method, SaliencyOptions, SaliencyResult};
pub use synth::{generate_synthetic, Dataset, Record, SynthConfig, SyntheticData};
pub use train::{finetune_classifier, pretrain_mlm, FinetuneOptions, MlmOptions};
pub use vocab::{TokenSeq, Vocabulary};
