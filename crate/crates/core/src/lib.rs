//! Context-prompted streaming conformer-transducer speech recognition.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: dense `f64` tensors and a
//!   reverse-mode autodiff recorder.
//! - [`text`]: vocabulary, tokenizer, frozen text encoder and the prompt
//!   projection that turns previous-turn text into prompt rows.
//! - [`attention`]: sliding-window masks and the three ways of consuming
//!   prompts (feature concatenation, cross-attention biasing, prompts in
//!   the self-attention keys and values).
//! - [`encoder`]: the streaming conformer stack.
//! - [`transducer`]: prediction and joint networks, RNN-T loss, greedy decoding.
//! - [`model`]: the assembled context-aware transducer.
//! - [`synth`]: the synthetic multi-turn corpus and SpecAugment.
//! - [`optim`], [`checkpoint`]: Adam, the learning-rate schedule, checkpoint
//!   files and averaging.
//! - [`train`], [`eval`]: the training loop, freeze regimes and WER.

pub mod attention;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod transducer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
