#![allow(clippy::needless_range_loop)] // indexed loops are the clearer idiom in the kernels
#![allow(clippy::too_many_arguments)]

//! Desk-scale unified motion-language model.
//!
//! A decoder-only transformer routes per-token parameters by modality (text
//! vs. motion) while sharing causal self-attention. Motion enters as
//! continuous latents from a causal convolutional VAE and leaves through a
//! flow-matching head, so generation streams frame blocks in real time and
//! captioning stays ordinary next-token prediction. Everything runs on a
//! small self-contained tensor/autodiff stack over `f32` (with `f64`
//! reserved for gradient checking).

pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod generate;
pub mod heads;
pub mod model;
pub mod num;
pub mod repr;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
