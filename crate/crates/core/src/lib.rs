//! Prompt condensation for visual in-context learning.
//!
//! A small trainable Condenser fuses `K` retrieved prompts into one condensed
//! prompt with patch-wise cross-attention; the condensed prompt is pasted on a
//! 2×2 canvas next to the query and a frozen inpainting backbone predicts the
//! query's label tokens. Everything, including the autodiff, is implemented
//! here on plain `Vec`-backed tensors.

pub mod backbone;
mod binio;
pub mod canvas;
pub mod condenser;
pub mod error;
pub mod evaluation;
pub mod image;
mod nn;
pub mod numerics;
pub mod optim;
pub mod par;
pub mod profile;
pub mod retrieval;
pub mod rng;
pub mod taskgen;
pub mod training;

pub use error::{Error, Result};
