//! Core of the split-track multimodal encoder-decoder: tokenization, sample
//! model, encoder layout assembly, a gradient-checked transformer, training
//! pathways, length-bucketed scheduling, evaluation metrics and design loops.
//!
//! The crate is `no_std` with `alloc`; file formats and the command line live
//! in the `splittrack` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod design;
pub mod error;
pub mod eval;
pub mod layout;
pub mod model;
pub mod pathways;
pub mod rng;
pub mod sample;
pub mod scheduler;
pub mod surface;
pub mod synth;
pub mod tensor;
pub mod tokenization;
pub mod training;

pub use error::{Error, Result};
