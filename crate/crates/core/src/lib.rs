//! Core algorithms for the unlab machine-unlearning laboratory.
//!
//! Everything in this crate is pure, allocation-based compute with no IO:
//! a dense-tensor reverse-mode autodiff engine, stage-tapped MLP backbones
//! with auxiliary erase-at-the-core modules, seeded synthetic datasets,
//! the unlearning objectives and baselines, and the representation-level
//! evaluation suite (CKA, probe-based IDI, k-NN transfer, H-Mean).
//!
//! The crate is `no_std` + `alloc`; file formats, configs, and the CLI
//! live in the companion `unlab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod unlearn;

pub(crate) mod scalar;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
