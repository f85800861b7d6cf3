//! Worst-case training along the sample and feature dimensions.
//!
//! The crate bundles four things:
//!
//! * a small 64-bit reverse-mode autodiff engine ([`tape`]) with the layer
//!   primitives an MNIST-scale model zoo needs ([`model`]);
//! * the two worst-case training primitives — top-loss sample selection and
//!   gradient-ranked feature masking ([`worstcase`]) — and the training loop
//!   that integrates them, including whole-batch patching, stochastic weight
//!   averaging, and the two-stage biased/debiased variant ([`trainer`]);
//! * deterministic generators for the colored-digit environments and a
//!   synthetic two-shift benchmark ([`datasets`]);
//! * an evaluation harness: accuracy, model-selection strategies, random
//!   hyperparameter search, ranking scores against an ERM baseline, class
//!   activation maps, and worst-case sample export ([`eval`], [`search`],
//!   [`ranking`], [`cam`], [`export`]).
//!
//! Everything is deterministic given a master seed: identical configuration
//! yields bitwise-identical parameters, histories, and output files.

pub mod bundleio;
pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod export;
pub mod gradcheck;
pub mod model;
pub mod netpbm;
pub mod prng;
pub mod ranking;
pub mod search;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod worstcase;

pub use error::{Error, Result};
