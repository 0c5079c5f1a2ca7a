//! Training, pruning and fine-tuning of small grouped classifiers under
//! constraints on per-group excess accuracy gaps.
//!
//! The crate provides:
//! - a minimal reverse-mode autodiff tape ([`autodiff`]),
//! - masked multilayer perceptrons ([`model`]) with gradual magnitude
//!   pruning ([`pruning`]),
//! - exact accuracy-gap / disparity metrics ([`metrics`]),
//! - per-group replay buffers for variance-reduced constraint estimation
//!   ([`buffer`]),
//! - the constrained-formulation catalog and its proxy-constraint
//!   surrogates ([`formulation`]),
//! - the alternating descent-ascent trainer ([`optim`]),
//! - dataset plumbing ([`data`]) and experiment orchestration
//!   ([`config`], [`experiment`], [`checkpoint`]).

pub mod autodiff;
pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod formulation;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pruning;

pub use error::{Error, Result};
