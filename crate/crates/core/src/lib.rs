//! One-shot semi-supervised training engine.
//!
//! This crate holds everything that is pure computation: the small
//! convolutional classifier and its optimizer, the weak/strong augmentation
//! policies, the consistency-training losses, pseudo-label class balancing,
//! synthetic data generation, the training loop itself, run diagnosis and
//! self-training selection. It is `no_std` (with `alloc`); file formats,
//! persistence and the HTTP/CLI surface live in the `boss` crate.
//!
//! A training step is, in order:
//!
//! 1. compose a labeled batch (stratified over the prototype set) and an
//!    unlabeled batch (uniform without replacement from the pool),
//! 2. pseudo-label the weak views of the unlabeled batch,
//! 3. build a [`balance::BalancePlan`] from the running class counts,
//! 4. evaluate supervised and masked/weighted unsupervised cross-entropy,
//! 5. back-propagate both terms and take an SGD step on a cosine schedule.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod balance;
pub mod data;
pub mod diagnosis;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod presets;
pub mod rng;
pub mod selftrain;
pub mod ssl;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
