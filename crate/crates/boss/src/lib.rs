//! Persistence, file formats, HTTP service and CLI around `boss-core`.
//!
//! - [`checkpoint`]: `BOSSCKPT` parameter files
//! - [`dump`]: sorted pseudo-label dump files
//! - [`cifar`]: CIFAR-10 binary batches
//! - [`store`]: the run root and the [`store::Engine`] that trains runs in
//!   background threads
//! - [`service`]: the HTTP/JSON API
//! - [`cli`]: the `boss` command line

pub mod checkpoint;
pub mod cifar;
pub mod cli;
pub mod dump;
pub mod error;
pub mod service;
pub mod store;
pub mod thumbnail;

pub use error::{AppError, Result};
pub use store::Engine;
