//! Energy disaggregation with an efficient localness transformer.
//!
//! The crate covers the whole pipeline: CSV ingestion and resampling
//! ([`data`]), a small reverse-mode tensor library ([`tensor`],
//! [`autograd`]), the attention kernels and model ([`attention`], [`model`]),
//! training ([`train`]), metrics ([`eval`]), scaling benchmarks ([`bench`])
//! and the `elt` command line ([`cli`]).

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{EltError, ErrorKind, Result};
