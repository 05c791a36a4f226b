#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod classify;
pub mod error;
pub mod hdphmm;
pub mod hmm;
pub mod matrix_io;
pub mod preprocess;
pub mod rng;
pub mod simulate;
pub mod spectral;
pub mod trial_store;

pub use error::{Error, ErrorKind, Result};
