//! Files, parallel pipeline and command line for [`twinbeam_core`].
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use error::{Error, Result};
