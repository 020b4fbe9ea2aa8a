//! File formats, subcommands and the HTTP replan service behind the
//! `arcplan` binary. See `docs/formats.md` for the on-disk layouts.

// `!(x > 0.0)` rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod documents;
pub mod error;
pub mod report;
pub mod service;
pub mod tensor_file;

pub use error::{CliError, Result};
pub use tensor_file::{Dtype, Tensor, TensorData};
