#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod datakit;
pub mod diffcore;
pub mod error;
pub mod field;
pub mod geometry;
pub mod gradcheck;
pub mod io_util;
pub mod nufft;
pub mod objective;
pub mod odecore;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod recon;
pub mod trainer;

pub use error::{Error, Result};
