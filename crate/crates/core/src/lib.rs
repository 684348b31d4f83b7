//! Dynamic-connectome distance features reprogrammed into a frozen
//! transformer for clinical severity regression.
//!
//! Pipeline: ROI time series -> sliding-window connectomes -> consecutive
//! window distance series -> robust instance normalization -> temporal patch
//! embedding -> cross-attention reprogramming onto text prototypes -> frozen
//! transformer -> linear output head. Only the patch embedding, the
//! reprogramming module and the output head train.

pub mod autograd;
pub mod backbone;
pub mod connectome;
pub mod distance;
pub mod error;
pub mod io;
pub mod model;
pub mod patch;
pub mod reprogram;
pub mod revrin;
pub mod tensorio;
pub mod train;

pub use error::{Error, Result};
