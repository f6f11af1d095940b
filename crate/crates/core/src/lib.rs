#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Localization uncertainty with Gaussian-mixture measurement models.

pub mod error;
pub mod eval;
pub mod filters;
pub mod gating;
pub mod gm;
pub mod kse;
pub mod sim;

pub use error::{Error, Result};
