//! Systemic optimal risk transfer equilibria on finite probability spaces.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod constraints;
pub mod dual;
pub mod error;
pub mod exponential;
pub mod instances;
pub mod market;
pub mod par;
pub mod roots;
pub mod utility;
pub mod verification;

pub use error::{Error, Result};
