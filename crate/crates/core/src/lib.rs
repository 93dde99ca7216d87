#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consensus;
pub mod error;
pub mod model;
pub mod net;
pub mod pddp;
pub mod penalty;
pub mod qp;
pub mod scenarios;

pub use error::{Error, Result};
