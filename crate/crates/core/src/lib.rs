// NaN must fail these range checks, hence `!(x > 0.0)` rather than `x <= 0.0`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exec;
pub mod metric;
pub mod sampling;
pub mod oracle;
pub mod linesearch;
pub mod hessian;
pub mod theory;
pub mod pursuit;
pub mod bench;
pub mod cli;
