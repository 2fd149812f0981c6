#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod geometry;
pub mod grid;
pub mod par;
pub mod scenarios;
pub mod snapshot;
pub mod solver;
