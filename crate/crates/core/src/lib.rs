#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod codec;
pub mod eskf;
pub mod eval;
pub mod geom;
pub mod jaccheck;
pub mod pgo;
pub mod pipeline;
pub mod rawpose;
pub mod scenario;
pub mod sim;
