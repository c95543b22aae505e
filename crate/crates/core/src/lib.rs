//! Step-reward weighted preference optimization on a synthetic reasoning
//! environment.

// `!(x > 0.0)` rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod digest;
pub mod env;
pub mod grad;
pub mod math;
pub mod policy;
pub mod seed;
pub mod pairing;
pub mod prm;
pub mod dpo;
pub mod decode;
pub mod sft;
pub mod harness;
