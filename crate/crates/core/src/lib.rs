#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::cloned_ref_to_slice_refs
)]

pub mod gmm;
pub mod infer;
pub mod layout;
pub mod model;
pub mod numeric;
pub mod synth;
pub mod train;
