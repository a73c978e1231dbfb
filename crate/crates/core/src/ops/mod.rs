//! Differentiable primitives recorded on a [`Tape`](crate::tape::Tape).

mod activation;
mod attention;
mod conv;
mod gate;
mod linear;
mod norm;
mod pool;
mod shape;

pub use activation::{gelu, relu};
pub use attention::self_attention;
pub use conv::conv2d;
pub use gate::{group_gate, group_of};
pub use linear::linear;
pub use norm::{batch_norm, layer_norm, BatchNormOut, Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use pool::global_avg_pool;
pub use shape::{add, assemble_tokens, concat_last, gather_rows, l2_normalize, reshape, select_rows, slice_cols};
