//! Tensors plus reverse-mode differentiation for the layer set the
//! networks in this crate need.

pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;

pub use gradcheck::{
    finite_diff_check, param_diff_check, param_diff_errors, relative_error, sample_coords, CoordCheck,
};
pub use params::{HasParams, Param, ParamId, ParamStore};
pub use tape::{BatchStats, Gradients, Mode, Tape, Var, BN_EPSILON, BN_MOMENTUM};
