//! Dense-matrix numerics with exact analytic gradients.

mod adam;
mod matrix;
mod params;
mod tape;

pub use adam::AdamState;
pub use matrix::Matrix;
pub use params::{BatchNormState, BatchStats, ParamLeaf, ParamStore, BN_EPS, BN_MOMENTUM};
pub use tape::{
    bounded_softplus, gaussian_nll_point, softplus, BackwardRule, Mode, Tape, Var, SIGMA_FLOOR,
};
