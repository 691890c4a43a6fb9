//! Estimation, certification, simulation, and forecasting for discrete-time
//! self-exciting count processes with lagged linear (or monotone-link)
//! conditional means.
//!
//! The process state is a nonnegative count vector over `mu * L` location
//! channels. Its conditional mean given the last `d` states is
//! `Phi(beta0 + sum_s beta_s * state_{t-s})`, where `Phi` is a componentwise
//! monotone link. Estimation is posed as a monotone variational inequality
//! over a compact feasible set; certification attaches online martingale
//! deviation bounds to affine functionals of the sample field and converts
//! them into per-coordinate confidence intervals by linear programming.

pub mod certify;
pub mod concentration;
pub mod estimator;
pub mod io;
pub mod lp;
pub mod model;
pub mod predict;
pub mod rng;
pub mod simulate;

pub(crate) mod sum;

pub use model::{
    FeasibleSet, LinkFunction, ModelShape, ParamVector, RegressorWindow, Trajectory,
};
