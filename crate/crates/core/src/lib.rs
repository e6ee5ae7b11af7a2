//! Numerical core for real-time dispatch of a cascade of hydropower
//! reservoirs under decision-dependent inflow uncertainty.
//!
//! The crate is `no_std` (it needs `alloc`) and contains no IO. It provides:
//!
//! * [`hydro`]: reservoir parameters, mass balance, piecewise head tables and
//!   the linear power conversion.
//! * [`forecast`]: autoregressive mean-inflow models with exogenous upstream
//!   releases, fitted by least squares.
//! * [`uncertainty`]: static (DIU) and GARCH-X (DDU) forecast-error
//!   covariance models.
//! * [`mvn`]: multivariate Gaussian rectangle probabilities and their bound
//!   gradients (randomized lattice separation-of-variables).
//! * [`lp`]: a dense bounded-variable primal simplex.
//! * [`dispatch`]: the deterministic, Bonferroni and sequential
//!   supporting-hyperplane dispatchers.
//! * [`scenario`]: staggered disruption hydrographs and random scenarios.
//! * [`simulate`]: rolling-horizon policy learning and open-loop policy
//!   testing with the integrated violation index.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dispatch;
pub mod forecast;
pub mod hydro;
pub mod linalg;
pub mod lp;
pub mod mvn;
pub mod scenario;
pub mod simulate;
pub mod special;
pub mod uncertainty;

mod error;

pub use error::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;
