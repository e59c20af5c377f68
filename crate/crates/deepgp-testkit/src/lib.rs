//! Independent numerical oracles and synthetic datasets used by the test
//! suites. Nothing here shares code with the library paths it checks: the
//! quadrature, dense-GP and finite-difference routines are self-contained.

pub mod datasets;
pub mod densegp;
pub mod fd;
pub mod quadrature;

pub use densegp::{dense_gp_log_marginal, dense_gp_posterior_mean, dense_gp_predict};
pub use fd::central_difference;
pub use quadrature::{gauss_hermite, GaussianExpectation};
