//! Amortized variational inference for nonlinear mixed-effects ODE models.

pub mod diff;
pub mod elbo;
pub mod io;
pub mod linalg;
pub mod mech;
pub mod nlme;
pub mod nn;
pub mod odeint;
pub mod oracle;
pub mod study;
pub mod train;
pub mod uq;
