//! Filtering and forecasting in the presence of model error.
//!
//! The crate covers classical and ensemble Kalman filtering, adaptive
//! estimation of model-error and observation-noise covariances, offline and
//! online stochastic parameterization of a two-layer Lorenz-96 closure,
//! reduced filters for linear and nonlinear multiscale test problems, and
//! nonparametric (diffusion-maps based) density forecasting together with its
//! semiparametric coupling to a parametric ensemble forecast.
//!
//! Every experiment is driven by an explicit seed. Monte-Carlo loops are
//! parallel when the `parallel` feature is enabled; each work item draws from
//! its own random stream, so results do not depend on the thread count or on
//! whether [`exec`] runs sequentially.

pub mod adaptive;
pub mod diagnostics;
pub mod diffusion_forecast;
pub mod error;
pub mod exec;
pub mod kalman;
pub mod linalg;
pub mod models;
pub mod moments;
pub mod rng;
pub mod semiparametric;
pub mod spekf;
pub mod stoch_param;
pub mod table;
pub mod twoscale_filters;

pub use error::{Error, Result};
