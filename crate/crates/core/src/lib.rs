//! Multi-class Gaussian process classification with expectation propagation
//! over FITC inducing points.
//!
//! The crate covers full and stochastic EP, the EP estimate of the log
//! marginal likelihood with its gradient, batch and minibatch training, a
//! variational baseline, predictive quadrature, dataset I/O and a set of
//! brute-force oracles used to validate the approximations.

pub mod data;
pub mod ep;
pub mod error;
pub mod gaussian;
pub mod kernel;
pub mod model;
pub mod normal;
pub mod objective;
pub mod oracles;
pub mod predict;
pub mod projection;
pub mod quadrature;
pub mod snapshot;
pub mod trainer;
pub mod vi;

pub use data::{Dataset, Standardizer};
pub use ep::{EpEngine, Mode, PosteriorState, SiteParams, SiteState, TiedSite};
pub use error::{Error, Result};
pub use gaussian::{MomentGaussian, NaturalGaussian};
pub use kernel::KernelHyper;
pub use model::{GpParams, GradientVector, ParamLayout};
pub use projection::{Priors, Projection};
