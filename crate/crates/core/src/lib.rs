//! Learning-enhanced nonlinear model predictive control.
//!
//! Hybrid models pair a first-principles vector field with a neural residual
//! ([`knode`]); several trained residuals are blended into one predictor
//! ([`ensemble`]); terminal cost and terminal set are derived and checked from
//! a linearization ([`certify`]); and a multiple-shooting SQP controller
//! ([`nmpc`]) closes the loop on the simulated plants in [`plants`].

pub mod certify;
pub mod dataset;
pub mod ensemble;
pub mod knode;
pub mod linalg;
pub mod net;
pub mod nmpc;
pub mod ode;
pub mod plants;
pub mod qp;

pub use dataset::TrajectoryDataset;
pub use knode::{KnodeModel, TrainConfig};
pub use net::MlpParams;
pub use ode::{DiscreteDynamics, DynamicsFn, IntegratorConfig};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/models.md")]
mod book_models {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/ensembles.md")]
mod book_ensembles {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/control.md")]
mod book_control {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/certification.md")]
mod book_certification {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
