//! Missing-data imputation that alternates between fitting a RealNVP-style
//! normalizing flow on the current imputation and running online EM on a
//! full-covariance Gaussian in the flow's latent space.

pub mod baseline_em;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod exec;
pub mod flow;
pub mod gaussian;
pub mod io;
pub mod masking;
pub mod online_em;

pub use error::{EmflowError, Result};
pub use exec::Execution;
