//! Multi-domain RLVR training machinery at desk scale.
//!
//! - [`sampler`]: adaptive domain mixture sampling.
//! - [`shaping`]: length penalty and difficulty-aware penalty scaling.
//! - [`optimizer`]: GSPO ratios, group advantages, filtering and the clipped objective.
//! - [`policy`]: a toy policy with exact log-probabilities and gradients.
//! - [`env`]: synthetic verifiable environments with service-time models.
//! - [`pipeline`]: a discrete-event simulation of the asynchronous actor/trainer loop.
//! - [`config`], [`metrics`], [`experiment`]: configuration, metric streams and the
//!   commands behind the CLI.

pub mod config;
pub mod env;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod policy;
pub mod sampler;
pub mod shaping;
