//! Discrete tilt matching for masked diffusion models.
//!
//! A masked diffusion model is a continuous-time Markov chain that transports
//! the fully masked sequence to a data distribution by revealing one token at
//! a time. This crate implements reward fine-tuning of such models by
//! annealed exponential tilting: the target is re-weighted by `exp(a * r(x))`
//! in small increments `a -> a + h`, and each increment is learned with a
//! weighted cross-entropy objective over local unmasking posteriors whose
//! exact minimizer is the tilted posterior. No sequence-level likelihoods are
//! ever evaluated.
//!
//! Layout:
//! - [`seq`], [`schedule`], [`rng`]: vocabularies, masked sequences,
//!   unmasking schedules and hazards, seeded random streams.
//! - [`interpolant`]: any-order and semi-autoregressive (block) samplers for
//!   partially masked states.
//! - [`oracle`]: exact reference computations on enumerable sequence spaces
//!   (tilts, posteriors, terminal laws, path KL) used to verify every claim.
//! - [`model`]: tabular and small neural unmasking posteriors with analytic
//!   gradients and binary checkpoints.
//! - [`dtm`]: the control-variate target, the weighted cross-entropy losses
//!   (any-order and block-aligned), exact expected-loss evaluation, and
//!   gradient variance diagnostics.
//! - [`trainer`]: replay buffer, block rollouts, and the annealed training
//!   loop with frozen reference phases.
//! - [`maze`]: the synthetic maze planning environment and its metrics.
//! - [`verify`]: the named check suites run by the CLI.

pub mod dtm;
pub mod error;
pub mod interpolant;
pub mod maze;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod seq;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::{StreamDomain, StreamRng, Streams};
pub use schedule::Schedule;
pub use seq::{MaskedSequence, Token, Vocabulary};
