//! Exact-oracle laboratory for reward-weighted classifier-free guidance (RCFG).
//!
//! The crate is organized around a fully enumerable toy sequence language
//! (5-token vocabulary, body length <= 8) so that every quantity the RCFG
//! decoding rule approximates -- the Q function, the Q-tilted one-step
//! policy, the Jensen gap of the log-ratio guidance vector -- can be
//! computed exactly by brute force and compared against the sampler.
//!
//! Modules:
//! - [`domain`]: the toy language, validity rules, property extraction,
//!   exhaustive enumeration.
//! - [`corpus`]: corpus presets, conditioning-dropout records, the held-out
//!   property pool with p10/p90 percentiles.
//! - [`model`]: the smoothed count-based conditional autoregressive model
//!   with interpolated backoff to the unconditional model.
//! - [`reward`]: the reward-function expression DSL, clamping,
//!   guidance-set standardization, y* search, score normalization.
//! - [`oracle`]: brute-force exact Q, Bayes decomposition, exact tilt,
//!   Jensen-gap reports, exact policy value.
//! - [`guidance`]: the RCFG sampler (guidance sets, log-ratio guidance,
//!   nucleus restriction, temperature sampling).
//! - [`train_rl`]: tabular softmax policy, vanilla policy gradient with
//!   entropy bonus and KL-to-base regularization, best-of-N.
//! - [`distill`]: RCFG-as-teacher forward-KL distillation and the
//!   warm-start-then-RL pipeline.
//! - [`harness`]: evaluation metrics and the sweep engine.
//! - [`cli`]: the `rcfg` binary's subcommands.

pub mod cli;
pub mod corpus;
pub mod distill;
pub mod domain;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod reward;
pub mod rng;
pub mod train_rl;

pub use error::{Error, Result};
