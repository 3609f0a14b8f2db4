//! Confidence amendment for out-of-distribution detection.
//!
//! A trained classifier is inverted by a noisy gradient-ascent Markov chain
//! that walks Gaussian noise toward high-confidence inputs. Every state of the
//! chain is kept; its predicted label distribution is blended with the uniform
//! distribution using a weight that grows with chain time, and the blended
//! targets are distilled into an auxiliary network whose maximum softmax
//! probability separates in-distribution inputs from everything else.
//!
//! Modules follow the pipeline order: [`data`] → [`network`] → [`synthesis`]
//! → [`amendment`] → [`distill`] → [`detect`] → [`metrics`], orchestrated by
//! [`experiment`]. [`theory`] evaluates the closed-form generalization bound.

// `!(x > 0.0)` is the NaN-rejecting form used by every validator.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod amendment;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod detect;
pub mod distill;
mod error;
pub mod experiment;
pub mod metrics;
pub mod network;
pub mod par;
pub mod plot;
pub mod synthesis;
mod textio;
pub mod theory;

pub use error::{Error, Result};
