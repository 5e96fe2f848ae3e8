//! Harmonic-aware parameter-efficient fine-tuning for beat and downbeat
//! tracking.
//!
//! A frozen transformer stand-in ([`foundation`]) exposes every encoder
//! layer's features. A separable trainable network ([`hingenet`]) consumes
//! those features through per-layer projections, learnable gates and
//! harmonic-aware dilated convolutions, and emits per-frame beat and
//! downbeat activations. [`postprocess`] decodes them with a bar-pointer
//! HMM, [`eval`] scores the result, [`data`] generates synthetic training
//! material and [`train`] runs training and the ablation harnesses.
//! [`baselines`] provides Adapter, LoRA and linear-probe comparison arms.

pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod foundation;
pub mod hingenet;
pub mod model;
pub mod postprocess;
pub mod rng;
pub mod tensorcore;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
