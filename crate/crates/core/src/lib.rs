//! Spectral-norm shaping for implicitly linear layers, plus the unlearning
//! toolkits built on top of the same small-network engine.
//!
//! * [`linop`] — matrix-free operators with exact adjoints.
//! * [`spectral`] — shifted subspace iteration and a dense SVD oracle.
//! * [`clipper`] — spectral-norm clipping, in isolation and during training.
//! * [`circulant`] — closed-form spectra of circular convolutions.
//! * [`net`] — a tiny feed-forward classifier with manual backprop.
//! * [`lotos`] — ensemble orthogonalization and transferability.
//! * [`unlearn`] — adversarial-set fine-tuning and a membership proxy.
//! * [`classunlearn`] — tilted reweighting and nearest-class membership attack.

pub mod circulant;
pub mod classunlearn;
pub mod clipper;
pub mod data;
pub mod error;
pub mod linop;
pub mod lotos;
pub mod net;
pub mod rng;
pub mod spectral;
pub mod unlearn;

pub use error::{Error, Result};
pub use linop::{compose, Operator, Padding};
pub use spectral::{power_qr, svd_oracle, PowerQrConfig, Spectrum};
