//! Locks an image classifier's accuracy behind a device-bound trigger.
//!
//! The pipeline: derive a fingerprint from hardware identifiers
//! ([`fingerprint`]), render it as a pixel patch ([`trigger`]), train a
//! classifier that only performs well when the patch is present
//! ([`dataset`], [`model`]), then stress the scheme with trigger-recovery
//! and finetuning attacks ([`attack`]) and defend it with randomized
//! smoothing certificates ([`smoothing`]). [`analysis`] holds the shared
//! measurement code: accuracies, attack gain, mutual-information probes,
//! and report rendering.
//!
//! Everything is deterministic given a seed: one thread, seeded ChaCha
//! streams, no time- or platform-dependent branches.

pub mod analysis;
pub mod attack;
pub mod dataset;
pub mod error;
pub mod fingerprint;
pub mod model;
pub mod nn;
pub mod smoothing;
pub mod trigger;

pub use error::{Error, Result};
