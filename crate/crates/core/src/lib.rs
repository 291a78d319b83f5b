//! Adversarial-blur domain generalization for fundus image grading.
//!
//! Heavily blurred twins of the training images are added as a shadow class
//! that never reaches the model head: the loss scores them against a uniform
//! softmax while original images get ordinary cross-entropy. The crate covers
//! the whole experiment pipeline: manifests and split protocols
//! ([`data`]), blur forging ([`blur`]), the dual loss ([`loss`]), a small
//! CPU network stack ([`nn`]), training ([`train`]), evaluation and report
//! tables ([`eval`]), Grad-CAM / masking / t-SNE ([`explain`]) and ablations
//! ([`ablation`]).

pub mod ablation;
pub mod blur;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod loss;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
