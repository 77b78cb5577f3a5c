//! Automated scoring of cube-copy drawings.
//!
//! The crate covers the whole loop: rendering labeled synthetic cube
//! drawings ([`synth`]), turning scans into model-ready tensors
//! ([`image`]), a small convolutional network stack with exact
//! backpropagation ([`nn`]), augmentation ([`augment`]), the training and
//! evaluation protocol ([`train`]), the experiment grid and its statistics
//! ([`analysis`]), and a confidence-triage scoring service with a
//! three-scorer arbitration workflow ([`service`]).
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod analysis;
pub mod augment;
pub mod cli;
pub mod config;
pub mod image;
pub mod nn;
pub mod rng;
pub mod score;
pub mod service;
pub mod synth;
pub mod train;

pub use score::Score;
