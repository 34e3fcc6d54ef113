//! Speaker + utterance verification with a dual-branch masked network:
//! MFCC frontend, reverse-mode autodiff, trial protocol, scoring, and a
//! deterministic synthetic corpus generator for end-to-end testing.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod frontend;
pub mod losses;
pub mod network;
pub mod protocol;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod wav;

pub use config::RunConfig;
pub use error::{Result, SudaError};
