//! Emotion-preserving speaker anonymization on a synthetic token world.

pub mod error;
pub mod evalbench;
pub mod pairforge;
pub mod seed;
pub mod streamer;
pub mod svlm;
pub mod trainer;
pub mod worldsim;

pub use error::{Error, Result};
