//! Unsupervised depth-from-motion learning at desk scale.
//!
//! A two-frame depth network is trained from raw image sequences by
//! synthesizing the target view from neighbouring frames, with ego-motion
//! from a pose network (or known orientation) and translations normalized
//! to a fixed nominal displacement. Absolute depth then follows from the
//! measured displacement magnitude alone.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod networks;
mod par;
pub mod stillbox;
pub mod tape;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
