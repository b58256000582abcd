//! Multi-view mean-teacher adaptation for person re-identification.
//!
//! A CNN encoder produces a feature map that is split into horizontal parts.
//! Each part is gated against the global map by a small attention block and
//! passed through an expert head. An EMA teacher clusters the target domain
//! once per epoch, one clustering per view, and the student is trained on
//! the resulting pseudo-labels with classification and triplet losses.

pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod state;
pub mod teacher;
pub mod train;

pub use error::{Error, Result};
pub use state::{Grads, ModelState};
