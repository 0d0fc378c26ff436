//! Spatial interpolation of scattered gauge fields.
//!
//! The toolkit trains a transformer-style interpolator with a
//! mask-and-recover objective: hide a fraction of the known observations at
//! one timestamp, feed the rest plus pairwise relative positions (distance
//! and azimuth) into stacked shielded-attention layers, and learn to recover
//! the hidden values. At inference, arbitrary query locations are appended as
//! unobserved nodes and answered in one forward pass. Classical baselines
//! (inverse-distance weighting, ordinary kriging, triangulated linear
//! interpolation) and the RMSE/MAE/NSE metric suite share the same data path
//! for comparison.

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod geo;
pub mod gradcheck;
pub mod kernel;
pub mod model;
pub mod optim;
pub mod plan;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
