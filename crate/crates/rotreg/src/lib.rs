//! Semi-supervised probabilistic rotation regression on SO(3).
//!
//! The crate models a rotation prediction as a matrix Fisher distribution
//! MF(R; A) parameterized by an unconstrained 3x3 matrix, trains a small
//! regressor with a mean-teacher pipeline (dynamic entropy-percentile
//! pseudo-label filtering, occlusion/rotation strong augmentations), and
//! evaluates everything on a deterministic synthetic wireframe benchmark.

pub mod augment;
pub mod config;
pub mod data;
pub mod eval;
pub mod fisher;
pub mod net;
pub mod parallel;
pub mod so3;
pub mod ssl;
