//! Hyperbolic prototype meta-learning for open-set domain generalization
//! under noisy labels.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: Poincaré-ball arithmetic (Möbius addition, exponential map, distances).
//! * [`autodiff`] and [`model`]: a reverse-mode tape, the convolutional backbone,
//!   the `C + 1` classifier head, and SGD.
//! * [`datasets`] and [`noise`]: multi-domain image data, splits, batching, and
//!   label corruption.
//! * [`partition`]: per-domain class prototypes, clean/noisy splitting, and label correction.
//! * [`augment`]: mixed-class images with a pasted learnable prompt.
//! * [`trainer`]: the meta-train / meta-test loop.
//! * [`metrics`]: closed-set accuracy, H-score, and OSCR.

pub mod augment;
pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod partition;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{BallConfig, BallPoint, ExpMapVariant};
pub use model::{ModelConfig, ModelState, SgdConfig};
