//! Joint diffeomorphic registration of multi-channel feature maps on the
//! sphere with simultaneous unbiased atlas estimation.
//!
//! The model explains each subject's geometric and functional feature images
//! as a shared population atlas warped first by a per-subject joint
//! deformation and then by a small per-modality deformation, all three
//! parameterized as stationary velocity fields. Fitting minimizes the
//! negative log-likelihood of this generative model by direct gradient
//! descent on the velocities and the atlas.
//!
//! Module map:
//! - [`sphere_grid`]: equirectangular grid and sin(theta) area weighting
//! - [`field`]: dense multi-channel storage
//! - [`deform`]: velocity integration, warping, composition, adjoints
//! - [`model`]: atlas/subject types and every loss term
//! - [`optim`]: gradients, Adam, the fit loop and geometric-only inference
//! - [`synth`]: synthetic cohorts with known ground truth
//! - [`eval`]: correlation metrics, Wilcoxon test, ablation harness
//! - [`io`]: tensor container and report serialization

pub mod deform;
pub mod error;
pub mod eval;
pub mod field;
pub mod io;
pub mod model;
pub mod optim;
pub mod sphere_grid;
pub mod synth;

pub use error::{Error, Result};
