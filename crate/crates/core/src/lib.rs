//! Dense 2D diffeomorphisms on pixel grids.
//!
//! * [`field`]: displacement fields, composition, Jacobians, warping.
//! * [`group`]: exponential (scaling and squaring, RK4 reference) and the
//!   inverse scaling-and-squaring logarithm.
//! * [`leda`]: the siamese autoencoder, its losses and training loop.
//! * [`stats`]: PCA, log-Euclidean means, latent walks and regression.
//! * [`eval`]: held-out metrics and timing for a trained model.
//! * [`render`]: PPM images of grids and Jacobian maps.
//! * [`io`]: field files, checkpoints and dataset manifests.
//! * [`synth`]: synthetic pairs with ground-truth velocities and covariates.
//! * [`autodiff`]: the small reverse-mode engine the autoencoder trains with.

pub mod autodiff;
pub mod eval;
pub mod field;
pub mod group;
pub mod io;
pub mod leda;
pub mod render;
pub mod stats;
pub mod synth;
