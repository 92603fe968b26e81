//! Rare-event estimation with the ensemble Kalman filter.
//!
//! The failure probability `P(G(U) <= 0)` of a standard normal input `U` is
//! recast as an inverse problem on the rectified limit-state `max(0, G)`.
//! An adaptively tempered ensemble Kalman filter pushes particles into the
//! failure domain, a mixture density is fitted to the final ensemble, and a
//! single importance-sampling pass yields an unbiased estimate.
//!
//! Module map:
//! - [`lsf`]: limit-state functions, benchmark registry, stochastic diffusion model
//! - [`tempering`]: adaptive temperature schedule and stopping rule
//! - [`enkf`]: global and localized ensemble updates, driver loop
//! - [`mixtures`]: Gaussian and von Mises-Fisher-Nakagami mixtures
//! - [`estimator`]: importance-sampling estimate and end-to-end pipeline
//! - [`theory`]: noise-free particle flow for affine limit-states
//! - [`harness`]: batch experiments, outlier filtering, relRMSE

pub mod enkf;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod lsf;
pub mod mixtures;
pub mod stats;
pub mod tempering;
pub mod theory;

pub use error::{Error, Result};

/// RNG used throughout; seeded per run so trials are reproducible.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Builds the per-run RNG from an integer seed.
pub fn rng_from_seed(seed: u64) -> SimRng {
    use rand::SeedableRng;
    SimRng::seed_from_u64(seed)
}
