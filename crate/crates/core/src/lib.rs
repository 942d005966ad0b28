pub mod autodiff;
pub mod cli;
pub mod covariance;
pub mod encoder;
pub mod error;
pub mod families;
pub mod formula;
pub mod gsem;
pub mod interpret;
pub mod io;
pub mod linalg;
pub mod manifold;
pub mod model;
pub mod params;
pub mod scalar;
pub mod trainer;

/// Seeded generator used for every stochastic step.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    rand::SeedableRng::seed_from_u64(seed)
}
