//! Tweedie-kernel density estimation for semicontinuous data on `[0, ∞)`.
//!
//! The estimator places a compound Poisson–Gamma kernel with mean `x`,
//! dispersion `h` and power `p ∈ (1, 2)` at every evaluation point. Zeros in
//! the sample contribute the kernel's atom, positive observations its
//! continuous part.

pub mod asymptotics;
pub mod error;
pub mod gof;
pub mod kde;
pub mod quadrature;
pub mod scenarios;
pub mod seed;
pub mod tuning;
pub mod tweedie;

pub use error::{Error, Result};
pub use kde::{DensityEstimate, EvaluationGrid, Estimator, SemicontinuousSample};
pub use tuning::{default_grids, profile_select, GridSpec, SelectionResult};
pub use tweedie::{KernelParams, PowerParam, SeriesPolicy, SeriesTable};

/// Runs `f` on a dedicated pool of `threads` workers (`0` means the rayon
/// default). Results of this crate never depend on the pool size.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}
