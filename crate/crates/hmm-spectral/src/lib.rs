//! Spectral (method-of-moments) identification of hidden Markov models.
//!
//! The crate recovers the parameters of a discrete HMM — column-stochastic
//! transition matrix `T`, column-stochastic observation matrix `O` and
//! initial distribution `pi0` — from low-order moments of a consecutive
//! observation sequence, via an SVD projection and a randomized joint
//! eigendecomposition. A scaled Baum-Welch baseline, permutation-aligned
//! error measures, a condition-number diagnostic and a seeded benchmark
//! harness round out the evaluation tooling.
//!
//! All randomness is derived from explicit seeds through ChaCha8 streams
//! (see [`seed`]), so every result in the crate is reproducible bit for bit.

pub use ndarray;
pub use num_complex;

pub mod bench;
pub mod em;
pub mod eval;
pub mod model;
pub mod moments;
pub mod seed;
pub mod spectral;
pub mod systems;

pub use model::{HmmModel, ObservationSequence, ValidationReport};
pub use moments::{estimate_moments, exact_moments, triplets_independent, triplets_sliding, MomentSet};
pub use spectral::{spectral_learn, SpectralEstimate, SpectralOptions, ValidityReport};
