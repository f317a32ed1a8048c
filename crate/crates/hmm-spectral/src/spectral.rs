//! Spectral learning: SVD projection of the pair moment, randomized joint
//! eigendecomposition of the third-moment slices, row-wise recovery of the
//! observation matrix, then the initial distribution and transition matrix
//! through pseudo-inverses.
//!
//! Estimates are carried as complex matrices end to end. Nothing here
//! projects, clips or renormalizes: eigendecomposition output can be
//! negative or complex, and preserving that is what the validity
//! bookkeeping measures.

use ndarray::{Array1, Array2};
use ndarray_linalg::error::LinalgError;
use ndarray_linalg::{Eig, Inverse, Lapack, Scalar, SVD};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moments::MomentSet;
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("projection stage: hidden-state count {x} exceeds alphabet size {y}")]
    StateCountExceedsAlphabet { x: usize, y: usize },
    #[error("projection stage: hidden-state count must be >= 1")]
    ZeroStates,
    #[error("{stage} stage: input contains non-finite entries")]
    NonFinite { stage: &'static str },
    #[error("{stage} stage: LAPACK failure: {source}")]
    Lapack {
        stage: &'static str,
        source: LinalgError,
    },
    #[error(
        "eigendecomposition stage: eigenvalue gap below tolerance after {resamples} resamples"
    )]
    DegenerateEigenvalues { resamples: u32 },
    #[error("diagonalization stage: eigenvector matrix is numerically singular")]
    SingularDiagonalizer,
    #[error(
        "recovery stage: |pi_hat[{index}]| = {magnitude:.3e} is below {tol:.3e}, \
         diag(pi_hat)^-1 is undefined"
    )]
    NearSingularPi {
        index: usize,
        magnitude: f64,
        tol: f64,
    },
}

impl SpectralError {
    /// Short machine-readable tag for benchmark records.
    pub fn tag(&self) -> &'static str {
        match self {
            Self::StateCountExceedsAlphabet { .. } | Self::ZeroStates => "bad-state-count",
            Self::NonFinite { .. } => "non-finite",
            Self::Lapack { .. } => "lapack",
            Self::DegenerateEigenvalues { .. } => "degenerate-eig",
            Self::SingularDiagonalizer => "singular-diagonalizer",
            Self::NearSingularPi { .. } => "near-singular-pi",
        }
    }
}

/// Knobs of the estimator. The defaults are what the benchmark uses.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralOptions {
    /// Relative truncation threshold for pseudo-inverses: singular values
    /// below `pinv_rel_tol * sigma_max` are treated as zero.
    pub pinv_rel_tol: f64,
    /// Resample the random combination when the smallest eigenvalue gap of
    /// the combined matrix falls below this fraction of the largest gap
    /// (one collided pair signals an unlucky draw, not a hard system).
    pub eig_gap_tol: f64,
    /// Resample budget before giving up with a degenerate-eigenvalue error.
    pub max_resamples: u32,
    /// Validity threshold on negative real parts.
    pub tol_neg: f64,
    /// Validity threshold on imaginary magnitudes.
    pub tol_imag: f64,
    /// Choice of projection subspace; kept as an extension point.
    pub projection: Projection,
}

/// How the moment matrices are projected down to X dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[non_exhaustive]
pub enum Projection {
    /// Left singular vectors of S21 for the X largest singular values.
    #[default]
    TopLeftSingular,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            pinv_rel_tol: 1e-12,
            eig_gap_tol: 0.1,
            max_resamples: 5,
            tol_neg: 1e-9,
            tol_imag: 1e-9,
            projection: Projection::TopLeftSingular,
        }
    }
}

/// Validity bookkeeping for one estimate: the largest negative excursion of
/// any real part, the largest imaginary magnitude, and how far column sums
/// drift from 1, together with the thresholds the verdict used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub stochastic_valid: bool,
    pub max_negative_excess: f64,
    pub max_imag_magnitude: f64,
    pub max_column_sum_deviation: f64,
    pub tol_neg: f64,
    pub tol_imag: f64,
}

/// Result of spectral learning. `o_hat`, `t_hat` and `pi_hat` are the raw
/// (possibly complex, possibly non-stochastic) estimates; `g` is the vector
/// of standard-normal draws that produced the accepted eigendecomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEstimate {
    pub o_hat: Array2<Complex64>,
    pub t_hat: Array2<Complex64>,
    pub pi_hat: Array1<Complex64>,
    pub validity: ValidityReport,
    pub g: Array1<f64>,
    pub seed: u64,
}

impl SpectralEstimate {
    pub fn num_states(&self) -> usize {
        self.o_hat.ncols()
    }

    pub fn num_symbols(&self) -> usize {
        self.o_hat.nrows()
    }

    /// Recompute the validity report at the given thresholds.
    pub fn validity_check(&self, tol_neg: f64, tol_imag: f64) -> ValidityReport {
        validity_check(&self.o_hat, &self.t_hat, &self.pi_hat, tol_neg, tol_imag)
    }
}

/// Orthonormal basis of the leading left singular subspace of S21.
#[derive(Debug, Clone)]
pub struct SingularProjection {
    u: Array2<f64>,
    singular_values: Array1<f64>,
}

impl SingularProjection {
    /// Y by X matrix with orthonormal columns.
    pub fn u(&self) -> &Array2<f64> {
        &self.u
    }

    /// All singular values of S21, descending.
    pub fn singular_values(&self) -> &Array1<f64> {
        &self.singular_values
    }

    /// True when the X-th singular value is negligible relative to the
    /// first, i.e. the rank-X assumption looks violated.
    pub fn rank_warning(&self) -> bool {
        let x = self.u.ncols();
        let first = self.singular_values[0];
        first <= 0.0 || self.singular_values[x - 1] / first < 1e-13
    }
}

/// Left singular vectors of `s21` for the `x` largest singular values,
/// with the sign of each column fixed so its first nonzero entry is
/// positive.
pub fn top_left_singular(s21: &Array2<f64>, x: usize) -> Result<SingularProjection, SpectralError> {
    let y = s21.nrows();
    if x == 0 {
        return Err(SpectralError::ZeroStates);
    }
    if x > y.min(s21.ncols()) {
        return Err(SpectralError::StateCountExceedsAlphabet { x, y });
    }
    if s21.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::NonFinite {
            stage: "projection",
        });
    }
    let (u, s, _) = s21.svd(true, false).map_err(|source| SpectralError::Lapack {
        stage: "projection",
        source,
    })?;
    let u = u.expect("svd was asked for U");
    let mut u = u.slice_move(ndarray::s![.., ..x]);
    for mut col in u.columns_mut() {
        if let Some(&lead) = col.iter().find(|v| **v != 0.0) {
            if lead < 0.0 {
                col.mapv_inplace(|v| -v);
            }
        }
    }
    Ok(SingularProjection {
        u,
        singular_values: s,
    })
}

/// Moore-Penrose pseudo-inverse via SVD. Singular values below
/// `rel_tol * sigma_max` are treated as zero; an all-zero matrix maps to
/// the all-zero matrix of transposed shape.
pub fn pseudo_inverse<A>(m: &Array2<A>, rel_tol: f64) -> Result<Array2<A>, SpectralError>
where
    A: Scalar<Real = f64> + Lapack,
{
    let (rows, cols) = m.dim();
    if m.iter().any(|v| !v.re().is_finite() || !v.im().is_finite()) {
        return Err(SpectralError::NonFinite {
            stage: "pseudo-inverse",
        });
    }
    let (u, s, vt) = m.svd(true, true).map_err(|source| SpectralError::Lapack {
        stage: "pseudo-inverse",
        source,
    })?;
    let u = u.expect("svd was asked for U");
    let vt = vt.expect("svd was asked for V^H");
    let smax = s.iter().copied().fold(0.0f64, f64::max);
    if smax <= 0.0 {
        return Ok(Array2::zeros((cols, rows)));
    }
    let cutoff = rel_tol * smax;

    // A = U S V^H, so A+ = V S+ U^H.
    let k = s.len();
    let mut v_scaled = Array2::<A>::zeros((cols, k));
    for (i, &sv) in s.iter().enumerate() {
        if sv > cutoff {
            let inv = A::from_real(1.0 / sv);
            for j in 0..cols {
                v_scaled[(j, i)] = vt[(i, j)].conj() * inv;
            }
        }
    }
    let uh = u.t().mapv(|v| v.conj());
    Ok(v_scaled.dot(&uh.slice(ndarray::s![..k, ..])))
}

/// Output of the observation-matrix recovery: the raw estimate, the
/// diagonalizing eigenvector matrix `B`, the accepted random combination
/// and how many draws were rejected before it.
#[derive(Debug, Clone)]
pub struct ObservationRecovery {
    pub o_hat: Array2<Complex64>,
    pub diagonalizer: Array2<Complex64>,
    pub g: Array1<f64>,
    pub resamples: u32,
    pub projection: SingularProjection,
}

/// Recover the observation matrix row by row.
///
/// Forms `A_y = (U' S3y1[y]) (U' S31)+`, eigendecomposes the g-weighted
/// combination `sum_y g[y] A_y` to obtain the transform `B`, then reads row
/// `y` of the estimate off the diagonal of `B^-1 A_y B`. The same `B`
/// diagonalizes every `A_y`, which is what keeps the hidden-state order
/// consistent across rows.
pub fn recover_observation(
    moments: &MomentSet,
    x: usize,
    seed: u64,
    opts: &SpectralOptions,
) -> Result<ObservationRecovery, SpectralError> {
    let y = moments.alphabet_size();
    let projection = top_left_singular(moments.s21(), x)?;
    let ut = projection.u().t();

    let p = pseudo_inverse(&ut.dot(moments.s31()).to_owned(), opts.pinv_rel_tol)?;
    let slices: Vec<Array2<f64>> = (0..y)
        .map(|sym| ut.dot(&moments.s3y1()[sym]).dot(&p))
        .collect();

    let mut attempt = 0u32;
    loop {
        let g_seed = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, "g-resample", u64::from(attempt))
        };
        let g = standard_normal_vector(g_seed, y);

        let mut combined = Array2::<f64>::zeros((x, x));
        for (sym, slice) in slices.iter().enumerate() {
            combined.scaled_add(g[sym], slice);
        }
        if combined.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::NonFinite {
                stage: "eigendecomposition",
            });
        }

        let (eigenvalues, eigenvectors) =
            combined.eig().map_err(|source| SpectralError::Lapack {
                stage: "eigendecomposition",
                source,
            })?;

        if acceptable_gaps(&eigenvalues, opts.eig_gap_tol) {
            let b = normalize_eigenvectors(eigenvectors);
            let b_inv = b.inv().map_err(|_| SpectralError::SingularDiagonalizer)?;
            let mut o_hat = Array2::<Complex64>::zeros((y, x));
            for (sym, slice) in slices.iter().enumerate() {
                let slice_c = slice.mapv(|v| Complex64::new(v, 0.0));
                let diagonalized = b_inv.dot(&slice_c).dot(&b);
                for j in 0..x {
                    o_hat[(sym, j)] = diagonalized[(j, j)];
                }
            }
            return Ok(ObservationRecovery {
                o_hat,
                diagonalizer: b,
                g,
                resamples: attempt,
                projection,
            });
        }

        if attempt >= opts.max_resamples {
            return Err(SpectralError::DegenerateEigenvalues {
                resamples: opts.max_resamples,
            });
        }
        attempt += 1;
    }
}

/// A draw is accepted when the smallest pairwise eigenvalue gap is not tiny
/// relative to the largest one (and not at numerical-noise scale outright).
/// One collided pair among otherwise separated eigenvalues marks an
/// unlucky combination; uniformly small gaps are a property of the system
/// and resampling cannot improve them.
///
/// Gaps are measured between real parts: the noise-free eigenvalues are the
/// g-weighted column sums of a real observation matrix, so an imaginary
/// component is itself a collision artifact and must not inflate the
/// measured separation of a conjugate pair.
fn acceptable_gaps(eigenvalues: &Array1<Complex64>, gap_ratio_tol: f64) -> bool {
    let x = eigenvalues.len();
    if x < 2 {
        return true;
    }
    let mut min_gap = f64::INFINITY;
    let mut max_gap = 0.0f64;
    for i in 0..x {
        for j in i + 1..x {
            let gap = (eigenvalues[i].re - eigenvalues[j].re).abs();
            min_gap = min_gap.min(gap);
            max_gap = max_gap.max(gap);
        }
    }
    let radius = eigenvalues.iter().map(|l| l.norm()).fold(0.0f64, f64::max);
    max_gap > 0.0 && min_gap >= gap_ratio_tol * max_gap && min_gap >= 1e-12 * radius
}

/// Columns scaled to unit Euclidean norm, rotated so the first nonzero
/// entry is real and positive. The scale ambiguity cancels in the
/// similarity transform; fixing it makes runs reproducible.
fn normalize_eigenvectors(mut b: Array2<Complex64>) -> Array2<Complex64> {
    for mut col in b.columns_mut() {
        let norm = col.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            let inv = Complex64::new(1.0 / norm, 0.0);
            col.mapv_inplace(|v| v * inv);
        }
        if let Some(lead) = col.iter().find(|v| v.norm() > 0.0) {
            let phase = lead / lead.norm();
            let rot = phase.conj();
            col.mapv_inplace(|v| v * rot);
        }
    }
    b
}

fn standard_normal_vector(seed: u64, len: usize) -> Array1<f64> {
    let mut rng = rng_from_seed(seed);
    Array1::from_iter((0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Recover `pi_hat = O+ S1` and `T_hat = O+ S21 (O+)' diag(pi_hat)^-1`.
/// The transpose on the second pseudo-inverse is plain (not conjugate),
/// matching the factorization `S21 = O T diag(pi0) O'`.
pub fn recover_pi_transition(
    o_hat: &Array2<Complex64>,
    moments: &MomentSet,
    rel_tol: f64,
) -> Result<(Array1<Complex64>, Array2<Complex64>), SpectralError> {
    let o_pinv = pseudo_inverse(o_hat, rel_tol)?;
    let s1 = moments.s1().mapv(|v| Complex64::new(v, 0.0));
    let pi_hat = o_pinv.dot(&s1);
    for (index, v) in pi_hat.iter().enumerate() {
        if v.norm() < rel_tol {
            return Err(SpectralError::NearSingularPi {
                index,
                magnitude: v.norm(),
                tol: rel_tol,
            });
        }
    }
    let s21 = moments.s21().mapv(|v| Complex64::new(v, 0.0));
    let mut t_hat = o_pinv.dot(&s21).dot(&o_pinv.t());
    for (j, &pi_j) in pi_hat.iter().enumerate() {
        let inv = Complex64::new(1.0, 0.0) / pi_j;
        t_hat.column_mut(j).mapv_inplace(|v| v * inv);
    }
    Ok((pi_hat, t_hat))
}

/// The full pipeline: projection, randomized joint eigendecomposition,
/// observation rows, then initial distribution and transition matrix.
/// Deterministic given `(moments, x, seed, opts)`.
pub fn spectral_learn(
    moments: &MomentSet,
    x: usize,
    seed: u64,
    opts: &SpectralOptions,
) -> Result<SpectralEstimate, SpectralError> {
    let recovery = recover_observation(moments, x, seed, opts)?;
    let (pi_hat, t_hat) = recover_pi_transition(&recovery.o_hat, moments, opts.pinv_rel_tol)?;
    let validity = validity_check(&recovery.o_hat, &t_hat, &pi_hat, opts.tol_neg, opts.tol_imag);
    Ok(SpectralEstimate {
        o_hat: recovery.o_hat,
        t_hat,
        pi_hat,
        validity,
        g: recovery.g,
        seed,
    })
}

/// Measure how far an estimate strays from stochastic validity across all
/// three parameter estimates.
pub fn validity_check(
    o_hat: &Array2<Complex64>,
    t_hat: &Array2<Complex64>,
    pi_hat: &Array1<Complex64>,
    tol_neg: f64,
    tol_imag: f64,
) -> ValidityReport {
    let mut max_negative_excess = 0.0f64;
    let mut max_imag_magnitude = 0.0f64;
    let mut scan = |v: &Complex64| {
        max_negative_excess = max_negative_excess.max(-v.re);
        max_imag_magnitude = max_imag_magnitude.max(v.im.abs());
    };
    o_hat.iter().for_each(&mut scan);
    t_hat.iter().for_each(&mut scan);
    pi_hat.iter().for_each(&mut scan);

    let mut max_column_sum_deviation = 0.0f64;
    for m in [o_hat, t_hat] {
        for col in m.columns() {
            let sum: Complex64 = col.iter().sum();
            max_column_sum_deviation =
                max_column_sum_deviation.max((sum - Complex64::new(1.0, 0.0)).norm());
        }
    }
    let pi_sum: Complex64 = pi_hat.iter().sum();
    max_column_sum_deviation =
        max_column_sum_deviation.max((pi_sum - Complex64::new(1.0, 0.0)).norm());

    ValidityReport {
        stochastic_valid: max_negative_excess <= tol_neg && max_imag_magnitude <= tol_imag,
        max_negative_excess,
        max_imag_magnitude,
        max_column_sum_deviation,
        tol_neg,
        tol_imag,
    }
}
