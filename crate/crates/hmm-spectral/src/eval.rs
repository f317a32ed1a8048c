//! Error measurement: permutation alignment of estimates against ground
//! truth, mean squared error over complex entries, the cond(OT) diagnostic
//! and validity accounting.
//!
//! Hidden states are identifiable only up to relabeling, so estimates are
//! aligned by the permutation minimizing `mse_O + mse_T` before any error
//! is reported. Complex entries are scored by modulus rather than having
//! their imaginary parts truncated — truncation would silently reward
//! invalid estimates.

use itertools::Itertools;
use ndarray::{Array1, Array2};
use ndarray_linalg::SVD;
use num_complex::Complex64;
use thiserror::Error;

use crate::model::HmmModel;
use crate::spectral::{SpectralEstimate, ValidityReport};

/// Exhaustive alignment is refused above this many hidden states.
pub const MAX_ALIGN_STATES: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {a_rows}x{a_cols} vs {b_rows}x{b_cols}")]
    ShapeMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("alignment refused for X = {x} > {MAX_ALIGN_STATES} (factorial search)")]
    TooManyStates { x: usize },
    #[error("empty input")]
    Empty,
}

/// Mean squared error over entries, `|A - A_hat|^2` averaged with complex
/// modulus.
pub fn mse(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::ShapeMismatch {
            a_rows: a.nrows(),
            a_cols: a.ncols(),
            b_rows: b.nrows(),
            b_cols: b.ncols(),
        });
    }
    let total: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum();
    Ok(total / a.len() as f64)
}

/// MSE for real matrices (EM estimates and ground truth).
pub fn mse_real(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::ShapeMismatch {
            a_rows: a.nrows(),
            a_cols: a.ncols(),
            b_rows: b.nrows(),
            b_cols: b.ncols(),
        });
    }
    let total: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(total / a.len() as f64)
}

fn mse_vec(a: &Array1<Complex64>, b: &Array1<Complex64>) -> f64 {
    let total: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum();
    total / a.len() as f64
}

/// The (O, T, pi) triple of an estimate, complex-valued so spectral and EM
/// outputs share one alignment path.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterEstimate {
    pub observation: Array2<Complex64>,
    pub transition: Array2<Complex64>,
    pub initial: Array1<Complex64>,
}

impl From<&SpectralEstimate> for ParameterEstimate {
    fn from(est: &SpectralEstimate) -> Self {
        Self {
            observation: est.o_hat.clone(),
            transition: est.t_hat.clone(),
            initial: est.pi_hat.clone(),
        }
    }
}

impl From<&HmmModel> for ParameterEstimate {
    fn from(model: &HmmModel) -> Self {
        Self {
            observation: model.observation().mapv(|v| Complex64::new(v, 0.0)),
            transition: model.transition().mapv(|v| Complex64::new(v, 0.0)),
            initial: model.initial().mapv(|v| Complex64::new(v, 0.0)),
        }
    }
}

/// An estimate relabeled to line up with the truth, with its errors.
/// `permutation[j]` is the estimate column placed at truth column `j`;
/// applying the inverse permutation recovers the input exactly.
#[derive(Debug, Clone)]
pub struct AlignedEstimate {
    pub permutation: Vec<usize>,
    pub o_aligned: Array2<Complex64>,
    pub t_aligned: Array2<Complex64>,
    pub pi_aligned: Array1<Complex64>,
    pub mse_o: f64,
    pub mse_t: f64,
    pub mse_pi: f64,
}

/// Search all X! hidden-state permutations for the one minimizing
/// `mse_O + mse_T` (pi is excluded from the objective; ties break to the
/// lexicographically smallest permutation).
pub fn align_permutation(
    truth: &HmmModel,
    estimate: &ParameterEstimate,
) -> Result<AlignedEstimate, EvalError> {
    let x = truth.num_states();
    let y = truth.num_symbols();
    if estimate.observation.dim() != (y, x)
        || estimate.transition.dim() != (x, x)
        || estimate.initial.len() != x
    {
        return Err(EvalError::ShapeMismatch {
            a_rows: y,
            a_cols: x,
            b_rows: estimate.observation.nrows(),
            b_cols: estimate.observation.ncols(),
        });
    }
    if x > MAX_ALIGN_STATES {
        return Err(EvalError::TooManyStates { x });
    }

    let truth_c = ParameterEstimate::from(truth);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..x).permutations(x) {
        let o_p = permute_columns(&estimate.observation, &perm);
        let t_p = permute_both(&estimate.transition, &perm);
        let objective =
            mse(&truth_c.observation, &o_p)? + mse(&truth_c.transition, &t_p)?;
        // Strict improvement keeps the lexicographically first minimizer.
        if best.as_ref().is_none_or(|(score, _)| objective < *score) {
            best = Some((objective, perm));
        }
    }
    let (_, permutation) = best.expect("at least one permutation exists");

    let o_aligned = permute_columns(&estimate.observation, &permutation);
    let t_aligned = permute_both(&estimate.transition, &permutation);
    let pi_aligned = permute_vec(&estimate.initial, &permutation);
    let mse_o = mse(&truth_c.observation, &o_aligned)?;
    let mse_t = mse(&truth_c.transition, &t_aligned)?;
    let mse_pi = mse_vec(&truth_c.initial, &pi_aligned);

    Ok(AlignedEstimate {
        permutation,
        o_aligned,
        t_aligned,
        pi_aligned,
        mse_o,
        mse_t,
        mse_pi,
    })
}

fn permute_columns(m: &Array2<Complex64>, perm: &[usize]) -> Array2<Complex64> {
    let mut out = Array2::zeros(m.dim());
    for (dst, &src) in perm.iter().enumerate() {
        out.column_mut(dst).assign(&m.column(src));
    }
    out
}

fn permute_both(m: &Array2<Complex64>, perm: &[usize]) -> Array2<Complex64> {
    let x = m.nrows();
    let mut out = Array2::zeros((x, x));
    for i in 0..x {
        for j in 0..x {
            out[(i, j)] = m[(perm[i], perm[j])];
        }
    }
    out
}

fn permute_vec(v: &Array1<Complex64>, perm: &[usize]) -> Array1<Complex64> {
    Array1::from_iter(perm.iter().map(|&src| v[src]))
}

/// 2-norm condition number of the product `O T`: largest over smallest
/// singular value. Assumes a valid model. A smallest singular value that
/// vanishes — outright, or within machine-precision noise of the largest —
/// reports as infinite rank deficiency.
pub fn cond_ot(model: &HmmModel) -> f64 {
    let product = model.observation().dot(model.transition());
    let (_, s, _) = product
        .svd(false, false)
        .expect("SVD of a finite matrix cannot fail");
    let smax = s[0];
    let smin = s[s.len() - 1];
    let noise_floor = f64::EPSILON * smax * product.nrows().max(product.ncols()) as f64;
    if smin < 1e-300 || smin <= noise_floor {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Fraction of reports that are NOT stochastically valid. The benchmark
/// labels this column `invalid_fraction`.
pub fn validity_fraction(reports: &[ValidityReport]) -> Result<f64, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty);
    }
    let invalid = reports.iter().filter(|r| !r.stochastic_valid).count();
    Ok(invalid as f64 / reports.len() as f64)
}

/// Spearman rank correlation, with average ranks on ties.
pub fn spearman_rank(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.is_empty() || a.len() != b.len() {
        return Err(EvalError::Empty);
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(rb.iter()) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean) * (x - mean);
        var_b += (y - mean) * (y - mean);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(EvalError::Empty);
    }
    Ok(cov / (var_a * var_b).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::stationary_distribution;
    use ndarray::{arr1, arr2};

    fn to_c(m: &Array2<f64>) -> Array2<Complex64> {
        m.mapv(|v| Complex64::new(v, 0.0))
    }

    #[test]
    fn mse_of_equal_matrices_is_zero() {
        let a = to_c(&arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mse_identity_vs_anti_identity() {
        let a = to_c(&Array2::<f64>::eye(2));
        let b = to_c(&arr2(&[[0.0, 1.0], [1.0, 0.0]]));
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn mse_uses_complex_modulus() {
        let a = Array2::from_elem((1, 1), Complex64::new(0.0, 0.0));
        let b = Array2::from_elem((1, 1), Complex64::new(0.0, 1.0));
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let a = to_c(&Array2::<f64>::eye(2));
        let b = to_c(&Array2::<f64>::eye(3));
        assert!(matches!(mse(&a, &b), Err(EvalError::ShapeMismatch { .. })));
    }

    fn three_state_truth() -> HmmModel {
        let t = arr2(&[[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]]);
        let pi = stationary_distribution(&t, 1e-10).unwrap();
        HmmModel::new(
            t,
            arr2(&[[0.7, 0.2, 0.1], [0.2, 0.6, 0.2], [0.1, 0.2, 0.7]]),
            pi,
        )
        .unwrap()
    }

    fn permuted_estimate(truth: &HmmModel, perm: &[usize]) -> ParameterEstimate {
        // Scatter truth columns: estimate column perm[j] holds truth column j.
        let x = truth.num_states();
        let y = truth.num_symbols();
        let mut o = Array2::zeros((y, x));
        let mut t = Array2::zeros((x, x));
        let mut pi = Array1::zeros(x);
        for j in 0..x {
            for i in 0..y {
                o[(i, perm[j])] = Complex64::new(truth.observation()[(i, j)], 0.0);
            }
            pi[perm[j]] = Complex64::new(truth.initial()[j], 0.0);
        }
        for i in 0..x {
            for j in 0..x {
                t[(perm[i], perm[j])] = Complex64::new(truth.transition()[(i, j)], 0.0);
            }
        }
        ParameterEstimate {
            observation: o,
            transition: t,
            initial: pi,
        }
    }

    #[test]
    fn alignment_recovers_a_known_permutation() {
        let truth = three_state_truth();
        let perm = vec![2, 0, 1];
        let est = permuted_estimate(&truth, &perm);
        let aligned = align_permutation(&truth, &est).unwrap();
        assert_eq!(aligned.permutation, perm);
        assert!(aligned.mse_o < 1e-30);
        assert!(aligned.mse_t < 1e-30);
        assert!(aligned.mse_pi < 1e-30);
    }

    #[test]
    fn aligning_truth_gives_identity_permutation() {
        let truth = three_state_truth();
        let aligned = align_permutation(&truth, &ParameterEstimate::from(&truth)).unwrap();
        assert_eq!(aligned.permutation, vec![0, 1, 2]);
        assert_eq!(aligned.mse_o, 0.0);
    }

    #[test]
    fn small_noise_keeps_identity_permutation() {
        let truth = three_state_truth();
        let mut est = ParameterEstimate::from(&truth);
        let mut sign = 1.0;
        est.observation.mapv_inplace(|v| {
            sign = -sign;
            v + Complex64::new(1e-3 * sign, 0.0)
        });
        let aligned = align_permutation(&truth, &est).unwrap();
        assert_eq!(aligned.permutation, vec![0, 1, 2]);
        assert!(aligned.mse_o > 1e-7 && aligned.mse_o < 1e-5, "{}", aligned.mse_o);
    }

    #[test]
    fn alignment_inverse_recovers_input() {
        let truth = three_state_truth();
        let est = permuted_estimate(&truth, &[1, 2, 0]);
        let aligned = align_permutation(&truth, &est).unwrap();
        // Scatter the aligned matrices back through the permutation.
        let x = 3;
        let mut o_restored = Array2::zeros(est.observation.dim());
        for j in 0..x {
            o_restored
                .column_mut(aligned.permutation[j])
                .assign(&aligned.o_aligned.column(j));
        }
        assert_eq!(o_restored, est.observation);
    }

    #[test]
    fn alignment_attains_the_exhaustive_minimum() {
        use itertools::Itertools;
        let truth = three_state_truth();
        // A deliberately messy estimate.
        let mut est = ParameterEstimate::from(&truth);
        est.observation.mapv_inplace(|v| v * Complex64::new(1.1, 0.02));
        est.transition.mapv_inplace(|v| v + Complex64::new(0.03, -0.01));
        let aligned = align_permutation(&truth, &est).unwrap();
        let truth_c = ParameterEstimate::from(&truth);
        for perm in (0..3).permutations(3) {
            let o_p = super::permute_columns(&est.observation, &perm);
            let t_p = super::permute_both(&est.transition, &perm);
            let objective = mse(&truth_c.observation, &o_p).unwrap()
                + mse(&truth_c.transition, &t_p).unwrap();
            assert!(
                aligned.mse_o + aligned.mse_t <= objective + 1e-15,
                "permutation {perm:?} beats the chosen alignment"
            );
        }
    }

    #[test]
    fn alignment_refuses_large_x() {
        let t = Array2::<f64>::eye(11) * 0.0 + Array2::<f64>::eye(11);
        let model = HmmModel::new(
            t.clone(),
            t.clone(),
            Array1::from_elem(11, 1.0 / 11.0),
        )
        .unwrap();
        let est = ParameterEstimate::from(&model);
        assert!(matches!(
            align_permutation(&model, &est),
            Err(EvalError::TooManyStates { x: 11 })
        ));
    }

    #[test]
    fn cond_of_identity_product() {
        let m = HmmModel::new(Array2::<f64>::eye(3), Array2::<f64>::eye(3), Array1::from_elem(3, 1.0 / 3.0))
            .unwrap();
        assert!((cond_ot(&m) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cond_matches_singular_values_of_t() {
        // O = I, so cond(OT) = cond(T); the 2x2 singular values come from
        // the eigenvalues of T'T.
        let t = arr2(&[[0.9, 0.2], [0.1, 0.8]]);
        let m = HmmModel::new(t.clone(), Array2::<f64>::eye(2), arr1(&[2.0 / 3.0, 1.0 / 3.0])).unwrap();
        let tt = t.t().dot(&t);
        let trace = tt[(0, 0)] + tt[(1, 1)];
        let det = tt[(0, 0)] * tt[(1, 1)] - tt[(0, 1)] * tt[(1, 0)];
        let disc = (trace * trace / 4.0 - det).sqrt();
        let expected = ((trace / 2.0 + disc) / (trace / 2.0 - disc)).sqrt();
        assert!((cond_ot(&m) - expected).abs() < 1e-10);
    }

    #[test]
    fn cond_is_infinite_for_rank_deficient_o() {
        // Identical observation columns and T = I keep the product exactly
        // rank one, so the smallest singular value vanishes.
        let m = HmmModel::new(
            Array2::<f64>::eye(2),
            arr2(&[[0.3, 0.3], [0.7, 0.7]]),
            arr1(&[0.5, 0.5]),
        )
        .unwrap();
        assert!(cond_ot(&m).is_infinite());
    }

    #[test]
    fn cond_is_invariant_under_hidden_state_permutation() {
        let truth = three_state_truth();
        let perm = [2, 0, 1];
        let mut t = Array2::zeros((3, 3));
        let mut o = Array2::zeros((3, 3));
        let mut pi = Array1::zeros(3);
        for i in 0..3 {
            pi[perm[i]] = truth.initial()[i];
            for j in 0..3 {
                t[(perm[i], perm[j])] = truth.transition()[(i, j)];
                o[(i, perm[j])] = truth.observation()[(i, j)];
            }
        }
        let permuted = HmmModel::new(t, o, pi).unwrap();
        assert!((cond_ot(&truth) - cond_ot(&permuted)).abs() < 1e-10);
    }

    fn report(valid: bool) -> ValidityReport {
        ValidityReport {
            stochastic_valid: valid,
            max_negative_excess: 0.0,
            max_imag_magnitude: 0.0,
            max_column_sum_deviation: 0.0,
            tol_neg: 1e-9,
            tol_imag: 1e-9,
        }
    }

    #[test]
    fn validity_fractions() {
        assert_eq!(validity_fraction(&vec![report(true); 20]).unwrap(), 0.0);
        let mut reports = vec![report(true); 19];
        reports.push(report(false));
        assert!((validity_fraction(&reports).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(validity_fraction(&vec![report(false); 5]).unwrap(), 1.0);
        assert!(matches!(validity_fraction(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman_rank(&[1.0, 2.0], &[10.0, 20.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(
            (spearman_rank(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]).unwrap() - 1.0).abs()
                < 1e-15
        );
        assert!(
            (spearman_rank(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15
        );
        // Ties get average ranks.
        let rho = spearman_rank(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(rho > 0.0 && rho < 1.0);
    }
}
