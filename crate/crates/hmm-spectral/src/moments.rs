//! Observation moments: exact values from a known model and empirical
//! estimates from triplet counts.
//!
//! The moment set holds the singleton vector `S1`, the pair matrix `S21`
//! with `[S21]_ij = Pr[y2 = i, y1 = j]`, the skip-pair matrix `S31` with
//! `[S31]_ij = Pr[y3 = i, y1 = j]`, and one matrix per middle symbol with
//! `[S3y1[y]]_ij = Pr[y3 = i, y2 = y, y1 = j]`. Indices here are zero-based;
//! file formats use symbols `1..=Y`.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::model::{HmmModel, ModelError, ObservationSequence, TOL_LOADED};

#[derive(Debug, Error)]
pub enum MomentError {
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("moments file: {0}")]
    Io(#[from] std::io::Error),
    #[error("moments file: {0}")]
    Format(#[from] serde_json::Error),
    #[error("moments file: {0}")]
    Shape(String),
}

/// First, second and third order moments plus the number of triplets they
/// were estimated from (`sample_count == 0` marks exact analytic moments).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    s1: Array1<f64>,
    s21: Array2<f64>,
    s31: Array2<f64>,
    s3y1: Vec<Array2<f64>>,
    sample_count: u64,
}

impl MomentSet {
    pub fn alphabet_size(&self) -> usize {
        self.s1.len()
    }

    pub fn s1(&self) -> &Array1<f64> {
        &self.s1
    }

    pub fn s21(&self) -> &Array2<f64> {
        &self.s21
    }

    pub fn s31(&self) -> &Array2<f64> {
        &self.s31
    }

    /// One matrix per middle symbol `y`.
    pub fn s3y1(&self) -> &[Array2<f64>] {
        &self.s3y1
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn from_json_str(text: &str) -> Result<Self, MomentError> {
        let file: MomentsFile = serde_json::from_str(text)?;
        file.into_moments()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MomentError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let file = MomentsFile {
            y: self.alphabet_size(),
            n: self.sample_count,
            s1: self.s1.to_vec(),
            s21: rows_of(&self.s21),
            s31: rows_of(&self.s31),
            s3y1: self.s3y1.iter().map(rows_of).collect(),
        };
        serde_json::to_string(&file).expect("moments serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MomentError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

/// Exact moments of a valid model:
/// `S1 = O pi0`, `S21 = O T diag(pi0) O'`, `S31 = O T^2 diag(pi0) O'` and
/// `S3y1[y] = O T diag(row y of O) T diag(pi0) O'`.
pub fn exact_moments(model: &HmmModel) -> Result<MomentSet, MomentError> {
    let report = model.validate(TOL_LOADED);
    if !report.valid {
        return Err(ModelError::Invalid(report).into());
    }
    let o = model.observation();
    let t = model.transition();
    let pi = model.initial();
    let y = model.num_symbols();

    let t_dpi = scale_columns(t, pi.view());
    let s1 = o.dot(pi);
    let s21 = o.dot(&t_dpi).dot(&o.t());
    let s31 = o.dot(&t.dot(&t_dpi)).dot(&o.t());
    let s3y1 = (0..y)
        .map(|sym| {
            let mid = scale_columns(t, o.row(sym)).dot(&t_dpi);
            o.dot(&mid).dot(&o.t())
        })
        .collect();

    Ok(MomentSet {
        s1,
        s21,
        s31,
        s3y1,
        sample_count: 0,
    })
}

/// `m * diag(v)`: column `j` scaled by `v[j]`.
fn scale_columns(m: &Array2<f64>, v: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut out = m.clone();
    for (j, &s) in v.iter().enumerate() {
        out.column_mut(j).mapv_inplace(|e| e * s);
    }
    out
}

/// A multiset of observation triplets `(y1, y2, y3)`, zero-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletMultiset {
    triples: Vec<[u32; 3]>,
    alphabet_size: usize,
}

impl TripletMultiset {
    pub fn triples(&self) -> &[[u32; 3]] {
        &self.triples
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// All overlapping windows `(y_k, y_{k+1}, y_{k+2})` of a sequence, in order.
pub fn triplets_sliding(seq: &ObservationSequence) -> Result<TripletMultiset, MomentError> {
    if seq.len() < 3 {
        return Err(MomentError::InsufficientData {
            needed: 3,
            got: seq.len(),
        });
    }
    let triples = seq
        .symbols()
        .windows(3)
        .map(|w| [w[0], w[1], w[2]])
        .collect();
    Ok(TripletMultiset {
        triples,
        alphabet_size: seq.alphabet_size(),
    })
}

/// Disjoint consecutive windows: `floor(len / 3)` triplets.
pub fn triplets_independent(seq: &ObservationSequence) -> Result<TripletMultiset, MomentError> {
    if seq.len() < 3 {
        return Err(MomentError::InsufficientData {
            needed: 3,
            got: seq.len(),
        });
    }
    let triples = seq
        .symbols()
        .chunks_exact(3)
        .map(|w| [w[0], w[1], w[2]])
        .collect();
    Ok(TripletMultiset {
        triples,
        alphabet_size: seq.alphabet_size(),
    })
}

/// Relative-frequency moments of a triplet multiset. Counts accumulate in
/// integer counters and are normalized once at the end.
pub fn estimate_moments(triplets: &TripletMultiset) -> Result<MomentSet, MomentError> {
    let n = triplets.len();
    if n == 0 {
        return Err(MomentError::InsufficientData { needed: 1, got: 0 });
    }
    let y = triplets.alphabet_size();

    let mut c1 = vec![0u64; y];
    let mut c21 = vec![0u64; y * y];
    let mut c31 = vec![0u64; y * y];
    let mut c3y1 = vec![0u64; y * y * y];
    for &[y1, y2, y3] in triplets.triples() {
        let (y1, y2, y3) = (y1 as usize, y2 as usize, y3 as usize);
        c1[y1] += 1;
        c21[y2 * y + y1] += 1;
        c31[y3 * y + y1] += 1;
        c3y1[(y2 * y + y3) * y + y1] += 1;
    }

    debug_assert!(
        {
            let mut summed = vec![0u64; y * y];
            for y2 in 0..y {
                for ij in 0..y * y {
                    summed[ij] += c3y1[y2 * y * y + ij];
                }
            }
            summed == c31
        },
        "third-moment slices must sum to S31 counts"
    );

    let norm = n as f64;
    let s1 = Array1::from_iter(c1.iter().map(|&c| c as f64 / norm));
    let to_matrix = |counts: &[u64]| {
        Array2::from_shape_vec((y, y), counts.iter().map(|&c| c as f64 / norm).collect())
            .expect("count buffer has y*y entries")
    };
    let s21 = to_matrix(&c21);
    let s31 = to_matrix(&c31);
    let s3y1 = (0..y)
        .map(|sym| to_matrix(&c3y1[sym * y * y..(sym + 1) * y * y]))
        .collect();

    Ok(MomentSet {
        s1,
        s21,
        s31,
        s3y1,
        sample_count: n as u64,
    })
}

#[derive(Serialize, Deserialize)]
struct MomentsFile {
    #[serde(rename = "Y")]
    y: usize,
    n: u64,
    #[serde(rename = "S1")]
    s1: Vec<f64>,
    #[serde(rename = "S21")]
    s21: Vec<Vec<f64>>,
    #[serde(rename = "S31")]
    s31: Vec<Vec<f64>>,
    #[serde(rename = "S3y1")]
    s3y1: Vec<Vec<Vec<f64>>>,
}

impl MomentsFile {
    fn into_moments(self) -> Result<MomentSet, MomentError> {
        let y = self.y;
        if self.s1.len() != y || self.s3y1.len() != y {
            return Err(MomentError::Shape(format!(
                "expected {y} entries in S1 and {y} slices in S3y1"
            )));
        }
        let s21 = matrix_from(&self.s21, y, "S21")?;
        let s31 = matrix_from(&self.s31, y, "S31")?;
        let s3y1 = self
            .s3y1
            .iter()
            .map(|slice| matrix_from(slice, y, "S3y1"))
            .collect::<Result<Vec<_>, _>>()?;
        let moments = MomentSet {
            s1: Array1::from(self.s1),
            s21,
            s31,
            s3y1,
            sample_count: self.n,
        };
        for (name, total) in [
            ("S1", moments.s1.sum()),
            ("S21", moments.s21.sum()),
            ("S31", moments.s31.sum()),
        ] {
            if (total - 1.0).abs() > 1e-9 {
                return Err(MomentError::Shape(format!(
                    "{name} sums to {total}, expected 1"
                )));
            }
        }
        Ok(moments)
    }
}

fn matrix_from(rows: &[Vec<f64>], y: usize, name: &str) -> Result<Array2<f64>, MomentError> {
    if rows.len() != y || rows.iter().any(|r| r.len() != y) {
        return Err(MomentError::Shape(format!("{name} is not {y}x{y}")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((y, y), flat).expect("shape checked above"))
}

fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn two_state() -> HmmModel {
        HmmModel::new(
            arr2(&[[0.9, 0.2], [0.1, 0.8]]),
            Array2::<f64>::eye(2),
            arr1(&[2.0 / 3.0, 1.0 / 3.0]),
        )
        .unwrap()
    }

    use ndarray::Array2;

    #[test]
    fn exact_two_state_values() {
        // Direct evaluation with O = I: S1 = pi0 and S21 = T diag(pi0).
        let m = exact_moments(&two_state()).unwrap();
        assert!((m.s1()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.s1()[1] - 1.0 / 3.0).abs() < 1e-15);
        let expected = arr2(&[[0.6, 1.0 / 15.0], [1.0 / 15.0, 4.0 / 15.0]]);
        for (a, b) in m.s21().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(m.sample_count(), 0);
    }

    #[test]
    fn exact_moments_sum_to_one() {
        for seed in 0..5 {
            let model = HmmModel::random(3, 4, seed).unwrap();
            let m = exact_moments(&model).unwrap();
            assert!((m.s1().sum() - 1.0).abs() < 1e-12);
            assert!((m.s21().sum() - 1.0).abs() < 1e-12);
            assert!((m.s31().sum() - 1.0).abs() < 1e-12);
            let total: f64 = m.s3y1().iter().map(|s| s.sum()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_state_pair_moment_is_rank_one() {
        let model = HmmModel::new(
            arr2(&[[1.0]]),
            arr2(&[[0.3], [0.7]]),
            arr1(&[1.0]),
        )
        .unwrap();
        let m = exact_moments(&model).unwrap();
        // S21 = O O' for X = 1.
        let expected = arr2(&[[0.09, 0.21], [0.21, 0.49]]);
        for (a, b) in m.s21().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sliding_windows_enumerate_in_order() {
        let seq = ObservationSequence::new(vec![0, 1, 2, 0], 3, None).unwrap();
        let t = triplets_sliding(&seq).unwrap();
        assert_eq!(t.triples(), &[[0, 1, 2], [1, 2, 0]]);
    }

    #[test]
    fn sliding_counts() {
        let seq = ObservationSequence::new(vec![0; 1000], 2, None).unwrap();
        assert_eq!(triplets_sliding(&seq).unwrap().len(), 998);
        let three = ObservationSequence::new(vec![0, 1, 0], 2, None).unwrap();
        assert_eq!(triplets_sliding(&three).unwrap().len(), 1);
    }

    #[test]
    fn independent_windows_are_disjoint() {
        let seq = ObservationSequence::new(vec![0, 1, 2, 0], 3, None).unwrap();
        let t = triplets_independent(&seq).unwrap();
        assert_eq!(t.triples(), &[[0, 1, 2]]);

        let seq = ObservationSequence::new(vec![0, 1, 2, 0, 1, 2], 3, None).unwrap();
        let t = triplets_independent(&seq).unwrap();
        assert_eq!(t.triples(), &[[0, 1, 2], [0, 1, 2]]);

        let seq = ObservationSequence::new(vec![0; 1000], 2, None).unwrap();
        assert_eq!(triplets_independent(&seq).unwrap().len(), 333);
    }

    #[test]
    fn short_sequences_are_rejected() {
        let seq = ObservationSequence::new(vec![0, 1], 2, None).unwrap();
        assert!(matches!(
            triplets_sliding(&seq),
            Err(MomentError::InsufficientData { .. })
        ));
        assert!(matches!(
            triplets_independent(&seq),
            Err(MomentError::InsufficientData { .. })
        ));
    }

    #[test]
    fn single_triplet_indexing() {
        // Triplet (1,2,1) one-based = (0,1,0) zero-based, Y = 2:
        // S21[i][j] counts (y2=i, y1=j), S31 counts (y3=i, y1=j) and
        // S3y1[y] counts (y3=i, y2=y, y1=j).
        let t = TripletMultiset {
            triples: vec![[0, 1, 0]],
            alphabet_size: 2,
        };
        let m = estimate_moments(&t).unwrap();
        assert_eq!(m.s1().to_vec(), vec![1.0, 0.0]);
        assert_eq!(m.s21(), &arr2(&[[0.0, 0.0], [1.0, 0.0]]));
        assert_eq!(m.s31(), &arr2(&[[1.0, 0.0], [0.0, 0.0]]));
        assert_eq!(&m.s3y1()[1], &arr2(&[[1.0, 0.0], [0.0, 0.0]]));
        assert_eq!(m.s3y1()[0].sum(), 0.0);
        assert_eq!(m.sample_count(), 1);
    }

    #[test]
    fn empirical_moments_sum_to_one() {
        let model = HmmModel::random(3, 4, 11).unwrap();
        let seq = model.sample_sequence(5000, 1).unwrap();
        let m = estimate_moments(&triplets_sliding(&seq).unwrap()).unwrap();
        assert!((m.s1().sum() - 1.0).abs() < 1e-12);
        assert!((m.s21().sum() - 1.0).abs() < 1e-12);
        assert!((m.s31().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn third_moment_slices_reproduce_s31() {
        let model = HmmModel::random(3, 5, 3).unwrap();
        let seq = model.sample_sequence(10_000, 2).unwrap();
        for t in [triplets_sliding(&seq).unwrap(), triplets_independent(&seq).unwrap()] {
            let m = estimate_moments(&t).unwrap();
            let mut summed = Array2::<f64>::zeros((5, 5));
            for slice in m.s3y1() {
                summed += slice;
            }
            let max_diff = summed
                .iter()
                .zip(m.s31().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-12, "max diff {max_diff}");
        }
        // The same identity holds algebraically for exact moments.
        let m = exact_moments(&model).unwrap();
        let mut summed = Array2::<f64>::zeros((5, 5));
        for slice in m.s3y1() {
            summed += slice;
        }
        let max_diff = summed
            .iter()
            .zip(m.s31().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn monte_carlo_pair_moments_match_exact() {
        // Entrywise agreement at a million sliding triplets, bound from
        // binomial concentration with slack for window dependence.
        let model = HmmModel::new(
            arr2(&[[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]]),
            arr2(&[[0.7, 0.2, 0.1], [0.2, 0.6, 0.2], [0.1, 0.2, 0.7]]),
            arr1(&[1.0 / 3.0; 3]),
        )
        .unwrap();
        let exact = exact_moments(&model).unwrap();
        let seq = model.sample_sequence(1_000_002, 17).unwrap();
        let est = estimate_moments(&triplets_sliding(&seq).unwrap()).unwrap();
        let max_diff = est
            .s21()
            .iter()
            .zip(exact.s21().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 0.003, "max entry error {max_diff}");
    }

    #[test]
    fn empirical_error_shrinks_with_sample_count() {
        let model = HmmModel::random(3, 3, 21).unwrap();
        let exact = exact_moments(&model).unwrap();
        let mut errors = Vec::new();
        for (i, n) in [1_000usize, 1_000_000].iter().enumerate() {
            let seq = model.sample_sequence(n + 2, 300 + i as u64).unwrap();
            let est = estimate_moments(&triplets_sliding(&seq).unwrap()).unwrap();
            let err = est
                .s21()
                .iter()
                .zip(exact.s21().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            errors.push(err);
        }
        assert!(
            errors[1] < errors[0],
            "error at 1e6 ({}) should be below error at 1e3 ({})",
            errors[1],
            errors[0]
        );
    }

    #[test]
    fn both_schemes_converge_to_the_same_moments() {
        let model = HmmModel::random(2, 3, 8).unwrap();
        let exact = exact_moments(&model).unwrap();
        let seq = model.sample_sequence(600_000, 4).unwrap();
        for t in [triplets_sliding(&seq).unwrap(), triplets_independent(&seq).unwrap()] {
            let est = estimate_moments(&t).unwrap();
            let err = est
                .s21()
                .iter()
                .zip(exact.s21().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err < 0.01, "scheme error {err}");
        }
    }

    #[test]
    fn moments_json_round_trip() {
        let model = HmmModel::random(2, 3, 9).unwrap();
        let seq = model.sample_sequence(100, 5).unwrap();
        let m = estimate_moments(&triplets_sliding(&seq).unwrap()).unwrap();
        let restored = MomentSet::from_json_str(&m.to_json_string()).unwrap();
        assert_eq!(m, restored);
    }
}
