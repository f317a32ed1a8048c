//! HMM parameter types, stochasticity validation, sequence sampling and
//! stationary distributions.
//!
//! Matrices follow the column-stochastic convention throughout the crate:
//! column `j` of the transition matrix is the distribution of the next
//! hidden state given that the current state is `j`, and column `j` of the
//! observation matrix is the distribution of emitted symbols in state `j`.
//! Symbols are stored zero-based internally; file formats use `1..=Y`.

use ndarray::{Array1, Array2, ArrayView1};
use ndarray_linalg::{Eig, LeastSquaresSvd};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

use crate::seed::{derive_seed, rng_from_seed};

/// Stochasticity tolerance applied to models constructed in code.
pub const TOL_CONSTRUCTED: f64 = 1e-12;
/// Stochasticity tolerance applied to models loaded from text formats,
/// loose enough to absorb decimal rounding.
pub const TOL_LOADED: f64 = 1e-9;
/// Residual tolerance for stationary-distribution solves.
pub const TOL_STATIONARY: f64 = 1e-10;

const RANDOM_MODEL_ATTEMPTS: u64 = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(
        "inconsistent dimensions: T is {t_rows}x{t_cols}, O is {o_rows}x{o_cols}, \
         pi0 has length {pi_len}"
    )]
    Dimensions {
        t_rows: usize,
        t_cols: usize,
        o_rows: usize,
        o_cols: usize,
        pi_len: usize,
    },
    #[error("state and symbol counts must be positive")]
    EmptyModel,
    #[error("model violates stochasticity constraints: {0}")]
    Invalid(ValidationReport),
    #[error("non-unique stationary distribution: {near_unit} eigenvalues within {tol:e} of 1")]
    NonUniqueStationary { near_unit: usize, tol: f64 },
    #[error("stationary distribution solve failed: {0}")]
    StationaryNumerical(String),
    #[error("random model generation failed after {attempts} attempts")]
    GenerationFailed { attempts: u64 },
    #[error("sequence length must be >= 1")]
    ZeroLength,
    #[error("symbol {symbol} at position {position} out of range for alphabet size {alphabet}")]
    SymbolOutOfRange {
        symbol: usize,
        position: usize,
        alphabet: usize,
    },
    #[error("linear algebra failure: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Format(#[from] serde_json::Error),
}

/// One violated constraint: where, what, and by how much.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub location: String,
    pub constraint: String,
    pub magnitude: f64,
}

/// Result of a stochasticity check. `valid` is true iff `violations` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn new(violations: Vec<Violation>) -> Self {
        Self {
            valid: violations.is_empty(),
            violations,
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid {
            return write!(f, "valid");
        }
        write!(f, "{} violation(s):", self.violations.len())?;
        for v in &self.violations {
            write!(f, " [{} {} by {:.3e}]", v.location, v.constraint, v.magnitude)?;
        }
        Ok(())
    }
}

/// A discrete HMM: column-stochastic transition matrix `T` (X by X),
/// column-stochastic observation matrix `O` (Y by X) and initial
/// distribution `pi0` (length X).
#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    transition: Array2<f64>,
    observation: Array2<f64>,
    initial: Array1<f64>,
}

impl HmmModel {
    /// Build a model from its parts, checking dimensional consistency only.
    /// Stochasticity is checked separately by [`HmmModel::validate`].
    pub fn new(
        transition: Array2<f64>,
        observation: Array2<f64>,
        initial: Array1<f64>,
    ) -> Result<Self, ModelError> {
        let (t_rows, t_cols) = transition.dim();
        let (o_rows, o_cols) = observation.dim();
        let pi_len = initial.len();
        if t_rows == 0 || o_rows == 0 {
            return Err(ModelError::EmptyModel);
        }
        if t_rows != t_cols || o_cols != t_cols || pi_len != t_cols {
            return Err(ModelError::Dimensions {
                t_rows,
                t_cols,
                o_rows,
                o_cols,
                pi_len,
            });
        }
        Ok(Self {
            transition,
            observation,
            initial,
        })
    }

    /// Number of hidden states X.
    pub fn num_states(&self) -> usize {
        self.transition.ncols()
    }

    /// Alphabet size Y.
    pub fn num_symbols(&self) -> usize {
        self.observation.nrows()
    }

    pub fn transition(&self) -> &Array2<f64> {
        &self.transition
    }

    pub fn observation(&self) -> &Array2<f64> {
        &self.observation
    }

    pub fn initial(&self) -> &Array1<f64> {
        &self.initial
    }

    /// Check every stochasticity constraint, reporting each violation with
    /// its magnitude: entries of `T`, `O` and `pi0` in `[0, 1]`, columns of
    /// `T` and `O` summing to 1, and `pi0` summing to 1, all within `tol`.
    pub fn validate(&self, tol: f64) -> ValidationReport {
        let mut violations = Vec::new();
        check_matrix(&mut violations, "T", &self.transition, tol);
        check_matrix(&mut violations, "O", &self.observation, tol);
        for (i, &v) in self.initial.iter().enumerate() {
            if let Some(mag) = range_excess(v, tol) {
                violations.push(Violation {
                    location: format!("pi0[{i}]"),
                    constraint: "entry in [0, 1]".into(),
                    magnitude: mag,
                });
            }
        }
        let pi_sum: f64 = self.initial.sum();
        if (pi_sum - 1.0).abs() > tol {
            violations.push(Violation {
                location: "pi0".into(),
                constraint: "sums to 1".into(),
                magnitude: (pi_sum - 1.0).abs(),
            });
        }
        ValidationReport::new(violations)
    }

    fn ensure_valid(&self, tol: f64) -> Result<(), ModelError> {
        let report = self.validate(tol);
        if report.valid {
            Ok(())
        } else {
            Err(ModelError::Invalid(report))
        }
    }

    /// Sample a consecutive observation sequence of the given length.
    ///
    /// Draws the initial state from `pi0`, then alternates emission
    /// (column of `O`) and transition (column of `T`). Deterministic given
    /// `(model, length, seed)`.
    pub fn sample_sequence(
        &self,
        length: usize,
        seed: u64,
    ) -> Result<ObservationSequence, ModelError> {
        self.ensure_valid(TOL_LOADED)?;
        if length == 0 {
            return Err(ModelError::ZeroLength);
        }
        let mut rng = rng_from_seed(seed);
        let mut state = draw_categorical(&mut rng, self.initial.view());
        let mut symbols = Vec::with_capacity(length);
        for _ in 0..length {
            let symbol = draw_categorical(&mut rng, self.observation.column(state));
            symbols.push(symbol as u32);
            state = draw_categorical(&mut rng, self.transition.column(state));
        }
        Ok(ObservationSequence {
            symbols,
            alphabet_size: self.num_symbols(),
            seed: Some(seed),
        })
    }

    /// Generate a random model: columns of `T` and `O` drawn uniformly from
    /// the probability simplex (normalized exponentials) and `pi0` set to
    /// the stationary distribution of `T`. Deterministic given the seed.
    pub fn random(x: usize, y: usize, seed: u64) -> Result<Self, ModelError> {
        if x == 0 || y == 0 {
            return Err(ModelError::EmptyModel);
        }
        for attempt in 0..RANDOM_MODEL_ATTEMPTS {
            let mut rng = rng_from_seed(derive_seed(seed, "random-model", attempt));
            let transition = random_stochastic(&mut rng, x, x);
            let observation = random_stochastic(&mut rng, y, x);
            if let Ok(initial) = stationary_distribution(&transition, TOL_STATIONARY) {
                return Self::new(transition, observation, initial);
            }
        }
        Err(ModelError::GenerationFailed {
            attempts: RANDOM_MODEL_ATTEMPTS,
        })
    }

    /// Parse the JSON model format. `pi0` defaults to the stationary
    /// distribution of `T` when absent. The loaded model is validated at
    /// [`TOL_LOADED`] and rejected with the full [`ValidationReport`].
    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let file = ModelFile {
            x: self.num_states(),
            y: self.num_symbols(),
            t: rows_of(&self.transition),
            o: rows_of(&self.observation),
            pi0: Some(self.initial.to_vec()),
        };
        serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

fn check_matrix(violations: &mut Vec<Violation>, name: &str, m: &Array2<f64>, tol: f64) {
    for ((i, j), &v) in m.indexed_iter() {
        if let Some(mag) = range_excess(v, tol) {
            violations.push(Violation {
                location: format!("{name}[{i},{j}]"),
                constraint: "entry in [0, 1]".into(),
                magnitude: mag,
            });
        }
    }
    for (j, col) in m.columns().into_iter().enumerate() {
        let sum: f64 = col.sum();
        if (sum - 1.0).abs() > tol {
            violations.push(Violation {
                location: format!("{name} column {j}"),
                constraint: "column sums to 1".into(),
                magnitude: (sum - 1.0).abs(),
            });
        }
    }
}

fn range_excess(v: f64, tol: f64) -> Option<f64> {
    if !v.is_finite() {
        return Some(f64::INFINITY);
    }
    if v < -tol {
        Some(-v)
    } else if v > 1.0 + tol {
        Some(v - 1.0)
    } else {
        None
    }
}

/// Stationary distribution of a column-stochastic matrix: the `pi` with
/// `T pi = pi`, `pi >= 0`, `sum(pi) = 1`.
///
/// Solved as the least-squares solution of `(T - I) pi = 0` augmented with
/// the normalization row, which is exact for the small state counts used
/// here. Errors when the unit eigenvalue is not simple within `tol`
/// (reducible or periodic chain) or when no nonnegative normalization is
/// possible.
pub fn stationary_distribution(
    transition: &Array2<f64>,
    tol: f64,
) -> Result<Array1<f64>, ModelError> {
    let x = transition.nrows();
    if x == 0 || transition.ncols() != x {
        return Err(ModelError::Dimensions {
            t_rows: x,
            t_cols: transition.ncols(),
            o_rows: 0,
            o_cols: 0,
            pi_len: 0,
        });
    }
    // Simplicity of the unit eigenvalue.
    let ball = tol.max(1e-12);
    let (eigenvalues, _) = transition.eig()?;
    let near_unit = eigenvalues
        .iter()
        .filter(|l| (*l - 1.0).norm() <= ball)
        .count();
    if near_unit > 1 {
        return Err(ModelError::NonUniqueStationary { near_unit, tol });
    }

    let mut a = Array2::<f64>::zeros((x + 1, x));
    for i in 0..x {
        for j in 0..x {
            a[(i, j)] = transition[(i, j)] - if i == j { 1.0 } else { 0.0 };
        }
    }
    a.row_mut(x).fill(1.0);
    let mut b = Array1::<f64>::zeros(x + 1);
    b[x] = 1.0;
    let solution = a
        .least_squares(&b)
        .map_err(|e| ModelError::StationaryNumerical(e.to_string()))?
        .solution;

    let mut pi = solution;
    let clamp = tol.max(1e-10);
    for v in pi.iter_mut() {
        if *v < 0.0 {
            if *v < -clamp {
                return Err(ModelError::StationaryNumerical(format!(
                    "negative stationary entry {v:.3e}"
                )));
            }
            *v = 0.0;
        }
    }
    let total = pi.sum();
    if total <= 0.0 {
        return Err(ModelError::StationaryNumerical("zero mass".into()));
    }
    pi.mapv_inplace(|v| v / total);

    let residual = transition
        .dot(&pi)
        .iter()
        .zip(pi.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if residual > tol {
        return Err(ModelError::StationaryNumerical(format!(
            "residual {residual:.3e} exceeds {tol:.3e}"
        )));
    }
    Ok(pi)
}

/// Inverse-CDF draw from a weight vector. Weights are assumed to sum to ~1;
/// tiny negative entries (within validation tolerance) are treated as zero.
fn draw_categorical(rng: &mut impl Rng, weights: ArrayView1<'_, f64>) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w.max(0.0);
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Matrix with each column drawn uniformly from the simplex.
pub(crate) fn random_stochastic(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((rows, cols));
    for j in 0..cols {
        let mut sum = 0.0;
        for i in 0..rows {
            let u: f64 = rng.gen();
            let e = (-(1.0 - u).ln()).max(f64::MIN_POSITIVE);
            m[(i, j)] = e;
            sum += e;
        }
        for i in 0..rows {
            m[(i, j)] /= sum;
        }
    }
    m
}

/// A sequence of consecutive observation symbols, recorded together with
/// the seed that generated it (absent for external data). Symbols are
/// zero-based: each lies in `0..alphabet_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationSequence {
    symbols: Vec<u32>,
    alphabet_size: usize,
    seed: Option<u64>,
}

impl ObservationSequence {
    pub fn new(
        symbols: Vec<u32>,
        alphabet_size: usize,
        seed: Option<u64>,
    ) -> Result<Self, ModelError> {
        for (position, &s) in symbols.iter().enumerate() {
            if s as usize >= alphabet_size {
                return Err(ModelError::SymbolOutOfRange {
                    symbol: s as usize,
                    position,
                    alphabet: alphabet_size,
                });
            }
        }
        Ok(Self {
            symbols,
            alphabet_size,
            seed,
        })
    }

    pub fn symbols(&self) -> &[u32] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let file: SequenceFile = serde_json::from_str(text)?;
        let symbols = file
            .symbols
            .iter()
            .enumerate()
            .map(|(position, &s)| {
                if s >= 1 && (s as usize) <= file.y {
                    Ok(s - 1)
                } else {
                    Err(ModelError::SymbolOutOfRange {
                        symbol: s as usize,
                        position,
                        alphabet: file.y,
                    })
                }
            })
            .collect::<Result<Vec<u32>, _>>()?;
        Ok(Self {
            symbols,
            alphabet_size: file.y,
            seed: file.seed,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// JSON with 1-based symbols, matching the `1..=Y` convention of the
    /// file formats.
    pub fn to_json_string(&self) -> String {
        let file = SequenceFile {
            y: self.alphabet_size,
            seed: self.seed,
            symbols: self.symbols.iter().map(|&s| s + 1).collect(),
        };
        serde_json::to_string(&file).expect("sequence serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceFile {
    #[serde(rename = "Y")]
    y: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    seed: Option<u64>,
    symbols: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(rename = "X")]
    x: usize,
    #[serde(rename = "Y")]
    y: usize,
    #[serde(rename = "T")]
    t: Vec<Vec<f64>>,
    #[serde(rename = "O")]
    o: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pi0: Option<Vec<f64>>,
}

impl ModelFile {
    fn into_model(self) -> Result<HmmModel, ModelError> {
        let t = matrix_from_rows(&self.t, self.x, self.x)?;
        let o = matrix_from_rows(&self.o, self.y, self.x)?;
        let pi0 = match self.pi0 {
            Some(v) => {
                if v.len() != self.x {
                    return Err(ModelError::Dimensions {
                        t_rows: self.x,
                        t_cols: self.x,
                        o_rows: self.y,
                        o_cols: self.x,
                        pi_len: v.len(),
                    });
                }
                Array1::from(v)
            }
            None => stationary_distribution(&t, TOL_STATIONARY)?,
        };
        let model = HmmModel::new(t, o, pi0)?;
        model.ensure_valid(TOL_LOADED)?;
        Ok(model)
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<Array2<f64>, ModelError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(ModelError::Dimensions {
            t_rows: rows.len(),
            t_cols: rows.first().map_or(0, Vec::len),
            o_rows: nrows,
            o_cols: ncols,
            pi_len: 0,
        });
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((nrows, ncols), flat).expect("shape checked above"))
}

fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}
