//! Baum-Welch baseline with the scaled forward-backward recursion.
//!
//! Underflow is handled by per-step normalization constants rather than
//! log-domain arithmetic, which keeps the transition posteriors cheap to
//! form. Re-estimated matrices stay column-stochastic by construction
//! because every column is divided by its own accumulated mass.

use ndarray::{Array1, Array2, Array3};
use thiserror::Error;

use crate::model::{
    random_stochastic, HmmModel, ModelError, ObservationSequence, ValidationReport, TOL_LOADED,
};
use crate::seed::rng_from_seed;

/// Default iteration cap, matching the reference implementation.
pub const DEFAULT_MAX_ITER: u32 = 500;
/// Default relative log-likelihood improvement below which EM stops.
pub const DEFAULT_LL_REL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmError {
    #[error("model invalid: {0}")]
    InvalidModel(ValidationReport),
    #[error("sequence length {got} is below the minimum {needed}")]
    SequenceTooShort { needed: usize, got: usize },
    #[error("alphabet mismatch: sequence uses {sequence} symbols, model emits {model}")]
    AlphabetMismatch { sequence: usize, model: usize },
    #[error("max_iter must be >= 1")]
    ZeroIterations,
    #[error("likelihood underflow: observation at step {step} has zero probability")]
    LikelihoodUnderflow { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl EmError {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::InvalidModel(_) => "invalid-model",
            Self::SequenceTooShort { .. } => "short-sequence",
            Self::AlphabetMismatch { .. } => "alphabet-mismatch",
            Self::ZeroIterations => "zero-iterations",
            Self::LikelihoodUnderflow { .. } => "likelihood-underflow",
            Self::Model(_) => "model-error",
        }
    }
}

/// Posteriors from one forward-backward pass.
///
/// `gamma[(k, i)]` is the probability of being in state `i` at step `k`
/// given the whole sequence; `xi[(k, i, j)]` the probability of moving from
/// `i` at step `k` to `j` at step `k + 1`.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub log_likelihood: f64,
    pub gamma: Array2<f64>,
    pub xi: Array3<f64>,
}

/// Result of a Baum-Welch run. The trace holds the log-likelihood of the
/// model entering each iteration, so consecutive entries certify EM
/// monotonicity.
#[derive(Debug, Clone)]
pub struct EmResult {
    pub model: HmmModel,
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: u32,
    pub converged: bool,
    /// Columns that lost all posterior mass and were reset to uniform.
    pub degenerate_resets: u32,
}

fn check_inputs(model: &HmmModel, seq: &ObservationSequence, min_len: usize) -> Result<(), EmError> {
    let report = model.validate(TOL_LOADED);
    if !report.valid {
        return Err(EmError::InvalidModel(report));
    }
    if seq.len() < min_len {
        return Err(EmError::SequenceTooShort {
            needed: min_len,
            got: seq.len(),
        });
    }
    if seq.alphabet_size() != model.num_symbols() {
        return Err(EmError::AlphabetMismatch {
            sequence: seq.alphabet_size(),
            model: model.num_symbols(),
        });
    }
    Ok(())
}

/// Scaled forward-backward pass. The per-step scale factors `s_k` give
/// `log_likelihood = sum_k ln(s_k)`; gamma rows sum to one and xi
/// marginalizes back to gamma by construction.
pub fn forward_backward(
    model: &HmmModel,
    seq: &ObservationSequence,
) -> Result<ForwardBackward, EmError> {
    check_inputs(model, seq, 1)?;
    let x = model.num_states();
    let n = seq.len();
    let t = model.transition();
    let o = model.observation();
    let obs = seq.symbols();

    let mut alpha = Array2::<f64>::zeros((n, x));
    let mut scale = Array1::<f64>::zeros(n);

    let first = obs[0] as usize;
    for i in 0..x {
        alpha[(0, i)] = model.initial()[i] * o[(first, i)];
    }
    normalize_step(&mut alpha, &mut scale, 0)?;
    for k in 1..n {
        let sym = obs[k] as usize;
        for j in 0..x {
            let mut acc = 0.0;
            for i in 0..x {
                acc += t[(j, i)] * alpha[(k - 1, i)];
            }
            alpha[(k, j)] = o[(sym, j)] * acc;
        }
        normalize_step(&mut alpha, &mut scale, k)?;
    }
    let log_likelihood = scale.iter().map(|s| s.ln()).sum();

    let mut beta = Array2::<f64>::zeros((n, x));
    beta.row_mut(n - 1).fill(1.0);
    for k in (0..n - 1).rev() {
        let sym = obs[k + 1] as usize;
        for i in 0..x {
            let mut acc = 0.0;
            for j in 0..x {
                acc += t[(j, i)] * o[(sym, j)] * beta[(k + 1, j)];
            }
            beta[(k, i)] = acc / scale[k + 1];
        }
    }

    let gamma = &alpha * &beta;
    let mut xi = Array3::<f64>::zeros((n.saturating_sub(1), x, x));
    for k in 0..n - 1 {
        let sym = obs[k + 1] as usize;
        let inv_scale = 1.0 / scale[k + 1];
        for i in 0..x {
            let a = alpha[(k, i)];
            for j in 0..x {
                xi[(k, i, j)] = a * t[(j, i)] * o[(sym, j)] * beta[(k + 1, j)] * inv_scale;
            }
        }
    }

    Ok(ForwardBackward {
        log_likelihood,
        gamma,
        xi,
    })
}

fn normalize_step(alpha: &mut Array2<f64>, scale: &mut Array1<f64>, k: usize) -> Result<(), EmError> {
    let total: f64 = alpha.row(k).sum();
    if total <= 0.0 {
        return Err(EmError::LikelihoodUnderflow { step: k });
    }
    scale[k] = total;
    alpha.row_mut(k).mapv_inplace(|v| v / total);
    Ok(())
}

/// Baum-Welch re-estimation starting from `init`.
///
/// Each iteration records the log-likelihood of the current model, then
/// re-estimates. Stops after `max_iter` iterations or once the relative
/// improvement drops below `ll_rel_tol`.
pub fn baum_welch(
    init: &HmmModel,
    seq: &ObservationSequence,
    max_iter: u32,
    ll_rel_tol: f64,
) -> Result<EmResult, EmError> {
    if max_iter == 0 {
        return Err(EmError::ZeroIterations);
    }
    check_inputs(init, seq, 2)?;
    let x = init.num_states();
    let y = init.num_symbols();
    let n = seq.len();
    let obs = seq.symbols();

    let mut model = init.clone();
    let mut trace = Vec::with_capacity(max_iter as usize);
    let mut converged = false;
    let mut degenerate_resets = 0u32;

    for _ in 0..max_iter {
        let fb = forward_backward(&model, seq)?;
        trace.push(fb.log_likelihood);

        let mut t_new = Array2::<f64>::zeros((x, x));
        for k in 0..n - 1 {
            for i in 0..x {
                for j in 0..x {
                    t_new[(j, i)] += fb.xi[(k, i, j)];
                }
            }
        }
        degenerate_resets += normalize_columns_or_reset(&mut t_new);

        let mut o_new = Array2::<f64>::zeros((y, x));
        for k in 0..n {
            let sym = obs[k] as usize;
            for i in 0..x {
                o_new[(sym, i)] += fb.gamma[(k, i)];
            }
        }
        degenerate_resets += normalize_columns_or_reset(&mut o_new);

        let mut pi_new = fb.gamma.row(0).to_owned();
        let pi_sum = pi_new.sum();
        pi_new.mapv_inplace(|v| v / pi_sum);

        model = HmmModel::new(t_new, o_new, pi_new)?;

        let len = trace.len();
        if len >= 2 {
            let prev = trace[len - 2];
            let delta = trace[len - 1] - prev;
            if delta.abs() / prev.abs().max(f64::MIN_POSITIVE) < ll_rel_tol {
                converged = true;
                break;
            }
        }
    }

    Ok(EmResult {
        model,
        iterations: trace.len() as u32,
        log_likelihood_trace: trace,
        converged,
        degenerate_resets,
    })
}

/// Divide each column by its mass; columns with no mass are reset to
/// uniform. Returns the number of resets.
fn normalize_columns_or_reset(m: &mut Array2<f64>) -> u32 {
    let rows = m.nrows();
    let mut resets = 0;
    for mut col in m.columns_mut() {
        let total: f64 = col.sum();
        if total < f64::MIN_POSITIVE {
            col.fill(1.0 / rows as f64);
            resets += 1;
        } else {
            col.mapv_inplace(|v| v / total);
        }
    }
    resets
}

/// Random initial guess: columns of `T` and `O` uniform on the simplex,
/// `pi0` uniform. Deterministic per seed.
pub fn random_init(x: usize, y: usize, seed: u64) -> Result<HmmModel, EmError> {
    if x == 0 || y == 0 {
        return Err(EmError::Model(ModelError::EmptyModel));
    }
    let mut rng = rng_from_seed(seed);
    let transition = random_stochastic(&mut rng, x, x);
    let observation = random_stochastic(&mut rng, y, x);
    let initial = Array1::from_elem(x, 1.0 / x as f64);
    Ok(HmmModel::new(transition, observation, initial)?)
}
