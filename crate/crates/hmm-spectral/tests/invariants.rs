//! Cross-module invariants: statistical consistency of the moment
//! estimators, alignment round trips and property-based checks on the
//! randomized constructors.

use hmm_spectral::bench;
use hmm_spectral::eval::{align_permutation, ParameterEstimate};
use hmm_spectral::model::{HmmModel, TOL_CONSTRUCTED};
use hmm_spectral::moments::{estimate_moments, exact_moments, triplets_sliding};
use hmm_spectral::seed::derive_seed;
use proptest::prelude::*;

fn max_entry_diff(a: &hmm_spectral::ndarray::Array2<f64>, b: &hmm_spectral::ndarray::Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max)
}

/// Empirical pair moments converge: for every one of 20 seeded trials the
/// max-entry error at a million triplets falls below the error at a
/// thousand (the contract asks for 95% of trials; the margin here is a
/// factor of ~30, so all trials clear it).
#[test]
fn moment_error_shrinks_from_1e3_to_1e6() {
    let model = HmmModel::random(3, 3, 424).unwrap();
    let exact = exact_moments(&model).unwrap();
    let mut successes = 0;
    let trials = 20u64;
    for trial in 0..trials {
        let err_at = |n: usize, tag: &str| {
            let seed = derive_seed(99, tag, trial);
            let seq = model.sample_sequence(n + 2, seed).unwrap();
            let est = estimate_moments(&triplets_sliding(&seq).unwrap()).unwrap();
            max_entry_diff(est.s21(), exact.s21())
        };
        if err_at(1_000_000, "cons-large") < err_at(1_000, "cons-small") {
            successes += 1;
        }
    }
    assert!(
        successes * 100 >= trials * 95,
        "error shrank in only {successes}/{trials} trials"
    );
}

/// Records streamed to the flush callback are complete rows at every
/// prefix: cutting the stream anywhere leaves a parseable CSV.
#[test]
fn interrupted_flush_leaves_parseable_prefix() {
    let config = bench::BenchmarkConfig {
        examples: vec!["low-3a".into(), "low-3b".into()],
        sample_sizes: vec![100, 200],
        repetitions: 2,
        ..bench::BenchmarkConfig::default()
    };
    let mut buffer = Vec::new();
    {
        let mut writer = csv::Writer::from_writer(&mut buffer);
        writer.write_record(bench::CSV_HEADER).unwrap();
        let mut seen = 0;
        bench::run_benchmark_with(&config, |record| {
            seen += 1;
            if seen <= 3 {
                bench::write_csv_record(&mut writer, record).unwrap();
                writer.flush().unwrap();
            }
            // Later records are dropped, as if the process died here.
        })
        .unwrap();
    }
    let prefix = bench::read_csv(buffer.as_slice()).unwrap();
    assert_eq!(prefix.len(), 3);
    assert!(prefix.iter().all(|r| r.example_id == "low-3a"));
}

/// Every cell of the sweep grid appears exactly once, error rows included.
#[test]
fn record_grid_is_complete() {
    let config = bench::BenchmarkConfig {
        examples: vec!["low-3a".into(), "high-3a".into()],
        sample_sizes: vec![100, 500],
        repetitions: 3,
        algorithms: vec![bench::Algorithm::Sl, bench::Algorithm::EmRandom],
        em_max_iter: 20,
        ..bench::BenchmarkConfig::default()
    };
    let records = bench::run_benchmark(&config).unwrap();
    assert_eq!(records.len(), 2 * 2 * 3 * 2);
    let mut cells: Vec<_> = records
        .iter()
        .map(|r| (r.example_id.clone(), r.algorithm, r.n, r.rep))
        .collect();
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), records.len(), "duplicate cells");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Randomly generated models always satisfy the stochasticity
    /// constraints at construction tolerance.
    #[test]
    fn random_models_validate(x in 1usize..5, y in 1usize..7, seed in 0u64..1000) {
        let model = HmmModel::random(x, y, seed).unwrap();
        let report = model.validate(TOL_CONSTRUCTED);
        prop_assert!(report.valid, "{:?}", report.violations);
    }

    /// Empirical moments are probability tables: nonnegative, each order
    /// summing to one, with the third-moment slices reproducing S31.
    #[test]
    fn empirical_moments_are_probability_tables(
        x in 1usize..4,
        y in 2usize..5,
        seed in 0u64..500,
        len in 10usize..400,
    ) {
        let model = HmmModel::random(x, y, seed).unwrap();
        let seq = model.sample_sequence(len.max(3), seed ^ 0xabcd).unwrap();
        let m = estimate_moments(&triplets_sliding(&seq).unwrap()).unwrap();
        prop_assert!(m.s1().iter().all(|&v| v >= 0.0));
        prop_assert!((m.s1().sum() - 1.0).abs() < 1e-9);
        prop_assert!((m.s21().sum() - 1.0).abs() < 1e-9);
        prop_assert!((m.s31().sum() - 1.0).abs() < 1e-9);
        let mut summed = hmm_spectral::ndarray::Array2::<f64>::zeros((y, y));
        for slice in m.s3y1() {
            summed += slice;
        }
        prop_assert!(max_entry_diff(&summed, m.s31()) < 1e-12);
    }

    /// Aligning a deliberately permuted copy of the truth recovers the
    /// permutation with zero error.
    #[test]
    fn alignment_undoes_any_permutation(seed in 0u64..500, code in 0usize..6) {
        let truth = HmmModel::random(3, 4, seed).unwrap();
        let perms = [
            [0usize, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0],
        ];
        let perm = perms[code];
        let mut est = ParameterEstimate::from(&truth);
        let source = ParameterEstimate::from(&truth);
        for j in 0..3 {
            for i in 0..4 {
                est.observation[(i, perm[j])] = source.observation[(i, j)];
            }
            est.initial[perm[j]] = source.initial[j];
            for i in 0..3 {
                est.transition[(perm[i], perm[j])] = source.transition[(i, j)];
            }
        }
        let aligned = align_permutation(&truth, &est).unwrap();
        prop_assert_eq!(aligned.permutation, perm.to_vec());
        prop_assert!(aligned.mse_o < 1e-30);
        prop_assert!(aligned.mse_t < 1e-30);
    }
}
