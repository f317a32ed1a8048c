//! Seeded benchmark sweeps over the bundled (or user-supplied) systems:
//! sample-size grids with repetitions for spectral learning and the two EM
//! variants, per-cell records with runtimes and validity flags, CSV
//! round-tripping and summary tables.
//!
//! Determinism contract: every record's seed derives from
//! `(master_seed, example, N, rep)` alone, so results are identical
//! regardless of execution order или job count. Wall-clock columns are the
//! one documented exception.

use std::collections::BTreeMap;
use std::io;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::em::{baum_welch, random_init};
use crate::eval::{align_permutation, cond_ot, spearman_rank, ParameterEstimate};
use crate::model::{HmmModel, ModelError, ObservationSequence};
use crate::moments::{estimate_moments, triplets_independent, triplets_sliding};
use crate::seed::derive_seed;
use crate::spectral::{spectral_learn, SpectralOptions};
use crate::systems::{bundled_example, ExampleSystem};

pub const CSV_HEADER: [&str; 12] = [
    "example_id",
    "algorithm",
    "N",
    "rep",
    "seed",
    "mse_O",
    "mse_T",
    "mse_pi",
    "valid",
    "error_tag",
    "runtime_s",
    "em_iterations",
];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("unknown example '{0}': not a bundled id and not a readable model file")]
    UnknownExample(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("records: {0}")]
    Records(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    Sl,
    EmRandom,
    EmTrue,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Self::Sl => "SL",
            Self::EmRandom => "EM-random",
            Self::EmTrue => "EM-true",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "SL" | "sl" => Some(Self::Sl),
            "EM-random" | "em-random" => Some(Self::EmRandom),
            "EM-true" | "em-true" => Some(Self::EmTrue),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletScheme {
    Sliding,
    Independent,
}

impl TripletScheme {
    /// Sequence length that yields exactly `n` triplets under this scheme.
    pub fn sequence_length(self, n: u64) -> usize {
        match self {
            Self::Sliding => n as usize + 2,
            Self::Independent => 3 * n as usize,
        }
    }
}

/// Sweep configuration. Defaults follow the evaluation protocol: decade
/// sample sizes up to 1e7 triplets, 20 repetitions, sliding windows,
/// EM capped at 500 iterations.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub examples: Vec<String>,
    pub sample_sizes: Vec<u64>,
    pub repetitions: u32,
    pub algorithms: Vec<Algorithm>,
    pub master_seed: u64,
    pub triplet_scheme: TripletScheme,
    pub em_max_iter: u32,
    pub em_ll_rel_tol: f64,
    pub spectral: SpectralOptions,
    pub jobs: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            examples: crate::systems::bundled_ids()
                .iter()
                .map(|s| s.to_string())
                .collect(),
            sample_sizes: vec![1_000, 10_000, 100_000, 1_000_000, 10_000_000],
            repetitions: 20,
            algorithms: vec![Algorithm::Sl],
            master_seed: 0,
            triplet_scheme: TripletScheme::Sliding,
            em_max_iter: crate::em::DEFAULT_MAX_ITER,
            em_ll_rel_tol: crate::em::DEFAULT_LL_REL_TOL,
            spectral: SpectralOptions::default(),
            jobs: 1,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.examples.is_empty() {
            return Err(BenchError::Config("no examples selected".into()));
        }
        if self.sample_sizes.is_empty() {
            return Err(BenchError::Config("no sample sizes".into()));
        }
        if !self.sample_sizes.windows(2).all(|w| w[0] < w[1]) {
            return Err(BenchError::Config(
                "sample sizes must be strictly increasing".into(),
            ));
        }
        if self.repetitions == 0 {
            return Err(BenchError::Config("repetitions must be >= 1".into()));
        }
        if self.algorithms.is_empty() {
            return Err(BenchError::Config("no algorithms selected".into()));
        }
        Ok(())
    }
}

/// One (example, algorithm, N, rep) result. `seed` is the sequence seed of
/// the cell, shared by every algorithm run on that cell so comparisons are
/// paired. Error rows carry a tag and empty metric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRecord {
    pub example_id: String,
    pub algorithm: Algorithm,
    pub n: u64,
    pub rep: u32,
    pub seed: u64,
    pub mse_o: Option<f64>,
    pub mse_t: Option<f64>,
    pub mse_pi: Option<f64>,
    pub stochastic_valid: Option<bool>,
    pub error_tag: Option<String>,
    pub runtime_seconds: f64,
    pub em_iterations: Option<u32>,
}

impl BenchmarkRecord {
    /// Equality ignoring the wall-clock column, which is exempt from the
    /// determinism contract.
    pub fn same_modulo_runtime(&self, other: &Self) -> bool {
        self.example_id == other.example_id
            && self.algorithm == other.algorithm
            && self.n == other.n
            && self.rep == other.rep
            && self.seed == other.seed
            && self.mse_o == other.mse_o
            && self.mse_t == other.mse_t
            && self.mse_pi == other.mse_pi
            && self.stochastic_valid == other.stochastic_valid
            && self.error_tag == other.error_tag
            && self.em_iterations == other.em_iterations
    }
}

struct ResolvedExample {
    id: String,
    model: HmmModel,
}

fn resolve_examples(ids: &[String]) -> Result<Vec<ResolvedExample>, BenchError> {
    let mut resolved = Vec::with_capacity(ids.len());
    for id in ids {
        let model = match bundled_example(id) {
            Some(system) => system.model,
            None => HmmModel::load(id).map_err(|_| BenchError::UnknownExample(id.clone()))?,
        };
        resolved.push(ResolvedExample {
            id: id.clone(),
            model,
        });
    }
    resolved.sort_by(|a, b| a.id.cmp(&b.id));
    if resolved.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(BenchError::Config("duplicate example ids".into()));
    }
    Ok(resolved)
}

#[derive(Clone)]
struct Cell<'a> {
    example: &'a ResolvedExample,
    algorithm: Algorithm,
    n: u64,
    rep: u32,
}

/// Run the whole sweep, invoking `on_record` for every finished record in
/// canonical order (example, algorithm, N, rep) as soon as it is final, so
/// callers can flush incrementally.
pub fn run_benchmark_with<F>(
    config: &BenchmarkConfig,
    mut on_record: F,
) -> Result<Vec<BenchmarkRecord>, BenchError>
where
    F: FnMut(&BenchmarkRecord),
{
    config.validate()?;
    let examples = resolve_examples(&config.examples)?;
    let mut algorithms = config.algorithms.clone();
    algorithms.sort();
    algorithms.dedup();

    let mut cells = Vec::new();
    for example in &examples {
        for &algorithm in &algorithms {
            for &n in &config.sample_sizes {
                for rep in 0..config.repetitions {
                    cells.push(Cell {
                        example,
                        algorithm,
                        n,
                        rep,
                    });
                }
            }
        }
    }

    let mut records = Vec::with_capacity(cells.len());
    if config.jobs <= 1 {
        for cell in &cells {
            let record = run_cell(config, cell);
            on_record(&record);
            records.push(record);
        }
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| BenchError::Config(e.to_string()))?;
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::scope(|scope| {
            scope.spawn(|| {
                use rayon::prelude::*;
                pool.install(|| {
                    cells
                        .par_iter()
                        .enumerate()
                        .for_each_with(tx, |tx, (index, cell)| {
                            let record = run_cell(config, cell);
                            let _ = tx.send((index, record));
                        });
                });
            });
            // Reorder buffer: emit records in canonical order as the
            // prefix completes.
            let mut pending = BTreeMap::new();
            let mut next = 0usize;
            for (index, record) in rx {
                pending.insert(index, record);
                while let Some(record) = pending.remove(&next) {
                    on_record(&record);
                    records.push(record);
                    next += 1;
                }
            }
        });
    }
    Ok(records)
}

pub fn run_benchmark(config: &BenchmarkConfig) -> Result<Vec<BenchmarkRecord>, BenchError> {
    run_benchmark_with(config, |_| {})
}

fn run_cell(config: &BenchmarkConfig, cell: &Cell<'_>) -> BenchmarkRecord {
    let seq_tag = format!("sequence/{}/{}", cell.example.id, cell.n);
    let seed = derive_seed(config.master_seed, &seq_tag, u64::from(cell.rep));
    let mut record = BenchmarkRecord {
        example_id: cell.example.id.clone(),
        algorithm: cell.algorithm,
        n: cell.n,
        rep: cell.rep,
        seed,
        mse_o: None,
        mse_t: None,
        mse_pi: None,
        stochastic_valid: None,
        error_tag: None,
        runtime_seconds: 0.0,
        em_iterations: None,
    };

    let length = config.triplet_scheme.sequence_length(cell.n);
    let sequence = match cell.example.model.sample_sequence(length, seed) {
        Ok(seq) => seq,
        Err(_) => {
            record.error_tag = Some("sampling".into());
            return record;
        }
    };

    match cell.algorithm {
        Algorithm::Sl => run_sl(config, cell, &sequence, &mut record),
        Algorithm::EmRandom | Algorithm::EmTrue => run_em(config, cell, &sequence, &mut record),
    }
    record
}

fn run_sl(
    config: &BenchmarkConfig,
    cell: &Cell<'_>,
    sequence: &ObservationSequence,
    record: &mut BenchmarkRecord,
) {
    let truth = &cell.example.model;
    let sl_tag = format!("sl/{}/{}", cell.example.id, cell.n);
    let sl_seed = derive_seed(config.master_seed, &sl_tag, u64::from(cell.rep));

    let started = Instant::now();
    let estimate = (|| {
        let triplets = match config.triplet_scheme {
            TripletScheme::Sliding => triplets_sliding(sequence),
            TripletScheme::Independent => triplets_independent(sequence),
        }
        .map_err(|_| "insufficient-data")?;
        let moments = estimate_moments(&triplets).map_err(|_| "insufficient-data")?;
        spectral_learn(&moments, truth.num_states(), sl_seed, &config.spectral)
            .map_err(|e| e.tag())
    })();
    record.runtime_seconds = started.elapsed().as_secs_f64();

    match estimate {
        Ok(est) => {
            record.stochastic_valid = Some(est.validity.stochastic_valid);
            match align_permutation(truth, &ParameterEstimate::from(&est)) {
                Ok(aligned) => {
                    record.mse_o = Some(aligned.mse_o);
                    record.mse_t = Some(aligned.mse_t);
                    record.mse_pi = Some(aligned.mse_pi);
                }
                Err(_) => record.error_tag = Some("alignment".into()),
            }
        }
        Err(tag) => record.error_tag = Some(tag.into()),
    }
}

fn run_em(
    config: &BenchmarkConfig,
    cell: &Cell<'_>,
    sequence: &ObservationSequence,
    record: &mut BenchmarkRecord,
) {
    let truth = &cell.example.model;
    let init = match cell.algorithm {
        Algorithm::EmTrue => Ok(truth.clone()),
        _ => {
            let tag = format!("em-init/{}/{}", cell.example.id, cell.n);
            let init_seed = derive_seed(config.master_seed, &tag, u64::from(cell.rep));
            random_init(truth.num_states(), truth.num_symbols(), init_seed)
        }
    };
    let init = match init {
        Ok(m) => m,
        Err(e) => {
            record.error_tag = Some(e.tag().into());
            return;
        }
    };

    let started = Instant::now();
    let result = baum_welch(&init, sequence, config.em_max_iter, config.em_ll_rel_tol);
    record.runtime_seconds = started.elapsed().as_secs_f64();

    match result {
        Ok(em) => {
            record.em_iterations = Some(em.iterations);
            record.stochastic_valid = Some(true);
            match align_permutation(truth, &ParameterEstimate::from(&em.model)) {
                Ok(aligned) => {
                    record.mse_o = Some(aligned.mse_o);
                    record.mse_t = Some(aligned.mse_t);
                    record.mse_pi = Some(aligned.mse_pi);
                }
                Err(_) => record.error_tag = Some("alignment".into()),
            }
        }
        Err(e) => record.error_tag = Some(e.tag().into()),
    }
}

// --- CSV ---------------------------------------------------------------

pub fn write_csv<W: io::Write>(records: &[BenchmarkRecord], writer: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in records {
        write_csv_record(&mut w, r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_record<W: io::Write>(
    w: &mut csv::Writer<W>,
    r: &BenchmarkRecord,
) -> Result<(), BenchError> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record([
        r.example_id.as_str(),
        r.algorithm.label(),
        &r.n.to_string(),
        &r.rep.to_string(),
        &r.seed.to_string(),
        &opt(r.mse_o),
        &opt(r.mse_t),
        &opt(r.mse_pi),
        &r.stochastic_valid.map(|v| v.to_string()).unwrap_or_default(),
        r.error_tag.as_deref().unwrap_or(""),
        &r.runtime_seconds.to_string(),
        &r.em_iterations.map(|v| v.to_string()).unwrap_or_default(),
    ])?;
    Ok(())
}

pub fn read_csv<R: io::Read>(reader: R) -> Result<Vec<BenchmarkRecord>, BenchError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut records = Vec::new();
    for row in r.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("");
        let parse_opt = |i: usize| -> Option<f64> {
            let s = get(i);
            if s.is_empty() {
                None
            } else {
                s.parse().ok()
            }
        };
        records.push(BenchmarkRecord {
            example_id: get(0).to_string(),
            algorithm: Algorithm::parse(get(1))
                .ok_or_else(|| BenchError::Records(format!("bad algorithm '{}'", get(1))))?,
            n: get(2)
                .parse()
                .map_err(|_| BenchError::Records(format!("bad N '{}'", get(2))))?,
            rep: get(3)
                .parse()
                .map_err(|_| BenchError::Records(format!("bad rep '{}'", get(3))))?,
            seed: get(4)
                .parse()
                .map_err(|_| BenchError::Records(format!("bad seed '{}'", get(4))))?,
            mse_o: parse_opt(5),
            mse_t: parse_opt(6),
            mse_pi: parse_opt(7),
            stochastic_valid: match get(8) {
                "" => None,
                s => Some(s == "true"),
            },
            error_tag: match get(9) {
                "" => None,
                s => Some(s.to_string()),
            },
            runtime_seconds: get(10).parse().unwrap_or(0.0),
            em_iterations: match get(11) {
                "" => None,
                s => s.parse().ok(),
            },
        });
    }
    Ok(records)
}

// --- Summaries ----------------------------------------------------------

/// Mean errors per (example, algorithm, N) plus the SL invalid fraction.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub example_id: String,
    pub algorithm: &'static str,
    pub n: u64,
    pub runs: u32,
    pub errors: u32,
    pub mean_mse_o: Option<f64>,
    pub mean_mse_t: Option<f64>,
    pub mean_mse_pi: Option<f64>,
    pub invalid_fraction: Option<f64>,
}

/// One row of the condition-number table: examples sorted by mean SL error
/// of the observation matrix at the largest swept N, worst first.
#[derive(Debug, Clone, Serialize)]
pub struct CondTableRow {
    pub example_id: String,
    pub mean_mse_o: f64,
    pub cond_ot: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub largest_n: u64,
    pub cond_table: Vec<CondTableRow>,
    /// Spearman rank correlation between cond(OT) and the mean SL
    /// observation error at the largest N, when at least two examples
    /// provide both.
    pub spearman_cond_vs_mse_o: Option<f64>,
}

/// Aggregate records. `include_invalid` controls whether stochastically
/// invalid runs enter the MSE means (they do by default; excluding them is
/// a sensitivity knob). Error rows never contribute metric values.
pub fn summarize(
    records: &[BenchmarkRecord],
    systems: &[ExampleSystem],
    include_invalid: bool,
) -> Result<Summary, BenchError> {
    if records.is_empty() {
        return Err(BenchError::Records("no records to summarize".into()));
    }
    let mut groups: BTreeMap<(String, Algorithm, u64), Vec<&BenchmarkRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.example_id.clone(), r.algorithm, r.n))
            .or_default()
            .push(r);
    }

    let mean = |values: &[f64]| -> Option<f64> {
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };

    let mut rows = Vec::new();
    for ((example_id, algorithm, n), group) in &groups {
        let errors = group.iter().filter(|r| r.error_tag.is_some()).count() as u32;
        let usable: Vec<&&BenchmarkRecord> = group
            .iter()
            .filter(|r| {
                r.error_tag.is_none()
                    && (include_invalid || r.stochastic_valid != Some(false))
            })
            .collect();
        let collect = |f: fn(&BenchmarkRecord) -> Option<f64>| -> Vec<f64> {
            usable.iter().filter_map(|r| f(r)).collect()
        };
        let invalid_fraction = if *algorithm == Algorithm::Sl {
            let flags: Vec<&&BenchmarkRecord> = group
                .iter()
                .filter(|r| r.stochastic_valid.is_some())
                .collect();
            if flags.is_empty() {
                None
            } else {
                Some(
                    flags
                        .iter()
                        .filter(|r| r.stochastic_valid == Some(false))
                        .count() as f64
                        / flags.len() as f64,
                )
            }
        } else {
            None
        };
        rows.push(SummaryRow {
            example_id: example_id.clone(),
            algorithm: algorithm.label(),
            n: *n,
            runs: group.len() as u32,
            errors,
            mean_mse_o: mean(&collect(|r| r.mse_o)),
            mean_mse_t: mean(&collect(|r| r.mse_t)),
            mean_mse_pi: mean(&collect(|r| r.mse_pi)),
            invalid_fraction,
        });
    }

    let largest_n = records.iter().map(|r| r.n).max().unwrap_or(0);
    let cond_by_id: BTreeMap<&str, f64> =
        systems.iter().map(|s| (s.id, s.cond_ot)).collect();

    let mut cond_table: Vec<CondTableRow> = rows
        .iter()
        .filter(|row| row.algorithm == Algorithm::Sl.label() && row.n == largest_n)
        .filter_map(|row| {
            row.mean_mse_o.map(|m| CondTableRow {
                example_id: row.example_id.clone(),
                mean_mse_o: m,
                cond_ot: cond_by_id.get(row.example_id.as_str()).copied().or_else(|| {
                    HmmModel::load(&row.example_id).ok().map(|m| cond_ot(&m))
                }),
            })
        })
        .collect();
    cond_table.sort_by(|a, b| b.mean_mse_o.total_cmp(&a.mean_mse_o));

    let paired: Vec<(f64, f64)> = cond_table
        .iter()
        .filter_map(|row| row.cond_ot.map(|c| (c, row.mean_mse_o)))
        .collect();
    let spearman = if paired.len() >= 2 {
        let (conds, mses): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
        spearman_rank(&conds, &mses).ok()
    } else {
        None
    };

    Ok(Summary {
        rows,
        largest_n,
        cond_table,
        spearman_cond_vs_mse_o: spearman,
    })
}
