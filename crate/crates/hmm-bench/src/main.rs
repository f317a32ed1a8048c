//! Command-line runner for HMM identification experiments: sequence
//! simulation, moment estimation, spectral learning, Baum-Welch, condition
//! numbers, benchmark sweeps and summaries.
//!
//! Subcommands write JSON (single results) or CSV (sweep records); the
//! `bench` sweep flushes records incrementally and exits 0 even when
//! individual cells fail, so long sweeps always leave a parseable prefix.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::Serialize;

use hmm_spectral::bench::{
    read_csv, run_benchmark_with, summarize, write_csv_record, Algorithm, BenchmarkConfig,
    Summary, TripletScheme as LibScheme, CSV_HEADER,
};
use hmm_spectral::em::{baum_welch, random_init, DEFAULT_LL_REL_TOL, DEFAULT_MAX_ITER};
use hmm_spectral::eval::{align_permutation, cond_ot, ParameterEstimate};
use hmm_spectral::model::{HmmModel, ModelError, ObservationSequence};
use hmm_spectral::moments::{
    estimate_moments, exact_moments, triplets_independent, triplets_sliding, MomentSet,
};
use hmm_spectral::spectral::{spectral_learn, SpectralOptions};
use hmm_spectral::systems::{bundled_example, bundled_examples};

#[derive(Parser)]
#[command(
    name = "hmm-bench",
    about = "Spectral learning and Baum-Welch identification of hidden Markov models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a consecutive observation sequence from a model.
    Simulate(SimulateArgs),
    /// Estimate moments from a sequence, or compute exact moments of a model.
    Moments(MomentsArgs),
    /// Run spectral learning on moments or on a raw sequence.
    Sl(SlArgs),
    /// Run Baum-Welch on a sequence.
    Em(EmArgs),
    /// Print cond(OT) for models.
    Cond(CondArgs),
    /// Run a benchmark sweep, writing one CSV row per (example, algorithm, N, rep).
    Bench(BenchArgs),
    /// Aggregate a benchmark CSV into summary tables.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct ModelRef {
    /// Bundled example id (see `cond --all` for the list).
    #[arg(long, conflicts_with = "model")]
    example: Option<String>,
    /// Path to a model JSON file.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl ModelRef {
    fn resolve(&self) -> Result<(String, HmmModel)> {
        match (&self.example, &self.model) {
            (Some(id), None) => {
                let system = bundled_example(id)
                    .ok_or_else(|| anyhow!("no bundled example named '{id}'"))?;
                Ok((id.clone(), system.model))
            }
            (None, Some(path)) => {
                let model = load_model(path)?;
                Ok((path.display().to_string(), model))
            }
            _ => bail!("specify exactly one of --example or --model"),
        }
    }
}

/// Load a model file; a stochasticity rejection prints the serialized
/// validation report before failing.
fn load_model(path: &Path) -> Result<HmmModel> {
    match HmmModel::load(path) {
        Ok(model) => Ok(model),
        Err(ModelError::Invalid(report)) => {
            eprintln!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            bail!("model file {} rejected by validation", path.display());
        }
        Err(e) => Err(e).with_context(|| format!("loading {}", path.display())),
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelRef,
    /// Sequence length.
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Sliding,
    Independent,
}

impl From<SchemeArg> for LibScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Sliding => LibScheme::Sliding,
            SchemeArg::Independent => LibScheme::Independent,
        }
    }
}

#[derive(Args)]
struct MomentsArgs {
    /// Sequence JSON file to estimate from.
    #[arg(long, conflicts_with_all = ["example", "model"])]
    seq: Option<PathBuf>,
    /// Triplet extraction scheme.
    #[arg(long, value_enum, default_value = "sliding")]
    scheme: SchemeArg,
    #[command(flatten)]
    model: ModelRef,
    /// Compute exact analytic moments of the referenced model.
    #[arg(long)]
    exact: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SpectralFlags {
    /// Relative singular-value cutoff for pseudo-inverses.
    #[arg(long, default_value_t = SpectralOptions::default().pinv_rel_tol)]
    pinv_tol: f64,
    /// Resample threshold: min/max eigenvalue-gap ratio.
    #[arg(long, default_value_t = SpectralOptions::default().eig_gap_tol)]
    eig_gap_tol: f64,
    /// Resample budget for the random combination.
    #[arg(long, default_value_t = SpectralOptions::default().max_resamples)]
    max_resamples: u32,
    /// Validity threshold on negative real parts.
    #[arg(long, default_value_t = SpectralOptions::default().tol_neg)]
    tol_neg: f64,
    /// Validity threshold on imaginary magnitudes.
    #[arg(long, default_value_t = SpectralOptions::default().tol_imag)]
    tol_imag: f64,
}

impl SpectralFlags {
    fn options(&self) -> SpectralOptions {
        SpectralOptions {
            pinv_rel_tol: self.pinv_tol,
            eig_gap_tol: self.eig_gap_tol,
            max_resamples: self.max_resamples,
            tol_neg: self.tol_neg,
            tol_imag: self.tol_imag,
            ..SpectralOptions::default()
        }
    }
}

#[derive(Args)]
struct SlArgs {
    /// Moments JSON file.
    #[arg(long, conflicts_with = "seq")]
    moments: Option<PathBuf>,
    /// Sequence JSON file (moments estimated on the fly).
    #[arg(long)]
    seq: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sliding")]
    scheme: SchemeArg,
    /// Number of hidden states X.
    #[arg(long)]
    states: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    spectral: SpectralFlags,
    /// Ground truth for aligned error reporting (bundled id or file path).
    #[arg(long)]
    truth: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    True,
    File,
}

#[derive(Args)]
struct EmArgs {
    /// Sequence JSON file.
    #[arg(long)]
    seq: PathBuf,
    /// Initial guess: random matrices, the true model, or a model file.
    #[arg(long, value_enum, default_value = "random")]
    init: InitArg,
    /// Model file for --init file.
    #[arg(long)]
    init_file: Option<PathBuf>,
    #[command(flatten)]
    model: ModelRef,
    /// Hidden-state count for random initialization (defaults to the
    /// truth model's when one is given).
    #[arg(long)]
    states: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: u32,
    #[arg(long, default_value_t = DEFAULT_LL_REL_TOL)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CondArgs {
    #[command(flatten)]
    model: ModelRef,
    /// Print every bundled example.
    #[arg(long, conflicts_with_all = ["example", "model"])]
    all: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated bundled ids and/or model file paths, or "all".
    #[arg(long, default_value = "all")]
    examples: String,
    /// Comma-separated triplet counts (strictly increasing).
    #[arg(long, default_value = "1000,10000,100000,1000000,10000000")]
    sizes: String,
    #[arg(long, default_value_t = 20)]
    reps: u32,
    /// Comma-separated subset of SL, EM-random, EM-true.
    #[arg(long, default_value = "SL")]
    algorithms: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "sliding")]
    scheme: SchemeArg,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    em_max_iter: u32,
    #[arg(long, default_value_t = DEFAULT_LL_REL_TOL)]
    em_tol: f64,
    #[command(flatten)]
    spectral: SpectralFlags,
    /// Concurrent cells (1 = sequential).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// CI profile: drop sample sizes above 1e5.
    #[arg(long)]
    quick: bool,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SummaryFormat {
    Table,
    Csv,
    Json,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Benchmark CSV produced by `bench`.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: SummaryFormat,
    /// Exclude stochastically invalid runs from the MSE means.
    #[arg(long)]
    exclude_invalid: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(args) => simulate(args),
        Command::Moments(args) => moments(args),
        Command::Sl(args) => sl(args),
        Command::Em(args) => em(args),
        Command::Cond(args) => cond(args),
        Command::Bench(args) => bench(args),
        Command::Summarize(args) => summarize_cmd(args),
    }
}

fn write_output(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let (_, model) = args.model.resolve()?;
    let seq = model.sample_sequence(args.length, args.seed)?;
    write_output(args.out.as_ref(), &seq.to_json_string())
}

fn moments(args: MomentsArgs) -> Result<()> {
    let moments = if args.exact {
        let (_, model) = args.model.resolve()?;
        exact_moments(&model)?
    } else {
        let path = args
            .seq
            .as_ref()
            .ok_or_else(|| anyhow!("need --seq FILE, or --exact with a model"))?;
        let seq = ObservationSequence::load(path)?;
        let triplets = match args.scheme {
            SchemeArg::Sliding => triplets_sliding(&seq)?,
            SchemeArg::Independent => triplets_independent(&seq)?,
        };
        estimate_moments(&triplets)?
    };
    write_output(args.out.as_ref(), &moments.to_json_string())
}

#[derive(Serialize)]
struct EstimateFile {
    #[serde(rename = "X")]
    x: usize,
    #[serde(rename = "Y")]
    y: usize,
    seed: u64,
    /// Complex entries serialize as [re, im] pairs.
    #[serde(rename = "O_hat")]
    o_hat: Vec<Vec<Complex64>>,
    #[serde(rename = "T_hat")]
    t_hat: Vec<Vec<Complex64>>,
    pi_hat: Vec<Complex64>,
    g: Vec<f64>,
    validity: hmm_spectral::ValidityReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    aligned_mse: Option<AlignedMse>,
}

#[derive(Serialize)]
struct AlignedMse {
    mse_o: f64,
    mse_t: f64,
    mse_pi: f64,
    permutation: Vec<usize>,
}

fn complex_rows(m: &hmm_spectral::ndarray::Array2<Complex64>) -> Vec<Vec<Complex64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn sl(args: SlArgs) -> Result<()> {
    let moments: MomentSet = match (&args.moments, &args.seq) {
        (Some(path), None) => MomentSet::load(path)?,
        (None, Some(path)) => {
            let seq = ObservationSequence::load(path)?;
            let triplets = match args.scheme {
                SchemeArg::Sliding => triplets_sliding(&seq)?,
                SchemeArg::Independent => triplets_independent(&seq)?,
            };
            estimate_moments(&triplets)?
        }
        _ => bail!("specify exactly one of --moments or --seq"),
    };
    let estimate = spectral_learn(&moments, args.states, args.seed, &args.spectral.options())?;

    let aligned_mse = match &args.truth {
        Some(reference) => {
            let truth = match bundled_example(reference) {
                Some(system) => system.model,
                None => load_model(Path::new(reference))?,
            };
            let aligned = align_permutation(&truth, &ParameterEstimate::from(&estimate))?;
            Some(AlignedMse {
                mse_o: aligned.mse_o,
                mse_t: aligned.mse_t,
                mse_pi: aligned.mse_pi,
                permutation: aligned.permutation,
            })
        }
        None => None,
    };

    let file = EstimateFile {
        x: estimate.num_states(),
        y: estimate.num_symbols(),
        seed: estimate.seed,
        o_hat: complex_rows(&estimate.o_hat),
        t_hat: complex_rows(&estimate.t_hat),
        pi_hat: estimate.pi_hat.to_vec(),
        g: estimate.g.to_vec(),
        validity: estimate.validity.clone(),
        aligned_mse,
    };
    write_output(
        args.out.as_ref(),
        &serde_json::to_string_pretty(&file).expect("estimate serializes"),
    )
}

#[derive(Serialize)]
struct EmFile {
    model: serde_json::Value,
    log_likelihood_trace: Vec<f64>,
    iterations: u32,
    converged: bool,
    degenerate_resets: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    aligned_mse: Option<AlignedMse>,
}

fn em(args: EmArgs) -> Result<()> {
    let seq = ObservationSequence::load(&args.seq)?;
    let truth = match (&args.model.example, &args.model.model) {
        (None, None) => None,
        _ => Some(args.model.resolve()?.1),
    };
    let init = match args.init {
        InitArg::Random => {
            let states = args
                .states
                .or_else(|| truth.as_ref().map(|m| m.num_states()))
                .ok_or_else(|| anyhow!("--init random needs --states or a truth model"))?;
            random_init(states, seq.alphabet_size(), args.seed)?
        }
        InitArg::True => truth
            .clone()
            .ok_or_else(|| anyhow!("--init true needs --example or --model"))?,
        InitArg::File => {
            let path = args
                .init_file
                .as_ref()
                .ok_or_else(|| anyhow!("--init file needs --init-file"))?;
            load_model(path)?
        }
    };

    let result = baum_welch(&init, &seq, args.max_iter, args.tol)?;
    let aligned_mse = match &truth {
        Some(truth) => {
            let aligned = align_permutation(truth, &ParameterEstimate::from(&result.model))?;
            Some(AlignedMse {
                mse_o: aligned.mse_o,
                mse_t: aligned.mse_t,
                mse_pi: aligned.mse_pi,
                permutation: aligned.permutation,
            })
        }
        None => None,
    };
    let file = EmFile {
        model: serde_json::from_str(&result.model.to_json_string()).expect("model serializes"),
        log_likelihood_trace: result.log_likelihood_trace,
        iterations: result.iterations,
        converged: result.converged,
        degenerate_resets: result.degenerate_resets,
        aligned_mse,
    };
    write_output(
        args.out.as_ref(),
        &serde_json::to_string_pretty(&file).expect("result serializes"),
    )
}

fn cond(args: CondArgs) -> Result<()> {
    if args.all {
        for system in bundled_examples() {
            println!(
                "{:10} Y={:2}  class={:<6}  cond(OT) = {:.2}",
                system.id,
                system.model.num_symbols(),
                format!("{:?}", system.intended_cond_class).to_lowercase(),
                system.cond_ot
            );
        }
        return Ok(());
    }
    let (name, model) = args.model.resolve()?;
    println!("{name}: cond(OT) = {:.6}", cond_ot(&model));
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let examples: Vec<String> = if args.examples == "all" {
        hmm_spectral::systems::bundled_ids()
            .iter()
            .map(|s| s.to_string())
            .collect()
    } else {
        args.examples.split(',').map(|s| s.trim().to_string()).collect()
    };
    let mut sample_sizes: Vec<u64> = args
        .sizes
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| anyhow!("bad size '{s}'")))
        .collect::<Result<_>>()?;
    if args.quick {
        sample_sizes.retain(|&n| n <= 100_000);
        if sample_sizes.is_empty() {
            bail!("--quick removed every sample size");
        }
    }
    let algorithms: Vec<Algorithm> = args
        .algorithms
        .split(',')
        .map(|s| {
            Algorithm::parse(s.trim())
                .ok_or_else(|| anyhow!("bad algorithm '{s}' (SL, EM-random, EM-true)"))
        })
        .collect::<Result<_>>()?;

    let config = BenchmarkConfig {
        examples,
        sample_sizes,
        repetitions: args.reps,
        algorithms,
        master_seed: args.seed,
        triplet_scheme: args.scheme.into(),
        em_max_iter: args.em_max_iter,
        em_ll_rel_tol: args.em_tol,
        spectral: args.spectral.options(),
        jobs: args.jobs.max(1),
    };

    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(CSV_HEADER)?;
    writer.flush()?;

    let mut errored = 0usize;
    let records = run_benchmark_with(&config, |record| {
        if record.error_tag.is_some() {
            errored += 1;
        }
        // Flush per record so an interrupted sweep leaves a parseable prefix.
        write_csv_record(&mut writer, record).expect("csv row");
        writer.flush().expect("csv flush");
    })?;
    drop(writer);

    eprintln!(
        "bench: {} records ({} with error tags){}",
        records.len(),
        errored,
        args.out
            .as_ref()
            .map(|p| format!(" -> {}", p.display()))
            .unwrap_or_default()
    );
    Ok(())
}

fn summarize_cmd(args: SummarizeArgs) -> Result<()> {
    let file = File::open(&args.records)
        .with_context(|| format!("opening {}", args.records.display()))?;
    let records = read_csv(file)?;
    let systems = bundled_examples();
    let summary = summarize(&records, &systems, !args.exclude_invalid)?;
    let text = match args.format {
        SummaryFormat::Json => serde_json::to_string_pretty(&summary).expect("summary serializes"),
        SummaryFormat::Csv => summary_csv(&summary)?,
        SummaryFormat::Table => summary_table(&summary),
    };
    write_output(args.out.as_ref(), &text)
}

fn summary_csv(summary: &Summary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "example_id",
        "algorithm",
        "N",
        "runs",
        "errors",
        "mean_mse_O",
        "mean_mse_T",
        "mean_mse_pi",
        "invalid_fraction",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &summary.rows {
        w.write_record([
            row.example_id.as_str(),
            row.algorithm,
            &row.n.to_string(),
            &row.runs.to_string(),
            &row.errors.to_string(),
            &opt(row.mean_mse_o),
            &opt(row.mean_mse_t),
            &opt(row.mean_mse_pi),
            &opt(row.invalid_fraction),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?).expect("csv is utf8"))
}

fn summary_table(summary: &Summary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:<10} {:>9} {:>5} {:>6} {:>12} {:>12} {:>16}\n",
        "example", "algorithm", "N", "runs", "errors", "mean mse_O", "mean mse_T", "invalid_fraction"
    ));
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.3e}")).unwrap_or_else(|| "-".into());
    for row in &summary.rows {
        out.push_str(&format!(
            "{:<12} {:<10} {:>9} {:>5} {:>6} {:>12} {:>12} {:>16}\n",
            row.example_id,
            row.algorithm,
            row.n,
            row.runs,
            row.errors,
            opt(row.mean_mse_o),
            opt(row.mean_mse_t),
            row.invalid_fraction
                .map(|f| format!("{f:.2}"))
                .unwrap_or_else(|| "-".into()),
        ));
    }
    if !summary.cond_table.is_empty() {
        out.push_str(&format!(
            "\nSL error at N = {} vs cond(OT), worst first:\n",
            summary.largest_n
        ));
        for row in &summary.cond_table {
            out.push_str(&format!(
                "{:<12} mean mse_O = {:<12} cond(OT) = {}\n",
                row.example_id,
                format!("{:.3e}", row.mean_mse_o),
                row.cond_ot
                    .map(|c| format!("{c:.1}"))
                    .unwrap_or_else(|| "unknown".into()),
            ));
        }
        if let Some(rho) = summary.spearman_cond_vs_mse_o {
            out.push_str(&format!(
                "Spearman rank correlation cond(OT) vs mse_O: {rho:.3}\n"
            ));
        }
    }
    out
}
