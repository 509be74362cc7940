//! The `crossgls` command line: fit, diagnose, simulate, norms, bench.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::backfit::{BackfitConfig, Variant};
use crate::data_model::{ingest_csv, write_csv, CsvSchema, Factor, ObservationTable};
use crate::error::{Error, Result};
use crate::gls::{fit_gls, fit_pipeline, Diagnostics, PipelineConfig, PipelineResult};
use crate::moments::{MomentFit, VarianceComponents};
use crate::normlab::{
    cost_benchmark, norm_scaling_experiment, norm_table, simulate_dataset, BenchConfig, ExperimentConfig,
    ProbabilityScheme, SamplingModel, UpdateMatrix, UPDATE_MATRIX_CAP, UPSILON_STAR,
};
use crate::reference::{DenseProblem, DENSE_N_CAP};

pub const SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "CROSSGLS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "crossgls", version, about = "GLS for crossed random effects by backfitting")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the crossed random effects model and write a JSON report.
    Fit(FitArgs),
    /// Fit, then report OLS naivete and inefficiency relative to GLS.
    Diagnose(FitArgs),
    /// Simulate a dataset from the Bernoulli sampling model.
    Simulate(SimulateArgs),
    /// Update-matrix norms for a dataset or over a sampling grid.
    Norms(NormsArgs),
    /// Time backfitting and OLS over a grid of problem sizes.
    Bench(BenchArgs),
}

#[derive(Debug, Args, Clone)]
pub struct InputArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "row")]
    pub row_col: String,
    #[arg(long, default_value = "col")]
    pub col_col: String,
    #[arg(long, default_value = "y")]
    pub response: String,
}

impl InputArgs {
    fn load(&self) -> Result<ObservationTable> {
        let schema = CsvSchema {
            row_column: self.row_col.clone(),
            col_column: self.col_col.clone(),
            response: self.response.clone(),
        };
        ingest_csv(BufReader::new(File::open(&self.input)?), &schema)
    }
}

#[derive(Debug, Args, Clone)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// JSON report path (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value = "m3")]
    pub variant: Variant,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    /// Include BLUPs of the random effects.
    #[arg(long)]
    pub blups: bool,
    /// Re-estimate variance components from GLS residuals and refit once.
    #[arg(long)]
    pub refine: bool,
    /// Compare against dense solvers (N <= 2000).
    #[arg(long)]
    pub verify: bool,
    /// Print a regression table to stderr.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args, Clone)]
pub struct SamplingArgs {
    #[arg(long)]
    pub s: u64,
    #[arg(long, value_parser = parse_fraction)]
    pub rho: f64,
    #[arg(long, value_parser = parse_fraction)]
    pub kappa: f64,
    #[arg(long, default_value_t = UPSILON_STAR)]
    pub upsilon: f64,
    /// Use p_ij = min(1, S^(1-rho-kappa)) instead of uniform U_ij.
    #[arg(long)]
    pub fixed_p: bool,
}

#[derive(Debug, Args, Clone)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value_t = 8)]
    pub p: usize,
    /// sigma2_A,sigma2_B,sigma2_E
    #[arg(long, default_value = "1,1,1")]
    pub theta: String,
    /// Coefficients, comma separated (default: zeros).
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// CSV path (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormFormat {
    Csv,
    Text,
}

#[derive(Debug, Args, Clone)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["from_data", "grid"]))]
pub struct NormsArgs {
    /// Dataset whose design defines the update matrices.
    #[arg(long)]
    pub from_data: Option<PathBuf>,
    #[arg(long, default_value = "row")]
    pub row_col: String,
    #[arg(long, default_value = "col")]
    pub col_col: String,
    #[arg(long, default_value = "y")]
    pub response: String,
    /// (rho,kappa) points separated by ';', e.g. "4/7,4/7;0.7,0.7".
    #[arg(long)]
    pub grid: Option<String>,
    /// S values: "256:8192" (powers of two) or a comma list.
    #[arg(long, default_value = "256:8192")]
    pub s_grid: String,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = UPSILON_STAR)]
    pub upsilon: f64,
    #[arg(long, default_value = "m2")]
    pub variants: String,
    /// lambda_A,lambda_B. Grids default to 0,0; datasets to moment estimates.
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub fixed_p: bool,
    /// Record per-cell wall time (otherwise the seconds column is 0).
    #[arg(long)]
    pub timings: bool,
    #[arg(long, default_value_t = UPDATE_MATRIX_CAP)]
    pub cap: usize,
    #[arg(long, value_enum, default_value_t = NormFormat::Csv)]
    pub format: NormFormat,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 0.52, value_parser = parse_fraction)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.52, value_parser = parse_fraction)]
    pub kappa: f64,
    #[arg(long, default_value = "1024:16384")]
    pub s_grid: String,
    #[arg(long, default_value_t = UPSILON_STAR)]
    pub upsilon: f64,
    #[arg(long, default_value_t = 8)]
    pub p: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "m3")]
    pub variant: Variant,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 0.05)]
    pub min_seconds: f64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad number '{s}'"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad number '{s}'"))?;
            a / b
        }
        None => s.parse().map_err(|_| format!("bad number '{s}'"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("bad number '{s}'"))
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| parse_fraction(t).map_err(|e| Error::Config(format!("{what}: {e}"))))
        .collect()
}

pub fn parse_theta(s: &str) -> Result<VarianceComponents> {
    match parse_list(s, "theta")?.as_slice() {
        &[a, b, e] => VarianceComponents::new(a, b, e).map_err(|e| Error::Config(e.to_string())),
        v => Err(Error::Config(format!("theta needs 3 values, got {}", v.len()))),
    }
}

fn parse_lambda(s: &str) -> Result<(f64, f64)> {
    match parse_list(s, "lambda")?.as_slice() {
        [l] if *l >= 0.0 => Ok((*l, *l)),
        [a, b] if *a >= 0.0 && *b >= 0.0 => Ok((*a, *b)),
        _ => Err(Error::Config(format!("lambda must be one or two non-negative values, got '{s}'"))),
    }
}

/// `"a:b"` doubles from `a` up to `b`; otherwise a comma list.
pub fn parse_s_grid(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("invalid S grid '{s}'"));
    if let Some((a, b)) = s.split_once(':') {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a < 2 || b < a {
            return Err(bad());
        }
        let mut out = Vec::new();
        let mut v = a;
        while v <= b {
            out.push(v);
            v = v.checked_mul(2).ok_or_else(bad)?;
        }
        Ok(out)
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
    }
}

pub fn parse_points(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|t| match parse_list(t, "grid point")?.as_slice() {
            &[r, k] => Ok((r, k)),
            _ => Err(Error::Config(format!("grid point '{t}' needs rho,kappa"))),
        })
        .collect()
}

fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    if s.trim() == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    s.split(',').map(|t| t.trim().parse()).collect()
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn check_distinct(input: &Path, output: Option<&Path>) -> Result<()> {
    if let Some(out) = output {
        let same = match (input.canonicalize(), out.canonicalize()) {
            (Ok(a), Ok(b)) => a == b,
            _ => input == out,
        };
        if same {
            return Err(Error::Config("input and output paths must differ".into()));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DesignSummary {
    n: usize,
    r: usize,
    c: usize,
    p: usize,
}

impl DesignSummary {
    fn of(t: &ObservationTable) -> Self {
        Self {
            n: t.n_obs(),
            r: t.n_row_levels(),
            c: t.n_col_levels(),
            p: t.p(),
        }
    }
}

#[derive(Debug, Serialize)]
struct CoefficientRow {
    name: String,
    estimate: f64,
    se: Option<f64>,
    ols_estimate: f64,
    ols_se_naive: f64,
    ols_se_model: Option<f64>,
}

#[derive(Debug, Serialize)]
struct BlupEntry {
    level: String,
    value: f64,
}

#[derive(Debug, Serialize)]
struct Blups {
    rows: Vec<BlupEntry>,
    cols: Vec<BlupEntry>,
}

#[derive(Debug, Serialize)]
struct Discrepancy {
    beta: f64,
    cov: Option<f64>,
    blup: Option<f64>,
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    /// The reported fit against the dense solvers.
    reported: Discrepancy,
    /// A refit with the tolerance tightened to 1e-24 against the dense solvers.
    tight_tolerance: Discrepancy,
    threshold: f64,
    passed: bool,
}

#[derive(Debug, Serialize)]
struct FitReport {
    schema_version: u32,
    command: &'static str,
    status: &'static str,
    design: DesignSummary,
    variant: Variant,
    tol: f64,
    max_iter: usize,
    theta: VarianceComponents,
    moments: MomentFit,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_moments: Option<MomentFit>,
    iterations: crate::gls::IterationCounts,
    coefficients: Vec<CoefficientRow>,
    cov_beta: Option<Vec<Vec<f64>>>,
    ols_sigma2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<Diagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    blups: Option<Blups>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verify: Option<VerifyReport>,
}

#[derive(Debug, Serialize)]
struct ErrorReport {
    schema_version: u32,
    command: &'static str,
    status: &'static str,
    exit_code: i32,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<Vec<f64>>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if scale == 0.0 { diff } else { diff / scale }
}

fn discrepancy(res_beta: &[f64], cov: Option<&DMatrix<f64>>, blups: Option<(&[f64], &[f64])>, dense: &DenseOracle) -> Discrepancy {
    Discrepancy {
        beta: max_rel(res_beta, dense.beta.as_slice()),
        cov: cov.map(|c| max_rel(c.as_slice(), dense.cov.as_slice())),
        blup: blups.map(|(a, b)| max_rel(a, dense.a.as_slice()).max(max_rel(b, dense.b.as_slice()))),
    }
}

struct DenseOracle {
    beta: nalgebra::DVector<f64>,
    cov: DMatrix<f64>,
    a: nalgebra::DVector<f64>,
    b: nalgebra::DVector<f64>,
}

const VERIFY_THRESHOLD: f64 = 1e-6;

fn verify(table: &ObservationTable, res: &PipelineResult, cfg: &PipelineConfig) -> Result<VerifyReport> {
    if table.n_obs() > DENSE_N_CAP {
        return Err(Error::CapExceeded {
            what: "N for --verify",
            size: table.n_obs(),
            cap: DENSE_N_CAP,
        });
    }
    let theta = &res.gls.theta;
    let prob = DenseProblem::new(table, theta)?;
    let (beta, cov) = prob.dense_gls()?;
    let pen = prob.dense_penalized()?;
    let dense = DenseOracle { beta, cov, a: pen.a, b: pen.b };
    let blups = |g: &crate::gls::GlsFit| match (&g.blup_a, &g.blup_b) {
        (Some(a), Some(b)) => Some((a.values.clone(), b.values.clone())),
        _ => None,
    };
    let reported_blups = blups(&res.gls);
    let reported = discrepancy(
        &res.gls.beta,
        res.gls.cov_beta.as_ref(),
        reported_blups.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
        &dense,
    );
    let tight_cfg = BackfitConfig {
        tol: 1e-24,
        max_iter: cfg.backfit.max_iter.max(100_000),
        ..cfg.backfit
    };
    let tight = fit_gls(table, theta, &tight_cfg, true)?;
    let tight_blups = blups(&tight);
    let tight_tolerance = discrepancy(
        &tight.beta,
        tight.cov_beta.as_ref(),
        tight_blups.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
        &dense,
    );
    let passed = [Some(tight_tolerance.beta), tight_tolerance.cov, tight_tolerance.blup]
        .into_iter()
        .flatten()
        .all(|d| d < VERIFY_THRESHOLD);
    Ok(VerifyReport {
        reported,
        tight_tolerance,
        threshold: VERIFY_THRESHOLD,
        passed,
    })
}

fn level_label(table: &ObservationTable, factor: Factor, i: usize) -> String {
    match (table.level_dictionary(), factor) {
        (Some(d), Factor::A) => d.rows[i].clone(),
        (Some(d), Factor::B) => d.cols[i].clone(),
        (None, Factor::A) => format!("r{i}"),
        (None, Factor::B) => format!("c{i}"),
    }
}

fn build_report(command: &'static str, table: &ObservationTable, args: &FitArgs, res: PipelineResult, verify: Option<VerifyReport>) -> FitReport {
    let names = table.covariate_names();
    let model_cov = res.ols.cov_gls_of_ols.as_ref();
    let coefficients = (0..table.p())
        .map(|k| CoefficientRow {
            name: names[k].clone(),
            estimate: res.gls.beta[k],
            se: res.gls.se.as_ref().map(|s| s[k]),
            ols_estimate: res.ols.beta[k],
            ols_se_naive: res.ols.cov_naive[(k, k)].max(0.0).sqrt(),
            ols_se_model: model_cov.map(|c| c[(k, k)].max(0.0).sqrt()),
        })
        .collect();
    let blups = match (&res.gls.blup_a, &res.gls.blup_b) {
        (Some(a), Some(b)) => Some(Blups {
            rows: a
                .values
                .iter()
                .enumerate()
                .map(|(i, &v)| BlupEntry { level: level_label(table, Factor::A, i), value: v })
                .collect(),
            cols: b
                .values
                .iter()
                .enumerate()
                .map(|(j, &v)| BlupEntry { level: level_label(table, Factor::B, j), value: v })
                .collect(),
        }),
        _ => None,
    };
    FitReport {
        schema_version: SCHEMA_VERSION,
        command,
        status: "ok",
        design: DesignSummary::of(table),
        variant: args.variant,
        tol: args.tol,
        max_iter: args.max_iter,
        theta: res.gls.theta,
        moments: res.moments,
        initial_moments: res.initial_moments,
        iterations: res.gls.iterations,
        coefficients,
        cov_beta: res.gls.cov_beta.as_ref().map(matrix_rows),
        ols_sigma2: res.ols.sigma2,
        diagnostics: res.diagnostics,
        blups,
        verify,
    }
}

/// Fixed-width table; `*` marks |estimate| > 2 SE.
pub fn regression_table(names: &[String], beta: &[f64], se: Option<&[f64]>) -> String {
    let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(4);
    let mut out = format!("{:<width$}  {:>12}  {:>12}  {:>8}\n", "term", "estimate", "std.err", "t");
    for (k, name) in names.iter().enumerate() {
        match se {
            Some(se) => {
                let t = beta[k] / se[k];
                let star = if beta[k].abs() > 2.0 * se[k] { " *" } else { "" };
                out += &format!("{name:<width$}  {:>12.6}  {:>12.6}  {t:>8.3}{star}\n", beta[k], se[k]);
            }
            None => out += &format!("{name:<width$}  {:>12.6}  {:>12}  {:>8}\n", beta[k], "-", "-"),
        }
    }
    out
}

fn diagnostics_table(names: &[String], d: &Diagnostics) -> String {
    let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(4);
    let mut out = format!("{:<width$}  {:>10}  {:>12}\n", "term", "naivete", "inefficiency");
    for (k, name) in names.iter().enumerate() {
        out += &format!("{name:<width$}  {:>10.4}  {:>12.4}\n", d.naivete[k], d.inefficiency[k]);
    }
    out += &format!("max over linear combinations: naivete {:.4}, inefficiency {:.4}\n", d.max_naivete, d.max_inefficiency);
    out
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut w = open_output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn cmd_fit(command: &'static str, args: &FitArgs) -> Result<()> {
    check_distinct(&args.input.input, args.output.as_deref())?;
    if !(args.tol > 0.0 && args.tol < 1.0) {
        return Err(Error::Config(format!("tol must lie in (0, 1), got {}", args.tol)));
    }
    let table = args.input.load()?;
    let cfg = PipelineConfig {
        backfit: BackfitConfig {
            variant: args.variant,
            tol: args.tol,
            max_iter: args.max_iter,
            ..Default::default()
        },
        want_blups: args.blups || args.verify,
        refine: args.refine,
        ..Default::default()
    };
    if command == "diagnose" && !args.variant.symmetric_smoother() {
        return Err(Error::Config(format!("diagnose needs a covariance; variant {} has none", args.variant)));
    }
    let outcome = fit_pipeline(&table, &cfg).and_then(|res| {
        let v = if args.verify { Some(verify(&table, &res, &cfg)?) } else { None };
        Ok((res, v))
    });
    let (res, verify_report) = match outcome {
        Ok(v) => v,
        Err(e) => {
            let (iterations, trace) = match &e {
                Error::Diverged { iterations, trace, .. } => (Some(*iterations), Some(trace.clone())),
                _ => (None, None),
            };
            let report = ErrorReport {
                schema_version: SCHEMA_VERSION,
                command,
                status: "error",
                exit_code: e.exit_code(),
                message: e.to_string(),
                iterations,
                trace,
            };
            write_json(&report, args.output.as_deref())?;
            return Err(e);
        }
    };
    if args.table || command == "diagnose" {
        let mut err = io::stderr().lock();
        write!(err, "{}", regression_table(table.covariate_names(), &res.gls.beta, res.gls.se.as_deref()))?;
        if let (Some(d), true) = (&res.diagnostics, command == "diagnose") {
            write!(err, "\n{}", diagnostics_table(table.covariate_names(), d))?;
        }
    }
    let failed_verify = verify_report.as_ref().is_some_and(|v| !v.passed);
    let report = build_report(command, &table, args, res, verify_report);
    write_json(&report, args.output.as_deref())?;
    if failed_verify {
        return Err(Error::Diagnostic("dense verification exceeded its threshold".into()));
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let sa = &args.sampling;
    let scheme = if sa.fixed_p { ProbabilityScheme::Fixed } else { ProbabilityScheme::Uniform };
    let model = SamplingModel::new(sa.s, sa.rho, sa.kappa, sa.upsilon, args.seed)
        .map_err(|e| Error::Config(e.to_string()))?
        .with_scheme(scheme);
    let theta = parse_theta(&args.theta)?;
    let beta = match &args.beta {
        Some(b) => parse_list(b, "beta")?,
        None => vec![0.0; args.p],
    };
    // the data draw gets its own stream, distinct from the design's
    let sim = simulate_dataset(&model, args.p, &theta, &beta, crate::normlab::cell_seed(args.seed, u64::MAX))?;
    let mut w = open_output(args.output.as_deref())?;
    write_csv(&sim.table, &mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct NormTableRow {
    variant: Variant,
    norm1: f64,
    norm2: f64,
    spectral_radius: f64,
    norminf: f64,
    converged: bool,
}

/// Four rows (M0..M3) by ‖·‖₁, ‖·‖₂, |λmax|.
pub fn format_norm_matrix(ms: &[UpdateMatrix]) -> String {
    let mut out = format!("{:<8}{:>12}{:>12}{:>12}\n", "", "norm1", "norm2", "|lmax|");
    for m in ms {
        out += &format!("{:<8}{:>12.4}{:>12.4}{:>12.5}\n", m.variant.name(), m.norm1, m.norm2, m.spectral_radius);
    }
    out
}

fn cmd_norms(args: &NormsArgs) -> Result<()> {
    if let Some(path) = &args.from_data {
        check_distinct(path, args.output.as_deref())?;
        let schema = CsvSchema {
            row_column: args.row_col.clone(),
            col_column: args.col_col.clone(),
            response: args.response.clone(),
        };
        let table = ingest_csv(BufReader::new(File::open(path)?), &schema)?;
        let (la, lb) = match &args.lambda {
            Some(s) => parse_lambda(s)?,
            None => {
                let ols = crate::gls::fit_ols(&table)?;
                let m = crate::moments::estimate(&table, &ols.beta, &Default::default())?;
                (m.theta.lambda_a(), m.theta.lambda_b())
            }
        };
        let ms = norm_table(&table, la, lb, args.cap)?;
        for m in &ms {
            if m.spectral_radius > m.norm1.min(m.norm_inf) + 1e-8 {
                return Err(Error::Diagnostic(format!("spectral radius exceeds an induced norm for {}", m.variant)));
            }
        }
        let mut w = open_output(args.output.as_deref())?;
        match args.format {
            NormFormat::Text => {
                writeln!(w, "lambda_a = {la}, lambda_b = {lb}, R = {}, C = {}", table.n_row_levels(), table.n_col_levels())?;
                write!(w, "{}", format_norm_matrix(&ms))?;
            }
            NormFormat::Csv => {
                let mut csv = csv::Writer::from_writer(&mut w);
                for m in &ms {
                    csv.serialize(NormTableRow {
                        variant: m.variant,
                        norm1: m.norm1,
                        norm2: m.norm2,
                        spectral_radius: m.spectral_radius,
                        norminf: m.norm_inf,
                        converged: m.converged,
                    })?;
                }
                csv.flush()?;
            }
        }
        w.flush()?;
        return Ok(());
    }

    let points = parse_points(args.grid.as_deref().unwrap_or_default())?;
    if points.is_empty() {
        return Err(Error::Config("--grid needs at least one rho,kappa point".into()));
    }
    let (la, lb) = match &args.lambda {
        Some(s) => parse_lambda(s)?,
        None => (0.0, 0.0),
    };
    let cfg = ExperimentConfig {
        points,
        s_grid: parse_s_grid(&args.s_grid)?,
        upsilon: args.upsilon,
        reps: args.reps,
        variants: parse_variants(&args.variants)?,
        lambda_a: la,
        lambda_b: lb,
        seed: args.seed,
        scheme: if args.fixed_p { ProbabilityScheme::Fixed } else { ProbabilityScheme::Uniform },
        timings: args.timings,
        norm1_only: false,
        cap: args.cap,
    };
    let rows = norm_scaling_experiment(&cfg)?;
    let mut w = open_output(args.output.as_deref())?;
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        for r in &rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        s_grid: parse_s_grid(&args.s_grid)?,
        rho: args.rho,
        kappa: args.kappa,
        upsilon: args.upsilon,
        p: args.p,
        reps: args.reps,
        seed: args.seed,
        variant: args.variant,
        tol: args.tol,
        min_seconds: args.min_seconds,
    };
    let report = cost_benchmark(&cfg)?;
    let mut w = open_output(args.output.as_deref())?;
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        for r in &report.rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
    }
    w.flush()?;
    eprintln!(
        "backfit slope {:.3}, OLS slope {:.3}, max iterations {}",
        report.backfit_slope, report.ols_slope, report.max_iterations
    );
    Ok(())
}

fn init_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match &cli.command {
        Command::Fit(a) => cmd_fit("fit", a),
        Command::Diagnose(a) => cmd_fit("diagnose", a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Norms(a) => cmd_norms(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_and_lists() {
        assert_eq!(parse_s_grid("1024:16384").unwrap(), vec![1024, 2048, 4096, 8192, 16384]);
        assert_eq!(parse_s_grid("100,300").unwrap(), vec![100, 300]);
        assert!(parse_s_grid("8:4").is_err());
        let pts = parse_points("4/7,4/7; 0.7,0.7").unwrap();
        assert!((pts[0].0 - 4.0 / 7.0).abs() < 1e-15 && pts[1] == (0.7, 0.7));
        assert!(parse_points("0.5").is_err());
        assert_eq!(parse_theta("1,0.5,2").unwrap().as_array(), [1.0, 0.5, 2.0]);
        assert!(matches!(parse_theta("1,1"), Err(Error::Config(_))));
        assert_eq!(parse_lambda("2").unwrap(), (2.0, 2.0));
        assert!(parse_lambda("-1").is_err());
        assert_eq!(parse_variants("all").unwrap().len(), 4);
        assert!(parse_variants("m5").is_err());
    }

    #[test]
    fn regression_table_marks_large_estimates() {
        let names = vec!["(Intercept)".to_string(), "x1".to_string()];
        let t = regression_table(&names, &[1.0, 0.1], Some(&[0.1, 0.1]));
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[1].ends_with('*'));
        assert!(!lines[2].ends_with('*'));
        let t = regression_table(&names, &[1.0, 0.1], None);
        assert!(t.lines().nth(1).unwrap().contains('-'));
    }

    #[test]
    fn bad_arguments_are_config_errors() {
        assert_eq!(run(["crossgls", "fit"]), 4);
        assert_eq!(run(["crossgls", "norms"]), 4);
        assert_eq!(run(["crossgls", "simulate", "--s", "64", "--rho", "1.5", "--kappa", "0.5"]), 4);
    }
}
