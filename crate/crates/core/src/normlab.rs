//! Update matrices of the backfitting sweep, their norms and spectral radii,
//! the Bernoulli missingness generator, and the scaling experiments built on them.

use std::time::Instant;

use nalgebra::{Complex, DMatrix, DVector, Schur, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::backfit::{BackfitConfig, Backfitter, Variant};
use crate::data_model::{Factor, LevelDictionary, ObservationTable, INTERCEPT};
use crate::error::{Error, Result};
use crate::gls::fit_ols;
use crate::moments::VarianceComponents;

/// Largest `Υ` with `Υ² − Υ⁻² ≤ 1`.
pub const UPSILON_STAR: f64 = 1.272_019_649_514_069;

/// Default cap on the number of column levels for dense update matrices.
pub const UPDATE_MATRIX_CAP: usize = 20_000;

/// Up to this size norms and eigenvalues come from dense factorizations.
const DENSE_SPECTRAL_CAP: usize = 600;
const POWER_MAX_STEPS: usize = 10_000;
const DENSE_MAX_SWEEPS: usize = 100_000;

pub fn theoretical_bound(upsilon: f64) -> f64 {
    upsilon * upsilon - 1.0 / (upsilon * upsilon)
}

/// How `p_ij` is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbabilityScheme {
    /// `p_ij = min(1, U_ij S^(1−ρ−κ))`, `U_ij ~ U[1, Υ]`.
    #[default]
    Uniform,
    /// `p_ij = min(1, S^(1−ρ−κ))` for every cell.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingModel {
    pub s: u64,
    pub rho: f64,
    pub kappa: f64,
    pub upsilon: f64,
    pub seed: u64,
    pub scheme: ProbabilityScheme,
}

impl SamplingModel {
    pub fn new(s: u64, rho: f64, kappa: f64, upsilon: f64, seed: u64) -> Result<Self> {
        let m = Self {
            s,
            rho,
            kappa,
            upsilon,
            seed,
            scheme: ProbabilityScheme::Uniform,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_scheme(mut self, scheme: ProbabilityScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.s < 2 {
            return Err(Error::Invalid(format!("S must be at least 2, got {}", self.s)));
        }
        for (name, v) in [("rho", self.rho), ("kappa", self.kappa)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Invalid(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.upsilon >= 1.0 && self.upsilon.is_finite()) {
            return Err(Error::Invalid(format!("upsilon must be finite and >= 1, got {}", self.upsilon)));
        }
        Ok(())
    }

    /// Nominal level counts before empty levels are dropped.
    pub fn n_rows(&self) -> usize {
        ceil_pow(self.s, self.rho)
    }

    pub fn n_cols(&self) -> usize {
        ceil_pow(self.s, self.kappa)
    }

    /// `S^(1−ρ−κ)`.
    pub fn base_probability(&self) -> f64 {
        (self.s as f64).powf(1.0 - self.rho - self.kappa)
    }
}

fn ceil_pow(s: u64, e: f64) -> usize {
    let v = (s as f64).powf(e);
    // guard against 2^k^(1/k)-style round-off just above an integer
    let r = v.round();
    let v = if (v - r).abs() < 1e-9 * r.max(1.0) { r } else { v.ceil() };
    (v as usize).max(1)
}

#[derive(Debug, Clone)]
pub struct SampledDesign {
    /// Intercept-only table with `y = 0`.
    pub table: ObservationTable,
    pub dropped_rows: usize,
    pub dropped_cols: usize,
}

/// Draws `Z_ij ~ Bern(p_ij)` cell by cell (row-major), then drops empty
/// levels and reindexes. Cost is O(RC).
pub fn sample_design(model: &SamplingModel) -> Result<SampledDesign> {
    model.validate()?;
    let r = model.n_rows();
    let c = model.n_cols();
    let base = model.base_probability();
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for i in 0..r {
        for j in 0..c {
            let u = match model.scheme {
                ProbabilityScheme::Uniform => rng.random_range(1.0..=model.upsilon),
                ProbabilityScheme::Fixed => 1.0,
            };
            let p = (u * base).min(1.0);
            if rng.random::<f64>() < p {
                rows.push(i);
                cols.push(j);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyDesign);
    }
    let (rows, n_r, kept_r) = compact(&rows, r);
    let (cols, n_c, kept_c) = compact(&cols, c);
    let levels = LevelDictionary {
        rows: kept_r.iter().map(|i| format!("r{i}")).collect(),
        cols: kept_c.iter().map(|j| format!("c{j}")).collect(),
    };
    let table = ObservationTable::design_only(rows, cols, n_r, n_c)?.with_levels(levels)?;
    Ok(SampledDesign {
        table,
        dropped_rows: r - n_r,
        dropped_cols: c - n_c,
    })
}

/// Renumbers `idx` onto the used levels; returns the new indices, the
/// number of used levels and their original labels.
fn compact(idx: &[usize], n: usize) -> (Vec<usize>, usize, Vec<usize>) {
    let mut map = vec![usize::MAX; n];
    for &i in idx {
        map[i] = 0;
    }
    let mut kept = Vec::new();
    for (i, m) in map.iter_mut().enumerate() {
        if *m == 0 {
            *m = kept.len();
            kept.push(i);
        }
    }
    (idx.iter().map(|&i| map[i]).collect(), kept.len(), kept)
}

#[derive(Debug, Clone, Serialize)]
pub struct UpdateMatrix {
    pub variant: Variant,
    #[serde(skip)]
    pub entries: DMatrix<f64>,
    pub norm1: f64,
    pub norm2: f64,
    pub norm_inf: f64,
    pub spectral_radius: f64,
    /// False when an iterative estimate hit its step limit.
    pub converged: bool,
}

impl UpdateMatrix {
    pub fn from_entries(variant: Variant, entries: DMatrix<f64>) -> Self {
        let norm1 = norm_1(&entries);
        let norm_inf = norm_1(&entries.transpose());
        let (norm2, ok2) = norm_2(&entries);
        let (rho, ok_rho) = spectral_radius(&entries);
        // any induced norm bounds the spectral radius; tighten iterative estimates
        let spectral_radius = rho.min(norm1).min(norm_inf).min(norm2);
        Self {
            variant,
            entries,
            norm1,
            norm2,
            norm_inf,
            spectral_radius,
            converged: ok2 && ok_rho,
        }
    }
}

/// Maximum absolute column sum.
pub fn norm_1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn start_vector(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = DVector::from_fn(n, |_, _| rng.random::<f64>() + 0.5);
    let norm = v.norm();
    v / norm
}

/// Largest singular value; dense SVD for small matrices, otherwise power
/// iteration on `MᵀM` to relative 1e-6.
pub fn norm_2(m: &DMatrix<f64>) -> (f64, bool) {
    let n = m.ncols();
    if n == 0 {
        return (0.0, true);
    }
    if n <= DENSE_SPECTRAL_CAP {
        if let Some(svd) = SVD::try_new(m.clone(), false, false, f64::EPSILON, DENSE_MAX_SWEEPS) {
            return (svd.singular_values.max(), true);
        }
    }
    let mt = m.transpose();
    let mut x = start_vector(n, 0x5eed);
    let mut est = 0.0;
    for _ in 0..POWER_MAX_STEPS {
        let y = &mt * (m * &x);
        let lambda = x.dot(&y);
        let norm = y.norm();
        if norm == 0.0 {
            return (0.0, true);
        }
        x = y / norm;
        let next = lambda.max(0.0).sqrt();
        if (next - est).abs() <= 1e-7 * next {
            return (next, true);
        }
        est = next;
    }
    (est, false)
}

/// Largest eigenvalue modulus; dense Schur for small matrices, otherwise
/// power iteration using two-step growth (robust to ± pairs) with one
/// random restart.
pub fn spectral_radius(m: &DMatrix<f64>) -> (f64, bool) {
    let n = m.ncols();
    if n == 0 {
        return (0.0, true);
    }
    if n <= DENSE_SPECTRAL_CAP {
        if let Some(eig) = dense_eigenvalues(m) {
            return (eig.iter().map(|z| z.norm()).fold(0.0, f64::max), true);
        }
    }
    let mut best = 0.0;
    for seed in [0x0bad_5eed_u64, 0x2545_f491] {
        let (est, ok) = power_radius(m, seed);
        if ok {
            return (est.max(best), true);
        }
        best = f64::max(best, est);
    }
    (best, false)
}

/// Complex eigenvalues by a Schur decomposition with a bounded number of sweeps.
pub fn dense_eigenvalues(m: &DMatrix<f64>) -> Option<Vec<Complex<f64>>> {
    Schur::try_new(m.clone(), f64::EPSILON, DENSE_MAX_SWEEPS).map(|s| s.complex_eigenvalues().iter().copied().collect())
}

fn power_radius(m: &DMatrix<f64>, seed: u64) -> (f64, bool) {
    let mut x = start_vector(m.ncols(), seed);
    let mut est = f64::NAN;
    for _ in 0..POWER_MAX_STEPS / 2 {
        let y = m * &x;
        let z = m * &y;
        let g = z.norm();
        if g == 0.0 {
            return (0.0, true);
        }
        let next = g.sqrt();
        x = z / g;
        if (next - est).abs() <= 1e-5 * next {
            return (next, true);
        }
        est = next;
    }
    (est, false)
}

fn inverse_denominators(counts: &[usize], lambda: f64) -> Vec<f64> {
    counts
        .iter()
        .map(|&n| {
            if lambda.is_infinite() {
                0.0
            } else {
                let d = n as f64 + lambda;
                if d > 0.0 { 1.0 / d } else { 0.0 }
            }
        })
        .collect()
}

/// The C×C matrix `M` with `b ← Mb + η` for one sweep of `variant`.
/// M0–M2 come from closed forms; M3 from the sweep's action on basis vectors.
pub fn build_update_matrix(
    table: &ObservationTable,
    lambda_a: f64,
    lambda_b: f64,
    variant: Variant,
    cap: usize,
) -> Result<UpdateMatrix> {
    let c = table.n_col_levels();
    if c > cap {
        return Err(Error::CapExceeded {
            what: "column levels",
            size: c,
            cap,
        });
    }
    let cfg = BackfitConfig {
        variant,
        lambda_a,
        lambda_b,
        ..Default::default()
    };
    cfg.validate()?;
    let entries = match variant {
        Variant::M3 => update_matrix_by_action(table, &cfg)?,
        _ => update_matrix_closed_form(table, lambda_a, lambda_b, variant),
    };
    Ok(UpdateMatrix::from_entries(variant, entries))
}

/// Closed forms for M0, M1, M2.
pub fn update_matrix_closed_form(table: &ObservationTable, lambda_a: f64, lambda_b: f64, variant: Variant) -> DMatrix<f64> {
    let r = table.n_row_levels();
    let c = table.n_col_levels();
    let counts = table.factor_counts();
    let inv_a = inverse_denominators(counts.get(Factor::A), lambda_a);
    let inv_b = inverse_denominators(counts.get(Factor::B), lambda_b);
    let grouping = table.grouping(Factor::A);
    let cols = table.cols();

    // M0_js = inv_b[j] Σ_i Z_ij Z_is inv_a[i]
    let mut m = DMatrix::zeros(c, c);
    for (i, &w) in inv_a.iter().enumerate().take(r) {
        let members = grouping.members(i);
        for &k in members {
            for &l in members {
                m[(cols[k], cols[l])] += w;
            }
        }
    }
    for (j, &w) in inv_b.iter().enumerate() {
        m.row_mut(j).scale_mut(w);
    }

    // q_s = Σ_r Z_rs inv_a[r]
    let mut q = vec![0.0; c];
    for (&i, &j) in table.rows().iter().zip(cols) {
        q[j] += inv_a[i];
    }
    match variant {
        Variant::M0 | Variant::M3 => {}
        Variant::M1 => {
            let n_b = counts.get(Factor::B);
            for j in 0..c {
                let f = n_b[j] as f64 * inv_b[j] / r as f64;
                for s in 0..c {
                    m[(j, s)] -= f * q[s];
                }
            }
        }
        Variant::M2 => {
            let w: f64 = inv_a.iter().sum();
            if w > 0.0 {
                for j in 0..c {
                    let f = inv_b[j] * q[j] / w;
                    for s in 0..c {
                        m[(j, s)] -= f * q[s];
                    }
                }
            }
        }
    }
    m
}

/// Column s of the result is the homogeneous sweep applied to `e_s`.
pub fn update_matrix_by_action(table: &ObservationTable, cfg: &BackfitConfig) -> Result<DMatrix<f64>> {
    let c = table.n_col_levels();
    let bf = Backfitter::new(table, *cfg)?;
    let columns: Vec<Vec<f64>> = (0..c)
        .into_par_iter()
        .map(|s| {
            let mut e = vec![0.0; c];
            e[s] = 1.0;
            bf.update_action(&e)
        })
        .collect();
    Ok(DMatrix::from_fn(c, c, |j, s| columns[s][j]))
}

/// The four-variant table of norms for one design.
pub fn norm_table(table: &ObservationTable, lambda_a: f64, lambda_b: f64, cap: usize) -> Result<Vec<UpdateMatrix>> {
    Variant::ALL
        .iter()
        .map(|&v| build_update_matrix(table, lambda_a, lambda_b, v, cap))
        .collect()
}

/// Derives independent per-cell seeds from a base seed and a cell counter.
pub fn cell_seed(base: u64, counter: u64) -> u64 {
    splitmix64(base ^ splitmix64(counter.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub points: Vec<(f64, f64)>,
    pub s_grid: Vec<u64>,
    pub upsilon: f64,
    pub reps: usize,
    pub variants: Vec<Variant>,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub seed: u64,
    pub scheme: ProbabilityScheme,
    /// Record wall-clock seconds per cell; zero otherwise so output is reproducible.
    pub timings: bool,
    /// Skip the spectral radius and 2-norm (left as NaN).
    pub norm1_only: bool,
    pub cap: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            points: vec![(4.0 / 7.0, 4.0 / 7.0)],
            s_grid: (8..=13).map(|k| 1u64 << k).collect(),
            upsilon: UPSILON_STAR,
            reps: 5,
            variants: vec![Variant::M2],
            lambda_a: 0.0,
            lambda_b: 0.0,
            seed: 1,
            scheme: ProbabilityScheme::Uniform,
            timings: false,
            norm1_only: false,
            cap: UPDATE_MATRIX_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub rho: f64,
    pub kappa: f64,
    #[serde(rename = "S")]
    pub s: u64,
    pub rep: usize,
    pub seed: u64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub variant: Variant,
    pub norm1: f64,
    pub norm2: f64,
    pub norminf: f64,
    pub spectral_radius: f64,
    pub seconds: f64,
    pub dropped_rows: usize,
    pub dropped_cols: usize,
}

/// One row per (point, S, rep, variant). Cells run in parallel; each has its
/// own seed so results do not depend on scheduling.
pub fn norm_scaling_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRow>> {
    let mut cells = Vec::new();
    for &(rho, kappa) in &cfg.points {
        for &s in &cfg.s_grid {
            for rep in 0..cfg.reps {
                let seed = cell_seed(cfg.seed, cells.len() as u64);
                cells.push((rho, kappa, s, rep, seed));
            }
        }
    }
    let per_cell: Vec<Result<Vec<ExperimentRow>>> = cells
        .par_iter()
        .map(|&(rho, kappa, s, rep, seed)| {
            let model = SamplingModel::new(s, rho, kappa, cfg.upsilon, seed)?.with_scheme(cfg.scheme);
            let design = sample_design(&model)?;
            let t = &design.table;
            cfg.variants
                .iter()
                .map(|&variant| {
                    let start = Instant::now();
                    let (norm1, norm2, norminf, rho_m) = if cfg.norm1_only {
                        if t.n_col_levels() > cfg.cap {
                            return Err(Error::CapExceeded {
                                what: "column levels",
                                size: t.n_col_levels(),
                                cap: cfg.cap,
                            });
                        }
                        let bcfg = BackfitConfig {
                            variant,
                            lambda_a: cfg.lambda_a,
                            lambda_b: cfg.lambda_b,
                            ..Default::default()
                        };
                        let m = match variant {
                            Variant::M3 => update_matrix_by_action(t, &bcfg)?,
                            _ => update_matrix_closed_form(t, cfg.lambda_a, cfg.lambda_b, variant),
                        };
                        (norm_1(&m), f64::NAN, norm_1(&m.transpose()), f64::NAN)
                    } else {
                        let m = build_update_matrix(t, cfg.lambda_a, cfg.lambda_b, variant, cfg.cap)?;
                        (m.norm1, m.norm2, m.norm_inf, m.spectral_radius)
                    };
                    let seconds = if cfg.timings { start.elapsed().as_secs_f64() } else { 0.0 };
                    Ok(ExperimentRow {
                        rho,
                        kappa,
                        s,
                        rep,
                        seed,
                        n: t.n_obs(),
                        r: t.n_row_levels(),
                        c: t.n_col_levels(),
                        variant,
                        norm1,
                        norm2,
                        norminf,
                        spectral_radius: rho_m,
                        seconds,
                        dropped_rows: design.dropped_rows,
                        dropped_cols: design.dropped_cols,
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_cell {
        rows.extend(r?);
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub table: ObservationTable,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub dropped_rows: usize,
    pub dropped_cols: usize,
}

/// Samples `Z` from `model`, then an intercept plus `p − 1` standard normal
/// covariates and `Y = Xβ + a_i + b_j + e` with variances `theta`.
pub fn simulate_dataset(
    model: &SamplingModel,
    p: usize,
    theta: &VarianceComponents,
    beta: &[f64],
    seed: u64,
) -> Result<SimulatedData> {
    if p == 0 {
        return Err(Error::Invalid("p must be at least 1 (the intercept)".into()));
    }
    if beta.len() != p {
        return Err(Error::Invalid(format!("beta has length {}, expected p = {p}", beta.len())));
    }
    let design = sample_design(model)?;
    let t = design.table;
    let n = t.n_obs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut x = DMatrix::from_element(n, p, 1.0);
    for k in 0..n {
        for c in 1..p {
            x[(k, c)] = normal();
        }
    }
    let sa = theta.sigma2_a.sqrt();
    let sb = theta.sigma2_b.sqrt();
    let se = theta.sigma2_e.sqrt();
    let a: Vec<f64> = (0..t.n_row_levels()).map(|_| sa * normal()).collect();
    let b: Vec<f64> = (0..t.n_col_levels()).map(|_| sb * normal()).collect();
    let y: Vec<f64> = (0..n)
        .map(|k| {
            let xb: f64 = (0..p).map(|c| x[(k, c)] * beta[c]).sum();
            xb + a[t.rows()[k]] + b[t.cols()[k]] + se * normal()
        })
        .collect();
    let mut names = vec![INTERCEPT.to_string()];
    names.extend((1..p).map(|c| format!("x{c}")));
    let table = t.with_data(y, x)?.with_covariate_names(names)?;
    Ok(SimulatedData {
        table,
        a,
        b,
        dropped_rows: design.dropped_rows,
        dropped_cols: design.dropped_cols,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub s_grid: Vec<u64>,
    pub rho: f64,
    pub kappa: f64,
    pub upsilon: f64,
    pub p: usize,
    pub reps: usize,
    pub seed: u64,
    pub variant: Variant,
    pub tol: f64,
    /// Each timing repeats its work until at least this much wall time elapses.
    pub min_seconds: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            s_grid: vec![1 << 10, 1 << 11, 1 << 12, 1 << 13, 1 << 14],
            rho: 0.52,
            kappa: 0.52,
            upsilon: UPSILON_STAR,
            p: 8,
            reps: 3,
            seed: 1,
            variant: Variant::M3,
            tol: 1e-8,
            min_seconds: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    #[serde(rename = "S")]
    pub s: u64,
    pub rep: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub seconds_per_iteration: f64,
    pub ols_seconds: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Log-log slope of seconds per backfit iteration against N.
    pub backfit_slope: f64,
    pub ols_slope: f64,
    pub max_iterations: usize,
}

fn time_per_call<F: FnMut()>(min_seconds: f64, mut f: F) -> f64 {
    let start = Instant::now();
    let mut calls = 0u32;
    loop {
        f();
        calls += 1;
        let el = start.elapsed().as_secs_f64();
        if el >= min_seconds {
            return el / calls as f64;
        }
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

/// Times backfitting of the covariates (per iteration, θ = (1, 1, 1)) and OLS
/// across `s_grid`. Runs sequentially so timings are not contended.
pub fn cost_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    let theta = VarianceComponents::new(1.0, 1.0, 1.0)?;
    let beta = vec![0.0; cfg.p];
    let bcfg = BackfitConfig {
        variant: cfg.variant,
        lambda_a: theta.lambda_a(),
        lambda_b: theta.lambda_b(),
        tol: cfg.tol,
        ..Default::default()
    };
    let mut rows = Vec::new();
    let mut counter = 0u64;
    for &s in &cfg.s_grid {
        for rep in 0..cfg.reps {
            let seed = cell_seed(cfg.seed, counter);
            counter += 1;
            let model = SamplingModel::new(s, cfg.rho, cfg.kappa, cfg.upsilon, seed)?;
            let sim = simulate_dataset(&model, cfg.p, &theta, &beta, seed.wrapping_add(1))?;
            let t = &sim.table;
            let bf = Backfitter::new(t, bcfg)?;
            let mut iterations = 0;
            let mut failure = None;
            let per_run = time_per_call(cfg.min_seconds, || match bf.run(t.x()) {
                Ok(res) => iterations = res.iterations,
                Err(e) => failure = Some(e),
            });
            if let Some(e) = failure {
                return Err(e);
            }
            let mut ols_failure = None;
            let ols_seconds = time_per_call(cfg.min_seconds, || {
                if let Err(e) = fit_ols(t) {
                    ols_failure = Some(e);
                }
            });
            if let Some(e) = ols_failure {
                return Err(e);
            }
            rows.push(BenchRow {
                s,
                rep,
                n: t.n_obs(),
                r: t.n_row_levels(),
                c: t.n_col_levels(),
                seconds_per_iteration: per_run / iterations as f64,
                ols_seconds,
                iterations,
            });
        }
    }
    let summarize = |f: &dyn Fn(&BenchRow) -> f64| -> Vec<(f64, f64)> {
        cfg.s_grid
            .iter()
            .map(|&s| {
                let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.s == s).collect();
                let mut ns: Vec<f64> = sel.iter().map(|r| r.n as f64).collect();
                let mut ts: Vec<f64> = sel.iter().map(|r| f(r)).collect();
                (median(&mut ns), median(&mut ts))
            })
            .collect()
    };
    let backfit_slope = log_log_slope(&summarize(&|r| r.seconds_per_iteration));
    let ols_slope = log_log_slope(&summarize(&|r| r.ols_seconds));
    let max_iterations = rows.iter().map(|r| r.iterations).max().unwrap_or(0);
    Ok(BenchReport {
        rows,
        backfit_slope,
        ols_slope,
        max_iterations,
    })
}
