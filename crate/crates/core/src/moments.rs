//! Method-of-moments variance components from within-row, within-column and
//! total sums of squares, in O(N).

use serde::Serialize;

use crate::data_model::{Factor, FactorCounts, ObservationTable};
use crate::error::{Error, Result};

/// `(σ²_A, σ²_B, σ²_E)` with the ridge ratios `λ = σ²_E / σ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceComponents {
    pub sigma2_a: f64,
    pub sigma2_b: f64,
    pub sigma2_e: f64,
}

impl VarianceComponents {
    pub fn new(sigma2_a: f64, sigma2_b: f64, sigma2_e: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(sigma2_a) && ok(sigma2_b) && ok(sigma2_e) && sigma2_e > 0.0) {
            return Err(Error::Invalid(format!(
                "variance components must be finite with σ²_A, σ²_B >= 0 and σ²_E > 0; got ({sigma2_a}, {sigma2_b}, {sigma2_e})"
            )));
        }
        Ok(Self { sigma2_a, sigma2_b, sigma2_e })
    }

    /// `σ²_E / σ²_A`; infinite when `σ²_A = 0`.
    pub fn lambda_a(&self) -> f64 {
        ratio(self.sigma2_e, self.sigma2_a)
    }

    pub fn lambda_b(&self) -> f64 {
        ratio(self.sigma2_e, self.sigma2_b)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sigma2_a, self.sigma2_b, self.sigma2_e]
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UStatistics {
    pub u_a: f64,
    pub u_b: f64,
    pub u_e: f64,
    pub sum_nrow_sq: f64,
    pub sum_ncol_sq: f64,
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    c: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

fn level_means(levels: &[usize], counts: &[usize], resid: &[f64]) -> Vec<f64> {
    let mut acc = vec![CompensatedSum::default(); counts.len()];
    for (&l, &r) in levels.iter().zip(resid) {
        acc[l].add(r);
    }
    acc.iter().zip(counts).map(|(s, &n)| s.value() / n as f64).collect()
}

/// Two passes: per-level sums, then squared deviations from the level means.
pub fn u_statistics(table: &ObservationTable, resid: &[f64]) -> Result<UStatistics> {
    let n = table.n_obs();
    if resid.len() != n {
        return Err(Error::Invalid(format!("residual vector has length {}, expected {n}", resid.len())));
    }
    let counts = table.factor_counts();
    let row_mean = level_means(table.rows(), &counts.n_row, resid);
    let col_mean = level_means(table.cols(), &counts.n_col, resid);
    let mut total = CompensatedSum::default();
    resid.iter().for_each(|&r| total.add(r));
    let grand = total.value() / n as f64;

    let (mut ua, mut ub, mut ue) = (CompensatedSum::default(), CompensatedSum::default(), CompensatedSum::default());
    for ((&i, &j), &r) in table.rows().iter().zip(table.cols()).zip(resid) {
        let da = r - row_mean[i];
        let db = r - col_mean[j];
        let de = r - grand;
        ua.add(da * da);
        ub.add(db * db);
        ue.add(de * de);
    }
    Ok(UStatistics {
        u_a: ua.value(),
        u_b: ub.value(),
        u_e: n as f64 * ue.value(),
        sum_nrow_sq: counts.sum_sq(Factor::A),
        sum_ncol_sq: counts.sum_sq(Factor::B),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentsConfig {
    /// σ²_E floor as a multiple of the residual variance.
    pub floor_rel: f64,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self { floor_rel: 1e-12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentFit {
    /// Exact solution of the moment equations before clamping.
    pub raw: [f64; 3],
    pub theta: VarianceComponents,
    /// Some raw component was negative and set to zero.
    pub clamped: bool,
    /// σ²_E was raised to the floor.
    pub floored: bool,
}

/// The moment-equation matrix, rows ordered (U_A, U_B, U_E).
pub fn moment_matrix(u: &UStatistics, n: usize, r: usize, c: usize) -> [[f64; 3]; 3] {
    let nf = n as f64;
    let nr = nf - r as f64;
    let nc = nf - c as f64;
    [
        [0.0, nr, nr],
        [nc, 0.0, nc],
        [nf * nf - u.sum_nrow_sq, nf * nf - u.sum_ncol_sq, nf * nf - nf],
    ]
}

/// Solves the 3 x 3 moment system, then clamps negatives and floors σ²_E.
///
/// The first two equations give `σ²_B + σ²_E` and `σ²_A + σ²_E`, which leaves a
/// single scalar equation for σ²_E.
pub fn solve_moments(
    u: &UStatistics,
    counts: &FactorCounts,
    n: usize,
    r: usize,
    c: usize,
    cfg: &MomentsConfig,
) -> Result<MomentFit> {
    debug_assert_eq!(counts.n_row.len(), r);
    debug_assert_eq!(counts.n_col.len(), c);
    let nf = n as f64;
    let m = moment_matrix(u, n, r, c);
    let (nr, nc) = (m[0][1], m[1][0]);
    let (ka, kb, ke) = (m[2][0], m[2][1], m[2][2]);
    let pivot = ka + kb - ke;
    let scale = nf * nf + nf;
    if nr.abs() < 0.5 || nc.abs() < 0.5 || pivot.abs() <= 1e-12 * scale {
        return Err(Error::Estimation(format!(
            "moment equations are singular (N={n}, R={r}, C={c}); \
             the design needs repeated row and column levels and both factors crossed"
        )));
    }
    let sum_be = u.u_a / nr;
    let sum_ae = u.u_b / nc;
    let s2e = (ka * sum_ae + kb * sum_be - u.u_e) / pivot;
    let raw = [sum_ae - s2e, sum_be - s2e, s2e];

    let clamped = raw.iter().any(|&v| v < 0.0);
    let resid_var = u.u_e / (nf * nf);
    let floor = cfg.floor_rel * if resid_var > 0.0 { resid_var } else { 1.0 };
    let s2e_clamped = raw[2].max(0.0);
    let floored = s2e_clamped < floor;
    let theta = VarianceComponents {
        sigma2_a: raw[0].max(0.0),
        sigma2_b: raw[1].max(0.0),
        sigma2_e: s2e_clamped.max(floor),
    };
    Ok(MomentFit { raw, theta, clamped, floored })
}

/// Residuals `y - X beta`.
pub fn residuals(table: &ObservationTable, beta: &[f64]) -> Result<Vec<f64>> {
    if beta.len() != table.p() {
        return Err(Error::Invalid(format!("beta has length {}, expected {}", beta.len(), table.p())));
    }
    let fit = table.x() * nalgebra::DVector::from_column_slice(beta);
    Ok(table.y().iter().zip(fit.iter()).map(|(y, f)| y - f).collect())
}

/// Moment estimates from the residuals of `beta_init`.
pub fn estimate(table: &ObservationTable, beta_init: &[f64], cfg: &MomentsConfig) -> Result<MomentFit> {
    let resid = residuals(table, beta_init)?;
    let u = u_statistics(table, &resid)?;
    solve_moments(
        &u,
        table.factor_counts(),
        table.n_obs(),
        table.n_row_levels(),
        table.n_col_levels(),
        cfg,
    )
}
