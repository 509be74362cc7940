//! Block coordinate descent over the two factor smoothers.
//!
//! Starting from `b = 0`, each sweep sets `a ← smooth_A(r − Z_B b)` and then
//! `b ← smooth_B(r − Z_A a)`. All responses share one pooled Frobenius
//! stopping rule.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{Factor, ObservationTable};
use crate::error::{Error, Result};
use crate::smoother::{shrunken_effects_into, Centering, LevelEffects, ShrinkagePlan};

/// Relative change above which iteration is abandoned as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Centering pair used for the (A, B) updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// No centering on either factor.
    M0,
    /// Naive centering of `a`, plain `b`.
    M1,
    /// Weighted centering of `a`, plain `b`.
    M2,
    /// Weighted centering of both.
    M3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::M0, Variant::M1, Variant::M2, Variant::M3];

    pub fn centerings(self) -> (Centering, Centering) {
        match self {
            Variant::M0 => (Centering::None, Centering::None),
            Variant::M1 => (Centering::Naive, Centering::None),
            Variant::M2 => (Centering::Weighted, Centering::None),
            Variant::M3 => (Centering::Weighted, Centering::Weighted),
        }
    }

    /// Whether the limiting smoother is symmetric, which the sandwich
    /// covariance requires.
    pub fn symmetric_smoother(self) -> bool {
        !matches!(self, Variant::M1)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::M0 => "m0",
            Variant::M1 => "m1",
            Variant::M2 => "m2",
            Variant::M3 => "m3",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m0" | "0" => Ok(Variant::M0),
            "m1" | "1" => Ok(Variant::M1),
            "m2" | "2" => Ok(Variant::M2),
            "m3" | "3" => Ok(Variant::M3),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected m0..m3)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BackfitConfig {
    pub variant: Variant,
    pub lambda_a: f64,
    pub lambda_b: f64,
    /// Threshold on the squared relative Frobenius change.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BackfitConfig {
    fn default() -> Self {
        Self {
            variant: Variant::M3,
            lambda_a: 1.0,
            lambda_b: 1.0,
            tol: 1e-8,
            max_iter: 1000,
        }
    }
}

impl BackfitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BackfitResult {
    /// Fitted values `Z_A a + Z_B b`, one N-vector per response (N x m).
    #[serde(skip)]
    pub fitted: DMatrix<f64>,
    pub a: Vec<LevelEffects>,
    pub b: Vec<LevelEffects>,
    pub iterations: usize,
    /// Pooled squared relative change after each sweep (`inf` when the
    /// previous fit was identically zero).
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Factor smoothers for one table and configuration.
#[derive(Debug, Clone)]
pub struct Backfitter<'a> {
    table: &'a ObservationTable,
    plan_a: ShrinkagePlan,
    plan_b: ShrinkagePlan,
    cfg: BackfitConfig,
}

/// Per-response working state.
#[derive(Debug, Clone)]
pub struct SweepState {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    psum_a: Vec<f64>,
    psum_b: Vec<f64>,
    prev_a: Vec<f64>,
    prev_b: Vec<f64>,
}

impl SweepState {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Self {
            a: vec![0.0; n_rows],
            b: vec![0.0; n_cols],
            psum_a: vec![0.0; n_rows],
            psum_b: vec![0.0; n_cols],
            prev_a: vec![0.0; n_rows],
            prev_b: vec![0.0; n_cols],
        }
    }
}

impl<'a> Backfitter<'a> {
    pub fn new(table: &'a ObservationTable, cfg: BackfitConfig) -> Result<Self> {
        cfg.validate()?;
        let (ca, cb) = cfg.variant.centerings();
        let counts = table.factor_counts();
        Ok(Self {
            table,
            plan_a: ShrinkagePlan::new(Factor::A, cfg.lambda_a, ca, counts)?,
            plan_b: ShrinkagePlan::new(Factor::B, cfg.lambda_b, cb, counts)?,
            cfg,
        })
    }

    pub fn config(&self) -> &BackfitConfig {
        &self.cfg
    }

    pub fn new_state(&self) -> SweepState {
        SweepState::new(self.table.n_row_levels(), self.table.n_col_levels())
    }

    /// One a-then-b sweep on `response`. Returns `(‖Δfit‖², ‖previous fit‖²)`.
    pub fn sweep(&self, response: &[f64], st: &mut SweepState) -> (f64, f64) {
        let rows = self.table.rows();
        let cols = self.table.cols();
        st.prev_a.copy_from_slice(&st.a);
        st.prev_b.copy_from_slice(&st.b);

        st.psum_a.iter_mut().for_each(|v| *v = 0.0);
        for ((&i, &j), &r) in rows.iter().zip(cols).zip(response) {
            st.psum_a[i] += r - st.b[j];
        }
        shrunken_effects_into(&self.plan_a, &st.psum_a, &mut st.a);

        st.psum_b.iter_mut().for_each(|v| *v = 0.0);
        for ((&i, &j), &r) in rows.iter().zip(cols).zip(response) {
            st.psum_b[j] += r - st.a[i];
        }
        shrunken_effects_into(&self.plan_b, &st.psum_b, &mut st.b);

        let mut diff2 = 0.0;
        let mut old2 = 0.0;
        for (&i, &j) in rows.iter().zip(cols) {
            let old = st.prev_a[i] + st.prev_b[j];
            let d = (st.a[i] - st.prev_a[i]) + (st.b[j] - st.prev_b[j]);
            diff2 += d * d;
            old2 += old * old;
        }
        (diff2, old2)
    }

    /// Backfits every column of `responses` (N x m) to convergence.
    pub fn run(&self, responses: &DMatrix<f64>) -> Result<BackfitResult> {
        let n = self.table.n_obs();
        if responses.nrows() != n {
            return Err(Error::Invalid(format!(
                "responses have {} rows, table has {n} observations",
                responses.nrows()
            )));
        }
        let m = responses.ncols();
        let mut states: Vec<SweepState> = (0..m).map(|_| self.new_state()).collect();
        let mut trace = Vec::new();
        let mut converged = false;

        for _ in 0..self.cfg.max_iter {
            let parts: Vec<(f64, f64)> = states
                .par_iter_mut()
                .enumerate()
                .map(|(c, st)| self.sweep(responses.column(c).as_slice(), st))
                .collect();
            // fixed reduction order keeps results independent of thread count
            let (diff2, old2) = parts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
            let change = relative_change(diff2, old2);
            trace.push(change);
            if change < self.cfg.tol {
                converged = true;
                break;
            }
            if old2 > 0.0 && change > DIVERGENCE_THRESHOLD {
                break;
            }
        }

        if !converged {
            return Err(Error::Diverged {
                iterations: trace.len(),
                last_change: *trace.last().unwrap_or(&f64::NAN),
                trace,
            });
        }

        let rows = self.table.rows();
        let cols = self.table.cols();
        let mut fitted = DMatrix::zeros(n, m);
        for (c, st) in states.iter().enumerate() {
            let mut col = fitted.column_mut(c);
            for k in 0..n {
                col[k] = st.a[rows[k]] + st.b[cols[k]];
            }
        }
        Ok(BackfitResult {
            fitted,
            a: states.iter().map(|s| LevelEffects { values: s.a.clone() }).collect(),
            b: states.iter().map(|s| LevelEffects { values: s.b.clone() }).collect(),
            iterations: trace.len(),
            trace,
            converged,
        })
    }

    /// Homogeneous part of one sweep: `M · bvec` for the configured variant.
    pub fn update_action(&self, bvec: &[f64]) -> Vec<f64> {
        let rows = self.table.rows();
        let cols = self.table.cols();
        let mut psum = vec![0.0; self.table.n_row_levels()];
        for (&i, &j) in rows.iter().zip(cols) {
            psum[i] -= bvec[j];
        }
        let mut a = vec![0.0; psum.len()];
        shrunken_effects_into(&self.plan_a, &psum, &mut a);
        let mut psum_b = vec![0.0; self.table.n_col_levels()];
        for (&i, &j) in rows.iter().zip(cols) {
            psum_b[j] -= a[i];
        }
        let mut out = vec![0.0; psum_b.len()];
        shrunken_effects_into(&self.plan_b, &psum_b, &mut out);
        out
    }
}

fn relative_change(diff2: f64, old2: f64) -> f64 {
    if diff2 == 0.0 {
        0.0
    } else if old2 == 0.0 {
        f64::INFINITY
    } else {
        diff2 / old2
    }
}

pub fn backfit(table: &ObservationTable, responses: &DMatrix<f64>, cfg: &BackfitConfig) -> Result<BackfitResult> {
    Backfitter::new(table, *cfg)?.run(responses)
}

/// Applies the b-to-b update matrix of `cfg.variant` to `bvec` without forming it.
pub fn build_update_row_action(table: &ObservationTable, cfg: &BackfitConfig, bvec: &[f64]) -> Result<Vec<f64>> {
    if bvec.len() != table.n_col_levels() {
        return Err(Error::Invalid(format!(
            "vector has length {}, expected {}",
            bvec.len(),
            table.n_col_levels()
        )));
    }
    Ok(Backfitter::new(table, *cfg)?.update_action(bvec))
}
