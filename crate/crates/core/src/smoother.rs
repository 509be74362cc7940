//! One-factor ridge smoothers applied as O(N) kernels.
//!
//! The smoother for factor A maps an N-vector `r` to `Z_A a` where `a` is the
//! ridge solution for that factor alone. It factors as
//! `scatter ∘ shrunken_effects ∘ partial_sums`, so no N x N object is formed.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data_model::{Factor, FactorCounts, ObservationTable};
use crate::error::{Error, Result};

/// How level effects are centered after shrinkage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Centering {
    /// Plain shrunken means `R+_i / (N_i + λ)`.
    None,
    /// Subtract the unweighted mean of the plain shrunken means.
    Naive,
    /// Sum-to-zero constrained ridge solution; yields a symmetric smoother.
    Weighted,
}

/// Precomputed shrinkage for one factor: denominators and centering weights.
#[derive(Debug, Clone)]
pub struct ShrinkagePlan {
    factor: Factor,
    lambda: f64,
    centering: Centering,
    inv_denom: Vec<f64>,
    weights: Option<Vec<f64>>,
}

impl ShrinkagePlan {
    /// `lambda` may be `+inf`, which shrinks every effect to zero.
    pub fn new(factor: Factor, lambda: f64, centering: Centering, counts: &FactorCounts) -> Result<Self> {
        if lambda.is_nan() || lambda < 0.0 {
            return Err(Error::Invalid(format!("ridge penalty must be >= 0, got {lambda}")));
        }
        let n = counts.get(factor);
        let inv_denom: Vec<f64> = if lambda.is_infinite() {
            vec![0.0; n.len()]
        } else {
            n.iter().map(|&c| 1.0 / (c as f64 + lambda)).collect()
        };
        let weights = (centering == Centering::Weighted).then(|| {
            let total: f64 = inv_denom.iter().sum();
            if total > 0.0 {
                inv_denom.iter().map(|v| v / total).collect()
            } else {
                vec![1.0 / n.len() as f64; n.len()]
            }
        });
        Ok(Self {
            factor,
            lambda,
            centering,
            inv_denom,
            weights,
        })
    }

    pub fn factor(&self) -> Factor {
        self.factor
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn centering(&self) -> Centering {
        self.centering
    }

    /// Centering weights `w_i`; present only for weighted centering.
    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// `1 / (N_i + λ)` per level (zero when λ is infinite).
    pub fn inv_denominators(&self) -> &[f64] {
        &self.inv_denom
    }
}

/// Per-level random effect values (`a` or `b`).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LevelEffects {
    pub values: Vec<f64>,
}

impl LevelEffects {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn norm_l1(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `out[l] = Σ resid[k]` over observations `k` at level `l` of `factor`.
pub fn partial_sums(table: &ObservationTable, factor: Factor, resid: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; table.n_levels(factor)];
    partial_sums_into(table.levels_of(factor), resid, &mut out);
    out
}

pub(crate) fn partial_sums_into(levels: &[usize], resid: &[f64], out: &mut [f64]) {
    debug_assert_eq!(levels.len(), resid.len());
    out.iter_mut().for_each(|v| *v = 0.0);
    for (&l, &r) in levels.iter().zip(resid) {
        out[l] += r;
    }
}

pub fn shrunken_effects(plan: &ShrinkagePlan, psums: &[f64]) -> LevelEffects {
    let mut values = vec![0.0; psums.len()];
    shrunken_effects_into(plan, psums, &mut values);
    LevelEffects { values }
}

pub(crate) fn shrunken_effects_into(plan: &ShrinkagePlan, psums: &[f64], out: &mut [f64]) {
    debug_assert_eq!(psums.len(), plan.inv_denom.len());
    match plan.centering {
        Centering::None => {
            for ((o, &s), &d) in out.iter_mut().zip(psums).zip(&plan.inv_denom) {
                *o = s * d;
            }
        }
        Centering::Naive => {
            for ((o, &s), &d) in out.iter_mut().zip(psums).zip(&plan.inv_denom) {
                *o = s * d;
            }
            let mean = out.iter().sum::<f64>() / out.len() as f64;
            out.iter_mut().for_each(|o| *o -= mean);
        }
        Centering::Weighted => {
            let w = plan.weights.as_ref().expect("weighted plan carries weights");
            let centre: f64 = psums.iter().zip(w).map(|(s, w)| s * w).sum();
            for ((o, &s), &d) in out.iter_mut().zip(psums).zip(&plan.inv_denom) {
                *o = (s - centre) * d;
            }
        }
    }
}

/// `out[k] = effects[level(k)]`, i.e. pre-multiplication by the indicator matrix.
pub fn scatter(table: &ObservationTable, factor: Factor, effects: &LevelEffects) -> Vec<f64> {
    table.levels_of(factor).iter().map(|&l| effects.values[l]).collect()
}

/// Applies the full one-factor smoother to `resid`, returning the effects and the fit.
pub fn smooth(table: &ObservationTable, plan: &ShrinkagePlan, resid: &[f64]) -> (LevelEffects, Vec<f64>) {
    let psums = partial_sums(table, plan.factor, resid);
    let effects = shrunken_effects(plan, &psums);
    let fit = scatter(table, plan.factor, &effects);
    (effects, fit)
}

/// Default observation cap for dense smoother materialization.
pub const DENSE_CAP: usize = 2000;

/// Column `k` is the smoother applied to the `k`-th basis vector. Test and
/// diagnostic use only.
pub fn dense_smoother_matrix(table: &ObservationTable, plan: &ShrinkagePlan, cap: usize) -> Result<DMatrix<f64>> {
    let n = table.n_obs();
    if n > cap {
        return Err(Error::CapExceeded { what: "N", size: n, cap });
    }
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for k in 0..n {
        e[k] = 1.0;
        let (_, fit) = smooth(table, plan, &e);
        m.set_column(k, &nalgebra::DVector::from_vec(fit));
        e[k] = 0.0;
    }
    Ok(m)
}
