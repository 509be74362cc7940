//! GLS coefficients, sandwich covariance and BLUPs from backfitted covariates,
//! plus the OLS baseline and its naivete/inefficiency relative to GLS.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::backfit::{backfit, BackfitConfig, Variant};
use crate::data_model::{Factor, ObservationTable};
use crate::error::{Error, Result};
use crate::moments::{self, MomentFit, MomentsConfig, VarianceComponents};
use crate::smoother::{partial_sums, LevelEffects};

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub beta: Vec<f64>,
    /// `σ̂² (XᵀX)⁻¹` with `σ̂² = RSS / (N − p)`.
    pub cov_naive: DMatrix<f64>,
    /// Covariance of the OLS estimator under the crossed model; filled by
    /// [`OlsFit::with_model_covariance`].
    pub cov_gls_of_ols: Option<DMatrix<f64>>,
    pub sigma2: f64,
    xtx_inv: DMatrix<f64>,
}

impl OlsFit {
    /// `(XᵀX)⁻¹ XᵀVX (XᵀX)⁻¹` using the O(N) action of V.
    pub fn model_covariance(&self, table: &ObservationTable, theta: &VarianceComponents) -> DMatrix<f64> {
        let vx = apply_v(table, theta, table.x());
        let middle = table.x().transpose() * vx;
        symmetrize(&self.xtx_inv * middle * &self.xtx_inv)
    }

    pub fn with_model_covariance(mut self, table: &ObservationTable, theta: &VarianceComponents) -> Self {
        self.cov_gls_of_ols = Some(self.model_covariance(table, theta));
        self
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Names of columns that are linear combinations of earlier ones
/// (modified Gram-Schmidt with a relative tolerance).
fn dependent_columns(x: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for k in 0..x.ncols() {
        let mut v = x.column(k).into_owned();
        let original = v.norm();
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        let rest = v.norm();
        if original == 0.0 || rest <= 1e-10 * original {
            dependent.push(names.get(k).cloned().unwrap_or_else(|| format!("column {k}")));
        } else {
            basis.push(v / rest);
        }
    }
    dependent
}

pub fn fit_ols(table: &ObservationTable) -> Result<OlsFit> {
    let x = table.x();
    let n = table.n_obs();
    let p = table.p();
    let dependent = dependent_columns(x, table.covariate_names());
    if !dependent.is_empty() {
        return Err(Error::Singular(format!(
            "XᵀX is rank deficient; dependent columns: {}",
            dependent.join(", ")
        )));
    }
    let xtx = x.transpose() * x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Singular("XᵀX is not positive definite".into()))?;
    let y = DVector::from_column_slice(table.y());
    let beta = chol.solve(&(x.transpose() * &y));
    let resid = &y - x * &beta;
    let dof = if n > p { (n - p) as f64 } else { 1.0 };
    let sigma2 = resid.norm_squared() / dof;
    let xtx_inv = symmetrize(chol.inverse());
    Ok(OlsFit {
        beta: beta.as_slice().to_vec(),
        cov_naive: &xtx_inv * sigma2,
        cov_gls_of_ols: None,
        sigma2,
        xtx_inv,
    })
}

/// `V · mat` for `V = σ²_A Z_A Z_Aᵀ + σ²_B Z_B Z_Bᵀ + σ²_E I`, in O(N k).
pub fn apply_v(table: &ObservationTable, theta: &VarianceComponents, mat: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = mat * theta.sigma2_e;
    let rows = table.rows();
    let cols = table.cols();
    for c in 0..mat.ncols() {
        let col = mat.column(c);
        let sa = partial_sums(table, Factor::A, col.as_slice());
        let sb = partial_sums(table, Factor::B, col.as_slice());
        let mut o = out.column_mut(c);
        for k in 0..table.n_obs() {
            o[k] += theta.sigma2_a * sa[rows[k]] + theta.sigma2_b * sb[cols[k]];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IterationCounts {
    pub coefficients: usize,
    pub blups: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GlsFit {
    pub beta: Vec<f64>,
    /// Sandwich covariance; `None` for variants without a symmetric smoother.
    pub cov_beta: Option<DMatrix<f64>>,
    pub se: Option<Vec<f64>>,
    pub theta: VarianceComponents,
    pub variant: Variant,
    pub iterations: IterationCounts,
    pub blup_a: Option<LevelEffects>,
    pub blup_b: Option<LevelEffects>,
}

fn solve_pxp(a: &DMatrix<f64>, rhs: &DMatrix<f64>, symmetric: bool) -> Result<DMatrix<f64>> {
    if symmetric {
        if let Some(ch) = a.clone().cholesky() {
            return Ok(ch.solve(rhs));
        }
    }
    a.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Singular("Xᵀ(I − S̃_G)X is singular".into()))
}

fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diagnostic("matrix has non-finite entries".into()));
    }
    SymmetricEigen::try_new(m.clone(), f64::EPSILON, 100_000)
        .map(|e| e.eigenvalues)
        .ok_or_else(|| Error::Diagnostic("symmetric eigensolver did not converge".into()))
}

fn check_psd(cov: &DMatrix<f64>, what: &str) -> Result<()> {
    let trace = cov.trace();
    let min_eig = symmetric_eigenvalues(cov)?.min();
    if !min_eig.is_finite() || min_eig < -1e-8 * trace.abs() {
        return Err(Error::Diagnostic(format!(
            "{what} is not positive semidefinite (min eigenvalue {min_eig:e}, trace {trace:e})"
        )));
    }
    Ok(())
}

/// Backfits the columns of X with the λs implied by `theta`, then forms
/// `β̂ = (XᵀX̃)⁻¹X̃ᵀY` and `cov = (XᵀX̃)⁻¹ X̃ᵀVX̃ (XᵀX̃)⁻¹`.
///
/// The λ fields of `cfg` are ignored. Every column of X is backfitted,
/// the intercept included. For `M1` the response is backfitted too and
/// `β̂ = (XᵀX̃)⁻¹XᵀỸ`; no covariance is produced.
pub fn fit_gls(
    table: &ObservationTable,
    theta: &VarianceComponents,
    cfg: &BackfitConfig,
    want_blups: bool,
) -> Result<GlsFit> {
    let cfg = BackfitConfig {
        lambda_a: theta.lambda_a(),
        lambda_b: theta.lambda_b(),
        ..*cfg
    };
    let x = table.x();
    let n = table.n_obs();
    let p = table.p();
    let y = DMatrix::from_column_slice(n, 1, table.y());
    let symmetric = cfg.variant.symmetric_smoother();

    let responses = if symmetric {
        x.clone()
    } else {
        let mut r = DMatrix::zeros(n, p + 1);
        r.columns_mut(0, p).copy_from(x);
        r.set_column(p, &y.column(0));
        r
    };
    let bf = backfit(table, &responses, &cfg)?;
    let resid = &responses - &bf.fitted;
    let x_tilde = resid.columns(0, p).into_owned();

    let mut xtxt = x.transpose() * &x_tilde;
    if symmetric {
        xtxt = symmetrize(xtxt);
    }
    let beta = if symmetric {
        solve_pxp(&xtxt, &(x_tilde.transpose() * &y), true)?
    } else {
        let y_tilde = resid.columns(p, 1).into_owned();
        solve_pxp(&xtxt, &(x.transpose() * y_tilde), false)?
    };
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("Xᵀ(I − S̃_G)X is numerically singular".into()));
    }

    let (cov_beta, se) = if symmetric {
        let vxt = apply_v(table, theta, &x_tilde);
        let middle = symmetrize(x_tilde.transpose() * vxt);
        let left = solve_pxp(&xtxt, &middle, true)?;
        let cov = symmetrize(solve_pxp(&xtxt, &left.transpose(), true)?.transpose());
        check_psd(&cov, "cov(β̂_GLS)")?;
        let se = (0..p).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
        (Some(cov), Some(se))
    } else {
        (None, None)
    };

    let (blup_a, blup_b, blup_iters) = if want_blups {
        let r = &y - x * &beta;
        let res = backfit(table, &r, &cfg)?;
        let mut a = res.a;
        let mut b = res.b;
        (Some(a.remove(0)), Some(b.remove(0)), Some(res.iterations))
    } else {
        (None, None, None)
    };

    Ok(GlsFit {
        beta: beta.column(0).iter().copied().collect(),
        cov_beta,
        se,
        theta: *theta,
        variant: cfg.variant,
        iterations: IterationCounts {
            coefficients: bf.iterations,
            blups: blup_iters,
        },
        blup_a,
        blup_b,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    /// `cov_GLS(β̂_OLS,k) / cov_OLS(β̂_OLS,k)`.
    pub naivete: Vec<f64>,
    /// `cov_GLS(β̂_OLS,k) / cov_GLS(β̂_GLS,k)`.
    pub inefficiency: Vec<f64>,
    pub max_naivete: f64,
    pub max_inefficiency: f64,
}

/// Largest `λ` with `A v = λ B v`, via Cholesky whitening of `B`.
pub fn max_generalized_eigenvalue(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let l = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Diagnostic("reference covariance is not positive definite".into()))?
        .l();
    let linv = l
        .try_inverse()
        .ok_or_else(|| Error::Diagnostic("singular Cholesky factor".into()))?;
    let whitened = symmetrize(&linv * a * linv.transpose());
    Ok(symmetric_eigenvalues(&whitened)?.max())
}

pub fn diagnose(ols: &OlsFit, gls: &GlsFit) -> Result<Diagnostics> {
    let p = ols.beta.len();
    if gls.beta.len() != p {
        return Err(Error::Diagnostic(format!("OLS has {p} coefficients, GLS has {}", gls.beta.len())));
    }
    let model = ols
        .cov_gls_of_ols
        .as_ref()
        .ok_or_else(|| Error::Diagnostic("OLS fit lacks its model-based covariance".into()))?;
    let cov_gls = gls
        .cov_beta
        .as_ref()
        .ok_or_else(|| Error::Diagnostic(format!("no GLS covariance for variant {}", gls.variant)))?;
    for (m, name) in [(&ols.cov_naive, "cov_OLS(β̂_OLS)"), (model, "cov_GLS(β̂_OLS)"), (cov_gls, "cov_GLS(β̂_GLS)")] {
        check_psd(m, name)?;
    }
    let ratios = |num: &DMatrix<f64>, den: &DMatrix<f64>| -> Result<Vec<f64>> {
        (0..p)
            .map(|k| {
                let r = num[(k, k)] / den[(k, k)];
                if r.is_finite() && r > 0.0 {
                    Ok(r)
                } else {
                    Err(Error::Diagnostic(format!("variance ratio for coefficient {k} is {r}")))
                }
            })
            .collect()
    };
    Ok(Diagnostics {
        naivete: ratios(model, &ols.cov_naive)?,
        inefficiency: ratios(model, cov_gls)?,
        max_naivete: max_generalized_eigenvalue(model, &ols.cov_naive)?,
        max_inefficiency: max_generalized_eigenvalue(model, cov_gls)?,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineConfig {
    pub backfit: BackfitConfig,
    pub moments: MomentsConfig,
    pub want_blups: bool,
    /// Re-estimate θ from GLS residuals and repeat the fit once.
    pub refine: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub ols: OlsFit,
    pub moments: MomentFit,
    pub gls: GlsFit,
    pub diagnostics: Option<Diagnostics>,
    /// Moment fit on the OLS residuals when `refine` replaced it.
    pub initial_moments: Option<MomentFit>,
}

/// OLS, moment estimates on OLS residuals, backfitted GLS, optional BLUPs,
/// sandwich covariance; optionally once more with θ from GLS residuals.
pub fn fit_pipeline(table: &ObservationTable, cfg: &PipelineConfig) -> Result<PipelineResult> {
    let ols = fit_ols(table)?;
    let mut mom = moments::estimate(table, &ols.beta, &cfg.moments)?;
    let mut gls = fit_gls(table, &mom.theta, &cfg.backfit, cfg.want_blups)?;
    let mut initial = None;
    if cfg.refine {
        let refined = moments::estimate(table, &gls.beta, &cfg.moments)?;
        gls = fit_gls(table, &refined.theta, &cfg.backfit, cfg.want_blups)?;
        initial = Some(mom);
        mom = refined;
    }
    let ols = ols.with_model_covariance(table, &mom.theta);
    let diagnostics = if gls.cov_beta.is_some() { Some(diagnose(&ols, &gls)?) } else { None };
    Ok(PipelineResult {
        ols,
        moments: mom,
        gls,
        diagnostics,
        initial_moments: initial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{random_instance, DenseProblem};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn theta(a: f64, b: f64, e: f64) -> VarianceComponents {
        VarianceComponents::new(a, b, e).unwrap()
    }

    fn tight() -> BackfitConfig {
        BackfitConfig {
            tol: 1e-22,
            max_iter: 100_000,
            ..Default::default()
        }
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn ols_exact_fit_and_intercept_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_instance(&mut rng, 6, 5, 20, &[1.0, 2.0, -3.0], &theta(1.0, 1.0, 1.0));
        let exact: Vec<f64> = (0..20).map(|k| 1.0 + 2.0 * t.x()[(k, 1)] - 3.0 * t.x()[(k, 2)]).collect();
        let t_exact = t.with_data(exact, t.x().clone()).unwrap();
        let ols = fit_ols(&t_exact).unwrap();
        assert!(rel(&ols.beta, &[1.0, 2.0, -3.0]) < 1e-10);

        let ones = t.with_data(t.y().to_vec(), DMatrix::from_element(20, 1, 1.0)).unwrap();
        let ols = fit_ols(&ones).unwrap();
        let mean = t.y().iter().sum::<f64>() / 20.0;
        assert!((ols.beta[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn ols_matches_dense_and_scales_with_noise_only_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_instance(&mut rng, 7, 6, 25, &[0.5, 1.0, -1.0], &theta(1.0, 0.5, 1.0));
        let th = theta(0.0, 0.0, 2.0);
        let ols = fit_ols(&t).unwrap().with_model_covariance(&t, &th);
        let dense = DenseProblem::new(&t, &th).unwrap().dense_ols().unwrap();
        assert!(rel(&ols.beta, dense.as_slice()) < 1e-10);
        let model = ols.cov_gls_of_ols.unwrap();
        let expected = &ols.cov_naive * (2.0 / ols.sigma2);
        assert!((model - expected).amax() < 1e-12);
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_instance(&mut rng, 5, 4, 12, &[1.0, 1.0], &theta(1.0, 1.0, 1.0));
        let mut x = DMatrix::zeros(12, 3);
        x.columns_mut(0, 2).copy_from(t.x());
        let twice = t.x().column(1) * 2.0;
        x.set_column(2, &twice);
        let t = t
            .with_data(t.y().to_vec(), x)
            .unwrap()
            .with_covariate_names(vec!["(Intercept)".into(), "u".into(), "u2".into()])
            .unwrap();
        match fit_ols(&t) {
            Err(Error::Singular(msg)) => assert!(msg.contains("u2"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn v_action_matches_dense() {
        let t = ObservationTable::design_only(vec![0, 0, 1, 1], vec![0, 1, 0, 1], 2, 2).unwrap();
        let th = theta(1.0, 1.0, 1.0);
        let e1 = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        let out = apply_v(&t, &th, &e1);
        // shares row with obs 1, column with obs 2; none with obs 3
        assert_eq!(out.as_slice(), &[3.0, 1.0, 1.0, 0.0]);
        let dense = DenseProblem::new(&t, &th).unwrap().v;
        assert_eq!(out.column(0), dense.column(0));
        let ident = apply_v(&t, &VarianceComponents { sigma2_a: 0.0, sigma2_b: 0.0, sigma2_e: 1.0 }, &e1);
        assert_eq!(ident, e1);
    }

    #[test]
    fn v_action_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_instance(&mut rng, 5, 4, 14, &[0.0, 0.0], &theta(1.0, 1.0, 1.0));
        let th = theta(1.5, 0.0, 0.7);
        let out = apply_v(&t, &th, t.x());
        let rem = out - t.x() * 0.7;
        // with σ²_B = 0 the remainder is constant within each row level
        for k in 0..t.n_obs() {
            for l in 0..t.n_obs() {
                if t.rows()[k] == t.rows()[l] {
                    assert!((rem[(k, 1)] - rem[(l, 1)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gls_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let th = theta(1.0, 0.5, 2.0);
        let t = random_instance(&mut rng, 8, 6, 30, &[1.0, -0.5, 2.0], &th);
        let (beta, cov) = DenseProblem::new(&t, &th).unwrap().dense_gls().unwrap();
        let pen = DenseProblem::new(&t, &th).unwrap().dense_penalized().unwrap();
        for variant in [Variant::M0, Variant::M2, Variant::M3] {
            let cfg = BackfitConfig { variant, ..tight() };
            let fit = fit_gls(&t, &th, &cfg, true).unwrap();
            assert!(rel(&fit.beta, beta.as_slice()) < 1e-7, "{variant}");
            let c = fit.cov_beta.as_ref().unwrap();
            assert!((c - &cov).amax() / cov.amax() < 1e-6, "{variant}");
            assert!(rel(&fit.blup_a.as_ref().unwrap().values, pen.a.as_slice()) < 1e-6);
            assert!(rel(&fit.blup_b.as_ref().unwrap().values, pen.b.as_slice()) < 1e-6);
            for k in 0..3 {
                assert_eq!(fit.se.as_ref().unwrap()[k], c[(k, k)].sqrt());
            }
        }
    }

    #[test]
    fn naive_variant_gives_coefficients_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let th = theta(1.0, 1.0, 1.0);
        let t = random_instance(&mut rng, 6, 6, 24, &[1.0, 1.0], &th);
        let fit = fit_gls(&t, &th, &BackfitConfig { variant: Variant::M1, ..tight() }, false).unwrap();
        assert!(fit.cov_beta.is_none() && fit.se.is_none());
        assert!(fit.beta.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn vanishing_random_effects_reduce_to_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_instance(&mut rng, 8, 7, 30, &[1.0, 2.0, 3.0], &theta(1.0, 1.0, 1.0));
        let th = theta(1e-10, 1e-10, 1.0);
        let fit = fit_gls(&t, &th, &BackfitConfig::default(), false).unwrap();
        let ols = fit_ols(&t).unwrap();
        assert!(rel(&fit.beta, &ols.beta) < 1e-6);
    }

    #[test]
    fn m0_sandwich_equals_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let th = theta(0.7, 1.4, 1.0);
        let t = random_instance(&mut rng, 7, 6, 26, &[1.0, 0.3], &th);
        let fit = fit_gls(&t, &th, &BackfitConfig { variant: Variant::M0, ..tight() }, false).unwrap();
        let prob = DenseProblem::new(&t, &th).unwrap();
        let n = t.n_obs();
        let w = DMatrix::identity(n, n) - prob.smoother_sg().unwrap();
        let closed = (t.x().transpose() * w * t.x()).try_inverse().unwrap() * th.sigma2_e;
        assert!((fit.cov_beta.unwrap() - &closed).amax() / closed.amax() < 1e-6);
    }

    #[test]
    fn gauss_markov_and_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let th = theta(2.0, 1.0, 1.0);
        let t = random_instance(&mut rng, 9, 8, 40, &[1.0, -1.0, 0.5], &th);
        let fit = fit_gls(&t, &th, &tight(), false).unwrap();
        let ols = fit_ols(&t).unwrap().with_model_covariance(&t, &th);
        let cg = fit.cov_beta.as_ref().unwrap();
        let co = ols.cov_gls_of_ols.as_ref().unwrap();
        for k in 0..3 {
            assert!(cg[(k, k)] <= co[(k, k)] + 1e-8);
        }

        let scaled_y: Vec<f64> = t.y().iter().map(|v| 3.0 * v).collect();
        let fit_y = fit_gls(&t.with_data(scaled_y, t.x().clone()).unwrap(), &th, &tight(), false).unwrap();
        let expect: Vec<f64> = fit.beta.iter().map(|b| 3.0 * b).collect();
        assert!(rel(&fit_y.beta, &expect) < 1e-10);

        let mut x = t.x().clone();
        x.column_mut(1).scale_mut(4.0);
        let fit_x = fit_gls(&t.with_data(t.y().to_vec(), x.clone()).unwrap(), &th, &tight(), false).unwrap();
        assert!((fit_x.beta[1] * 4.0 - fit.beta[1]).abs() < 1e-10);
        let f0 = t.x() * DVector::from_column_slice(&fit.beta);
        let f1 = x * DVector::from_column_slice(&fit_x.beta);
        assert!((f0 - f1).amax() < 1e-10);
    }

    #[test]
    fn diagnostics_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = random_instance(&mut rng, 9, 8, 40, &[1.0, -1.0], &theta(1.0, 1.0, 1.0));
        // no random effects: GLS is OLS, and the model variance uses σ̂² itself
        let ols = fit_ols(&t).unwrap();
        let th = VarianceComponents::new(1e-12, 1e-12, ols.sigma2).unwrap();
        let ols = ols.with_model_covariance(&t, &th);
        let fit = fit_gls(&t, &th, &tight(), false).unwrap();
        let d = diagnose(&ols, &fit).unwrap();
        for v in d.naivete.iter().chain(&d.inefficiency) {
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
        assert!((d.max_naivete - 1.0).abs() < 1e-6);
    }

    #[test]
    fn row_clustered_covariate_is_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let th = theta(4.0, 0.2, 1.0);
        let base = random_instance(&mut rng, 10, 10, 60, &[0.0, 0.0], &th);
        // covariate constant within each row level
        let level_value: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) / 3.0).collect();
        let x = DMatrix::from_fn(60, 2, |k, c| if c == 0 { 1.0 } else { level_value[base.rows()[k]] });
        let t = base.with_data(base.y().to_vec(), x).unwrap();
        let ols = fit_ols(&t).unwrap().with_model_covariance(&t, &th);
        let fit = fit_gls(&t, &th, &tight(), false).unwrap();
        let d = diagnose(&ols, &fit).unwrap();
        // compare against the dense sandwich directly
        let prob = DenseProblem::new(&t, &th).unwrap();
        let xtx_inv = (t.x().transpose() * t.x()).try_inverse().unwrap();
        let dense_model = &xtx_inv * t.x().transpose() * &prob.v * t.x() * &xtx_inv;
        assert!((dense_model[(1, 1)] / ols.cov_naive[(1, 1)] - d.naivete[1]).abs() < 1e-9);
        assert!(d.naivete[1] > 1.0, "{:?}", d.naivete);
        assert!(d.inefficiency.iter().all(|&v| v >= 1.0 - 1e-8));
    }

    #[test]
    fn pipeline_runs_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let th = theta(1.0, 1.0, 1.0);
        let t = random_instance(&mut rng, 12, 10, 80, &[1.0, 0.5], &th);
        let cfg = PipelineConfig { want_blups: true, refine: true, ..Default::default() };
        let res = fit_pipeline(&t, &cfg).unwrap();
        assert!(res.initial_moments.is_some());
        assert!(res.diagnostics.is_some());
        assert_eq!(res.gls.blup_a.as_ref().unwrap().len(), 12);
    }
}
