//! Python bindings: tables, moment estimates, GLS fits, update-matrix norms
//! and the simulator.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};

use crossgls::backfit::{BackfitConfig, Variant};
use crossgls::data_model::{ingest_csv, write_csv, CsvSchema, ObservationTable};
use crossgls::gls::{fit_gls, fit_pipeline, PipelineConfig};
use crossgls::moments::{estimate, MomentsConfig, VarianceComponents};
use crossgls::normlab::{
    build_update_matrix, simulate_dataset, theoretical_bound as bound, SamplingModel, UPDATE_MATRIX_CAP, UPSILON_STAR,
};
use crossgls::Error;
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(crossgls_py, CrossGlsError, PyException);
create_exception!(crossgls_py, DivergedError, CrossGlsError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Diverged { .. } => DivergedError::new_err(e.to_string()),
        Error::Invalid(_) | Error::Config(_) | Error::CapExceeded { .. } | Error::EmptyDesign => {
            PyValueError::new_err(e.to_string())
        }
        other => CrossGlsError::new_err(other.to_string()),
    }
}

fn parse_variant(v: &str) -> PyResult<Variant> {
    v.parse().map_err(to_py)
}

/// Observations of a response indexed by a row level and a column level.
#[pyclass(name = "Table", module = "crossgls_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTable {
    inner: ObservationTable,
}

#[pymethods]
impl PyTable {
    /// `x` is a list of observation rows; it defaults to an intercept column.
    #[new]
    #[pyo3(signature = (rows, cols, y, x=None, n_rows=None, n_cols=None))]
    fn new(
        rows: Vec<usize>,
        cols: Vec<usize>,
        y: Vec<f64>,
        x: Option<Vec<Vec<f64>>>,
        n_rows: Option<usize>,
        n_cols: Option<usize>,
    ) -> PyResult<Self> {
        let n = y.len();
        let x = match x {
            None => DMatrix::from_element(n, 1, 1.0),
            Some(x) => {
                if x.len() != n {
                    return Err(PyValueError::new_err(format!("x has {} rows, y has {n}", x.len())));
                }
                let p = x.first().map_or(0, |r| r.len());
                if x.iter().any(|r| r.len() != p) {
                    return Err(PyValueError::new_err("x rows have unequal lengths"));
                }
                DMatrix::from_fn(n, p, |i, j| x[i][j])
            }
        };
        let r = n_rows.unwrap_or_else(|| rows.iter().max().map_or(0, |m| m + 1));
        let c = n_cols.unwrap_or_else(|| cols.iter().max().map_or(0, |m| m + 1));
        let inner = ObservationTable::new(rows, cols, y, x, r, c).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, row_col="row", col_col="col", response="y"))]
    fn from_csv(path: &str, row_col: &str, col_col: &str, response: &str) -> PyResult<Self> {
        let schema = CsvSchema {
            row_column: row_col.to_string(),
            col_column: col_col.to_string(),
            response: response.to_string(),
        };
        let f = File::open(path).map_err(|e| to_py(e.into()))?;
        Ok(Self {
            inner: ingest_csv(BufReader::new(f), &schema).map_err(to_py)?,
        })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        let f = File::create(path).map_err(|e| to_py(e.into()))?;
        write_csv(&self.inner, BufWriter::new(f)).map_err(to_py)
    }

    #[getter]
    fn n_obs(&self) -> usize {
        self.inner.n_obs()
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_row_levels()
    }

    #[getter]
    fn n_cols(&self) -> usize {
        self.inner.n_col_levels()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.inner.covariate_names().to_vec()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Table(n_obs={}, n_rows={}, n_cols={}, p={})",
            self.inner.n_obs(),
            self.inner.n_row_levels(),
            self.inner.n_col_levels(),
            self.inner.p()
        )
    }
}

/// Result of a GLS fit.
#[pyclass(name = "Fit", module = "crossgls_py", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyFit {
    beta: Vec<f64>,
    se: Option<Vec<f64>>,
    cov: Option<Vec<Vec<f64>>>,
    theta: (f64, f64, f64),
    iterations: usize,
    blup_a: Option<Vec<f64>>,
    blup_b: Option<Vec<f64>>,
    ols_beta: Option<Vec<f64>>,
    naivete: Option<Vec<f64>>,
    inefficiency: Option<Vec<f64>>,
}

#[pymethods]
impl PyFit {
    fn __repr__(&self) -> String {
        format!("Fit(beta={:?}, theta={:?}, iterations={})", self.beta, self.theta, self.iterations)
    }
}

fn theta_tuple(t: &VarianceComponents) -> (f64, f64, f64) {
    (t.sigma2_a, t.sigma2_b, t.sigma2_e)
}

fn base_fit(g: &crossgls::gls::GlsFit) -> PyFit {
    PyFit {
        beta: g.beta.clone(),
        se: g.se.clone(),
        cov: g
            .cov_beta
            .as_ref()
            .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect()),
        theta: theta_tuple(&g.theta),
        iterations: g.iterations.coefficients,
        blup_a: g.blup_a.as_ref().map(|e| e.values.clone()),
        blup_b: g.blup_b.as_ref().map(|e| e.values.clone()),
        ols_beta: None,
        naivete: None,
        inefficiency: None,
    }
}

/// Method-of-moments variance components from residuals `y − Xβ`
/// (β defaults to zero).
#[pyfunction]
#[pyo3(signature = (table, beta=None))]
fn estimate_moments(table: &PyTable, beta: Option<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
    let beta = beta.unwrap_or_else(|| vec![0.0; table.inner.p()]);
    let fit = estimate(&table.inner, &beta, &MomentsConfig::default()).map_err(to_py)?;
    Ok(theta_tuple(&fit.theta))
}

/// Full pipeline: OLS, moments, backfitted GLS, covariance, diagnostics.
#[pyfunction]
#[pyo3(signature = (table, variant="m3", tol=1e-8, max_iter=1000, blups=false, refine=false))]
fn fit(table: &PyTable, variant: &str, tol: f64, max_iter: usize, blups: bool, refine: bool) -> PyResult<PyFit> {
    let cfg = PipelineConfig {
        backfit: BackfitConfig {
            variant: parse_variant(variant)?,
            tol,
            max_iter,
            ..Default::default()
        },
        want_blups: blups,
        refine,
        ..Default::default()
    };
    let res = fit_pipeline(&table.inner, &cfg).map_err(to_py)?;
    let mut out = base_fit(&res.gls);
    out.ols_beta = Some(res.ols.beta.clone());
    if let Some(d) = &res.diagnostics {
        out.naivete = Some(d.naivete.clone());
        out.inefficiency = Some(d.inefficiency.clone());
    }
    Ok(out)
}

/// GLS at known variance components `theta = (σ²_A, σ²_B, σ²_E)`.
#[pyfunction(name = "fit_gls")]
#[pyo3(signature = (table, theta, variant="m3", tol=1e-8, max_iter=1000, blups=false))]
fn fit_gls_py(
    table: &PyTable,
    theta: (f64, f64, f64),
    variant: &str,
    tol: f64,
    max_iter: usize,
    blups: bool,
) -> PyResult<PyFit> {
    let th = VarianceComponents::new(theta.0, theta.1, theta.2).map_err(to_py)?;
    let cfg = BackfitConfig {
        variant: parse_variant(variant)?,
        tol,
        max_iter,
        ..Default::default()
    };
    let g = fit_gls(&table.inner, &th, &cfg, blups).map_err(to_py)?;
    Ok(base_fit(&g))
}

/// Norms and spectral radius of the column-effect update matrix.
#[pyfunction]
#[pyo3(signature = (table, lambda_a=0.0, lambda_b=0.0, variant="m2"))]
fn update_matrix_norms(table: &PyTable, lambda_a: f64, lambda_b: f64, variant: &str) -> PyResult<HashMap<String, f64>> {
    let m = build_update_matrix(&table.inner, lambda_a, lambda_b, parse_variant(variant)?, UPDATE_MATRIX_CAP)
        .map_err(to_py)?;
    Ok(HashMap::from([
        ("norm1".to_string(), m.norm1),
        ("norm2".to_string(), m.norm2),
        ("norm_inf".to_string(), m.norm_inf),
        ("spectral_radius".to_string(), m.spectral_radius),
    ]))
}

/// Dataset from the Bernoulli sampling model with an intercept and
/// `p − 1` standard normal covariates.
#[pyfunction]
#[pyo3(signature = (s, rho, kappa, upsilon=UPSILON_STAR, p=8, theta=(1.0, 1.0, 1.0), beta=None, seed=1))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    s: u64,
    rho: f64,
    kappa: f64,
    upsilon: f64,
    p: usize,
    theta: (f64, f64, f64),
    beta: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<PyTable> {
    let model = SamplingModel::new(s, rho, kappa, upsilon, seed).map_err(to_py)?;
    let th = VarianceComponents::new(theta.0, theta.1, theta.2).map_err(to_py)?;
    let beta = beta.unwrap_or_else(|| vec![0.0; p]);
    let sim = simulate_dataset(&model, p, &th, &beta, seed.wrapping_add(1)).map_err(to_py)?;
    Ok(PyTable { inner: sim.table })
}

/// `Υ² − Υ⁻²`.
#[pyfunction]
fn theoretical_bound(upsilon: f64) -> f64 {
    bound(upsilon)
}

#[pymodule]
fn crossgls_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTable>()?;
    m.add_class::<PyFit>()?;
    m.add_function(wrap_pyfunction!(estimate_moments, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gls_py, m)?)?;
    m.add_function(wrap_pyfunction!(update_matrix_norms, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_bound, m)?)?;
    m.add("UPSILON_STAR", UPSILON_STAR)?;
    m.add("CrossGlsError", m.py().get_type::<CrossGlsError>())?;
    m.add("DivergedError", m.py().get_type::<DivergedError>())?;
    Ok(())
}
