//! Generalized least squares for linear models with two crossed random
//! effects, computed in O(N) per iteration by backfitting.
//!
//! The pipeline is: OLS, method-of-moments variance components on the OLS
//! residuals, backfitted covariates `X̃ = (I − S̃_G)X`, GLS coefficients with a
//! sandwich covariance, and optional BLUPs. See [`gls::fit_pipeline`].

pub mod backfit;
pub mod cli;
pub mod data_model;
pub mod error;
pub mod gls;
pub mod moments;
pub mod normlab;
pub mod reference;
pub mod smoother;

pub use backfit::{backfit, BackfitConfig, BackfitResult, Variant};
pub use data_model::{ingest_csv, write_csv, CsvSchema, Factor, ObservationTable};
pub use error::{Error, Result};
pub use gls::{diagnose, fit_gls, fit_ols, fit_pipeline, Diagnostics, GlsFit, OlsFit, PipelineConfig};
pub use moments::{MomentFit, VarianceComponents};
pub use normlab::{build_update_matrix, sample_design, simulate_dataset, SamplingModel, UpdateMatrix};
pub use smoother::{Centering, LevelEffects, ShrinkagePlan};
