//! Genotype-by-environment linear mixed models fitted by REML with
//! environment covariance structures built from environmental covariates:
//! fixed correlation matrices, Gaussian kernels with an estimated bandwidth,
//! heterogeneous per-environment variances and kernel averaging.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`env_features`]: weather → GDD-binned covariates → C and D matrices
//! - [`variance`]: Σ(κ) and ∂Σ/∂κ for every structure
//! - [`reml`]: likelihood, AI-REML optimizer, BLUPs and cell predictions
//! - [`simulator`]: synthetic markers, kinship and multi-environment trials
//! - [`cv`]: sparse-testing cross-validation and accuracy metrics
//! - [`io`]: CSV and key = value file formats

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cv;
pub mod data;
pub mod env_features;
pub mod error;
pub mod io;
pub mod linalg;
pub mod reml;
pub mod rng;
pub mod simulator;
pub mod variance;

pub use data::{Dataset, PhenotypeRecord, RelationshipMatrix};
pub use env_features::{EnvCorrelationMatrix, EnvDistanceMatrix, EnvFeatureMatrix};
pub use error::{Error, ErrorClass, Result};
pub use reml::{FitOptions, FitResult, RemlProblem};
pub use variance::{CovarianceModel, ParamVector, StructureKind, VarianceStructure};
