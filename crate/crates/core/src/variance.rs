//! Environment-side covariance structures Σ(κ) with analytic first
//! derivatives.
//!
//! Every structure follows the same plugin contract: given the parameter
//! vector κ it returns the p×p covariance matrix and one derivative matrix
//! per parameter, in parameter order. The REML engine only ever talks to a
//! [`CovarianceModel`], so new structures can be added by implementing that
//! trait.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::env_features::{EnvCorrelationMatrix, EnvDistanceMatrix};
use crate::error::{Error, Result};

/// Number of bandwidths in the default kernel-averaging grid.
pub const DEFAULT_GRID_SIZE: usize = 7;

/// What a parameter means; the optimizer uses it for initial values and
/// for the scale-equivariance contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Variance,
    Bandwidth,
}

/// Ordered parameter vector κ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Σ(κ) together with ∂Σ/∂κᵢ for every parameter.
#[derive(Debug, Clone)]
pub struct CovarianceWithDerivatives {
    pub sigma: DMatrix<f64>,
    pub derivs: Vec<DMatrix<f64>>,
}

/// The covariance plugin contract.
pub trait CovarianceModel: Send + Sync {
    /// Environment labels, in the order used by Σ.
    fn labels(&self) -> &[String];

    fn n_params(&self) -> usize;

    fn param_names(&self) -> Vec<String>;

    fn param_roles(&self) -> Vec<ParamRole>;

    fn evaluate(&self, kappa: &ParamVector) -> Result<CovarianceWithDerivatives>;

    /// Starting point given a data-derived variance scale.
    fn default_init(&self, variance_scale: f64) -> ParamVector;

    fn dim(&self) -> usize {
        self.labels().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StructureKind {
    MainEffect,
    Diagonal,
    CorrSingleVar,
    CorrMultiVar,
    KernelSingleVar,
    KernelMultiVar,
    KernelAveraging,
}

impl StructureKind {
    pub const ALL: [StructureKind; 7] = [
        StructureKind::MainEffect,
        StructureKind::Diagonal,
        StructureKind::CorrSingleVar,
        StructureKind::CorrMultiVar,
        StructureKind::KernelSingleVar,
        StructureKind::KernelMultiVar,
        StructureKind::KernelAveraging,
    ];

    /// Short name used on the command line.
    pub fn short_name(self) -> &'static str {
        match self {
            StructureKind::MainEffect => "main",
            StructureKind::Diagonal => "diag",
            StructureKind::CorrSingleVar => "cor1",
            StructureKind::CorrMultiVar => "corP",
            StructureKind::KernelSingleVar => "kern1",
            StructureKind::KernelMultiVar => "kernP",
            StructureKind::KernelAveraging => "ka",
        }
    }

    pub fn needs_correlation(self) -> bool {
        matches!(
            self,
            StructureKind::CorrSingleVar | StructureKind::CorrMultiVar
        )
    }

    pub fn needs_distance(self) -> bool {
        matches!(
            self,
            StructureKind::KernelSingleVar
                | StructureKind::KernelMultiVar
                | StructureKind::KernelAveraging
        )
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StructureKind::ALL
            .into_iter()
            .find(|k| k.short_name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown structure `{s}` (expected main|diag|cor1|corP|kern1|kernP|ka)"
                ))
            })
    }
}

#[derive(Debug, Clone)]
enum FixedData {
    None,
    Correlation(EnvCorrelationMatrix),
    Distance(EnvDistanceMatrix),
}

/// One of the built-in environment covariance models.
#[derive(Debug, Clone)]
pub struct VarianceStructure {
    kind: StructureKind,
    labels: Vec<String>,
    fixed: FixedData,
    grid: Vec<f64>,
    /// exp(−θ_m D) for each grid bandwidth (kernel averaging only).
    grid_kernels: Vec<DMatrix<f64>>,
}

impl VarianceStructure {
    /// Σ = σ² J_p.
    pub fn main_effect(labels: Vec<String>) -> Result<Self> {
        Self::without_data(StructureKind::MainEffect, labels)
    }

    /// Σ = diag(σ²₁, …, σ²_p).
    pub fn diagonal(labels: Vec<String>) -> Result<Self> {
        Self::without_data(StructureKind::Diagonal, labels)
    }

    /// Σ = σ² C.
    pub fn corr_single(c: EnvCorrelationMatrix) -> Self {
        Self::with_corr(StructureKind::CorrSingleVar, c)
    }

    /// Σ = ssᵀ ∘ C.
    pub fn corr_multi(c: EnvCorrelationMatrix) -> Self {
        Self::with_corr(StructureKind::CorrMultiVar, c)
    }

    /// Σ = σ² exp(−θD).
    pub fn kernel_single(d: EnvDistanceMatrix) -> Self {
        Self::with_dist(StructureKind::KernelSingleVar, d)
    }

    /// Σ = ssᵀ ∘ exp(−θD).
    pub fn kernel_multi(d: EnvDistanceMatrix) -> Self {
        Self::with_dist(StructureKind::KernelMultiVar, d)
    }

    /// Σ = Σ_m σ²_m exp(−θ_m D) over a fixed bandwidth grid; `None` uses
    /// [`default_bandwidth_grid`].
    pub fn kernel_averaging(d: EnvDistanceMatrix, grid: Option<Vec<f64>>) -> Result<Self> {
        let grid = match grid {
            Some(g) => g,
            None => default_bandwidth_grid(&d)?,
        };
        if grid.is_empty() {
            return Err(Error::invalid("bandwidth grid is empty"));
        }
        if grid.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::invalid(
                "bandwidth grid values must be positive and finite",
            ));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("bandwidth grid must be strictly increasing"));
        }
        let grid_kernels = grid
            .iter()
            .map(|&t| gaussian_kernel(&d, t))
            .collect::<Result<Vec<_>>>()?;
        let mut s = Self::with_dist(StructureKind::KernelAveraging, d);
        s.grid = grid;
        s.grid_kernels = grid_kernels;
        Ok(s)
    }

    fn without_data(kind: StructureKind, labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("structure needs at least one environment"));
        }
        Ok(Self {
            kind,
            labels,
            fixed: FixedData::None,
            grid: Vec::new(),
            grid_kernels: Vec::new(),
        })
    }

    fn with_corr(kind: StructureKind, c: EnvCorrelationMatrix) -> Self {
        Self {
            kind,
            labels: c.labels().to_vec(),
            fixed: FixedData::Correlation(c),
            grid: Vec::new(),
            grid_kernels: Vec::new(),
        }
    }

    fn with_dist(kind: StructureKind, d: EnvDistanceMatrix) -> Self {
        Self {
            kind,
            labels: d.labels().to_vec(),
            fixed: FixedData::Distance(d),
            grid: Vec::new(),
            grid_kernels: Vec::new(),
        }
    }

    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn bandwidth_grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn correlation(&self) -> Option<&EnvCorrelationMatrix> {
        match &self.fixed {
            FixedData::Correlation(c) => Some(c),
            _ => None,
        }
    }

    pub fn distance(&self) -> Option<&EnvDistanceMatrix> {
        match &self.fixed {
            FixedData::Distance(d) => Some(d),
            _ => None,
        }
    }

    /// Same kind, new correlation matrix (used for λ-blended runs).
    pub fn with_correlation(&self, c: EnvCorrelationMatrix) -> Result<Self> {
        if !self.kind.needs_correlation() {
            return Err(Error::invalid(format!(
                "structure `{}` does not use a correlation matrix",
                self.kind
            )));
        }
        if c.labels() != self.labels.as_slice() {
            return Err(Error::invalid(
                "replacement correlation matrix has different labels",
            ));
        }
        Ok(Self::with_corr(self.kind, c))
    }

    fn corr_values(&self) -> &DMatrix<f64> {
        match &self.fixed {
            FixedData::Correlation(c) => c.values(),
            _ => unreachable!("correlation structure without a correlation matrix"),
        }
    }

    fn dist(&self) -> &EnvDistanceMatrix {
        match &self.fixed {
            FixedData::Distance(d) => d,
            _ => unreachable!("kernel structure without a distance matrix"),
        }
    }

    fn check_kappa(&self, kappa: &ParamVector) -> Result<()> {
        if kappa.len() != self.n_params() {
            return Err(Error::contract(format!(
                "structure `{}` expects {} parameters, got {}",
                self.kind,
                self.n_params(),
                kappa.len()
            )));
        }
        if let Some((i, v)) = kappa
            .values()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0) || !v.is_finite())
        {
            return Err(Error::contract(format!(
                "parameter `{}` must be positive and finite, got {v}",
                self.param_names()[i]
            )));
        }
        Ok(())
    }
}

impl CovarianceModel for VarianceStructure {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn n_params(&self) -> usize {
        let p = self.labels.len();
        match self.kind {
            StructureKind::MainEffect | StructureKind::CorrSingleVar => 1,
            StructureKind::Diagonal | StructureKind::CorrMultiVar => p,
            StructureKind::KernelSingleVar => 2,
            StructureKind::KernelMultiVar => p + 1,
            StructureKind::KernelAveraging => self.grid.len(),
        }
    }

    fn param_names(&self) -> Vec<String> {
        let per_env = || self.labels.iter().map(|l| format!("sigma2_{l}"));
        match self.kind {
            StructureKind::MainEffect | StructureKind::CorrSingleVar => vec!["sigma2".into()],
            StructureKind::Diagonal | StructureKind::CorrMultiVar => per_env().collect(),
            StructureKind::KernelSingleVar => vec!["theta".into(), "sigma2".into()],
            StructureKind::KernelMultiVar => std::iter::once("theta".to_string())
                .chain(per_env())
                .collect(),
            StructureKind::KernelAveraging => (1..=self.grid.len())
                .map(|m| format!("sigma2_k{m}"))
                .collect(),
        }
    }

    fn param_roles(&self) -> Vec<ParamRole> {
        let mut roles = vec![ParamRole::Variance; self.n_params()];
        if matches!(
            self.kind,
            StructureKind::KernelSingleVar | StructureKind::KernelMultiVar
        ) {
            roles[0] = ParamRole::Bandwidth;
        }
        roles
    }

    fn evaluate(&self, kappa: &ParamVector) -> Result<CovarianceWithDerivatives> {
        self.check_kappa(kappa)?;
        let p = self.labels.len();
        let k = kappa.values();
        Ok(match self.kind {
            StructureKind::MainEffect => {
                let j = DMatrix::from_element(p, p, 1.0);
                CovarianceWithDerivatives {
                    sigma: j.scale(k[0]),
                    derivs: vec![j],
                }
            }
            StructureKind::CorrSingleVar => {
                let c = self.corr_values();
                CovarianceWithDerivatives {
                    sigma: c.scale(k[0]),
                    derivs: vec![c.clone()],
                }
            }
            StructureKind::Diagonal => {
                let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(k));
                let derivs = (0..p)
                    .map(|i| {
                        let mut e = DMatrix::zeros(p, p);
                        e[(i, i)] = 1.0;
                        e
                    })
                    .collect();
                CovarianceWithDerivatives { sigma, derivs }
            }
            StructureKind::CorrMultiVar => {
                let (sigma, derivs) = heterogeneous(self.corr_values(), k);
                CovarianceWithDerivatives { sigma, derivs }
            }
            StructureKind::KernelSingleVar => {
                let d = self.dist().values();
                let kern = gaussian_kernel(self.dist(), k[0])?;
                let dtheta = d.component_mul(&kern).scale(-k[1]);
                CovarianceWithDerivatives {
                    sigma: kern.scale(k[1]),
                    derivs: vec![dtheta, kern],
                }
            }
            StructureKind::KernelMultiVar => {
                let d = self.dist().values();
                let kern = gaussian_kernel(self.dist(), k[0])?;
                let (sigma, var_derivs) = heterogeneous(&kern, &k[1..]);
                // −(ssᵀ) ∘ D ∘ exp(−θD) = −D ∘ Σ
                let dtheta = -d.component_mul(&sigma);
                let mut derivs = Vec::with_capacity(p + 1);
                derivs.push(dtheta);
                derivs.extend(var_derivs);
                CovarianceWithDerivatives { sigma, derivs }
            }
            StructureKind::KernelAveraging => {
                let (total, c_tilde) = kernel_average_parts(&self.grid_kernels, k)?;
                CovarianceWithDerivatives {
                    sigma: c_tilde.scale(total),
                    derivs: self.grid_kernels.clone(),
                }
            }
        })
    }

    fn default_init(&self, variance_scale: f64) -> ParamVector {
        let v = 0.5 * variance_scale;
        let mut init: Vec<f64> = self
            .param_roles()
            .into_iter()
            .map(|r| match r {
                ParamRole::Variance => v,
                ParamRole::Bandwidth => {
                    let dbar = self.dist().mean_off_diagonal();
                    if dbar > 0.0 {
                        1.0 / dbar
                    } else {
                        1.0
                    }
                }
            })
            .collect();
        if self.kind == StructureKind::KernelAveraging {
            let m = self.grid.len() as f64;
            init.iter_mut().for_each(|x| *x /= m);
        }
        ParamVector(init)
    }
}

/// Σ = ssᵀ ∘ R with sᵢ = √vᵢ and the per-variance derivative matrices.
fn heterogeneous(r: &DMatrix<f64>, variances: &[f64]) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let p = variances.len();
    let s: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    let sigma = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            variances[i] * r[(i, i)]
        } else {
            s[i] * s[j] * r[(i, j)]
        }
    });
    let derivs = (0..p)
        .map(|i| {
            let mut m = DMatrix::zeros(p, p);
            for j in 0..p {
                if j == i {
                    m[(i, i)] = r[(i, i)];
                } else {
                    let e = 0.5 * s[j] * r[(i, j)] / s[i];
                    m[(i, j)] = e;
                    m[(j, i)] = e;
                }
            }
            m
        })
        .collect();
    (sigma, derivs)
}

/// Entrywise exp(−θ·D). θ = 0 gives J_p.
pub fn gaussian_kernel(d: &EnvDistanceMatrix, theta: f64) -> Result<DMatrix<f64>> {
    if !(theta >= 0.0) || !theta.is_finite() {
        return Err(Error::invalid(format!(
            "bandwidth must be non-negative and finite, got {theta}"
        )));
    }
    Ok(d.values().map(|x| (-theta * x).exp()))
}

fn kernel_average_parts(kernels: &[DMatrix<f64>], weights: &[f64]) -> Result<(f64, DMatrix<f64>)> {
    if weights.len() != kernels.len() {
        return Err(Error::contract(format!(
            "kernel averaging expects {} weights, got {}",
            kernels.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::contract(
            "kernel averaging weights must be non-negative and finite",
        ));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let p = kernels[0].nrows();
    let mut c = DMatrix::zeros(p, p);
    for (w, kern) in weights.iter().zip(kernels) {
        c += kern.scale(w / total);
    }
    for i in 0..p {
        c[(i, i)] = 1.0;
    }
    Ok((total, c))
}

/// Splits a kernel-averaging covariance into σ̃² = Σ σ²_m and the averaged
/// kernel C̃, so that σ̃² C̃ equals the evaluated Σ.
pub fn average_kernel(
    kappa: &ParamVector,
    structure: &VarianceStructure,
) -> Result<(f64, DMatrix<f64>)> {
    if structure.kind != StructureKind::KernelAveraging {
        return Err(Error::contract(format!(
            "average_kernel needs a `ka` structure, got `{}`",
            structure.kind
        )));
    }
    kernel_average_parts(&structure.grid_kernels, kappa.values())
}

/// `DEFAULT_GRID_SIZE` log-spaced bandwidths spanning [0.1/d̄, 10/d̄], d̄ the
/// mean off-diagonal distance.
pub fn default_bandwidth_grid(d: &EnvDistanceMatrix) -> Result<Vec<f64>> {
    let dbar = d.mean_off_diagonal();
    if !(dbar > 0.0) {
        return Err(Error::invalid(
            "cannot derive a bandwidth grid from an all-zero distance matrix",
        ));
    }
    let (lo, hi) = ((0.1 / dbar).ln(), (10.0 / dbar).ln());
    let steps = (DEFAULT_GRID_SIZE - 1) as f64;
    Ok((0..DEFAULT_GRID_SIZE)
        .map(|i| (lo + (hi - lo) * i as f64 / steps).exp())
        .collect())
}
