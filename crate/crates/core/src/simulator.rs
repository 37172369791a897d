//! Synthetic multi-environment trials drawn from a known Σ ⊗ K model.
//!
//! Random streams (see [`crate::rng`]): markers use stream 1, genetic
//! values stream 2, residual noise stream 3, all from the config seed.

use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{Dataset, PhenotypeRecord, RelationshipMatrix};
use crate::error::{Error, Result};
use crate::linalg::{self, PSD_REL_TOL};
use crate::rng::seeded_rng;
use crate::variance::{CovarianceModel, ParamVector, VarianceStructure};

const MARKER_STREAM: u64 = 1;
const GENETIC_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_genotypes: usize,
    pub n_markers: usize,
    pub truth: VarianceStructure,
    pub truth_kappa: ParamVector,
    /// Residual variance; 0 gives noise-free phenotypes.
    pub resid_var: f64,
    pub env_means: Vec<f64>,
    pub seed: u64,
    /// Use this kinship instead of simulating markers.
    pub kinship: Option<Arc<RelationshipMatrix>>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub dataset: Dataset,
    /// u in genotype-within-environment order (index e·n + g).
    pub true_genetic_values: DVector<f64>,
    pub true_kappa: ParamVector,
    pub true_resid_var: f64,
}

/// n×m genotype codes in {0, 1, 2}: per-marker allele frequency uniform on
/// [0.1, 0.9], each genotype the sum of two Bernoulli draws.
pub fn simulate_markers(n: usize, m: usize, seed: u64) -> Result<DMatrix<u8>> {
    if n < 2 || m < 2 {
        return Err(Error::invalid(format!(
            "marker simulation needs n, m >= 2 (got {n}, {m})"
        )));
    }
    let mut rng = seeded_rng(seed, MARKER_STREAM);
    let mut out = DMatrix::zeros(n, m);
    for j in 0..m {
        let freq: f64 = rng.random_range(0.1..=0.9);
        for i in 0..n {
            out[(i, j)] = u8::from(rng.random_bool(freq)) + u8::from(rng.random_bool(freq));
        }
    }
    Ok(out)
}

/// VanRaden kinship K = WWᵀ / (2 Σ f(1 − f)) with W the markers centred by
/// twice the observed allele frequency. Monomorphic markers are dropped.
/// Genotypes are labelled `G1..Gn`.
pub fn kinship_from_markers(markers: &DMatrix<u8>) -> Result<RelationshipMatrix> {
    let (n, m) = markers.shape();
    let mut cols = Vec::with_capacity(m);
    let mut denom = 0.0;
    for j in 0..m {
        let f = markers.column(j).iter().map(|&v| v as f64).sum::<f64>() / (2.0 * n as f64);
        if f <= 0.0 || f >= 1.0 {
            continue;
        }
        denom += 2.0 * f * (1.0 - f);
        cols.push((j, 2.0 * f));
    }
    if cols.len() < m {
        warn!("dropped {} monomorphic markers", m - cols.len());
    }
    if cols.is_empty() {
        return Err(Error::invalid(
            "all markers are monomorphic; kinship is undefined",
        ));
    }
    let w = DMatrix::from_fn(n, cols.len(), |i, c| {
        let (j, centre) = cols[c];
        markers[(i, j)] as f64 - centre
    });
    let mut k = (&w * w.transpose()).scale(1.0 / denom);
    linalg::symmetrize_in_place(&mut k);
    let labels = (1..=n).map(|i| format!("G{i}")).collect();
    Ok(RelationshipMatrix::from_trusted(k, labels))
}

/// Draws u ~ N(0, Σ ⊗ K) as (F_Σ ⊗ F_K) z, with F F ᵀ the PSD factors of
/// Σ and K; the result is in genotype-within-environment order.
pub fn simulate_genetic_values<R: Rng + ?Sized>(
    sigma: &DMatrix<f64>,
    kinship: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    linalg::check_psd(sigma, "environment covariance", PSD_REL_TOL)
        .map_err(|e| Error::DegenerateTruth(e.to_string()))?;
    linalg::check_psd(kinship, "kinship", PSD_REL_TOL)
        .map_err(|e| Error::DegenerateTruth(e.to_string()))?;
    let (n, p) = (kinship.nrows(), sigma.nrows());
    let fs = linalg::psd_factor(sigma);
    let fk = linalg::psd_factor(kinship);
    let z = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng));
    // vec(F_K Z F_Σᵀ) = (F_Σ ⊗ F_K) vec(Z)
    let u = &fk * z * fs.transpose();
    Ok(DVector::from_column_slice(u.as_slice()))
}

/// Complete multi-environment trial: every genotype in every environment,
/// y = env mean + u + ε.
pub fn simulate_met(config: &SimConfig) -> Result<SimOutput> {
    let p = config.truth.dim();
    if config.env_means.len() != p {
        return Err(Error::invalid(format!(
            "{} environment means for {p} environments",
            config.env_means.len()
        )));
    }
    if !(config.resid_var >= 0.0) || !config.resid_var.is_finite() {
        return Err(Error::invalid(format!(
            "residual variance must be >= 0, got {}",
            config.resid_var
        )));
    }
    let kinship = match &config.kinship {
        Some(k) => Arc::clone(k),
        None => {
            if config.n_markers < config.n_genotypes {
                warn!(
                    "simulating {} markers for {} genotypes; kinship will be rank deficient",
                    config.n_markers, config.n_genotypes
                );
            }
            let markers = simulate_markers(config.n_genotypes, config.n_markers, config.seed)?;
            Arc::new(kinship_from_markers(&markers)?)
        }
    };
    let n = kinship.dim();
    let sigma = config
        .truth
        .evaluate(&config.truth_kappa)
        .map_err(|e| Error::DegenerateTruth(e.to_string()))?
        .sigma;

    let mut rng = seeded_rng(config.seed, GENETIC_STREAM);
    let u = simulate_genetic_values(&sigma, kinship.values(), &mut rng)?;

    let mut noise_rng = seeded_rng(config.seed, NOISE_STREAM);
    let noise =
        Normal::new(0.0, config.resid_var.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let env_labels = config.truth.labels().to_vec();
    let mut records = Vec::with_capacity(n * p);
    for (e, env) in env_labels.iter().enumerate() {
        for (g, geno) in kinship.labels().iter().enumerate() {
            let eps = if config.resid_var > 0.0 {
                noise.sample(&mut noise_rng)
            } else {
                0.0
            };
            records.push(PhenotypeRecord::new(
                geno.clone(),
                env.clone(),
                config.env_means[e] + u[e * n + g] + eps,
            ));
        }
    }
    let dataset = Dataset::new(records, kinship, env_labels)?;
    Ok(SimOutput {
        dataset,
        true_genetic_values: u,
        true_kappa: config.truth_kappa.clone(),
        true_resid_var: config.resid_var,
    })
}
