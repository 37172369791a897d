#![allow(dead_code)]

use std::sync::Arc;

use gxe_reml::env_features::{env_distance, random_correlation, standardize_rows};
use gxe_reml::rng::seeded_rng;
use gxe_reml::simulator::{kinship_from_markers, simulate_markers};
use gxe_reml::{
    EnvCorrelationMatrix, EnvDistanceMatrix, RelationshipMatrix, StructureKind, VarianceStructure,
};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn env_labels(p: usize) -> Vec<String> {
    (1..=p).map(|i| format!("E{i}")).collect()
}

/// Distance matrix between p environments built from q random standardized
/// covariates.
pub fn random_distance(p: usize, q: usize, seed: u64) -> EnvDistanceMatrix {
    let mut rng = seeded_rng(seed, 77);
    let raw = DMatrix::from_fn(q, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let vars = (0..q).map(|k| format!("v{k}")).collect();
    env_distance(&standardize_rows(&raw, vars, env_labels(p)).unwrap()).unwrap()
}

pub fn random_corr(p: usize, seed: u64) -> EnvCorrelationMatrix {
    random_correlation(p, seed).unwrap()
}

pub fn kinship(n: usize, m: usize, seed: u64) -> Arc<RelationshipMatrix> {
    Arc::new(kinship_from_markers(&simulate_markers(n, m, seed).unwrap()).unwrap())
}

/// One structure of the given kind over p environments.
pub fn structure(kind: StructureKind, p: usize, seed: u64) -> VarianceStructure {
    match kind {
        StructureKind::MainEffect => VarianceStructure::main_effect(env_labels(p)).unwrap(),
        StructureKind::Diagonal => VarianceStructure::diagonal(env_labels(p)).unwrap(),
        StructureKind::CorrSingleVar => VarianceStructure::corr_single(random_corr(p, seed)),
        StructureKind::CorrMultiVar => VarianceStructure::corr_multi(random_corr(p, seed)),
        StructureKind::KernelSingleVar => {
            VarianceStructure::kernel_single(random_distance(p, 6, seed))
        }
        StructureKind::KernelMultiVar => {
            VarianceStructure::kernel_multi(random_distance(p, 6, seed))
        }
        StructureKind::KernelAveraging => {
            VarianceStructure::kernel_averaging(random_distance(p, 6, seed), None).unwrap()
        }
    }
}

/// Random valid parameters: variances in [0.2, 3], bandwidths within a
/// factor of five of 1/d̄.
pub fn random_params<R: Rng>(s: &VarianceStructure, rng: &mut R) -> Vec<f64> {
    use gxe_reml::variance::ParamRole;
    use gxe_reml::CovarianceModel;
    let dbar = s.distance().map(|d| d.mean_off_diagonal()).unwrap_or(1.0);
    s.param_roles()
        .iter()
        .map(|r| match r {
            ParamRole::Variance => rng.random_range(0.2..3.0),
            ParamRole::Bandwidth => (rng.random_range(-1.6f64..1.6)).exp() / dbar,
        })
        .collect()
}
