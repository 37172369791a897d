//! Sparse-testing cross-validation: check genotypes observed everywhere,
//! all other genotypes observed in a random subset of environments, and
//! prediction of the remaining genotype-environment cells.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::env_features::{blend_correlation, random_correlation};
use crate::error::{Error, Result};
use crate::reml::{self, FitOptions};
use crate::rng::seeded_rng;
use crate::simulator::{simulate_met, SimConfig};
use crate::variance::{CovarianceModel, VarianceStructure};

/// (genotype, environment)
pub type CellKey = (String, String);

const SIM_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
const NOISE_SEED_MIX: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SparseDesign {
    pub n_checks: usize,
    pub envs_per_variety: usize,
    pub replicates: usize,
    pub seed: u64,
}

impl SparseDesign {
    fn validate(&self, p: usize) -> Result<()> {
        if self.n_checks < 1 {
            return Err(Error::InvalidDesign(
                "at least one check genotype is required".into(),
            ));
        }
        if self.envs_per_variety < 1 || self.envs_per_variety >= p {
            return Err(Error::InvalidDesign(format!(
                "envs_per_variety must lie in [1, {}) for {p} environments, got {}",
                p, self.envs_per_variety
            )));
        }
        Ok(())
    }

    /// Seed of the simulated dataset for a replicate.
    pub fn replicate_sim_seed(&self, replicate: usize) -> u64 {
        self.seed ^ (replicate as u64 + 1).wrapping_mul(SIM_SEED_MIX)
    }

    /// Seed of the random correlation matrix blended in for a replicate.
    pub fn replicate_noise_seed(&self, replicate: usize) -> u64 {
        self.seed ^ (replicate as u64 + 1).wrapping_mul(NOISE_SEED_MIX)
    }
}

#[derive(Debug, Clone)]
pub struct SparseSplit {
    pub train: Dataset,
    /// Indices into the source dataset's records.
    pub train_records: Vec<usize>,
    pub test_records: Vec<usize>,
    pub test_cells: Vec<CellKey>,
    pub checks: Vec<String>,
}

/// Splits `dataset` for one replicate. The split depends only on the
/// design seed and `replicate`.
pub fn sparse_split(
    dataset: &Dataset,
    design: &SparseDesign,
    replicate: usize,
) -> Result<SparseSplit> {
    let p = dataset.n_environments();
    design.validate(p)?;
    let mut rng = seeded_rng(design.seed, replicate as u64);

    let mut by_genotype: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, &g) in dataset.genotype_index().iter().enumerate() {
        by_genotype.entry(g).or_default().push(r);
    }
    let mut complete: Vec<usize> = by_genotype
        .iter()
        .filter(|(_, recs)| recs.len() == p)
        .map(|(&g, _)| g)
        .collect();
    if complete.len() < design.n_checks {
        return Err(Error::InvalidDesign(format!(
            "{} checks requested but only {} genotypes are observed in all {p} environments",
            design.n_checks,
            complete.len()
        )));
    }
    complete.shuffle(&mut rng);
    let mut checks: Vec<usize> = complete[..design.n_checks].to_vec();
    checks.sort_unstable();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&g, recs) in &by_genotype {
        if checks.binary_search(&g).is_ok() {
            train.extend_from_slice(recs);
            continue;
        }
        if recs.len() < design.envs_per_variety {
            return Err(Error::InvalidDesign(format!(
                "genotype `{}` is observed in {} environments, fewer than {}",
                dataset.genotype_labels()[g],
                recs.len(),
                design.envs_per_variety
            )));
        }
        let chosen = index::sample(&mut rng, recs.len(), design.envs_per_variety);
        let mut keep = vec![false; recs.len()];
        for i in chosen {
            keep[i] = true;
        }
        for (i, &r) in recs.iter().enumerate() {
            if keep[i] {
                train.push(r);
            } else {
                test.push(r);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    let test_cells = test
        .iter()
        .map(|&r| {
            let rec = &dataset.records()[r];
            (rec.genotype.clone(), rec.environment.clone())
        })
        .collect();
    Ok(SparseSplit {
        train: dataset.subset(&train),
        train_records: train,
        test_records: test,
        test_cells,
        checks: checks
            .iter()
            .map(|&g| dataset.genotype_labels()[g].clone())
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    /// Mean within-environment Pearson correlation; `None` when no
    /// environment had a defined correlation.
    pub mean_pearson: Option<f64>,
    pub mean_rmse: f64,
    /// Environments whose correlation was undefined and excluded.
    pub undefined_envs: usize,
    pub n_envs: usize,
}

/// Pearson correlation and RMSE per environment over the predicted cells,
/// averaged with equal weight across environments.
pub fn within_env_accuracy(
    predicted: &BTreeMap<CellKey, f64>,
    truth: &BTreeMap<CellKey, f64>,
) -> Result<Accuracy> {
    let mut by_env: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (cell, &pred) in predicted {
        let t = *truth.get(cell).ok_or_else(|| {
            Error::invalid(format!("no truth value for cell ({}, {})", cell.0, cell.1))
        })?;
        let entry = by_env.entry(cell.1.as_str()).or_default();
        entry.0.push(pred);
        entry.1.push(t);
    }
    if by_env.is_empty() {
        return Err(Error::invalid("no cells to score"));
    }
    let mut pearsons = Vec::new();
    let mut rmses = Vec::new();
    for (env, (pred, tru)) in &by_env {
        let mse = pred
            .iter()
            .zip(tru)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / pred.len() as f64;
        rmses.push(mse.sqrt());
        match pearson(pred, tru) {
            Some(r) => pearsons.push(r),
            None => info!(
                "correlation undefined in environment `{env}` ({} cells)",
                pred.len()
            ),
        }
    }
    let undefined_envs = by_env.len() - pearsons.len();
    if undefined_envs > 0 {
        warn!("{undefined_envs} environment(s) excluded from the mean correlation");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Accuracy {
        mean_pearson: (!pearsons.is_empty()).then(|| mean(&pearsons)),
        mean_rmse: mean(&rmses),
        undefined_envs,
        n_envs: by_env.len(),
    })
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Where replicate data come from.
#[derive(Debug, Clone)]
pub enum CvSource {
    /// Fresh simulation per replicate; accuracy against the true genetic
    /// values, predictions are BLUPs.
    Simulated(SimConfig),
    /// One observed dataset; accuracy against held-out phenotypes,
    /// predictions are fitted values.
    Observed(Dataset),
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub structure: VarianceStructure,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, structure: VarianceStructure) -> Self {
        Self {
            name: name.into(),
            structure,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CvOptions {
    /// Blend weights applied to correlation-based models; `None` fits each
    /// model once with its own matrix.
    pub lambdas: Option<Vec<f64>>,
    pub fit: FitOptions,
    /// Worker threads for replicates; 0 uses all available processors.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    pub model: String,
    pub replicate: usize,
    pub lambda: Option<f64>,
    /// NaN when undefined or when the fit failed.
    pub mean_pearson: f64,
    pub mean_rmse: f64,
    pub fit_seconds: f64,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvSummary {
    pub model: String,
    pub lambda: Option<f64>,
    pub n_converged: usize,
    pub n_failed: usize,
    pub mean_pearson: f64,
    pub median_pearson: f64,
    pub mean_rmse: f64,
    pub median_rmse: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CvReport {
    /// Ordered by replicate, then model, then λ.
    pub rows: Vec<CvRow>,
}

impl CvReport {
    pub fn rows_for(&self, model: &str, lambda: Option<f64>) -> Vec<&CvRow> {
        self.rows
            .iter()
            .filter(|r| r.model == model && r.lambda == lambda)
            .collect()
    }

    /// Mean and median per (model, λ) over converged replicates with
    /// finite metrics; failures are counted, not averaged.
    pub fn summary(&self) -> Vec<CvSummary> {
        let mut keys: Vec<(String, Option<f64>)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|(m, l)| *m == r.model && *l == r.lambda) {
                keys.push((r.model.clone(), r.lambda));
            }
        }
        keys.into_iter()
            .map(|(model, lambda)| {
                let rows = self.rows_for(&model, lambda);
                let ok: Vec<&&CvRow> = rows
                    .iter()
                    .filter(|r| r.converged && r.error.is_none())
                    .collect();
                let pear: Vec<f64> = ok
                    .iter()
                    .map(|r| r.mean_pearson)
                    .filter(|v| v.is_finite())
                    .collect();
                let rmse: Vec<f64> = ok
                    .iter()
                    .map(|r| r.mean_rmse)
                    .filter(|v| v.is_finite())
                    .collect();
                CvSummary {
                    n_converged: ok.len(),
                    n_failed: rows.len() - ok.len(),
                    mean_pearson: mean(&pear),
                    median_pearson: median(&pear),
                    mean_rmse: mean(&rmse),
                    median_rmse: median(&rmse),
                    model,
                    lambda,
                }
            })
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

/// Runs every replicate: obtain data, split, fit each model (and each λ for
/// correlation models), predict the test cells and score them.
pub fn run_cv(
    source: &CvSource,
    models: &[ModelSpec],
    design: &SparseDesign,
    opts: &CvOptions,
) -> Result<CvReport> {
    if models.is_empty() {
        return Err(Error::invalid("no models to cross-validate"));
    }
    if design.replicates == 0 {
        return Err(Error::invalid("replicates must be at least 1"));
    }
    if let Some(ls) = &opts.lambdas {
        if let Some(l) = ls.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::invalid(format!("blend weight {l} outside [0, 1]")));
        }
    }
    let run = || -> Vec<Result<Vec<CvRow>>> {
        (0..design.replicates)
            .into_par_iter()
            .map(|rep| run_replicate(source, models, design, opts, rep))
            .collect()
    };
    let results = if opts.jobs == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start {} workers: {e}", opts.jobs)))?
            .install(run)
    };
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(CvReport { rows })
}

fn run_replicate(
    source: &CvSource,
    models: &[ModelSpec],
    design: &SparseDesign,
    opts: &CvOptions,
    rep: usize,
) -> Result<Vec<CvRow>> {
    let (dataset, truth_by_record): (Dataset, Vec<f64>) = match source {
        CvSource::Simulated(cfg) => {
            let mut cfg = cfg.clone();
            cfg.seed = design.replicate_sim_seed(rep);
            let sim = simulate_met(&cfg)?;
            let ds = sim.dataset;
            let truth = (0..ds.n_records())
                .map(|r| sim.true_genetic_values[ds.cell_of(r)])
                .collect();
            (ds, truth)
        }
        CvSource::Observed(ds) => (ds.clone(), ds.values()),
    };
    let use_blups = matches!(source, CvSource::Simulated(_));
    let split = sparse_split(&dataset, design, rep)?;
    let truth: BTreeMap<CellKey, f64> = split
        .test_records
        .iter()
        .zip(&split.test_cells)
        .map(|(&r, c)| (c.clone(), truth_by_record[r]))
        .collect();

    let mut rows = Vec::new();
    for spec in models {
        let variants: Vec<(Option<f64>, VarianceStructure)> =
            match (&opts.lambdas, spec.structure.correlation()) {
                (Some(lambdas), Some(c)) => {
                    let noise = random_correlation(c.dim(), design.replicate_noise_seed(rep))?
                        .with_labels(c.labels().to_vec())?;
                    lambdas
                        .iter()
                        .map(|&l| {
                            Ok((
                                Some(l),
                                spec.structure
                                    .with_correlation(blend_correlation(c, &noise, l)?)?,
                            ))
                        })
                        .collect::<Result<_>>()?
                }
                _ => vec![(None, spec.structure.clone())],
            };
        for (lambda, structure) in variants {
            rows.push(score_model(
                &split, &structure, &spec.name, lambda, rep, &truth, use_blups, &opts.fit,
            ));
        }
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn score_model(
    split: &SparseSplit,
    structure: &dyn CovarianceModel,
    name: &str,
    lambda: Option<f64>,
    rep: usize,
    truth: &BTreeMap<CellKey, f64>,
    use_blups: bool,
    fit_opts: &FitOptions,
) -> CvRow {
    let start = Instant::now();
    let fitted = reml::fit(&split.train, structure, fit_opts);
    let fit_seconds = start.elapsed().as_secs_f64();
    let failed = |msg: String| {
        warn!("replicate {rep}, model `{name}`: {msg}");
        CvRow {
            model: name.to_string(),
            replicate: rep,
            lambda,
            mean_pearson: f64::NAN,
            mean_rmse: f64::NAN,
            fit_seconds,
            converged: false,
            error: Some(msg),
        }
    };
    let fit = match fitted {
        Ok(f) => f,
        Err(e) => return failed(e.to_string()),
    };
    let preds = match fit.predict_cells(&split.test_cells) {
        Ok(p) => p,
        Err(e) => return failed(e.to_string()),
    };
    let predicted: BTreeMap<CellKey, f64> = preds
        .into_iter()
        .map(|c| {
            let v = if use_blups { c.blup } else { c.fitted };
            ((c.genotype, c.environment), v)
        })
        .collect();
    match within_env_accuracy(&predicted, truth) {
        Ok(acc) => CvRow {
            model: name.to_string(),
            replicate: rep,
            lambda,
            mean_pearson: acc.mean_pearson.unwrap_or(f64::NAN),
            mean_rmse: acc.mean_rmse,
            fit_seconds,
            converged: fit.converged,
            error: None,
        },
        Err(e) => failed(e.to_string()),
    }
}

/// Per-genotype environment counts in a split's training set.
pub fn train_counts(split: &SparseSplit) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    for r in split.train.records() {
        *out.entry(r.genotype.clone()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PhenotypeRecord, RelationshipMatrix};
    use std::sync::Arc;

    fn complete(n: usize, p: usize) -> Dataset {
        let genos: Vec<String> = (0..n).map(|i| format!("g{i}")).collect();
        let envs: Vec<String> = (0..p).map(|i| format!("e{i}")).collect();
        let mut recs = Vec::new();
        for e in &envs {
            for g in &genos {
                recs.push(PhenotypeRecord::new(g.clone(), e.clone(), 0.0));
            }
        }
        Dataset::new(recs, Arc::new(RelationshipMatrix::identity(genos)), envs).unwrap()
    }

    fn cells(vals: &[(&str, &str, f64)]) -> BTreeMap<CellKey, f64> {
        vals.iter()
            .map(|(g, e, v)| ((g.to_string(), e.to_string()), *v))
            .collect()
    }

    #[test]
    fn split_cardinalities() {
        let ds = complete(30, 4);
        let design = SparseDesign {
            n_checks: 3,
            envs_per_variety: 2,
            replicates: 1,
            seed: 5,
        };
        let split = sparse_split(&ds, &design, 0).unwrap();
        assert_eq!(split.train.n_records(), 3 * 4 + 27 * 2);
        assert_eq!(
            split.train_records.len() + split.test_records.len(),
            ds.n_records()
        );
        let counts = train_counts(&split);
        for c in &split.checks {
            assert_eq!(counts[c], 4);
        }
        assert_eq!(counts.values().filter(|&&c| c == 2).count(), 27);
    }

    #[test]
    fn split_is_reproducible_and_varies_by_replicate() {
        let ds = complete(20, 5);
        let design = SparseDesign {
            n_checks: 2,
            envs_per_variety: 2,
            replicates: 2,
            seed: 11,
        };
        let a = sparse_split(&ds, &design, 1).unwrap();
        let b = sparse_split(&ds, &design, 1).unwrap();
        let c = sparse_split(&ds, &design, 2).unwrap();
        assert_eq!(a.train_records, b.train_records);
        assert_ne!(a.train_records, c.train_records);
    }

    #[test]
    fn infeasible_designs() {
        let ds = complete(10, 3);
        let too_many_envs = SparseDesign {
            n_checks: 1,
            envs_per_variety: 3,
            replicates: 1,
            seed: 0,
        };
        assert!(matches!(
            sparse_split(&ds, &too_many_envs, 0),
            Err(Error::InvalidDesign(_))
        ));
        let no_checks = SparseDesign {
            n_checks: 0,
            envs_per_variety: 1,
            replicates: 1,
            seed: 0,
        };
        assert!(sparse_split(&ds, &no_checks, 0).is_err());
        let too_many_checks = SparseDesign {
            n_checks: 11,
            envs_per_variety: 1,
            replicates: 1,
            seed: 0,
        };
        assert!(sparse_split(&ds, &too_many_checks, 0).is_err());
    }

    #[test]
    fn accuracy_of_truth_and_its_negation() {
        let truth = cells(&[
            ("a", "x", 1.0),
            ("b", "x", 2.0),
            ("c", "x", 4.0),
            ("a", "y", -1.0),
            ("b", "y", 0.5),
            ("c", "y", 3.0),
        ]);
        let acc = within_env_accuracy(&truth, &truth).unwrap();
        assert_eq!(acc.mean_pearson, Some(1.0));
        assert_eq!(acc.mean_rmse, 0.0);
        let neg: BTreeMap<CellKey, f64> = truth.iter().map(|(k, v)| (k.clone(), -v)).collect();
        let acc = within_env_accuracy(&neg, &truth).unwrap();
        assert!((acc.mean_pearson.unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn accuracy_matches_direct_computation() {
        // env x: pred (1, 2, 3) vs truth (1, 3, 2): r = 0.5, rmse = sqrt(2/3)
        // env y: pred (0, 0, 1) vs truth (1, 0, 0): r = -0.5, rmse = sqrt(2/3)
        let truth = cells(&[
            ("a", "x", 1.0),
            ("b", "x", 3.0),
            ("c", "x", 2.0),
            ("a", "y", 1.0),
            ("b", "y", 0.0),
            ("c", "y", 0.0),
        ]);
        let pred = cells(&[
            ("a", "x", 1.0),
            ("b", "x", 2.0),
            ("c", "x", 3.0),
            ("a", "y", 0.0),
            ("b", "y", 0.0),
            ("c", "y", 1.0),
        ]);
        let acc = within_env_accuracy(&pred, &truth).unwrap();
        assert!((acc.mean_pearson.unwrap() - 0.0).abs() < 1e-15);
        assert!((acc.mean_rmse - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_predictions_are_excluded_from_correlation() {
        let truth = cells(&[
            ("a", "x", 1.0),
            ("b", "x", 3.0),
            ("a", "y", 1.0),
            ("b", "y", 2.0),
        ]);
        let pred = cells(&[
            ("a", "x", 0.0),
            ("b", "x", 0.0),
            ("a", "y", 1.0),
            ("b", "y", 2.0),
        ]);
        let acc = within_env_accuracy(&pred, &truth).unwrap();
        assert_eq!(acc.undefined_envs, 1);
        assert_eq!(acc.mean_pearson, Some(1.0));
        assert!((acc.mean_rmse - 5.0f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(mean(&[]).is_nan());
    }
}
