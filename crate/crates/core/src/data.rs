use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::env_features::SYMMETRY_TOL;
use crate::error::{Error, Result};
use crate::linalg::{self, PSD_REL_TOL};

/// One BLUE-level observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeRecord {
    pub genotype: String,
    pub environment: String,
    pub value: f64,
}

impl PhenotypeRecord {
    pub fn new(genotype: impl Into<String>, environment: impl Into<String>, value: f64) -> Self {
        Self {
            genotype: genotype.into(),
            environment: environment.into(),
            value,
        }
    }
}

/// Genomic relationship matrix K on the correlation scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationshipMatrix {
    values: DMatrix<f64>,
    labels: Vec<String>,
}

impl RelationshipMatrix {
    /// Validates symmetry (then symmetrizes) and positive semidefiniteness.
    pub fn new(mut values: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        if !values.is_square() || values.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "kinship is {}x{} with {} labels",
                values.nrows(),
                values.ncols(),
                labels.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("kinship contains non-finite entries"));
        }
        let asym = linalg::max_asymmetry(&values);
        if asym > SYMMETRY_TOL {
            return Err(Error::invalid(format!(
                "kinship is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        linalg::symmetrize_in_place(&mut values);
        linalg::check_psd(&values, "kinship", PSD_REL_TOL)?;
        let unique: HashSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::invalid("kinship has duplicate genotype labels"));
        }
        Ok(Self { values, labels })
    }

    pub fn identity(labels: Vec<String>) -> Self {
        let n = labels.len();
        Self {
            values: DMatrix::identity(n, n),
            labels,
        }
    }

    pub(crate) fn from_trusted(values: DMatrix<f64>, labels: Vec<String>) -> Self {
        Self { values, labels }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }
}

/// Phenotypes plus the genotype and environment index spaces they live in.
///
/// Genotypes are the kinship labels (so unphenotyped genotypes still get
/// BLUPs); environments are given explicitly so that they line up with the
/// environment covariance structure.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<PhenotypeRecord>,
    environment_labels: Vec<String>,
    kinship: Arc<RelationshipMatrix>,
    genotype_index: Vec<usize>,
    environment_index: Vec<usize>,
}

impl Dataset {
    pub fn new(
        records: Vec<PhenotypeRecord>,
        kinship: Arc<RelationshipMatrix>,
        environment_labels: Vec<String>,
    ) -> Result<Self> {
        let g_lookup: HashMap<&str, usize> = kinship
            .labels()
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let e_lookup: HashMap<&str, usize> = environment_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        if e_lookup.len() != environment_labels.len() {
            return Err(Error::invalid("duplicate environment labels"));
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut genotype_index = Vec::with_capacity(records.len());
        let mut environment_index = Vec::with_capacity(records.len());
        for r in &records {
            let g = *g_lookup
                .get(r.genotype.as_str())
                .ok_or_else(|| Error::Lookup {
                    kind: "genotype",
                    label: r.genotype.clone(),
                })?;
            let e = *e_lookup
                .get(r.environment.as_str())
                .ok_or_else(|| Error::Lookup {
                    kind: "environment",
                    label: r.environment.clone(),
                })?;
            if !r.value.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite phenotype for ({}, {})",
                    r.genotype, r.environment
                )));
            }
            if !seen.insert((g, e)) {
                return Err(Error::invalid(format!(
                    "duplicate record for genotype `{}` in environment `{}`",
                    r.genotype, r.environment
                )));
            }
            genotype_index.push(g);
            environment_index.push(e);
        }
        Ok(Self {
            records,
            environment_labels,
            kinship,
            genotype_index,
            environment_index,
        })
    }

    /// Environment labels in order of first appearance in `records`.
    pub fn environments_in_order(records: &[PhenotypeRecord]) -> Vec<String> {
        let mut seen = HashSet::new();
        records
            .iter()
            .filter(|r| seen.insert(r.environment.as_str()))
            .map(|r| r.environment.clone())
            .collect()
    }

    pub fn records(&self) -> &[PhenotypeRecord] {
        &self.records
    }

    pub fn kinship(&self) -> &RelationshipMatrix {
        &self.kinship
    }

    pub fn kinship_arc(&self) -> Arc<RelationshipMatrix> {
        Arc::clone(&self.kinship)
    }

    pub fn genotype_labels(&self) -> &[String] {
        self.kinship.labels()
    }

    pub fn environment_labels(&self) -> &[String] {
        &self.environment_labels
    }

    pub fn n_genotypes(&self) -> usize {
        self.kinship.dim()
    }

    pub fn n_environments(&self) -> usize {
        self.environment_labels.len()
    }

    pub fn n_records(&self) -> usize {
        self.records.len()
    }

    pub fn genotype_index(&self) -> &[usize] {
        &self.genotype_index
    }

    pub fn environment_index(&self) -> &[usize] {
        &self.environment_index
    }

    /// Position of record `r` in the genotype-within-environment cell vector.
    pub fn cell_of(&self, r: usize) -> usize {
        self.environment_index[r] * self.n_genotypes() + self.genotype_index[r]
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }

    /// Dataset restricted to the given record indices (labels unchanged).
    pub fn subset(&self, keep: &[usize]) -> Self {
        Self {
            records: keep.iter().map(|&i| self.records[i].clone()).collect(),
            environment_labels: self.environment_labels.clone(),
            kinship: Arc::clone(&self.kinship),
            genotype_index: keep.iter().map(|&i| self.genotype_index[i]).collect(),
            environment_index: keep.iter().map(|&i| self.environment_index[i]).collect(),
        }
    }

    /// Same cells with replaced response values.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.records.len() {
            return Err(Error::invalid(
                "replacement value count does not match record count",
            ));
        }
        let mut out = self.clone();
        for (r, &v) in out.records.iter_mut().zip(values) {
            r.value = v;
        }
        Ok(out)
    }
}
