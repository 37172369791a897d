//! Environmental covariates: growing degree days, per-bin intercepts and the
//! environment correlation / squared-distance matrices built from them.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, PSD_REL_TOL};
use crate::rng::seeded_rng;

/// Lower temperature cap (°F) of the corn GDD formula.
pub const GDD_BASE_F: f64 = 50.0;
/// Upper temperature cap (°F) of the corn GDD formula.
pub const GDD_CEILING_F: f64 = 86.0;

/// Tolerance used when checking that feature rows are standardized.
const STANDARDIZED_TOL: f64 = 1e-10;
/// Largest asymmetry accepted before a matrix is symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DailyWeatherRecord {
    pub environment_id: String,
    pub day_index: u32,
    pub t_min: f64,
    pub t_max: f64,
    pub covariates: BTreeMap<String, f64>,
}

/// Standardized intercepts: rows are variables (or variable × GDD bin),
/// columns are environments.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvFeatureMatrix {
    pub values: DMatrix<f64>,
    pub variable_labels: Vec<String>,
    pub environment_labels: Vec<String>,
}

impl EnvFeatureMatrix {
    pub fn new(
        values: DMatrix<f64>,
        variable_labels: Vec<String>,
        environment_labels: Vec<String>,
    ) -> Result<Self> {
        if values.nrows() != variable_labels.len() || values.ncols() != environment_labels.len() {
            return Err(Error::invalid(format!(
                "feature matrix is {}x{} but has {} variable and {} environment labels",
                values.nrows(),
                values.ncols(),
                variable_labels.len(),
                environment_labels.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "feature matrix contains missing or non-finite entries",
            ));
        }
        Ok(Self {
            values,
            variable_labels,
            environment_labels,
        })
    }

    pub fn n_variables(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_environments(&self) -> usize {
        self.values.ncols()
    }

    fn ensure_standardized(&self) -> Result<()> {
        let p = self.n_environments() as f64;
        for (k, row) in self.values.row_iter().enumerate() {
            let mean = row.sum() / p;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p;
            if mean.abs() > STANDARDIZED_TOL || (var.sqrt() - 1.0).abs() > STANDARDIZED_TOL {
                return Err(Error::contract(format!(
                    "feature row `{}` is not standardized (mean {mean:.3e}, sd {:.6})",
                    self.variable_labels[k],
                    var.sqrt()
                )));
            }
        }
        Ok(())
    }
}

/// Environment correlation matrix: symmetric, unit diagonal, PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvCorrelationMatrix {
    values: DMatrix<f64>,
    labels: Vec<String>,
}

impl EnvCorrelationMatrix {
    /// Validates a supplied correlation matrix.
    ///
    /// Asymmetry up to [`SYMMETRY_TOL`] is averaged away. Slightly negative
    /// eigenvalues (within the relative PSD tolerance) are clipped and the
    /// unit diagonal restored; anything worse is rejected.
    pub fn new(values: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        let values = validated_square(values, &labels, "correlation matrix")?;
        let p = values.nrows();
        for i in 0..p {
            if (values[(i, i)] - 1.0).abs() > SYMMETRY_TOL {
                return Err(Error::invalid(format!(
                    "correlation matrix diagonal entry for `{}` is {} (expected 1)",
                    labels[i],
                    values[(i, i)]
                )));
            }
        }
        if let Some(v) = values.iter().find(|v| v.abs() > 1.0 + SYMMETRY_TOL) {
            return Err(Error::invalid(format!(
                "correlation matrix entry {v} outside [-1, 1]"
            )));
        }
        let (min_eig, _) = linalg::check_psd(&values, "correlation matrix", PSD_REL_TOL)?;
        let mut values = values;
        if min_eig < 0.0 {
            warn!("correlation matrix has min eigenvalue {min_eig:.3e}; clipping to PSD");
            values = unit_diagonal(&linalg::clip_negative_eigenvalues(&values));
        }
        for i in 0..p {
            values[(i, i)] = 1.0;
        }
        Ok(Self { values, labels })
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

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.dim() {
            return Err(Error::invalid(
                "label count does not match correlation matrix dimension",
            ));
        }
        self.labels = labels;
        Ok(self)
    }
}

/// Squared Euclidean distance matrix between environments.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvDistanceMatrix {
    values: DMatrix<f64>,
    labels: Vec<String>,
}

impl EnvDistanceMatrix {
    pub fn new(values: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        let mut values = validated_square(values, &labels, "distance matrix")?;
        for i in 0..values.nrows() {
            if values[(i, i)].abs() > SYMMETRY_TOL {
                return Err(Error::invalid(format!(
                    "distance matrix diagonal entry for `{}` is {} (expected 0)",
                    labels[i],
                    values[(i, i)]
                )));
            }
            values[(i, i)] = 0.0;
        }
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::invalid(format!(
                "distance matrix has negative entry {v}"
            )));
        }
        Ok(Self { values, labels })
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

    /// Mean of the off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> f64 {
        let p = self.dim();
        if p < 2 {
            return 0.0;
        }
        let total: f64 = self.values.sum();
        total / (p * (p - 1)) as f64
    }
}

fn validated_square(
    mut values: DMatrix<f64>,
    labels: &[String],
    what: &str,
) -> Result<DMatrix<f64>> {
    if !values.is_square() || values.nrows() != labels.len() {
        return Err(Error::invalid(format!(
            "{what} is {}x{} with {} labels",
            values.nrows(),
            values.ncols(),
            labels.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "{what} contains non-finite entries"
        )));
    }
    let asym = linalg::max_asymmetry(&values);
    if asym > SYMMETRY_TOL {
        return Err(Error::invalid(format!(
            "{what} is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    linalg::symmetrize_in_place(&mut values);
    Ok(values)
}

fn unit_diagonal(m: &DMatrix<f64>) -> DMatrix<f64> {
    let p = m.nrows();
    let d: Vec<f64> = (0..p).map(|i| m[(i, i)].sqrt()).collect();
    DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else {
            m[(i, j)] / (d[i] * d[j])
        }
    })
}

/// Daily growing degree days with the corn caps. Negative values are kept.
pub fn gdd_daily(t_min: f64, t_max: f64) -> Result<f64> {
    if !t_min.is_finite() || !t_max.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite temperature ({t_min}, {t_max})"
        )));
    }
    let lo = if t_min < GDD_BASE_F {
        GDD_BASE_F
    } else {
        t_min
    };
    let hi = if t_max > GDD_CEILING_F {
        GDD_CEILING_F
    } else {
        t_max
    };
    Ok((lo + hi) / 2.0 - GDD_BASE_F)
}

/// Running total of [`gdd_daily`].
pub fn gdd_accumulate(days: &[(f64, f64)]) -> Result<Vec<f64>> {
    if days.is_empty() {
        return Err(Error::invalid(
            "cannot accumulate GDD over an empty sequence",
        ));
    }
    let mut total = 0.0;
    days.iter()
        .map(|&(lo, hi)| {
            total += gdd_daily(lo, hi)?;
            Ok(total)
        })
        .collect()
}

/// Mean of the observations in each bin `[lo + k·interval, lo + (k+1)·interval)`
/// inside `window`; observations outside the window are dropped.
pub fn piecewise_intercepts(
    points: &[(f64, f64)],
    interval: f64,
    window: (f64, f64),
) -> Result<Vec<f64>> {
    piecewise_intercepts_labeled(points, interval, window, "series")
}

fn piecewise_intercepts_labeled(
    points: &[(f64, f64)],
    interval: f64,
    window: (f64, f64),
    context: &str,
) -> Result<Vec<f64>> {
    let n_bins = bin_count(interval, window)?;
    let (lo, _) = window;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for &(gdd, value) in points {
        if !gdd.is_finite() || !value.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite point ({gdd}, {value}) in {context}"
            )));
        }
        let pos = (gdd - lo) / interval;
        if pos < 0.0 {
            continue;
        }
        let k = pos.floor() as usize;
        if k < n_bins {
            sums[k] += value;
            counts[k] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .enumerate()
        .map(|(k, (&s, &c))| {
            if c == 0 {
                Err(Error::EmptyBin {
                    lo: lo + k as f64 * interval,
                    hi: lo + (k + 1) as f64 * interval,
                    context: context.to_string(),
                })
            } else {
                Ok(s / c as f64)
            }
        })
        .collect()
}

fn bin_count(interval: f64, (lo, hi): (f64, f64)) -> Result<usize> {
    if !(interval > 0.0) || !interval.is_finite() {
        return Err(Error::invalid(format!(
            "bin interval must be positive, got {interval}"
        )));
    }
    if !(lo < hi) {
        return Err(Error::invalid(format!(
            "window lower bound {lo} must be below upper bound {hi}"
        )));
    }
    let is_multiple = |x: f64| {
        let r = x / interval;
        (r - r.round()).abs() < 1e-9
    };
    if !is_multiple(lo) || !is_multiple(hi) {
        return Err(Error::invalid(format!(
            "window ({lo}, {hi}) must be multiples of the interval {interval}"
        )));
    }
    Ok(((hi - lo) / interval).round() as usize)
}

/// Centres each row and scales it to unit population standard deviation.
pub fn standardize_rows(
    raw: &DMatrix<f64>,
    variable_labels: Vec<String>,
    environment_labels: Vec<String>,
) -> Result<EnvFeatureMatrix> {
    let p = raw.ncols();
    if p < 2 {
        return Err(Error::invalid(
            "standardization needs at least two environments",
        ));
    }
    if variable_labels.len() != raw.nrows() {
        return Err(Error::invalid(
            "variable label count does not match row count",
        ));
    }
    let mut out = raw.clone();
    for (k, mut row) in out.row_iter_mut().enumerate() {
        let mean = row.sum() / p as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p as f64;
        let sd = var.sqrt();
        if !(sd > 0.0) || sd < 1e-12 * mean.abs().max(1.0) {
            return Err(Error::ZeroVariance {
                variable: variable_labels[k].clone(),
            });
        }
        row.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    EnvFeatureMatrix::new(out, variable_labels, environment_labels)
}

/// Ĉ = XᵀX / q for standardized features, rescaled to unit diagonal.
/// Row standardization alone leaves the diagonal at the mean squared
/// entry of each environment column, which is 1 only when p = 2.
pub fn env_correlation(features: &EnvFeatureMatrix) -> Result<EnvCorrelationMatrix> {
    features.ensure_standardized()?;
    let q = features.n_variables() as f64;
    let mut raw = features.values.tr_mul(&features.values) / q;
    linalg::symmetrize_in_place(&mut raw);
    for (i, env) in features.environment_labels.iter().enumerate() {
        if !(raw[(i, i)] > 0.0) {
            return Err(Error::invalid(format!(
                "environment `{env}` has an all-zero feature column"
            )));
        }
    }
    let mut c = unit_diagonal(&raw);
    c.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(EnvCorrelationMatrix::from_trusted(
        c,
        features.environment_labels.clone(),
    ))
}

/// D_ij = Σ_k (X_ki − X_kj)².
pub fn env_distance(features: &EnvFeatureMatrix) -> Result<EnvDistanceMatrix> {
    features.ensure_standardized()?;
    Ok(EnvDistanceMatrix {
        values: column_sq_distances(&features.values),
        labels: features.environment_labels.clone(),
    })
}

fn column_sq_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let p = x.ncols();
    let mut d = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in (i + 1)..p {
            let dist: f64 = x
                .column(i)
                .iter()
                .zip(x.column(j).iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    d
}

/// (1 − λ)·truth + λ·noise.
pub fn blend_correlation(
    truth: &EnvCorrelationMatrix,
    noise: &EnvCorrelationMatrix,
    lambda: f64,
) -> Result<EnvCorrelationMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "blend weight {lambda} outside [0, 1]"
        )));
    }
    if truth.labels != noise.labels {
        return Err(Error::invalid(
            "blended correlation matrices have different environment labels",
        ));
    }
    let mut values = truth.values.scale(1.0 - lambda) + noise.values.scale(lambda);
    for i in 0..values.nrows() {
        values[(i, i)] = 1.0;
    }
    Ok(EnvCorrelationMatrix::from_trusted(
        values,
        truth.labels.clone(),
    ))
}

/// Random correlation matrix: A is p×p iid N(0, 1) drawn row by row from a
/// ChaCha8 stream seeded with `seed`; returns AAᵀ rescaled to unit diagonal.
/// Environments are labelled `E1..Ep`.
pub fn random_correlation(p: usize, seed: u64) -> Result<EnvCorrelationMatrix> {
    if p < 2 {
        return Err(Error::invalid(format!(
            "random correlation needs p >= 2, got {p}"
        )));
    }
    let mut rng = seeded_rng(seed, 0);
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            a[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    let mut c = unit_diagonal(&(&a * a.transpose()));
    linalg::symmetrize_in_place(&mut c);
    let labels = (1..=p).map(|i| format!("E{i}")).collect();
    Ok(EnvCorrelationMatrix::from_trusted(c, labels))
}

/// Full weather pipeline: per environment, accumulate GDD, bin each
/// requested covariate on the GDD axis, then standardize the stacked
/// intercepts (rows labelled `variable@lo-hi`).
pub fn features_from_weather(
    records: &[DailyWeatherRecord],
    variables: &[String],
    interval: f64,
    window: (f64, f64),
) -> Result<EnvFeatureMatrix> {
    if records.is_empty() {
        return Err(Error::invalid("no weather records"));
    }
    if variables.is_empty() {
        return Err(Error::invalid("no covariate variables selected"));
    }
    let n_bins = bin_count(interval, window)?;

    let mut env_order: Vec<String> = Vec::new();
    let mut by_env: BTreeMap<&str, Vec<&DailyWeatherRecord>> = BTreeMap::new();
    for r in records {
        if !by_env.contains_key(r.environment_id.as_str()) {
            env_order.push(r.environment_id.clone());
        }
        by_env.entry(r.environment_id.as_str()).or_default().push(r);
    }

    let q = variables.len() * n_bins;
    let mut raw = DMatrix::zeros(q, env_order.len());
    for (col, env) in env_order.iter().enumerate() {
        let days = &by_env[env.as_str()];
        for w in days.windows(2) {
            if w[1].day_index <= w[0].day_index {
                return Err(Error::invalid(format!(
                    "environment `{env}`: day {} does not follow day {}",
                    w[1].day_index, w[0].day_index
                )));
            }
        }
        for d in days {
            if d.t_min > d.t_max {
                return Err(Error::invalid(format!(
                    "environment `{env}` day {}: t_min {} exceeds t_max {}",
                    d.day_index, d.t_min, d.t_max
                )));
            }
        }
        let temps: Vec<(f64, f64)> = days.iter().map(|d| (d.t_min, d.t_max)).collect();
        let cum = gdd_accumulate(&temps)?;
        for (v, var) in variables.iter().enumerate() {
            let points = days
                .iter()
                .zip(&cum)
                .map(|(d, &g)| {
                    d.covariates.get(var).map(|&x| (g, x)).ok_or_else(|| {
                        Error::invalid(format!(
                            "environment `{env}` day {}: missing covariate `{var}`",
                            d.day_index
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let context = format!("variable `{var}` in environment `{env}`");
            let intercepts = piecewise_intercepts_labeled(&points, interval, window, &context)?;
            for (b, value) in intercepts.into_iter().enumerate() {
                raw[(v * n_bins + b, col)] = value;
            }
        }
    }

    let labels = variables
        .iter()
        .flat_map(|var| {
            (0..n_bins).map(move |b| {
                let lo = window.0 + b as f64 * interval;
                format!("{var}@{lo}-{}", lo + interval)
            })
        })
        .collect();
    standardize_rows(&raw, labels, env_order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("e{i}")).collect()
    }

    #[test]
    fn gdd_examples() {
        assert_eq!(gdd_daily(60.0, 80.0).unwrap(), 20.0);
        assert_eq!(gdd_daily(40.0, 90.0).unwrap(), 18.0);
        assert_eq!(gdd_daily(45.0, 48.0).unwrap(), -1.0);
        assert!(gdd_daily(f64::NAN, 80.0).is_err());
    }

    #[test]
    fn accumulate_examples() {
        assert_eq!(
            gdd_accumulate(&[(60.0, 80.0), (60.0, 80.0)]).unwrap(),
            vec![20.0, 40.0]
        );
        assert_eq!(gdd_accumulate(&[(40.0, 90.0)]).unwrap(), vec![18.0]);
        assert_eq!(
            gdd_accumulate(&[(60.0, 80.0), (45.0, 48.0)]).unwrap(),
            vec![20.0, 19.0]
        );
        assert!(gdd_accumulate(&[]).is_err());
    }

    #[test]
    fn intercept_examples() {
        let got = piecewise_intercepts(&[(50.0, 2.0), (150.0, 4.0)], 100.0, (0.0, 200.0)).unwrap();
        assert_eq!(got, vec![2.0, 4.0]);
        let got = piecewise_intercepts(&[(10.0, 1.0), (90.0, 3.0)], 100.0, (0.0, 100.0)).unwrap();
        assert_eq!(got, vec![2.0]);
        match piecewise_intercepts(&[(150.0, 4.0)], 100.0, (0.0, 200.0)) {
            Err(Error::EmptyBin { lo, hi, .. }) => assert_eq!((lo, hi), (0.0, 100.0)),
            other => panic!("expected empty bin, got {other:?}"),
        }
    }

    #[test]
    fn intercepts_drop_points_outside_window() {
        let pts = [(50.0, 100.0), (150.0, 1.0), (250.0, 3.0), (2500.0, -7.0)];
        let got = piecewise_intercepts(&pts, 100.0, (100.0, 300.0)).unwrap();
        assert_eq!(got, vec![1.0, 3.0]);
        assert!(piecewise_intercepts(&pts, 100.0, (150.0, 300.0)).is_err());
        assert!(piecewise_intercepts(&pts, 0.0, (0.0, 300.0)).is_err());
    }

    #[test]
    fn standardize_examples() {
        let raw = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        let x = standardize_rows(&raw, vec!["a".into()], labels(2)).unwrap();
        assert_eq!(x.values.as_slice(), &[-1.0, 1.0]);

        let raw = DMatrix::from_row_slice(1, 2, &[5.0, 5.0]);
        match standardize_rows(&raw, vec!["flat".into()], labels(2)) {
            Err(Error::ZeroVariance { variable }) => assert_eq!(variable, "flat"),
            other => panic!("expected zero variance, got {other:?}"),
        }

        let raw = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let x = standardize_rows(&raw, vec!["a".into()], labels(3)).unwrap();
        let s = (1.5f64).sqrt();
        for (got, want) in x.values.iter().zip([-s, 0.0, s]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn correlation_examples() {
        let x = EnvFeatureMatrix::new(
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            vec!["a".into()],
            labels(2),
        )
        .unwrap();
        // identical columns are impossible after standardization for p = 2,
        // so use p = 4 with two duplicated columns.
        let x4 = standardize_rows(
            &DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 3.0, 5.0, 2.0, 2.0, 0.0, 7.0]),
            vec!["a".into(), "b".into()],
            labels(4),
        )
        .unwrap();
        let c4 = env_correlation(&x4).unwrap();
        assert!((c4.values()[(0, 1)] - 1.0).abs() < 1e-12);
        let d4 = env_distance(&x4).unwrap();
        assert!(d4.values()[(0, 1)].abs() < 1e-12);

        let c = env_correlation(&x).unwrap();
        assert_eq!(c.values()[(0, 1)], -1.0);

        let x2 = EnvFeatureMatrix::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
            vec!["a".into(), "b".into()],
            labels(2),
        )
        .unwrap();
        assert_eq!(env_correlation(&x2).unwrap().values()[(0, 1)], -1.0);
    }

    #[test]
    fn unstandardized_features_are_rejected() {
        let x = EnvFeatureMatrix::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            vec!["a".into()],
            labels(2),
        )
        .unwrap();
        assert!(matches!(env_correlation(&x), Err(Error::Contract(_))));
        assert!(matches!(env_distance(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn distance_of_unit_columns() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let d = column_sq_distances(&x);
        assert_eq!(d[(0, 1)], 2.0);
        assert_eq!(d[(1, 0)], 2.0);
        assert_eq!(d[(0, 0)], 0.0);
    }

    #[test]
    fn blend_examples() {
        let truth = EnvCorrelationMatrix::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]),
            labels(2),
        )
        .unwrap();
        let noise = EnvCorrelationMatrix::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]),
            labels(2),
        )
        .unwrap();
        assert_eq!(blend_correlation(&truth, &noise, 0.0).unwrap(), truth);
        assert_eq!(blend_correlation(&truth, &noise, 1.0).unwrap(), noise);
        assert!(
            (blend_correlation(&truth, &noise, 0.5).unwrap().values()[(0, 1)] - 0.5).abs() < 1e-15
        );
        assert!(blend_correlation(&truth, &noise, 1.5).is_err());
        assert!(blend_correlation(&truth, &noise, -0.1).is_err());
    }

    #[test]
    fn random_correlation_properties() {
        let a = random_correlation(5, 17).unwrap();
        let b = random_correlation(5, 17).unwrap();
        assert_eq!(a, b);
        for i in 0..5 {
            assert_eq!(a.values()[(i, i)], 1.0);
        }
        for seed in 0..20 {
            let c = random_correlation(6, seed).unwrap();
            let (min, _) = linalg::eigen_extremes(c.values());
            assert!(min >= -1e-10);
        }
        assert!(random_correlation(1, 0).is_err());
    }

    #[test]
    fn supplied_correlation_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(EnvCorrelationMatrix::new(bad, labels(2)).is_err());
        let indefinite =
            DMatrix::from_row_slice(3, 3, &[1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0]);
        assert!(matches!(
            EnvCorrelationMatrix::new(indefinite, labels(3)),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn weather_pipeline_bins_on_gdd_axis() {
        let mut records = Vec::new();
        for (e, offset) in [("A", 0.0), ("B", 5.0), ("C", -3.0)] {
            for day in 1..=12u32 {
                let mut cov = BTreeMap::new();
                cov.insert("rain".to_string(), day as f64 + offset);
                cov.insert("wind".to_string(), (day as f64 * offset).sin());
                records.push(DailyWeatherRecord {
                    environment_id: e.to_string(),
                    day_index: day,
                    t_min: 60.0,
                    t_max: 80.0,
                    covariates: cov,
                });
            }
        }
        // 20 GDD per day, so bins of 100 hold 5 days each.
        let x = features_from_weather(
            &records,
            &["rain".into(), "wind".into()],
            100.0,
            (0.0, 200.0),
        )
        .unwrap();
        assert_eq!(x.n_variables(), 4);
        assert_eq!(x.environment_labels, vec!["A", "B", "C"]);
        assert_eq!(x.variable_labels[0], "rain@0-100");
        let c = env_correlation(&x).unwrap();
        for i in 0..3 {
            assert!((c.values()[(i, i)] - 1.0).abs() < 1e-12);
        }

        let mut broken = records.clone();
        broken[3].day_index = 1;
        assert!(features_from_weather(&broken, &["rain".into()], 100.0, (0.0, 200.0)).is_err());
        let err =
            features_from_weather(&records, &["rain".into()], 100.0, (0.0, 400.0)).unwrap_err();
        assert!(matches!(err, Error::EmptyBin { .. }));
    }
}
