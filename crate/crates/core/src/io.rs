//! CSV and key-value file formats.
//!
//! Numbers are written with 17 significant digits so that reruns diff
//! cleanly. Parse errors carry the 1-based file row and the column name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::cv::CvReport;
use crate::data::{PhenotypeRecord, RelationshipMatrix};
use crate::env_features::{
    DailyWeatherRecord, EnvCorrelationMatrix, EnvDistanceMatrix, EnvFeatureMatrix,
};
use crate::error::{Error, Result};
use crate::reml::{CellPrediction, FitResult, RESID_NAME};

pub const PARAMS_FILE: &str = "params.csv";
pub const BLUPS_FILE: &str = "blups.csv";
pub const LOGLIK_FILE: &str = "loglik.csv";
pub const AI_FILE: &str = "ai.csv";

pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path_str(path),
            source,
        })
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|source| Error::Csv {
        path: path_str(path),
        source,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path_str(path),
        source,
    }
}

fn parse_err(path: &Path, row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path_str(path),
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

fn parse_f64(path: &Path, row: usize, column: &str, field: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| parse_err(path, row, column, format!("`{field}` is not a number")))
}

fn headers(path: &Path, rdr: &mut csv::Reader<fs::File>) -> Result<Vec<String>> {
    Ok(rdr
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(str::to_string)
        .collect())
}

/// Records with their 1-based file row (the header is row 1).
fn rows(path: &Path, rdr: &mut csv::Reader<fs::File>) -> Result<Vec<(usize, csv::StringRecord)>> {
    rdr.records()
        .enumerate()
        .map(|(i, r)| r.map(|rec| (i + 2, rec)).map_err(csv_err(path)))
        .collect()
}

fn require_columns(path: &Path, found: &[String], expected: &[&str]) -> Result<()> {
    if found.len() < expected.len() || found.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(parse_err(
            path,
            1,
            found.first().map(String::as_str).unwrap_or(""),
            format!(
                "expected header `{}`, found `{}`",
                expected.join(","),
                found.join(",")
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub values: DMatrix<f64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

/// First row holds the column labels (its first cell is ignored), first
/// column holds the row labels.
pub fn read_labeled_matrix(path: &Path) -> Result<LabeledMatrix> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    if header.len() < 2 {
        return Err(parse_err(
            path,
            1,
            "",
            "matrix needs at least one labelled column",
        ));
    }
    let col_labels: Vec<String> = header[1..].to_vec();
    let mut row_labels = Vec::new();
    let mut data = Vec::new();
    for (row, rec) in rows(path, &mut rdr)? {
        if rec.len() != header.len() {
            return Err(parse_err(
                path,
                row,
                "",
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        row_labels.push(rec[0].to_string());
        for (j, col) in col_labels.iter().enumerate() {
            data.push(parse_f64(path, row, col, &rec[j + 1])?);
        }
    }
    let values = DMatrix::from_row_slice(row_labels.len(), col_labels.len(), &data);
    Ok(LabeledMatrix {
        values,
        row_labels,
        col_labels,
    })
}

fn read_square(path: &Path) -> Result<(DMatrix<f64>, Vec<String>)> {
    let m = read_labeled_matrix(path)?;
    if m.row_labels != m.col_labels {
        return Err(Error::invalid(format!(
            "{}: row labels do not match column labels",
            path_str(path)
        )));
    }
    Ok((m.values, m.row_labels))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path_str(path))),
        Error::NotPsd {
            name,
            min_eig,
            max_eig,
        } => Error::NotPsd {
            name: format!("{name} ({})", path_str(path)),
            min_eig,
            max_eig,
        },
        other => other,
    })
}

pub fn read_correlation(path: &Path) -> Result<EnvCorrelationMatrix> {
    let (v, l) = read_square(path)?;
    with_path(path, EnvCorrelationMatrix::new(v, l))
}

pub fn read_distance(path: &Path) -> Result<EnvDistanceMatrix> {
    let (v, l) = read_square(path)?;
    with_path(path, EnvDistanceMatrix::new(v, l))
}

pub fn read_kinship(path: &Path) -> Result<RelationshipMatrix> {
    let (v, l) = read_square(path)?;
    with_path(path, RelationshipMatrix::new(v, l))
}

/// Rows are variables, columns environments.
pub fn read_features(path: &Path) -> Result<EnvFeatureMatrix> {
    let m = read_labeled_matrix(path)?;
    with_path(
        path,
        EnvFeatureMatrix::new(m.values, m.row_labels, m.col_labels),
    )
}

pub fn write_labeled_matrix(
    path: &Path,
    values: &DMatrix<f64>,
    row_labels: &[String],
    col_labels: &[String],
) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![String::new()];
    header.extend(col_labels.iter().cloned());
    w.write_record(&header).map_err(csv_err(path))?;
    for (i, label) in row_labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend((0..values.ncols()).map(|j| fmt_num(values[(i, j)])));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path_str(path),
        source,
    })
}

/// `genotype,environment,value` with header.
pub fn read_phenotypes(path: &Path) -> Result<Vec<PhenotypeRecord>> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    require_columns(path, &header, &["genotype", "environment", "value"])?;
    rows(path, &mut rdr)?
        .into_iter()
        .map(|(row, rec)| {
            let value = parse_f64(path, row, "value", rec.get(2).unwrap_or(""))?;
            Ok(PhenotypeRecord::new(&rec[0], &rec[1], value))
        })
        .collect()
}

pub fn write_phenotypes(path: &Path, records: &[PhenotypeRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["genotype", "environment", "value"])
        .map_err(csv_err(path))?;
    for r in records {
        w.write_record([
            r.genotype.as_str(),
            r.environment.as_str(),
            &fmt_num(r.value),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path_str(path),
        source,
    })
}

/// `environment,day,t_min,t_max,<covariates...>` with header.
pub fn read_weather(path: &Path) -> Result<Vec<DailyWeatherRecord>> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    require_columns(path, &header, &["environment", "day", "t_min", "t_max"])?;
    let covariates = &header[4..];
    rows(path, &mut rdr)?
        .into_iter()
        .map(|(row, rec)| {
            if rec.len() != header.len() {
                return Err(parse_err(
                    path,
                    row,
                    "",
                    format!("expected {} fields, found {}", header.len(), rec.len()),
                ));
            }
            let day_index = rec[1].parse::<u32>().map_err(|_| {
                parse_err(
                    path,
                    row,
                    "day",
                    format!("`{}` is not a day index", &rec[1]),
                )
            })?;
            let mut cov = BTreeMap::new();
            for (j, name) in covariates.iter().enumerate() {
                cov.insert(name.clone(), parse_f64(path, row, name, &rec[j + 4])?);
            }
            Ok(DailyWeatherRecord {
                environment_id: rec[0].to_string(),
                day_index,
                t_min: parse_f64(path, row, "t_min", &rec[2])?,
                t_max: parse_f64(path, row, "t_max", &rec[3])?,
                covariates: cov,
            })
        })
        .collect()
}

/// `genotype,environment` with header.
pub fn read_targets(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    require_columns(path, &header, &["genotype", "environment"])?;
    Ok(rows(path, &mut rdr)?
        .into_iter()
        .map(|(_, rec)| (rec[0].to_string(), rec[1].to_string()))
        .collect())
}

pub fn write_predictions(path: &Path, preds: &[CellPrediction]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["genotype", "environment", "blup", "fitted"])
        .map_err(csv_err(path))?;
    for c in preds {
        w.write_record([
            c.genotype.as_str(),
            c.environment.as_str(),
            &fmt_num(c.blup),
            &fmt_num(c.fitted),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path_str(path),
        source,
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<CellPrediction>> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    require_columns(
        path,
        &header,
        &["genotype", "environment", "blup", "fitted"],
    )?;
    rows(path, &mut rdr)?
        .into_iter()
        .map(|(row, rec)| {
            Ok(CellPrediction {
                genotype: rec[0].to_string(),
                environment: rec[1].to_string(),
                blup: parse_f64(path, row, "blup", rec.get(2).unwrap_or(""))?,
                fitted: parse_f64(path, row, "fitted", rec.get(3).unwrap_or(""))?,
            })
        })
        .collect()
}

/// Writes params.csv, blups.csv (every genotype-environment cell),
/// loglik.csv and ai.csv into `dir`, creating it if needed.
pub fn write_fit_result(dir: &Path, fit: &FitResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: path_str(dir),
        source,
    })?;

    let params = dir.join(PARAMS_FILE);
    let mut w = writer(&params)?;
    w.write_record(["parameter", "value"])
        .map_err(csv_err(&params))?;
    for (name, v) in fit.param_names.iter().zip(fit.kappa_hat.values()) {
        w.write_record([name.as_str(), &fmt_num(*v)])
            .map_err(csv_err(&params))?;
    }
    w.write_record([RESID_NAME, &fmt_num(fit.resid_var_hat)])
        .map_err(csv_err(&params))?;
    for (i, b) in fit.beta_hat.iter().enumerate() {
        let name = if i == 0 {
            "beta_intercept".to_string()
        } else {
            format!("beta_{}", fit.environment_labels[i])
        };
        w.write_record([name.as_str(), &fmt_num(*b)])
            .map_err(csv_err(&params))?;
    }
    w.write_record(["loglik", &fmt_num(fit.loglik())])
        .map_err(csv_err(&params))?;
    w.write_record(["converged", if fit.converged { "1" } else { "0" }])
        .map_err(csv_err(&params))?;
    w.write_record(["iterations", &fit.iterations.to_string()])
        .map_err(csv_err(&params))?;
    w.flush().map_err(|source| Error::Io {
        path: path_str(&params),
        source,
    })?;

    let cells: Vec<(String, String)> = fit
        .environment_labels
        .iter()
        .flat_map(|e| {
            fit.genotype_labels
                .iter()
                .map(move |g| (g.clone(), e.clone()))
        })
        .collect();
    write_predictions(&dir.join(BLUPS_FILE), &fit.predict_cells(&cells)?)?;

    let loglik = dir.join(LOGLIK_FILE);
    let mut w = writer(&loglik)?;
    w.write_record(["iteration", "loglik"])
        .map_err(csv_err(&loglik))?;
    for (i, l) in fit.loglik_trace.iter().enumerate() {
        w.write_record([i.to_string(), fmt_num(*l)])
            .map_err(csv_err(&loglik))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path_str(&loglik),
        source,
    })?;

    write_labeled_matrix(
        &dir.join(AI_FILE),
        &fit.ai_matrix,
        &fit.param_names,
        &fit.param_names,
    )
}

/// `parameter,value` table.
pub fn write_params(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["parameter", "value"])
        .map_err(csv_err(path))?;
    for (name, v) in rows {
        w.write_record([name.as_str(), &fmt_num(*v)])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path_str(path),
        source,
    })
}

/// `parameter,value` pairs from a params.csv.
pub fn read_params(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    require_columns(path, &header, &["parameter", "value"])?;
    rows(path, &mut rdr)?
        .into_iter()
        .map(|(row, rec)| {
            Ok((
                rec[0].to_string(),
                parse_f64(path, row, "value", rec.get(1).unwrap_or(""))?,
            ))
        })
        .collect()
}

pub fn write_cv_report(path: &Path, report: &CvReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "model",
        "replicate",
        "lambda",
        "mean_pearson",
        "mean_rmse",
        "fit_seconds",
        "converged",
        "error",
    ])
    .map_err(csv_err(path))?;
    for r in &report.rows {
        w.write_record([
            r.model.clone(),
            r.replicate.to_string(),
            r.lambda.map(fmt_num).unwrap_or_default(),
            fmt_num(r.mean_pearson),
            fmt_num(r.mean_rmse),
            fmt_num(r.fit_seconds),
            u8::from(r.converged).to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path_str(path),
        source,
    })
}

pub fn write_cv_summary(path: &Path, report: &CvReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "model",
        "lambda",
        "n_converged",
        "n_failed",
        "mean_pearson",
        "median_pearson",
        "mean_rmse",
        "median_rmse",
    ])
    .map_err(csv_err(path))?;
    for s in report.summary() {
        w.write_record([
            s.model.clone(),
            s.lambda.map(fmt_num).unwrap_or_default(),
            s.n_converged.to_string(),
            s.n_failed.to_string(),
            fmt_num(s.mean_pearson),
            fmt_num(s.median_pearson),
            fmt_num(s.mean_rmse),
            fmt_num(s.median_rmse),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path_str(path),
        source,
    })
}

/// Flat `key = value` text. Blank lines and lines starting with `#` are
/// skipped; later keys override earlier ones.
pub fn read_key_value(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path_str(path),
        source,
    })?;
    parse_key_value(&text).map_err(|(line, msg)| parse_err(path, line, "", msg))
}

pub fn parse_key_value(
    text: &str,
) -> std::result::Result<BTreeMap<String, String>, (usize, String)> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or((i + 1, format!("expected `key = value`, found `{line}`")))?;
        let key = k.trim();
        if key.is_empty() {
            return Err((i + 1, "empty key".to_string()));
        }
        out.insert(key.to_string(), v.trim().to_string());
    }
    Ok(out)
}
