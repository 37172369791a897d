use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use gxe_reml::cv::{run_cv, CvOptions, CvSource, ModelSpec, SparseDesign};
use gxe_reml::env_features::{env_correlation, env_distance, features_from_weather};
use gxe_reml::io;
use gxe_reml::reml::{self, CellPrediction, RESID_NAME};
use gxe_reml::simulator::{simulate_met, SimConfig};
use gxe_reml::{
    CovarianceModel, Dataset, EnvCorrelationMatrix, EnvDistanceMatrix, FitOptions, ParamVector,
    PhenotypeRecord, StructureKind, VarianceStructure,
};
use log::{info, warn};

use crate::{
    CliError, Command, CvArgs, EnvProcessArgs, FitArgs, MatrixArgs, PredictArgs, SimSpec,
    SimulateArgs,
};

pub const PHENOTYPES_FILE: &str = "phenotypes.csv";
pub const KINSHIP_FILE: &str = "kinship.csv";
pub const TRUTH_PARAMS_FILE: &str = "truth_params.csv";
pub const TRUTH_VALUES_FILE: &str = "truth_genetic_values.csv";

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::EnvProcess(a) => env_process(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Fit(a) => fit(&a),
        Command::Predict(a) => predict(&a),
        Command::Cv(a) => cv(&a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| usage(format!("{flag}: cannot parse `{t}`")))
        })
        .collect()
}

fn parse_window(s: &str) -> Result<(f64, f64), CliError> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| usage(format!("--window: expected LO:HI, got `{s}`")))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| usage(format!("--window: `{t}` is not a number")))
    };
    Ok((parse(lo)?, parse(hi)?))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| {
        gxe_reml::Error::Io {
            path: dir.display().to_string(),
            source,
        }
        .into()
    })
}

/// Checks that exactly the matrices a structure needs were supplied.
pub fn check_matrix_flags(kind: StructureKind, m: &MatrixArgs) -> Result<(), CliError> {
    if kind.needs_distance() {
        if m.corr.is_some() {
            return Err(usage(format!(
                "--corr cannot be used with structure `{kind}`; kernel structures need a distance matrix (--dist)"
            )));
        }
        if m.dist.is_none() {
            return Err(usage(format!("structure `{kind}` requires --dist")));
        }
    } else if kind.needs_correlation() {
        if m.dist.is_some() {
            return Err(usage(format!(
                "--dist cannot be used with structure `{kind}`; correlation structures need --corr"
            )));
        }
        if m.corr.is_none() {
            return Err(usage(format!("structure `{kind}` requires --corr")));
        }
    } else if m.corr.is_some() || m.dist.is_some() {
        let flag = if m.corr.is_some() { "--corr" } else { "--dist" };
        return Err(usage(format!(
            "{flag} cannot be used with structure `{kind}`, which takes no environment matrix"
        )));
    }
    if m.grid.is_some() && kind != StructureKind::KernelAveraging {
        return Err(usage(format!(
            "--grid only applies to structure `ka`, not `{kind}`"
        )));
    }
    Ok(())
}

struct Matrices {
    corr: Option<EnvCorrelationMatrix>,
    dist: Option<EnvDistanceMatrix>,
    grid: Option<Vec<f64>>,
}

impl Matrices {
    fn load(m: &MatrixArgs) -> Result<Self, CliError> {
        Ok(Self {
            corr: m.corr.as_deref().map(io::read_correlation).transpose()?,
            dist: m.dist.as_deref().map(io::read_distance).transpose()?,
            grid: m
                .grid
                .as_deref()
                .map(|g| parse_list::<f64>("--grid", g))
                .transpose()?,
        })
    }

    /// Environment labels implied by the supplied matrices, if any.
    fn labels(&self) -> Result<Option<Vec<String>>, CliError> {
        match (&self.corr, &self.dist) {
            (Some(c), Some(d)) if c.labels() != d.labels() => Err(gxe_reml::Error::InvalidInput(
                "--corr and --dist list different environments (or in a different order)".into(),
            )
            .into()),
            (Some(c), _) => Ok(Some(c.labels().to_vec())),
            (None, Some(d)) => Ok(Some(d.labels().to_vec())),
            (None, None) => Ok(None),
        }
    }

    fn structure(
        &self,
        kind: StructureKind,
        labels: &[String],
    ) -> Result<VarianceStructure, CliError> {
        let need =
            |what: &str, flag: &str| usage(format!("structure `{kind}` requires {flag} ({what})"));
        let s = match kind {
            StructureKind::MainEffect => VarianceStructure::main_effect(labels.to_vec())?,
            StructureKind::Diagonal => VarianceStructure::diagonal(labels.to_vec())?,
            StructureKind::CorrSingleVar => VarianceStructure::corr_single(
                self.corr
                    .clone()
                    .ok_or_else(|| need("correlation matrix", "--corr"))?,
            ),
            StructureKind::CorrMultiVar => VarianceStructure::corr_multi(
                self.corr
                    .clone()
                    .ok_or_else(|| need("correlation matrix", "--corr"))?,
            ),
            StructureKind::KernelSingleVar => VarianceStructure::kernel_single(
                self.dist
                    .clone()
                    .ok_or_else(|| need("distance matrix", "--dist"))?,
            ),
            StructureKind::KernelMultiVar => VarianceStructure::kernel_multi(
                self.dist
                    .clone()
                    .ok_or_else(|| need("distance matrix", "--dist"))?,
            ),
            StructureKind::KernelAveraging => VarianceStructure::kernel_averaging(
                self.dist
                    .clone()
                    .ok_or_else(|| need("distance matrix", "--dist"))?,
                self.grid.clone(),
            )?,
        };
        if s.labels() != labels {
            return Err(gxe_reml::Error::InvalidInput(format!(
                "structure `{kind}` environments do not match the data environments"
            ))
            .into());
        }
        Ok(s)
    }
}

/// Phenotypes plus kinship, with environments ordered as in the supplied
/// matrices or else by first appearance.
fn load_dataset(
    phenotypes: &Path,
    kinship: &Path,
    env_labels: Option<Vec<String>>,
) -> Result<Dataset, CliError> {
    let records = io::read_phenotypes(phenotypes)?;
    let kin = Arc::new(io::read_kinship(kinship)?);
    let labels = match env_labels {
        Some(l) => {
            let known: HashSet<&str> = l.iter().map(String::as_str).collect();
            if let Some(r) = records
                .iter()
                .find(|r| !known.contains(r.environment.as_str()))
            {
                return Err(gxe_reml::Error::InvalidInput(format!(
                    "{}: environment `{}` is not in the environment matrix",
                    phenotypes.display(),
                    r.environment
                ))
                .into());
            }
            l
        }
        None => Dataset::environments_in_order(&records),
    };
    Ok(Dataset::new(records, kin, labels)?)
}

fn env_process(a: &EnvProcessArgs) -> Result<(), CliError> {
    let variables: Vec<String> = parse_list("--variables", &a.variables)?;
    if variables.is_empty() {
        return Err(usage("--variables is empty"));
    }
    let window = parse_window(&a.window)?;
    let weather = io::read_weather(&a.weather)?;
    let features = features_from_weather(&weather, &variables, a.interval, window)?;
    info!(
        "{} standardized features for {} environments",
        features.n_variables(),
        features.n_environments()
    );
    let c = env_correlation(&features)?;
    let d = env_distance(&features)?;
    io::write_labeled_matrix(&a.out_corr, c.values(), c.labels(), c.labels())?;
    io::write_labeled_matrix(&a.out_dist, d.values(), d.labels(), d.labels())?;
    if let Some(path) = &a.out_features {
        io::write_labeled_matrix(
            path,
            &features.values,
            &features.variable_labels,
            &features.environment_labels,
        )?;
    }
    Ok(())
}

/// Builds the simulation config described by `spec`.
pub fn sim_config(spec: &SimSpec) -> Result<SimConfig, CliError> {
    check_matrix_flags(spec.structure, &spec.matrices)?;
    let matrices = Matrices::load(&spec.matrices)?;
    let labels = match matrices.labels()? {
        Some(l) => {
            if spec.n_environments.is_some_and(|p| p as usize != l.len()) {
                return Err(usage(
                    "--n-environments disagrees with the environment matrix",
                ));
            }
            l
        }
        None => {
            let p = spec.n_environments.ok_or_else(|| {
                usage(format!(
                    "structure `{}` requires --n-environments",
                    spec.structure
                ))
            })?;
            (1..=p).map(|i| format!("E{i}")).collect()
        }
    };
    let truth = matrices.structure(spec.structure, &labels)?;
    let params: Vec<f64> = parse_list("--params", &spec.params)?;
    if params.len() != truth.n_params() {
        return Err(usage(format!(
            "--params: structure `{}` over {} environments takes {} parameters ({}), got {}",
            spec.structure,
            labels.len(),
            truth.n_params(),
            truth.param_names().join(", "),
            params.len()
        )));
    }
    let env_means = match &spec.env_means {
        Some(s) => parse_list::<f64>("--env-means", s)?,
        None => vec![0.0; labels.len()],
    };
    if env_means.len() != labels.len() {
        return Err(usage(format!(
            "--env-means: expected {} values, got {}",
            labels.len(),
            env_means.len()
        )));
    }
    let kinship = spec
        .kinship
        .as_deref()
        .map(io::read_kinship)
        .transpose()?
        .map(Arc::new);
    if kinship.is_some() {
        info!("using the supplied kinship; --n-genotypes and --n-markers are ignored");
    }
    Ok(SimConfig {
        n_genotypes: spec.n_genotypes as usize,
        n_markers: spec.n_markers as usize,
        truth,
        truth_kappa: ParamVector(params),
        resid_var: spec.resid_var,
        env_means,
        seed: spec.seed,
        kinship,
    })
}

fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let cfg = sim_config(&a.spec)?;
    let out = simulate_met(&cfg)?;
    create_dir(&a.out)?;
    let ds = &out.dataset;
    io::write_phenotypes(&a.out.join(PHENOTYPES_FILE), ds.records())?;
    let k = ds.kinship();
    io::write_labeled_matrix(
        &a.out.join(KINSHIP_FILE),
        k.values(),
        k.labels(),
        k.labels(),
    )?;

    let mut truth: Vec<(String, f64)> = cfg
        .truth
        .param_names()
        .into_iter()
        .zip(out.true_kappa.0.iter().copied())
        .collect();
    truth.push((RESID_NAME.to_string(), out.true_resid_var));
    io::write_params(&a.out.join(TRUTH_PARAMS_FILE), &truth)?;

    let n = ds.n_genotypes();
    let cells: Vec<PhenotypeRecord> = ds
        .environment_labels()
        .iter()
        .enumerate()
        .flat_map(|(e, env)| {
            ds.genotype_labels()
                .iter()
                .enumerate()
                .map(move |(g, geno)| (e, env, g, geno))
        })
        .map(|(e, env, g, geno)| {
            PhenotypeRecord::new(
                geno.clone(),
                env.clone(),
                out.true_genetic_values[e * n + g],
            )
        })
        .collect();
    io::write_phenotypes(&a.out.join(TRUTH_VALUES_FILE), &cells)?;
    Ok(())
}

fn fit(a: &FitArgs) -> Result<(), CliError> {
    check_matrix_flags(a.structure, &a.matrices)?;
    let matrices = Matrices::load(&a.matrices)?;
    let ds = load_dataset(&a.phenotypes, &a.kinship, matrices.labels()?)?;
    let structure = matrices.structure(a.structure, ds.environment_labels())?;
    let opts = FitOptions {
        max_iter: a.max_iter as usize,
        tol: a.tol,
        ..FitOptions::default()
    };
    let result = reml::fit(&ds, &structure, &opts)?;
    if !result.converged {
        warn!(
            "fit did not converge after {} iterations; estimates are the last accepted iterate",
            result.iterations
        );
    }
    io::write_fit_result(&a.out, &result)?;
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<(), CliError> {
    let cells = io::read_predictions(&a.fit.join(io::BLUPS_FILE))?;
    let lookup: BTreeMap<(&str, &str), &CellPrediction> = cells
        .iter()
        .map(|c| ((c.genotype.as_str(), c.environment.as_str()), c))
        .collect();
    let genotypes: HashSet<&str> = cells.iter().map(|c| c.genotype.as_str()).collect();
    let targets = io::read_targets(&a.targets)?;
    let out = targets
        .iter()
        .map(|(g, e)| {
            lookup
                .get(&(g.as_str(), e.as_str()))
                .map(|c| (*c).clone())
                .ok_or_else(|| {
                    let (kind, label) = if genotypes.contains(g.as_str()) {
                        ("environment", e)
                    } else {
                        ("genotype", g)
                    };
                    gxe_reml::Error::Lookup {
                        kind,
                        label: label.clone(),
                    }
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    io::write_predictions(&a.out, &out)?;
    Ok(())
}

fn cv(a: &CvArgs) -> Result<(), CliError> {
    let kinds: Vec<StructureKind> = parse_list("--models", &a.models)?;
    if kinds.is_empty() {
        return Err(usage("--models is empty"));
    }
    let lambdas = a
        .lambdas
        .as_deref()
        .map(|l| parse_list::<f64>("--lambdas", l))
        .transpose()?;
    if let Some(l) = lambdas
        .as_ref()
        .and_then(|ls| ls.iter().find(|l| !(0.0..=1.0).contains(*l)))
    {
        return Err(usage(format!("--lambdas: {l} is outside [0, 1]")));
    }
    if a.matrices.grid.is_some() && !kinds.contains(&StructureKind::KernelAveraging) {
        return Err(usage("--grid only applies when `ka` is among --models"));
    }

    let own = Matrices::load(&a.matrices)?;
    let (source, fallback, labels) = match (&a.phenotypes, &a.sim_config) {
        (Some(ph), None) => {
            let kin = a
                .kinship
                .as_deref()
                .ok_or_else(|| usage("--phenotypes requires --kinship"))?;
            let ds = load_dataset(ph, kin, own.labels()?)?;
            let labels = ds.environment_labels().to_vec();
            (CvSource::Observed(ds), None, labels)
        }
        (None, Some(sc)) => {
            let mut spec = crate::read_sim_spec(sc)?;
            if let Some(k) = &a.kinship {
                spec.kinship = Some(k.clone());
            }
            let cfg = sim_config(&spec)?;
            let labels = cfg.truth.labels().to_vec();
            let fallback = Matrices::load(&spec.matrices)?;
            (CvSource::Simulated(cfg), Some(fallback), labels)
        }
        _ => {
            return Err(usage(
                "exactly one of --phenotypes or --sim-config is required",
            ))
        }
    };

    let matrices = Matrices {
        corr: own
            .corr
            .or_else(|| fallback.as_ref().and_then(|f| f.corr.clone())),
        dist: own
            .dist
            .or_else(|| fallback.as_ref().and_then(|f| f.dist.clone())),
        grid: own.grid,
    };
    let mut models = Vec::with_capacity(kinds.len());
    for kind in &kinds {
        let name = kind.to_string();
        if models.iter().any(|m: &ModelSpec| m.name == name) {
            return Err(usage(format!("--models lists `{name}` twice")));
        }
        models.push(ModelSpec::new(name, matrices.structure(*kind, &labels)?));
    }

    let design = SparseDesign {
        n_checks: a.checks as usize,
        envs_per_variety: a.envs_per_variety as usize,
        replicates: a.replicates as usize,
        seed: a.seed,
    };
    let jobs = match a.jobs {
        Some(j) => j as usize,
        None => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    };
    let opts = CvOptions {
        lambdas,
        fit: FitOptions {
            max_iter: a.max_iter as usize,
            tol: a.tol,
            ..FitOptions::default()
        },
        jobs,
    };
    let report = run_cv(&source, &models, &design, &opts)?;
    let failed = report.rows.iter().filter(|r| !r.converged).count();
    if failed > 0 {
        warn!(
            "{failed} of {} fits failed or did not converge",
            report.rows.len()
        );
    }
    io::write_cv_report(&a.out, &report)?;
    if let Some(path) = &a.summary_out {
        io::write_cv_summary(path, &report)?;
    }
    Ok(())
}
