//! REML estimation for y = Xβ + Zu + ε with Var(u) = Σ(κ) ⊗ K and
//! Var(ε) = σ²_ε I.
//!
//! V = Z(Σ⊗K)Zᵀ + σ²_ε I is assembled densely at record dimension N from
//! indexed products Σ[e(r), e(s)]·K[g(r), g(s)]; the np×np Kronecker
//! product is never formed. Derivative traces tr(P V̇ᵢ) and quadratic forms
//! are reduced to p×p environment blocks once per iteration, so the cost
//! per extra covariance parameter is O(p²) rather than O(N²).
//!
//! The log-likelihood omits the constant −½(N − rank X)·log 2π:
//!
//! ```text
//! ℓ_R = −½ [ log|V| + log|XᵀV⁻¹X| + yᵀPy ]
//! P   = V⁻¹ − V⁻¹X (XᵀV⁻¹X)⁻¹ XᵀV⁻¹
//! ```

use std::collections::HashMap;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor};
use crate::variance::{CovarianceModel, ParamVector};

/// Name used for the residual variance in parameter listings.
pub const RESID_NAME: &str = "resid_var";

/// |log κ| beyond which a parameter is reported as collapsing to a boundary.
const BOUNDARY_LOG: f64 = 30.0;
/// Log-parameters are kept inside ±LOG_CLAMP.
const LOG_CLAMP: f64 = 40.0;
/// Largest change of any log-parameter in one update.
const MAX_LOG_STEP: f64 = 3.0;
const MAX_HALVINGS: usize = 30;

/// Fixed-effect and random-effect incidence matrices.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    /// N×p: intercept plus indicators for environments 2..p.
    pub x: DMatrix<f64>,
    /// N×(np): selects each record's genotype-within-environment cell.
    pub z: DMatrix<f64>,
}

fn check_design(ds: &Dataset) -> Result<()> {
    let p = ds.n_environments();
    if p < 2 {
        return Err(Error::Design(format!(
            "need at least 2 environments, got {p}"
        )));
    }
    if ds.n_genotypes() < 2 {
        return Err(Error::Design(format!(
            "need at least 2 genotypes, got {}",
            ds.n_genotypes()
        )));
    }
    let mut counts = vec![0usize; p];
    for &e in ds.environment_index() {
        counts[e] += 1;
    }
    if let Some(e) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Design(format!(
            "environment `{}` has no records",
            ds.environment_labels()[e]
        )));
    }
    Ok(())
}

fn fixed_design(ds: &Dataset) -> DMatrix<f64> {
    let (nrec, p) = (ds.n_records(), ds.n_environments());
    let env = ds.environment_index();
    DMatrix::from_fn(nrec, p, |r, c| match c {
        0 => 1.0,
        _ if env[r] == c => 1.0,
        _ => 0.0,
    })
}

/// Full-rank fixed-effect design (reference-level environment coding) and
/// the record-to-cell selection matrix.
pub fn build_design(ds: &Dataset) -> Result<DesignMatrices> {
    check_design(ds)?;
    let n_cells = ds.n_genotypes() * ds.n_environments();
    let mut z = DMatrix::zeros(ds.n_records(), n_cells);
    for r in 0..ds.n_records() {
        z[(r, ds.cell_of(r))] = 1.0;
    }
    Ok(DesignMatrices {
        x: fixed_design(ds),
        z,
    })
}

/// REML gradient and average-information matrix in natural parameter scale;
/// the last entry is the residual variance.
#[derive(Debug, Clone)]
pub struct ScoreAi {
    pub loglik: f64,
    pub gradient: DVector<f64>,
    pub ai: DMatrix<f64>,
}

/// Options for [`RemlProblem::fit`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Structure parameters to start from; defaults to the structure's
    /// `default_init` at the within-environment variance of y.
    pub init: Option<ParamVector>,
    pub init_resid: Option<f64>,
    /// Per parameter (structure parameters then residual): hold at init.
    pub fixed: Vec<bool>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            init: None,
            init_resid: None,
            fixed: Vec::new(),
        }
    }
}

/// Predicted value for one genotype-environment cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPrediction {
    pub genotype: String,
    pub environment: String,
    /// Conditional mean of the GxE effect.
    pub blup: f64,
    /// Environment mean from β̂ plus the BLUP.
    pub fitted: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Structure parameter names followed by the residual variance.
    pub param_names: Vec<String>,
    pub kappa_hat: ParamVector,
    pub resid_var_hat: f64,
    /// Intercept followed by environment contrasts against the first one.
    pub beta_hat: DVector<f64>,
    pub loglik_trace: Vec<f64>,
    /// Average information at the returned estimates, natural scale,
    /// structure parameters first and residual variance last.
    pub ai_matrix: DMatrix<f64>,
    pub gradient: DVector<f64>,
    /// û in genotype-within-environment order (index e·n + g).
    pub blups: DVector<f64>,
    pub genotype_labels: Vec<String>,
    pub environment_labels: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self
            .loglik_trace
            .last()
            .expect("trace always holds the starting value")
    }

    pub fn n_genotypes(&self) -> usize {
        self.genotype_labels.len()
    }

    pub fn blup(&self, genotype: usize, environment: usize) -> f64 {
        self.blups[environment * self.n_genotypes() + genotype]
    }

    /// β̂-implied mean of environment `e`.
    pub fn environment_mean(&self, e: usize) -> f64 {
        if e == 0 {
            self.beta_hat[0]
        } else {
            self.beta_hat[0] + self.beta_hat[e]
        }
    }

    /// BLUPs and fitted values for the requested (genotype, environment)
    /// cells. Observed cells get their in-sample BLUP; unobserved cells the
    /// conditional mean under the fitted model.
    pub fn predict_cells(&self, targets: &[(String, String)]) -> Result<Vec<CellPrediction>> {
        let g_lookup: HashMap<&str, usize> = self
            .genotype_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let e_lookup: HashMap<&str, usize> = self
            .environment_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        targets
            .iter()
            .map(|(g, e)| {
                let gi = *g_lookup.get(g.as_str()).ok_or_else(|| Error::Lookup {
                    kind: "genotype",
                    label: g.clone(),
                })?;
                let ei = *e_lookup.get(e.as_str()).ok_or_else(|| Error::Lookup {
                    kind: "environment",
                    label: e.clone(),
                })?;
                let blup = self.blup(gi, ei);
                Ok(CellPrediction {
                    genotype: g.clone(),
                    environment: e.clone(),
                    blup,
                    fitted: self.environment_mean(ei) + blup,
                })
            })
            .collect()
    }
}

/// Cached per-dataset quantities for repeated likelihood evaluations.
pub struct RemlProblem<'a> {
    dataset: &'a Dataset,
    model: &'a dyn CovarianceModel,
    y: DVector<f64>,
    x: DMatrix<f64>,
    /// K[g(r), g(s)] for every record pair.
    k_rec: DMatrix<f64>,
}

struct Factorized {
    loglik: f64,
    /// V⁻¹X
    vinv_x: DMatrix<f64>,
    xtvx: SpdFactor,
    /// Py = V⁻¹(y − Xβ̂)
    py: DVector<f64>,
    beta: DVector<f64>,
    v: SpdFactor,
    sigma: DMatrix<f64>,
    derivs: Vec<DMatrix<f64>>,
}

impl<'a> RemlProblem<'a> {
    pub fn new(dataset: &'a Dataset, model: &'a dyn CovarianceModel) -> Result<Self> {
        if model.labels() != dataset.environment_labels() {
            return Err(Error::invalid(format!(
                "structure environments {:?} do not match dataset environments {:?}",
                model.labels(),
                dataset.environment_labels()
            )));
        }
        check_design(dataset)?;
        let y = DVector::from_vec(dataset.values());
        let x = fixed_design(dataset);
        let gi = dataset.genotype_index();
        let k = dataset.kinship().values();
        let nrec = dataset.n_records();
        let k_rec = DMatrix::from_fn(nrec, nrec, |r, s| k[(gi[r], gi[s])]);
        Ok(Self {
            dataset,
            model,
            y,
            x,
            k_rec,
        })
    }

    pub fn n_params(&self) -> usize {
        self.model.n_params() + 1
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.model.param_names();
        names.push(RESID_NAME.to_string());
        names
    }

    /// Variance of y after removing environment means; the scale used for
    /// default starting values.
    pub fn within_environment_variance(&self) -> f64 {
        let p = self.dataset.n_environments();
        let env = self.dataset.environment_index();
        let mut sums = vec![0.0; p];
        let mut counts = vec![0usize; p];
        for (r, &e) in env.iter().enumerate() {
            sums[e] += self.y[r];
            counts[e] += 1;
        }
        let ss: f64 = env
            .iter()
            .enumerate()
            .map(|(r, &e)| (self.y[r] - sums[e] / counts[e] as f64).powi(2))
            .sum();
        let dof = (self.y.len().saturating_sub(p)).max(1);
        ss / dof as f64
    }

    fn assemble_v(&self, sigma: &DMatrix<f64>, resid: f64) -> DMatrix<f64> {
        let env = self.dataset.environment_index();
        let nrec = env.len();
        let mut v = DMatrix::from_fn(nrec, nrec, |r, s| {
            sigma[(env[r], env[s])] * self.k_rec[(r, s)]
        });
        for r in 0..nrec {
            v[(r, r)] += resid;
        }
        v
    }

    fn factorize(&self, kappa: &ParamVector, resid: f64) -> Result<Factorized> {
        if !(resid > 0.0) || !resid.is_finite() {
            return Err(Error::contract(format!(
                "residual variance must be positive, got {resid}"
            )));
        }
        let cov = self.model.evaluate(kappa)?;
        let v = SpdFactor::new(self.assemble_v(&cov.sigma, resid), "V")?;
        let vinv_x = v.solve_mat(&self.x);
        let xtvx = SpdFactor::new(self.x.tr_mul(&vinv_x), "XᵀV⁻¹X")?;
        let vinv_y = v.solve_vec(&self.y);
        let beta = xtvx.solve_vec(&vinv_x.tr_mul(&self.y));
        let py = vinv_y - &vinv_x * &beta;
        let quad = self.y.dot(&py);
        let loglik = -0.5 * (v.log_det() + xtvx.log_det() + quad);
        if !loglik.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite REML log-likelihood at {:?}",
                kappa.values()
            )));
        }
        Ok(Factorized {
            loglik,
            vinv_x,
            xtvx,
            py,
            beta,
            v,
            sigma: cov.sigma,
            derivs: cov.derivs,
        })
    }

    pub fn loglik(&self, kappa: &ParamVector, resid: f64) -> Result<f64> {
        Ok(self.factorize(kappa, resid)?.loglik)
    }

    /// Σ_{s: e(s) = b} K[g(r), g(s)]·a_s for every record r and environment b.
    fn env_weighted(&self, a: &DVector<f64>) -> DMatrix<f64> {
        let env = self.dataset.environment_index();
        let nrec = env.len();
        let mut m = DMatrix::zeros(nrec, self.dataset.n_environments());
        for s in 0..nrec {
            let (b, a_s) = (env[s], a[s]);
            let kcol = self.k_rec.column(s);
            let mut mcol = m.column_mut(b);
            for r in 0..nrec {
                mcol[r] += kcol[r] * a_s;
            }
        }
        m
    }

    fn score_from(&self, f: &Factorized) -> ScoreAi {
        let env = self.dataset.environment_index();
        let nrec = env.len();
        let p = self.dataset.n_environments();
        let k = f.derivs.len();

        let vinv = f.v.inverse();
        let proj = f.xtvx.solve_mat(&f.vinv_x.transpose());
        let pmat = vinv - &f.vinv_x * proj;
        let a = &f.py;

        // B[a, b] = Σ_{r∈a, s∈b} P_rs K_rs, so tr(P V̇ᵢ) = Σ Ṡᵢ ∘ B.
        let mut b_blocks = DMatrix::<f64>::zeros(p, p);
        for s in 0..nrec {
            let es = env[s];
            let pcol = pmat.column(s);
            let kcol = self.k_rec.column(s);
            for r in 0..nrec {
                b_blocks[(env[r], es)] += pcol[r] * kcol[r];
            }
        }
        // Q[a, b] = Σ_{r∈a, s∈b} (Py)_r (Py)_s K_rs, so yᵀP V̇ᵢ P y = Σ Ṡᵢ ∘ Q.
        let m = self.env_weighted(a);
        let mut q_blocks = DMatrix::<f64>::zeros(p, p);
        for r in 0..nrec {
            for bcol in 0..p {
                q_blocks[(env[r], bcol)] += a[r] * m[(r, bcol)];
            }
        }

        let mut gradient = DVector::zeros(k + 1);
        for (i, d) in f.derivs.iter().enumerate() {
            gradient[i] = -0.5 * d.component_mul(&(&b_blocks - &q_blocks)).sum();
        }
        gradient[k] = -0.5 * (pmat.trace() - a.dot(a));

        // Working vectors V̇ᵢ P y, then AI = ½ Wᵀ P W.
        let mut work = DMatrix::zeros(nrec, k + 1);
        for (i, d) in f.derivs.iter().enumerate() {
            let mut col = work.column_mut(i);
            for r in 0..nrec {
                let er = env[r];
                col[r] = (0..p).map(|bcol| d[(er, bcol)] * m[(r, bcol)]).sum();
            }
        }
        work.column_mut(k).copy_from(a);
        let pw = &pmat * &work;
        let mut ai = work.tr_mul(&pw).scale(0.5);
        linalg::symmetrize_in_place(&mut ai);

        ScoreAi {
            loglik: f.loglik,
            gradient,
            ai,
        }
    }

    pub fn score_and_ai(&self, kappa: &ParamVector, resid: f64) -> Result<ScoreAi> {
        let f = self.factorize(kappa, resid)?;
        Ok(self.score_from(&f))
    }

    /// û = (Σ ⊗ K) Zᵀ P y over all np cells.
    fn blups(&self, f: &Factorized) -> DVector<f64> {
        let n = self.dataset.n_genotypes();
        let p = self.dataset.n_environments();
        let k = self.dataset.kinship().values();
        let gi = self.dataset.genotype_index();
        let env = self.dataset.environment_index();
        let mut m = DMatrix::<f64>::zeros(n, p);
        for (r, (&g, &e)) in gi.iter().zip(env).enumerate() {
            let a_r = f.py[r];
            let kcol = k.column(g);
            let mut mcol = m.column_mut(e);
            for h in 0..n {
                mcol[h] += kcol[h] * a_r;
            }
        }
        // u[., e] = M Σ[e, .]ᵀ
        let u = &m * f.sigma.transpose();
        DVector::from_column_slice(u.as_slice())
    }

    /// Maximizes ℓ_R by average-information updates on log-parameters with
    /// step halving.
    pub fn fit(&self, opts: &FitOptions) -> Result<FitResult> {
        let k = self.model.n_params();
        let names = self.param_names();
        let scale = self.within_environment_variance().max(f64::MIN_POSITIVE);
        let init = opts
            .init
            .clone()
            .unwrap_or_else(|| self.model.default_init(scale));
        if init.len() != k {
            return Err(Error::contract(format!(
                "expected {k} initial values, got {}",
                init.len()
            )));
        }
        let init_resid = opts.init_resid.unwrap_or(0.5 * scale);
        let fixed = if opts.fixed.is_empty() {
            vec![false; k + 1]
        } else {
            opts.fixed.clone()
        };
        if fixed.len() != k + 1 {
            return Err(Error::contract(format!(
                "fixed mask must have {} entries, got {}",
                k + 1,
                fixed.len()
            )));
        }
        let mut log_params: Vec<f64> = init
            .values()
            .iter()
            .chain(std::iter::once(&init_resid))
            .map(|v| v.ln())
            .collect();
        if log_params.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(
                "initial values must be positive and finite",
            ));
        }
        let free: Vec<usize> = (0..=k).filter(|&i| !fixed[i]).collect();
        let unpack = |lp: &[f64]| -> (ParamVector, f64) {
            (
                ParamVector(lp[..k].iter().map(|v| v.exp()).collect()),
                lp[k].exp(),
            )
        };

        let (kappa0, resid0) = unpack(&log_params);
        let mut current = self.factorize(&kappa0, resid0)?;
        let mut trace = vec![current.loglik];
        let mut warnings = Vec::new();
        let mut at_boundary = vec![false; k + 1];
        let mut converged = free.is_empty();
        let mut iterations = 0;

        while !converged && iterations < opts.max_iter {
            // collapsed parameters stay put so they cannot swamp the step cap
            let active: Vec<usize> = free.iter().copied().filter(|&i| !at_boundary[i]).collect();
            if active.is_empty() {
                converged = true;
                break;
            }
            let score = self.score_from(&current);
            let theta: Vec<f64> = log_params.iter().map(|v| v.exp()).collect();
            let nf = active.len();
            let g_log = DVector::from_fn(nf, |a, _| theta[active[a]] * score.gradient[active[a]]);
            let h_log = DMatrix::from_fn(nf, nf, |a, b| {
                theta[active[a]] * score.ai[(active[a], active[b])] * theta[active[b]]
            });
            let mut step = solve_damped(&h_log, &g_log);
            let biggest = step.amax();
            if biggest > MAX_LOG_STEP {
                step.scale_mut(MAX_LOG_STEP / biggest);
            }

            let mut accepted = None;
            let mut factor = 1.0;
            for _ in 0..MAX_HALVINGS {
                let mut cand = log_params.clone();
                for (a, &i) in active.iter().enumerate() {
                    cand[i] = (cand[i] + factor * step[a]).clamp(-LOG_CLAMP, LOG_CLAMP);
                }
                let (kc, rc) = unpack(&cand);
                match self.factorize(&kc, rc) {
                    Ok(f) if f.loglik >= current.loglik => {
                        accepted = Some((cand, f));
                        break;
                    }
                    Ok(_) => {}
                    Err(e) => debug!("trial point rejected: {e}"),
                }
                factor *= 0.5;
            }

            let Some((cand, f)) = accepted else {
                let gmax = g_log.amax();
                converged = gmax <= 1e-3;
                let msg = format!(
                    "step halving exhausted at iteration {} (max log-scale gradient {gmax:.3e})",
                    iterations + 1
                );
                warn!("{msg}");
                warnings.push(msg);
                break;
            };
            iterations += 1;

            let dl = f.loglik - current.loglik;
            let mut rel = 0.0f64;
            let mut newly_collapsed = false;
            for &i in &active {
                if cand[i].abs() > BOUNDARY_LOG {
                    if !at_boundary[i] {
                        at_boundary[i] = true;
                        newly_collapsed = true;
                        let msg = format!(
                            "parameter `{}` is collapsing to a boundary (log value {:.1})",
                            names[i], cand[i]
                        );
                        warn!("{msg}");
                        warnings.push(msg);
                    }
                    continue;
                }
                rel = rel.max(((cand[i] - log_params[i]).exp() - 1.0).abs());
            }
            debug!(
                "iteration {iterations}: loglik {:.8} (+{dl:.3e}), max rel change {rel:.3e}",
                f.loglik
            );
            log_params = cand;
            current = f;
            trace.push(current.loglik);
            if !newly_collapsed && dl.abs() < opts.tol && rel < 10.0 * opts.tol {
                converged = true;
            }
        }
        if !converged && iterations >= opts.max_iter {
            let msg = format!("no convergence within {} iterations", opts.max_iter);
            warn!("{msg}");
            warnings.push(msg);
        }

        let score = self.score_from(&current);
        let (kappa_hat, resid_var_hat) = unpack(&log_params);
        Ok(FitResult {
            param_names: names,
            kappa_hat,
            resid_var_hat,
            beta_hat: current.beta.clone(),
            loglik_trace: trace,
            ai_matrix: score.ai,
            gradient: score.gradient,
            blups: self.blups(&current),
            genotype_labels: self.dataset.genotype_labels().to_vec(),
            environment_labels: self.dataset.environment_labels().to_vec(),
            converged,
            iterations,
            warnings,
        })
    }
}

/// Solves H δ = g, adding a growing ridge if H is not positive definite.
fn solve_damped(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = h.clone().cholesky() {
        return ch.solve(g);
    }
    let scale = h.diagonal().amax().max(1e-12);
    let mut ridge = 1e-8 * scale;
    for _ in 0..40 {
        let damped = h + DMatrix::identity(h.nrows(), h.ncols()).scale(ridge);
        if let Some(ch) = damped.cholesky() {
            return ch.solve(g);
        }
        ridge *= 10.0;
    }
    // Fall back to scaled gradient ascent.
    g.scale(1.0 / scale)
}

/// ℓ_R at the given parameters.
pub fn reml_loglik(
    dataset: &Dataset,
    structure: &dyn CovarianceModel,
    kappa: &ParamVector,
    resid_var: f64,
) -> Result<f64> {
    RemlProblem::new(dataset, structure)?.loglik(kappa, resid_var)
}

pub fn score_and_ai(
    dataset: &Dataset,
    structure: &dyn CovarianceModel,
    kappa: &ParamVector,
    resid_var: f64,
) -> Result<ScoreAi> {
    RemlProblem::new(dataset, structure)?.score_and_ai(kappa, resid_var)
}

pub fn fit(
    dataset: &Dataset,
    structure: &dyn CovarianceModel,
    opts: &FitOptions,
) -> Result<FitResult> {
    RemlProblem::new(dataset, structure)?.fit(opts)
}

/// See [`FitResult::predict_cells`]; checks that `dataset` matches the fit.
pub fn predict_cells(
    fit: &FitResult,
    dataset: &Dataset,
    targets: &[(String, String)],
) -> Result<Vec<CellPrediction>> {
    if fit.genotype_labels != dataset.genotype_labels()
        || fit.environment_labels != dataset.environment_labels()
    {
        return Err(Error::invalid(
            "fit result and dataset have different genotype or environment labels",
        ));
    }
    fit.predict_cells(targets)
}
