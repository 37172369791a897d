//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! and then asserts.

mod common;

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use gxe_reml::cv::{run_cv, sparse_split, CvOptions, CvReport, CvSource, ModelSpec, SparseDesign};
use gxe_reml::env_features::gdd_daily;
use gxe_reml::reml::{build_design, reml_loglik, score_and_ai};
use gxe_reml::rng::seeded_rng;
use gxe_reml::simulator::{simulate_met, SimConfig};
use gxe_reml::variance::{average_kernel, gaussian_kernel};
use gxe_reml::{
    CovarianceModel, Dataset, EnvCorrelationMatrix, FitOptions, ParamVector, PhenotypeRecord,
    RelationshipMatrix, StructureKind, VarianceStructure,
};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

use common::*;

fn verdict(n: u32, pass: bool, detail: String) {
    println!(
        "\ncriterion {n}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_01_derivative_correctness() {
    const TOL: f64 = 1e-5;
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for kind in StructureKind::ALL {
        for (pi, p) in [3usize, 5, 8].into_iter().enumerate() {
            let s = structure(kind, p, 100 + pi as u64);
            let mut rng = seeded_rng(1, pi as u64);
            for _ in 0..20 {
                let kappa = random_params(&s, &mut rng);
                let eval = s.evaluate(&ParamVector(kappa.clone())).unwrap();
                for i in 0..kappa.len() {
                    let h = 1e-5 * kappa[i];
                    let mut up = kappa.clone();
                    let mut dn = kappa.clone();
                    up[i] += h;
                    dn[i] -= h;
                    let su = s.evaluate(&ParamVector(up)).unwrap().sigma;
                    let sd = s.evaluate(&ParamVector(dn)).unwrap().sigma;
                    let an = &eval.derivs[i];
                    for r in 0..p {
                        for c in 0..p {
                            let (a, f) = (an[(r, c)], (su[(r, c)] - sd[(r, c)]) / (2.0 * h));
                            // round-off of the difference quotient: a few ulps
                            // of the evaluated entries divided by the step
                            let noise =
                                16.0 * f64::EPSILON * su[(r, c)].abs().max(sd[(r, c)].abs())
                                    / (2.0 * h);
                            let mag = a.abs().max(f.abs());
                            let rel = if mag == 0.0 {
                                0.0
                            } else {
                                ((a - f).abs() - noise).max(0.0) / mag
                            };
                            if rel > worst {
                                worst = rel;
                                worst_at = format!("{kind} p={p} param {i}");
                            }
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        worst <= TOL && secs < 10.0,
        format!("max entrywise rel err {worst:.2e} at {worst_at}, {secs:.2}s"),
    );
}

#[test]
fn criterion_02_reml_gradient() {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let (n, p) = (30, 4);
    let kin = kinship(n, 300, 2);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for (ki, kind) in StructureKind::ALL.into_iter().enumerate() {
        let s = structure(kind, p, 200 + ki as u64);
        let mut rng = seeded_rng(2, ki as u64);
        let truth = random_params(&s, &mut rng);
        let sim = simulate_met(&SimConfig {
            n_genotypes: n,
            n_markers: 300,
            truth: s.clone(),
            truth_kappa: ParamVector(truth),
            resid_var: 0.5,
            env_means: vec![1.0, 2.0, 3.0, 4.0],
            seed: 20 + ki as u64,
            kinship: Some(Arc::clone(&kin)),
        })
        .unwrap();
        let ds = sim.dataset;
        for _ in 0..10 {
            let mut theta = random_params(&s, &mut rng);
            theta.push(rng.random_range(0.2..2.0));
            let k = theta.len() - 1;
            let ll = |t: &[f64]| reml_loglik(&ds, &s, &ParamVector(t[..k].to_vec()), t[k]).unwrap();
            let grad = score_and_ai(&ds, &s, &ParamVector(theta[..k].to_vec()), theta[k])
                .unwrap()
                .gradient;
            let fd: Vec<f64> = (0..=k)
                .map(|i| {
                    let h = 1e-5 * theta[i];
                    let mut up = theta.clone();
                    let mut dn = theta.clone();
                    up[i] += h;
                    dn[i] -= h;
                    (ll(&up) - ll(&dn)) / (2.0 * h)
                })
                .collect();
            // relative to |fd_i|, floored at 1e-3 of the largest component
            let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..=k {
                let rel = (grad[i] - fd[i]).abs() / fd[i].abs().max(1e-3 * scale);
                if rel > worst {
                    worst = rel;
                    worst_at = format!("{kind} param {i}");
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        worst <= TOL && secs < 60.0,
        format!("max rel err {worst:.2e} at {worst_at}, {secs:.2}s"),
    );
}

#[test]
fn criterion_03_estimator_recovery() {
    let start = Instant::now();
    let (n, p, reps) = (100, 5, 50);
    let (theta, sigma2, resid) = (0.1, 1.0, 0.5);
    let d = random_distance(p, 6, 3);
    let s = VarianceStructure::kernel_single(d.clone());
    let kin = kinship(n, 1000, 3);
    let mut est: Vec<[f64; 3]> = Vec::new();
    let mut n_conv = 0;
    for rep in 0..reps {
        let sim = simulate_met(&SimConfig {
            n_genotypes: n,
            n_markers: 1000,
            truth: s.clone(),
            truth_kappa: ParamVector(vec![theta, sigma2]),
            resid_var: resid,
            env_means: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            seed: 1000 + rep,
            kinship: Some(Arc::clone(&kin)),
        })
        .unwrap();
        let fit = gxe_reml::reml::fit(&sim.dataset, &s, &FitOptions::default()).unwrap();
        if fit.converged && fit.iterations <= 100 {
            n_conv += 1;
            est.push([fit.kappa_hat.0[0], fit.kappa_hat.0[1], fit.resid_var_hat]);
        }
    }
    let truth = [theta, sigma2, resid];
    let names = ["theta", "sigma2", "resid_var"];
    let mut ok = n_conv as f64 >= 0.95 * reps as f64;
    let mut detail = format!("{n_conv}/{reps} converged");
    for j in 0..3 {
        let v: Vec<f64> = est.iter().map(|e| e[j]).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        let se = sd / (v.len() as f64).sqrt();
        let z = (m - truth[j]) / se;
        ok &= z.abs() <= 3.0;
        detail.push_str(&format!(
            "; {} mean {m:.4} vs {} (z = {z:.2})",
            names[j], truth[j]
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 900.0;
    verdict(3, ok, format!("{detail}; {secs:.1}s"));
}

#[test]
fn criterion_04_structure_equivalence() {
    let (n, p) = (40, 4);
    let d = random_distance(p, 6, 4);
    let theta = 1.0 / d.mean_off_diagonal();
    let kern = VarianceStructure::kernel_single(d.clone());
    let c = EnvCorrelationMatrix::new(gaussian_kernel(&d, theta).unwrap(), env_labels(p)).unwrap();
    let corr = VarianceStructure::corr_single(c);
    let kin = kinship(n, 400, 4);
    let mut max_dl = 0.0f64;
    let mut max_ds = 0.0f64;
    for rep in 0..10 {
        let sim = simulate_met(&SimConfig {
            n_genotypes: n,
            n_markers: 400,
            truth: kern.clone(),
            truth_kappa: ParamVector(vec![theta, 1.5]),
            resid_var: 0.7,
            env_means: vec![0.0; p],
            seed: 400 + rep,
            kinship: Some(Arc::clone(&kin)),
        })
        .unwrap();
        let opts_k = FitOptions {
            init: Some(ParamVector(vec![theta, 1.0])),
            init_resid: Some(1.0),
            fixed: vec![true, false, false],
            tol: 1e-10,
            ..FitOptions::default()
        };
        let opts_c = FitOptions {
            init: Some(ParamVector(vec![1.0])),
            init_resid: Some(1.0),
            tol: 1e-10,
            ..FitOptions::default()
        };
        let fk = gxe_reml::reml::fit(&sim.dataset, &kern, &opts_k).unwrap();
        let fc = gxe_reml::reml::fit(&sim.dataset, &corr, &opts_c).unwrap();
        max_dl = max_dl.max((fk.loglik() - fc.loglik()).abs());
        max_ds = max_ds.max((fk.kappa_hat.0[1] - fc.kappa_hat.0[0]).abs());
    }
    verdict(
        4,
        max_dl <= 1e-6 && max_ds <= 1e-6,
        format!("max |Δℓ| {max_dl:.2e}, max |Δσ̂²| {max_ds:.2e}"),
    );
}

#[test]
fn criterion_05_kernel_limits() {
    let mut worst_j = 0.0f64;
    let mut worst_i = 0.0f64;
    for (seed, p) in [(5u64, 3usize), (6, 5), (7, 8)] {
        let d = random_distance(p, 6, seed);
        assert!((0..p).all(|i| (0..p).all(|j| i == j || d.values()[(i, j)] > 0.0)));
        let s = VarianceStructure::kernel_single(d);
        let sigma2 = 1.7;
        let small = s.evaluate(&ParamVector(vec![1e-10, sigma2])).unwrap().sigma;
        let large = s.evaluate(&ParamVector(vec![1e6, sigma2])).unwrap().sigma;
        let j = DMatrix::from_element(p, p, sigma2);
        let i = DMatrix::identity(p, p) * sigma2;
        worst_j = worst_j.max((small - j).amax());
        worst_i = worst_i.max((large - i).amax());
    }
    verdict(
        5,
        worst_j <= 1e-8 && worst_i <= 1e-8,
        format!("max |Σ(1e-10) − σ²J| {worst_j:.2e}, max |Σ(1e6) − σ²I| {worst_i:.2e}"),
    );
}

#[test]
fn criterion_06_kernel_averaging_identity() {
    let mut rng = seeded_rng(6, 0);
    let mut mismatches = 0;
    let mut trials = 0;
    for p in [3usize, 5, 8] {
        for t in 0..20 {
            let d = random_distance(p, 6, 60 + t);
            let m = rng.random_range(2..10usize);
            let mut grid: Vec<f64> = (0..m).map(|_| rng.random_range(0.001..1.0)).collect();
            grid.sort_by(f64::total_cmp);
            let s = VarianceStructure::kernel_averaging(d, Some(grid)).unwrap();
            let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..3.0)).collect();
            let kappa = ParamVector(w);
            let (total, c) = average_kernel(&kappa, &s).unwrap();
            let sigma = s.evaluate(&kappa).unwrap().sigma;
            trials += 1;
            if c.scale(total) != sigma {
                mismatches += 1;
            }
        }
    }
    verdict(
        6,
        mismatches == 0,
        format!("{mismatches}/{trials} bitwise mismatches"),
    );
}

/// Shared CV run for criteria 7 and 8: sorghum-style design with
/// heterogeneous true variances, both correlation models at λ ∈ {0, 0.75}.
fn sorghum_cv() -> &'static (CvReport, f64) {
    static RUN: OnceLock<(CvReport, f64)> = OnceLock::new();
    RUN.get_or_init(|| {
        let c = EnvCorrelationMatrix::new(
            DMatrix::from_row_slice(
                4,
                4,
                &[
                    1.0, 0.6, 0.4, 0.3, 0.6, 1.0, 0.5, 0.4, 0.4, 0.5, 1.0, 0.6, 0.3, 0.4, 0.6, 1.0,
                ],
            ),
            env_labels(4),
        )
        .unwrap();
        let truth = VarianceStructure::corr_multi(c.clone());
        let cfg = SimConfig {
            n_genotypes: 277,
            n_markers: 2000,
            truth: truth.clone(),
            truth_kappa: ParamVector(vec![4.0, 2.0, 1.0, 0.5]),
            resid_var: 1.0,
            env_means: vec![10.0, 12.0, 8.0, 11.0],
            seed: 0,
            kinship: Some(kinship(277, 2000, 7)),
        };
        let models = vec![
            ModelSpec::new("cor1", VarianceStructure::corr_single(c)),
            ModelSpec::new("corP", truth),
        ];
        let design = SparseDesign {
            n_checks: 5,
            envs_per_variety: 2,
            replicates: 100,
            seed: 42,
        };
        let opts = CvOptions {
            lambdas: Some(vec![0.0, 0.75]),
            ..CvOptions::default()
        };
        let start = Instant::now();
        let report = run_cv(&CvSource::Simulated(cfg), &models, &design, &opts).unwrap();
        (report, start.elapsed().as_secs_f64())
    })
}

fn converged_pairs(
    report: &CvReport,
    a: (&str, f64),
    b: (&str, f64),
    metric: fn(&gxe_reml::cv::CvRow) -> f64,
) -> Vec<(f64, f64)> {
    let ra = report.rows_for(a.0, Some(a.1));
    let rb = report.rows_for(b.0, Some(b.1));
    ra.iter()
        .zip(rb.iter())
        .filter(|(x, y)| {
            x.converged && y.converged && metric(x).is_finite() && metric(y).is_finite()
        })
        .map(|(x, y)| {
            assert_eq!(x.replicate, y.replicate);
            (metric(x), metric(y))
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_07_heterogeneous_variance_benefit() {
    let (report, secs) = sorghum_cv();
    let rmse = converged_pairs(report, ("corP", 0.0), ("cor1", 0.0), |r| r.mean_rmse);
    let pear = converged_pairs(report, ("corP", 0.0), ("cor1", 0.0), |r| r.mean_pearson);
    let (rmse_p, rmse_1) = (
        mean(rmse.iter().map(|x| x.0)),
        mean(rmse.iter().map(|x| x.1)),
    );
    let (pear_p, pear_1) = (
        mean(pear.iter().map(|x| x.0)),
        mean(pear.iter().map(|x| x.1)),
    );
    let wins = rmse.iter().filter(|(a, b)| a < b).count() as u64;
    let losses = rmse.iter().filter(|(a, b)| a > b).count() as u64;
    let n = wins + losses;
    // two-sided sign test
    let binom = Binomial::new(0.5, n).unwrap();
    let k = wins.max(losses);
    let p_value = (2.0 * binom.sf(k - 1)).min(1.0);
    let pass = rmse_p < rmse_1 && pear_p >= pear_1 && p_value < 0.05;
    verdict(
        7,
        pass,
        format!(
            "paired replicates {}; RMSE corP {rmse_p:.4} vs cor1 {rmse_1:.4}; Pearson corP {pear_p:.4} vs cor1 {pear_1:.4}; sign test {wins}/{n} wins, p = {p_value:.2e}; CV run {secs:.0}s",
            rmse.len()
        ),
    );
}

#[test]
fn criterion_08_noise_degradation() {
    let (report, _) = sorghum_cv();
    let mut pass = true;
    let mut detail = Vec::new();
    for model in ["corP", "cor1"] {
        let pairs = converged_pairs(report, (model, 0.0), (model, 0.75), |r| r.mean_pearson);
        let (at0, at75) = (
            mean(pairs.iter().map(|x| x.0)),
            mean(pairs.iter().map(|x| x.1)),
        );
        pass &= at0 > at75;
        detail.push(format!(
            "{model}: λ=0 {at0:.4} vs λ=0.75 {at75:.4} over {} replicates",
            pairs.len()
        ));
    }
    verdict(8, pass, detail.join("; "));
}

fn complete_dataset(n: usize, p: usize) -> Dataset {
    let genos: Vec<String> = (0..n).map(|i| format!("G{i}")).collect();
    let envs = env_labels(p);
    let recs = envs
        .iter()
        .flat_map(|e| {
            genos
                .iter()
                .map(move |g| PhenotypeRecord::new(g.clone(), e.clone(), 0.0))
        })
        .collect();
    Dataset::new(recs, Arc::new(RelationshipMatrix::identity(genos)), envs).unwrap()
}

#[test]
fn criterion_09_sparse_split_cardinalities() {
    let a = complete_dataset(277, 4);
    let b = complete_dataset(246, 15);
    let sa = sparse_split(
        &a,
        &SparseDesign {
            n_checks: 5,
            envs_per_variety: 2,
            replicates: 1,
            seed: 9,
        },
        0,
    )
    .unwrap();
    let sb = sparse_split(
        &b,
        &SparseDesign {
            n_checks: 6,
            envs_per_variety: 3,
            replicates: 1,
            seed: 9,
        },
        0,
    )
    .unwrap();
    let (na, nb) = (sa.train.n_records(), sb.train.n_records());
    verdict(
        9,
        na == 564 && nb == 810 && a.n_records() == 1108 && b.n_records() == 3690,
        format!("277x4 design {na}/1108 train records, 246x15 design {nb}/3690"),
    );
}

#[test]
fn criterion_10_gdd_units() {
    let got = [
        gdd_daily(60.0, 80.0).unwrap(),
        gdd_daily(40.0, 90.0).unwrap(),
        gdd_daily(45.0, 48.0).unwrap(),
    ];
    verdict(10, got == [20.0, 18.0, -1.0], format!("got {got:?}"));
}

#[test]
fn criterion_11_desk_scale_performance() {
    let (n, p) = (246, 15);
    let d = random_distance(p, 16, 11);
    let theta = 1.0 / d.mean_off_diagonal();
    let kern_p = VarianceStructure::kernel_multi(d.clone());
    let mut rng = seeded_rng(11, 0);
    let mut truth = vec![theta];
    truth.extend((0..p).map(|_| rng.random_range(0.5..2.0)));
    let sim = simulate_met(&SimConfig {
        n_genotypes: n,
        n_markers: 2000,
        truth: kern_p.clone(),
        truth_kappa: ParamVector(truth),
        resid_var: 1.0,
        env_means: (0..p).map(|e| e as f64).collect(),
        seed: 11,
        kinship: None,
    })
    .unwrap();
    let split = sparse_split(
        &sim.dataset,
        &SparseDesign {
            n_checks: 6,
            envs_per_variety: 3,
            replicates: 1,
            seed: 11,
        },
        0,
    )
    .unwrap();
    assert_eq!(split.train.n_records(), 810);
    let opts = FitOptions::default();
    let t0 = Instant::now();
    let fp = gxe_reml::reml::fit(&split.train, &kern_p, &opts).unwrap();
    let tp = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let f1 =
        gxe_reml::reml::fit(&split.train, &VarianceStructure::kernel_single(d), &opts).unwrap();
    let t1 = t0.elapsed().as_secs_f64();
    verdict(
        11,
        tp < 300.0 && t1 < tp,
        format!(
            "kernP {tp:.1}s ({} iterations, converged {}), kern1 {t1:.1}s ({} iterations, converged {})",
            fp.iterations, fp.converged, f1.iterations, f1.converged
        ),
    );
}

#[test]
fn criterion_12_reml_invariances() {
    let (n, p) = (25, 3);
    let kin = kinship(n, 300, 12);
    let mut worst_t = 0.0f64;
    let mut worst_p = 0.0f64;
    let mut rng = seeded_rng(12, 0);
    for (ki, kind) in StructureKind::ALL.into_iter().enumerate() {
        let s = structure(kind, p, 120 + ki as u64);
        for inst in 0..5u64 {
            let kappa = random_params(&s, &mut rng);
            let sim = simulate_met(&SimConfig {
                n_genotypes: n,
                n_markers: 300,
                truth: s.clone(),
                truth_kappa: ParamVector(kappa.clone()),
                resid_var: 0.8,
                env_means: vec![3.0, -1.0, 2.0],
                seed: 1200 + 10 * ki as u64 + inst,
                kinship: Some(Arc::clone(&kin)),
            })
            .unwrap();
            // drop a random quarter of the records to get an unbalanced design
            let mut keep: Vec<usize> = (0..sim.dataset.n_records())
                .filter(|_| rng.random_bool(0.75))
                .collect();
            let ds = sim.dataset.subset(&keep);
            let eval_at = ParamVector(random_params(&s, &mut rng));
            let resid = rng.random_range(0.3..1.5);
            let base = reml_loglik(&ds, &s, &eval_at, resid).unwrap();

            let x = build_design(&ds).unwrap().x;
            let b = DVector::from_fn(x.ncols(), |_, _| rng.random_range(-10.0..10.0));
            let shifted: Vec<f64> = (DVector::from_vec(ds.values()) + &x * b)
                .iter()
                .copied()
                .collect();
            let lt = reml_loglik(&ds.with_values(&shifted).unwrap(), &s, &eval_at, resid).unwrap();
            worst_t = worst_t.max((lt - base).abs());

            keep.shuffle(&mut rng);
            let recs: Vec<PhenotypeRecord> = keep
                .iter()
                .map(|&r| sim.dataset.records()[r].clone())
                .collect();
            let perm = Dataset::new(recs, Arc::clone(&kin), env_labels(p)).unwrap();
            let lp = reml_loglik(&perm, &s, &eval_at, resid).unwrap();
            worst_p = worst_p.max((lp - base).abs());
        }
    }
    verdict(
        12,
        worst_t <= 1e-8 && worst_p <= 1e-8,
        format!("max |Δℓ| translation {worst_t:.2e}, permutation {worst_p:.2e}"),
    );
}
