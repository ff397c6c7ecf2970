//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line to stderr (uncaptured) before asserting.
//!
//! Run alone with `cargo test -p hmm-fisher --test acceptance -- --test-threads 1`.

use std::fs;
use std::io::Write;
use std::process::Command;
use std::time::{Duration, Instant};

use hmm_fisher::ergodicity::{
    likelihood_forgetting_check, likelihood_ratio_check, posterior_forgetting_check, static_bounds_check,
};
use hmm_fisher::estimation::{normality_experiment, sample_observations, NormalityOptions};
use hmm_fisher::fisher::{
    equivalence_scan, info_asymptotic, info_exact, proposition1_sweep, AsymptoticRoute, ScanOptions, SweepOptions,
    Verdict,
};
use hmm_fisher::inference::{brute_force_loglik, stationary_loglik};
use hmm_fisher::model::Family;
use hmm_fisher::sensitivity::{score_fisher_identity, score_hessian_stationary};
use hmm_fisher::stationary::{
    grad_stationary, grad_stationary_series, hess_stationary, stationary_distribution, stationary_residual,
    verify_difference_identity,
};
use hmm_fisher::{build_catalog_model, ParamHmm};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// criterion 1
const LOGLIK_TOL: f64 = 1e-12;
const LOGLIK_INSTANCES: usize = 50;
const LOGLIK_BUDGET: Duration = Duration::from_secs(10);
// criterion 2
const FD_STEP: f64 = 1e-5;
const SCORE_FD_TOL: f64 = 1e-6;
const HESSIAN_FD_TOL: f64 = 1e-4;
const FISHER_IDENTITY_TOL: f64 = 1e-8;
const DERIV_INSTANCES: usize = 100;
const DERIV_BUDGET: Duration = Duration::from_secs(60);
// criterion 3
const EXPECTED_SCORE_TOL: f64 = 1e-10;
const BARTLETT_TOL: f64 = 1e-9;
// criterion 4
const STATIONARY_RESIDUAL_TOL: f64 = 1e-12;
const GRAD_PI_FD_TOL: f64 = 1e-6;
const HESS_PI_FD_TOL: f64 = 1e-4;
const DIFFERENCE_IDENTITY_TOL: f64 = 1e-12;
const CLOSED_FORM_TOL: f64 = 1e-9;
const POISSON_TRIALS: usize = 200;
// criterion 5
const POSTERIOR_K_MAX: usize = 20;
const LIKELIHOOD_K_MAX: usize = 15;
const BOUND_WINDOWS: usize = 20;
const RATIO_WINDOWS: usize = 200;
const FUNCTIONAL_TRIALS: usize = 200;
const BOUND_BUDGET: Duration = Duration::from_secs(120);
// criterion 6
const SWEEP_REPLICATES: usize = 50_000;
const SWEEP_BUDGET: Duration = Duration::from_secs(15 * 60);
// criteria 7 and 8
const SCAN_N_MAX: usize = 6;
const NULL_ANGLE_TOL: f64 = 1e-6;
const STDERR_MULTIPLE: f64 = 3.0;
// criterion 9
const ROUTE_HORIZON: usize = 100_000;
const ROUTE_BATCHES: usize = 50;
const ROUTE_MEMORY: usize = 200;
const ROUTE_REPLICATES: usize = 20_000;
const ROUTE_BUDGET: Duration = Duration::from_secs(10 * 60);
// criterion 10
const NORMALITY_N: usize = 2000;
const NORMALITY_REPLICATES: usize = 500;
const FROBENIUS_TOL: f64 = 0.15;
const COVERAGE_RANGE: (f64, f64) = (0.91, 0.985);
const MAX_EXCLUDED: f64 = 0.02;
const NORMALITY_BUDGET: Duration = Duration::from_secs(30 * 60);

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!(
        "criterion {id:>2}: {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn catalog(name: &str) -> ParamHmm {
    build_catalog_model(name, None).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Random finite-alphabet model with at most 3 states.
fn random_finite_model(rng: &mut ChaCha8Rng) -> ParamHmm {
    let kind = rng.random_range(0..5);
    let mut u = || uniform(rng, 0.05, 0.95);
    match kind {
        0 => build_catalog_model("M1", Some(&[u(), u(), u(), u()])).unwrap(),
        1 => {
            let (a, b, s) = (u(), u(), u());
            let t1 = s * u();
            build_catalog_model("M2", Some(&[a, b, t1, s - t1])).unwrap()
        }
        2 => {
            let e = u();
            build_catalog_model("M3-point", Some(&[u(), u(), e, e])).unwrap()
        }
        k => {
            let family = Family::Softmax {
                states: if k == 3 { 2 } else { 3 },
                symbols: if k == 3 { 3 } else { 2 },
            };
            let theta = (0..family.param_dim()).map(|_| uniform(rng, -1.5, 1.5)).collect();
            ParamHmm::new("softmax", family, theta).unwrap()
        }
    }
}

#[test]
fn criterion_01_likelihood_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..LOGLIK_INSTANCES {
        let model = random_finite_model(&mut rng);
        let n = rng.random_range(1..=8);
        let y = sample_observations(&model, n, &mut rng).unwrap();
        let a = stationary_loglik(&model, &y).unwrap();
        let b = brute_force_loglik(&model, &y).unwrap();
        worst = worst.max((a - b).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "likelihood oracle",
        worst <= LOGLIK_TOL && elapsed < LOGLIK_BUDGET,
        format!("max |forward - brute force| = {worst:.2e} over {LOGLIK_INSTANCES} instances in {elapsed:.1?}"),
    );
}

/// Worst relative finite-difference error of the score and Hessian.
fn fd_errors(model: &ParamHmm, y: &[f64]) -> (f64, f64) {
    let base = score_hessian_stationary(model, y).unwrap();
    let (mut es, mut eh): (f64, f64) = (0.0, 0.0);
    for r in 0..model.param_dim() {
        let mut tp = model.theta().to_vec();
        let mut tm = tp.clone();
        tp[r] += FD_STEP;
        tm[r] -= FD_STEP;
        let mp = model.with_theta(tp).unwrap();
        let mm = model.with_theta(tm).unwrap();
        let fd = (stationary_loglik(&mp, y).unwrap() - stationary_loglik(&mm, y).unwrap()) / (2.0 * FD_STEP);
        es = es.max((fd - base.score[r]).abs() / base.score[r].abs().max(1.0));
        let sp = score_hessian_stationary(&mp, y).unwrap().score;
        let sm = score_hessian_stationary(&mm, y).unwrap().score;
        for s in 0..model.param_dim() {
            let fd = (sp[s] - sm[s]) / (2.0 * FD_STEP);
            let an = base.hessian[(s, r)];
            eh = eh.max((fd - an).abs() / an.abs().max(1.0));
        }
    }
    (es, eh)
}

#[test]
fn criterion_02_derivative_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut es, mut eh, mut ef): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut count = 0;
    for name in ["M1", "M2", "M3-point", "M4"] {
        let base = catalog(name);
        for _ in 0..DERIV_INSTANCES {
            let mut theta: Vec<f64> = base.theta().iter().map(|t| t + uniform(&mut rng, -0.05, 0.05)).collect();
            if name == "M3-point" {
                theta[3] = theta[2];
            }
            let model = base.with_theta(theta).unwrap();
            let n = rng.random_range(1..=12);
            let y = sample_observations(&model, n, &mut rng).unwrap();
            let (s, h) = fd_errors(&model, &y);
            es = es.max(s);
            eh = eh.max(h);
            let sens = score_hessian_stationary(&model, &y).unwrap().score;
            ef = ef.max((sens - score_fisher_identity(&model, &y).unwrap()).amax());
            count += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "derivative exactness",
        es <= SCORE_FD_TOL && eh <= HESSIAN_FD_TOL && ef <= FISHER_IDENTITY_TOL && elapsed < DERIV_BUDGET,
        format!(
            "{count} instances: score fd err {es:.1e}, hessian fd err {eh:.1e}, fisher identity err {ef:.1e}, {elapsed:.1?}"
        ),
    );
}

#[test]
fn criterion_03_bartlett_identities() {
    let m1 = catalog("M1");
    let (mut worst_mean, mut worst_gap): (f64, f64) = (0.0, 0.0);
    for n in 1..=5usize {
        let mut mean = DVector::zeros(4);
        for code in 0..(1u32 << n) {
            let y: Vec<f64> = (0..n).map(|i| f64::from((code >> i) & 1)).collect();
            let sh = score_hessian_stationary(&m1, &y).unwrap();
            mean += sh.score * sh.loglik.exp();
        }
        worst_mean = worst_mean.max(mean.amax());
        worst_gap = worst_gap.max(info_exact(&m1, n).unwrap().bartlett_gap.unwrap());
    }
    verdict(
        3,
        "Bartlett identities",
        worst_mean <= EXPECTED_SCORE_TOL && worst_gap <= BARTLETT_TOL,
        format!("n <= 5: max |E score| = {worst_mean:.1e}, max |hessian form - outer form| = {worst_gap:.1e}"),
    );
}

#[test]
fn criterion_04_stationary_calculus() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut models: Vec<ParamHmm> = ["M1", "M2", "M4"].iter().map(|n| catalog(n)).collect();
    models.push(
        ParamHmm::new("softmax", Family::Softmax { states: 3, symbols: 2 }, vec![0.2, -0.3, 0.5, 0.1, -0.4, 0.0, 0.7, -0.6, 0.3])
            .unwrap(),
    );
    let (mut res, mut eg, mut eh, mut ed, mut ec): (f64, f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut poisson_ok = true;
    for model in &models {
        let q = model.transition();
        let pi = stationary_distribution(&q).unwrap();
        res = res.max(stationary_residual(&q, &pi));
        let g = grad_stationary(model).unwrap();
        let h = hess_stationary(model).unwrap();
        for r in 0..model.param_dim() {
            let mut tp = model.theta().to_vec();
            let mut tm = tp.clone();
            tp[r] += FD_STEP;
            tm[r] -= FD_STEP;
            let (mp, mm) = (model.with_theta(tp).unwrap(), model.with_theta(tm).unwrap());
            let fd = (stationary_distribution(&mp.transition()).unwrap() - stationary_distribution(&mm.transition()).unwrap())
                / (2.0 * FD_STEP);
            for x in 0..fd.len() {
                eg = eg.max((fd[x] - g[(r, x)]).abs() / g[(r, x)].abs().max(1.0));
            }
            let fdg = (grad_stationary(&mp).unwrap() - grad_stationary(&mm).unwrap()) / (2.0 * FD_STEP);
            for s in 0..model.param_dim() {
                for x in 0..fd.len() {
                    let an = h[s][r][x];
                    eh = eh.max((fdg[(s, x)] - an).abs() / an.abs().max(1.0));
                }
            }
        }
        for _ in 0..10 {
            let alt: Vec<f64> = model.theta().iter().map(|t| t + uniform(&mut rng, -0.05, 0.05)).collect();
            let f = DVector::from_fn(pi.len(), |_, _| uniform(&mut rng, -1.0, 1.0));
            ed = ed.max(verify_difference_identity(model, &alt, &f).unwrap());
        }
        ec = ec.max((grad_stationary_series(model).unwrap() - &g).amax());
        poisson_ok &= static_bounds_check(model, POISSON_TRIALS, 405).unwrap()[0].pass;
    }
    verdict(
        4,
        "stationary calculus",
        res <= STATIONARY_RESIDUAL_TOL
            && eg <= GRAD_PI_FD_TOL
            && eh <= HESS_PI_FD_TOL
            && ed <= DIFFERENCE_IDENTITY_TOL
            && ec <= CLOSED_FORM_TOL
            && poisson_ok,
        format!(
            "residual {res:.1e}, grad fd {eg:.1e}, hess fd {eh:.1e}, difference identity {ed:.1e}, \
             closed form {ec:.1e}, poisson bound held on {POISSON_TRIALS} f per model: {poisson_ok}"
        ),
    );
}

#[test]
fn criterion_05_explicit_bounds() {
    let start = Instant::now();
    let m1 = catalog("M1");
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let windows: Vec<Vec<f64>> = (0..BOUND_WINDOWS)
        .map(|_| sample_observations(&m1, 30, &mut rng).unwrap())
        .collect();
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut pass = true;
    for y in &windows {
        for r in [
            posterior_forgetting_check(&m1, y, POSTERIOR_K_MAX).unwrap(),
            likelihood_forgetting_check(&m1, y, LIKELIHOOD_K_MAX).unwrap(),
        ] {
            worst = worst.max(r.max_violation);
            pass &= r.pass;
        }
    }
    let ratio_windows: Vec<Vec<f64>> = (0..RATIO_WINDOWS)
        .map(|_| {
            let n = rng.random_range(1..=30);
            sample_observations(&m1, n, &mut rng).unwrap()
        })
        .collect();
    let ratio = likelihood_ratio_check(&m1, &ratio_windows).unwrap();
    let functional = static_bounds_check(&m1, FUNCTIONAL_TRIALS, 506).unwrap().swap_remove(1);
    for r in [&ratio, &functional] {
        worst = worst.max(r.max_violation);
        pass &= r.pass;
    }
    let elapsed = start.elapsed();
    verdict(
        5,
        "explicit bound suite",
        pass && elapsed < BOUND_BUDGET,
        format!(
            "posterior k<={POSTERIOR_K_MAX} and likelihood k<={LIKELIHOOD_K_MAX} on {BOUND_WINDOWS} windows, \
             ratio on {RATIO_WINDOWS} windows, {} on {FUNCTIONAL_TRIALS} f: max(lhs - rhs) = {worst:.2e}, {elapsed:.1?}",
            functional.bound_name
        ),
    );
}

#[test]
fn criterion_06_conditional_convergence() {
    let start = Instant::now();
    let sweep = proposition1_sweep(
        &catalog("M1"),
        &SweepOptions {
            n: 2,
            k_grid: vec![1, 2, 4, 8, 16, 32],
            m_grid: vec![0, 5, 20],
            replicates: SWEEP_REPLICATES,
            seed: 606,
            bootstrap_draws: 2000,
        },
    )
    .unwrap();
    let elapsed = start.elapsed();
    let rate = sweep.fitted_rate.unwrap_or(f64::NAN);
    let gaps: Vec<String> = sweep.sup_gaps.iter().map(|g| format!("{:.1e}", g.gap)).collect();
    verdict(
        6,
        "conditional information convergence",
        sweep.monotone && rate < 1.0 && sweep.terminal_within_noise && elapsed < SWEEP_BUDGET,
        format!(
            "sup-gaps [{}], monotone {}, rate {rate:.3}, terminal within noise {}, {elapsed:.0?}",
            gaps.join(", "),
            sweep.monotone,
            sweep.terminal_within_noise
        ),
    );
}

fn scan(model: &ParamHmm, seed: u64) -> hmm_fisher::fisher::EquivalenceScan {
    equivalence_scan(
        model,
        ScanOptions {
            n_max: SCAN_N_MAX,
            seed,
            ..ScanOptions::default()
        },
    )
    .unwrap()
}

fn unit(p: usize, coords: &[(usize, f64)]) -> DVector<f64> {
    let mut v = DVector::zeros(p);
    for &(i, x) in coords {
        v[i] = x;
    }
    v.normalize()
}

#[test]
fn criterion_07_singular_models() {
    let cases = [
        ("M2", vec![unit(4, &[(2, 1.0), (3, -1.0)])]),
        ("M3-point", vec![unit(4, &[(0, 1.0)]), unit(4, &[(1, 1.0)])]),
    ];
    let mut pass = true;
    let mut details = Vec::new();
    for (i, (name, directions)) in cases.iter().enumerate() {
        let s = scan(&catalog(name), 707 + i as u64);
        let all_singular = s.horizons.iter().all(|h| h.singularity.effective_verdict() == Verdict::Singular);
        let worst_angle = s
            .horizons
            .iter()
            .flat_map(|h| directions.iter().map(move |v| h.singularity.null_space_angle(v)))
            .fold(0.0, f64::max);
        let asym = &s.asymptotic;
        let asym_singular = asym.singularity.effective_verdict() == Verdict::Singular;
        let mut worst_ratio: f64 = 0.0;
        let mut along_ok = true;
        for v in directions {
            let (value, se) = asym.info.quadratic_form(v);
            let se = se.unwrap_or(0.0);
            along_ok &= value <= (STDERR_MULTIPLE * se).max(asym.singularity.threshold);
            worst_ratio = worst_ratio.max(if se > 0.0 { value / se } else { 0.0 });
        }
        pass &= all_singular && worst_angle <= NULL_ANGLE_TOL && asym_singular && along_ok && s.n_star.is_none();
        details.push(format!(
            "{name}: singular for n <= {SCAN_N_MAX} {all_singular}, null-space angle {worst_angle:.1e}, \
             asymptotic singular {asym_singular} (v'Iv/se <= {worst_ratio:.2})"
        ));
    }
    verdict(7, "singular scans", pass, details.join("; "));
}

#[test]
fn criterion_08_nonsingular_model() {
    let s = scan(&catalog("M1"), 808);
    let n_star = s.n_star;
    let finite_ok = n_star.is_some_and(|n| {
        let h = &s.horizons[n - 1].singularity;
        n <= SCAN_N_MAX && h.lambda_min > h.threshold
    });
    let a = &s.asymptotic.singularity;
    let se = a.lambda_min_stderr.unwrap_or(f64::INFINITY);
    let asym_ok = a.lambda_min > STDERR_MULTIPLE * se;
    let lam_n = n_star.map(|n| s.horizons[n - 1].singularity.lambda_min).unwrap_or(f64::NAN);
    verdict(
        8,
        "nonsingular scan",
        finite_ok && asym_ok && s.consistent,
        format!(
            "n* = {n_star:?} with lambda_min {lam_n:.4e}; asymptotic lambda_min {:.4e} +- {se:.1e}; consistent {}",
            a.lambda_min, s.consistent
        ),
    );
}

#[test]
fn criterion_09_route_agreement() {
    let start = Instant::now();
    let m1 = catalog("M1");
    let a = info_asymptotic(
        &m1,
        AsymptoticRoute::HorizonAverage {
            horizon: ROUTE_HORIZON,
            batches: ROUTE_BATCHES,
        },
        909,
    )
    .unwrap();
    let b = info_asymptotic(
        &m1,
        AsymptoticRoute::ConditionalLimit {
            memory: ROUTE_MEMORY,
            replicates: ROUTE_REPLICATES,
        },
        910,
    )
    .unwrap();
    let (sa, sb) = (a.stderr.unwrap(), b.stderr.unwrap());
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let se = (sa[(i, j)].powi(2) + sb[(i, j)].powi(2)).sqrt();
            worst = worst.max((a.matrix[(i, j)] - b.matrix[(i, j)]).abs() / se);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        9,
        "asymptotic route agreement",
        worst <= STDERR_MULTIPLE && elapsed < ROUTE_BUDGET,
        format!("max |difference| / combined stderr = {worst:.2} over all entries, {elapsed:.0?}"),
    );
}

#[test]
fn criterion_10_asymptotic_normality() {
    let start = Instant::now();
    let r = normality_experiment(
        &catalog("M1"),
        NORMALITY_N,
        NORMALITY_REPLICATES,
        1010,
        &NormalityOptions::default(),
    )
    .unwrap();
    let elapsed = start.elapsed();
    let coverage_ok = r.coverage.iter().all(|c| (COVERAGE_RANGE.0..=COVERAGE_RANGE.1).contains(c));
    let cov: Vec<String> = r.coverage.iter().map(|c| format!("{c:.3}")).collect();
    verdict(
        10,
        "asymptotic normality",
        r.frobenius_relative_error <= FROBENIUS_TOL
            && coverage_ok
            && r.excluded_fraction <= MAX_EXCLUDED
            && elapsed < NORMALITY_BUDGET,
        format!(
            "frobenius relative error {:.3}, coverage [{}], excluded {:.1}%, {elapsed:.0?}",
            r.frobenius_relative_error,
            cov.join(", "),
            100.0 * r.excluded_fraction
        ),
    );
}

#[test]
fn criterion_11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(
        &cfg,
        r#"{"model": "M1", "seed": 1111,
            "fisher": {"n_max": 3, "asymptotic": {"route": "conditional-limit", "memory": 50, "replicates": 2000}},
            "prop1": {"k_grid": [1, 2, 4], "m_grid": [0, 5], "replicates": 2000, "bootstrap_draws": 200},
            "forgetting": {"windows": 5, "ratio_windows": 50, "trials": 50},
            "mle": {"n": 500, "replicates": 8, "scan_n_max": 3,
                    "reference": {"route": "conditional-limit", "memory": 50, "replicates": 2000}}}"#,
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_hmm-fisher");
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for cmd in ["fisher", "prop1", "forgetting", "mle"] {
        let mut outputs = Vec::new();
        for w in ["1", "4"] {
            let out = dir.path().join(format!("{cmd}-{w}"));
            let status = Command::new(bin)
                .args([cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", w])
                .status()
                .unwrap();
            assert!(matches!(status.code(), Some(0) | Some(1)), "{cmd} exited with {status}");
            let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out)
                .unwrap()
                .map(|e| {
                    let e = e.unwrap();
                    (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
                })
                .collect();
            files.sort();
            outputs.push(files);
        }
        compared += outputs[0].len();
        if outputs[0] != outputs[1] {
            mismatched.push(cmd);
        }
    }
    verdict(
        11,
        "determinism across worker counts",
        mismatched.is_empty() && compared >= 10,
        format!("{compared} files from fisher, prop1, forgetting, mle with --workers 1 and 4; mismatched {mismatched:?}"),
    );
}
