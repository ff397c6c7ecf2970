//! Stationary simulation, maximum likelihood fitting and the Monte Carlo
//! normality experiment.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fisher::{
    equivalence_scan, AsymptoticRoute, InfoMatrix, ScanEstimator, ScanOptions, Verdict, DEFAULT_TAU_ABS, DEFAULT_TAU_REL,
};
use crate::linalg::serde_matrix;
use crate::mc::{derive_seed, par_map, replicate_rng, MeanEstimate};
use crate::model::{sample_categorical, ParamBox, ParamHmm};
use crate::sensitivity::score_hessian_stationary;
use crate::stationary::stationary_distribution;

/// A simulated stationary path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub observations: Vec<f64>,
    pub seed: u64,
}

/// Simulates `n` steps with `X_0 ~ π_θ`.
pub fn sample_trajectory(model: &ParamHmm, n: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (states, observations) = sample_path(model, n, &mut rng)?;
    Ok(Trajectory {
        states,
        observations,
        seed,
    })
}

/// Hidden states and observations of a stationary path drawn from `rng`.
pub fn sample_path<R: Rng + ?Sized>(model: &ParamHmm, n: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("trajectory length must be at least 1".into()));
    }
    let q = model.transition();
    let pi = stationary_distribution(&q)?;
    let rows: Vec<Vec<f64>> = (0..q.nrows()).map(|i| q.row(i).iter().copied().collect()).collect();
    let mut states = Vec::with_capacity(n);
    let mut obs = Vec::with_capacity(n);
    let mut x = sample_categorical(pi.as_slice(), rng);
    for i in 0..n {
        if i > 0 {
            x = sample_categorical(&rows[x], rng);
        }
        states.push(x);
        obs.push(model.sample_emission(x, rng));
    }
    Ok((states, obs))
}

/// Observations only, as used by the Monte Carlo estimators.
pub fn sample_observations<R: Rng + ?Sized>(model: &ParamHmm, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    Ok(sample_path(model, n, rng)?.1)
}

/// Interior margin kept from every box face.
pub const BOX_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct MleOptions {
    pub max_iterations: usize,
    /// Converged when `‖score‖ ≤ score_tolerance · n`.
    pub score_tolerance: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            score_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StartOutcome {
    pub start: Vec<f64>,
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Some coordinate ended on a box face with the score pointing out.
    pub at_boundary: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MleResult {
    pub theta_hat: Vec<f64>,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Index into `starts` of the reported optimum.
    pub start_index: usize,
    pub starts: Vec<StartOutcome>,
    /// Log-likelihood after every accepted step of the selected start.
    pub loglik_trace: Vec<f64>,
}

fn objective(template: &ParamHmm, theta: &[f64], y: &[f64]) -> Option<f64> {
    let m = template.with_theta(theta.to_vec()).ok()?;
    crate::inference::stationary_loglik(&m, y).ok().filter(|v| v.is_finite())
}

/// Coordinates pinned to a face of the (margin-shrunk) box with the score
/// pushing outward.
fn active_set(theta: &[f64], score: &DVector<f64>, bx: &ParamBox) -> Vec<bool> {
    let edge = |l: f64, u: f64| BOX_MARGIN.min(0.5 * (u - l)) * (1.0 + 1e-9);
    theta
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let (l, u) = (bx.lower[j], bx.upper[j]);
            let m = edge(l, u);
            (t <= l + m && score[j] < 0.0) || (t >= u - m && score[j] > 0.0)
        })
        .collect()
}

/// Newton direction on the free coordinates, or a scaled score step where
/// the free block of the Hessian is not negative definite.
fn ascent_direction(score: &DVector<f64>, hessian: &DMatrix<f64>, active: &[bool]) -> DVector<f64> {
    let free: Vec<usize> = (0..score.len()).filter(|&j| !active[j]).collect();
    let mut d = DVector::zeros(score.len());
    if free.is_empty() {
        return d;
    }
    let g = DVector::from_iterator(free.len(), free.iter().map(|&j| score[j]));
    let neg_h = DMatrix::from_fn(free.len(), free.len(), |a, b| -hessian[(free[a], free[b])]);
    let step = match neg_h.clone().cholesky() {
        Some(ch) => ch.solve(&g),
        None => &g / neg_h.diagonal().amax().max(1.0),
    };
    for (a, &j) in free.iter().enumerate() {
        d[j] = step[a];
    }
    d
}

fn fit_from(
    template: &ParamHmm,
    y: &[f64],
    start: &[f64],
    bx: &ParamBox,
    opts: &MleOptions,
) -> Result<(StartOutcome, Vec<f64>)> {
    let tol = opts.score_tolerance * y.len() as f64;
    let mut theta = bx.project(start, BOX_MARGIN);
    let mut model = template.with_theta(theta.clone())?;
    let mut sh = score_hessian_stationary(&model, y)?;
    let mut trace = vec![sh.loglik];
    let mut iterations = 0;
    while sh.score.norm() > tol && iterations < opts.max_iterations {
        iterations += 1;
        let active = active_set(&theta, &sh.score, bx);
        let d = ascent_direction(&sh.score, &sh.hessian, &active);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let cand: Vec<f64> = theta.iter().zip(d.iter()).map(|(t, di)| t + alpha * di).collect();
            let cand = bx.project(&cand, BOX_MARGIN);
            let step = DVector::from_iterator(cand.len(), cand.iter().zip(&theta).map(|(c, t)| c - t));
            if step.amax() == 0.0 || step.amax() < 1e-15 * (1.0 + theta.iter().fold(0.0f64, |a, t| a.max(t.abs()))) {
                break;
            }
            if let Some(ll) = objective(template, &cand, y) {
                if ll >= sh.loglik + 1e-4 * sh.score.dot(&step) && ll >= sh.loglik {
                    accepted = Some(cand);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(next) = accepted else { break };
        theta = next;
        model = template.with_theta(theta.clone())?;
        sh = score_hessian_stationary(&model, y)?;
        trace.push(sh.loglik);
    }
    let grad_norm = sh.score.norm();
    let at_boundary = active_set(&theta, &sh.score, bx).into_iter().any(|a| a);
    Ok((
        StartOutcome {
            at_boundary,
            start: start.to_vec(),
            theta,
            loglik: sh.loglik,
            grad_norm,
            iterations,
            converged: grad_norm <= tol,
        },
        trace,
    ))
}

/// Maximizes `log p̄_θ(y)` over `bx` from each start by projected Newton steps
/// with backtracking (scaled gradient steps where the Hessian is not
/// negative definite). Reports the best converged start, or the best start
/// flagged as non-converged when none converged.
pub fn mle_fit(template: &ParamHmm, y: &[f64], starts: &[Vec<f64>], bx: &ParamBox, opts: &MleOptions) -> Result<MleResult> {
    if starts.is_empty() {
        return Err(Error::InvalidArgument("at least one start is required".into()));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("observation window is empty".into()));
    }
    let p = template.param_dim();
    if bx.dim() != p {
        return Err(Error::Dimension { expected: p, found: bx.dim() });
    }
    let mut outcomes = Vec::with_capacity(starts.len());
    let mut traces = Vec::with_capacity(starts.len());
    for s in starts {
        if s.len() != p {
            return Err(Error::Dimension { expected: p, found: s.len() });
        }
        let (o, t) = fit_from(template, y, s, bx, opts)?;
        outcomes.push(o);
        traces.push(t);
    }
    let any_converged = outcomes.iter().any(|o| o.converged);
    let best = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.converged || !any_converged)
        .max_by(|a, b| a.1.loglik.total_cmp(&b.1.loglik))
        .map(|(i, _)| i)
        .unwrap();
    let o = &outcomes[best];
    Ok(MleResult {
        theta_hat: o.theta.clone(),
        loglik: o.loglik,
        grad_norm: o.grad_norm,
        iterations: o.iterations,
        converged: o.converged,
        start_index: best,
        loglik_trace: traces.swap_remove(best),
        starts: outcomes,
    })
}

/// Starts used by the normality experiment: the truth jittered inside the
/// box, then `random` uniform points of the box.
pub fn default_starts<R: Rng + ?Sized>(theta_star: &[f64], bx: &ParamBox, random: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut starts = Vec::with_capacity(random + 1);
    let jitter: Vec<f64> = theta_star
        .iter()
        .zip(bx.lower.iter().zip(&bx.upper))
        .map(|(t, (l, u))| t + 0.1 * (u - l) * (rng.random::<f64>() - 0.5))
        .collect();
    starts.push(bx.project(&jitter, BOX_MARGIN));
    for _ in 0..random {
        starts.push(
            bx.lower
                .iter()
                .zip(&bx.upper)
                .map(|(l, u)| l + (u - l) * rng.random::<f64>())
                .collect(),
        );
    }
    starts
}

#[derive(Debug, Clone, Serialize)]
pub struct NormalityOptions {
    pub box_radius: f64,
    pub random_starts: usize,
    pub tau_rel: f64,
    pub tau_abs: f64,
    /// Largest horizon scanned for the nonsingularity precondition.
    pub scan_n_max: usize,
    /// Route and size of the reference `I(θ*)`.
    pub reference: AsymptoticRoute,
    pub max_excluded_fraction: f64,
    pub mle: MleOptions,
}

impl Default for NormalityOptions {
    fn default() -> Self {
        Self {
            box_radius: 0.25,
            random_starts: 4,
            tau_rel: DEFAULT_TAU_REL,
            tau_abs: DEFAULT_TAU_ABS,
            scan_n_max: 6,
            reference: AsymptoticRoute::ConditionalLimit {
                memory: 200,
                replicates: 20_000,
            },
            max_excluded_fraction: 0.02,
            mle: MleOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateFit {
    pub replicate: usize,
    pub theta_hat: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NormalityReport {
    pub model: ParamHmm,
    pub theta_star: Vec<f64>,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub param_box: ParamBox,
    /// `√n (θ̂ - θ*)` of every included replicate, one row each.
    pub scaled_errors: Vec<Vec<f64>>,
    #[serde(with = "serde_matrix")]
    pub empirical_covariance: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub reference_inverse: DMatrix<f64>,
    pub reference: InfoMatrix,
    pub frobenius_relative_error: f64,
    /// Fraction of included replicates whose nominal 95% interval covers θ*_j.
    pub coverage: Vec<f64>,
    pub excluded: usize,
    pub excluded_fraction: f64,
    pub excluded_within_limit: bool,
    /// The experiment maximizes the stationary likelihood, not the
    /// fixed-start one.
    pub likelihood: &'static str,
    #[serde(skip)]
    pub fits: Vec<ReplicateFit>,
}

impl NormalityReport {
    /// CSV `replicate,<theta names>,converged`.
    pub fn replicates_csv(&self) -> String {
        let names = self.model.param_names();
        let mut out = format!("replicate,{},converged\n", names.join(","));
        for f in &self.fits {
            let vals: Vec<String> = f.theta_hat.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&format!("{},{},{}\n", f.replicate, vals.join(","), f.converged));
        }
        out
    }
}

/// Refuses unless some finite-horizon information matrix and the asymptotic
/// estimate are nonsingular; returns the asymptotic estimate.
pub fn require_nonsingular(model: &ParamHmm, opts: &NormalityOptions, seed: u64) -> Result<InfoMatrix> {
    let scan = equivalence_scan(
        model,
        ScanOptions {
            n_max: opts.scan_n_max,
            estimator: ScanEstimator::Auto,
            tau_rel: opts.tau_rel,
            tau_abs: opts.tau_abs,
            seed,
            replicates: 20_000,
            asymptotic: opts.reference,
        },
    )?;
    if scan.n_star.is_none() {
        return Err(Error::SingularInformation(format!(
            "information matrix singular at every horizon n <= {}; by the finite-horizon equivalence the \
             asymptotic information is singular and asymptotic normality of the MLE does not apply",
            opts.scan_n_max
        )));
    }
    if scan.asymptotic.singularity.effective_verdict() != Verdict::Nonsingular {
        return Err(Error::SingularInformation(
            "asymptotic information estimate is singular; asymptotic normality of the MLE does not apply".into(),
        ));
    }
    Ok(scan.asymptotic.info)
}

/// Simulate-then-fit replicates compared with `I(θ*)^{-1}`.
pub fn normality_experiment(
    model: &ParamHmm,
    n: usize,
    replicates: usize,
    seed: u64,
    opts: &NormalityOptions,
) -> Result<NormalityReport> {
    if replicates < 2 {
        return Err(Error::InvalidArgument("at least 2 replicates are required".into()));
    }
    let reference = require_nonsingular(model, opts, derive_seed(seed, u64::MAX))?;
    let p = model.param_dim();
    let inverse = reference
        .matrix
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularInformation("reference information is not positive definite".into()))?
        .inverse();
    let theta_star = model.theta().to_vec();
    let unit = model.family().unit_interval_params();
    let bx = ParamBox::around(&theta_star, opts.box_radius)?.clip_unit(&unit)?;
    let fits = par_map(replicates, |i| {
        let mut rng = replicate_rng(seed, i as u64);
        let y = sample_observations(model, n, &mut rng)?;
        let starts = default_starts(&theta_star, &bx, opts.random_starts, &mut rng);
        let fit = mle_fit(model, &y, &starts, &bx, &opts.mle)?;
        Ok(ReplicateFit {
            replicate: i,
            theta_hat: fit.theta_hat,
            converged: fit.converged,
        })
    })?;
    let included: Vec<&ReplicateFit> = fits.iter().filter(|f| f.converged).collect();
    let excluded = replicates - included.len();
    let sqrt_n = (n as f64).sqrt();
    let scaled_errors: Vec<Vec<f64>> = included
        .iter()
        .map(|f| f.theta_hat.iter().zip(&theta_star).map(|(h, t)| sqrt_n * (h - t)).collect())
        .collect();
    let empirical_covariance = if scaled_errors.len() >= 2 {
        MeanEstimate::from_samples(&scaled_errors)?.mean_covariance * scaled_errors.len() as f64
    } else {
        DMatrix::from_element(p, p, f64::NAN)
    };
    let frobenius_relative_error = (&empirical_covariance - &inverse).norm() / inverse.norm();
    let coverage = (0..p)
        .map(|j| {
            let half = 1.96 * (inverse[(j, j)] / n as f64).sqrt();
            let hits = included
                .iter()
                .filter(|f| (f.theta_hat[j] - theta_star[j]).abs() <= half)
                .count();
            hits as f64 / included.len().max(1) as f64
        })
        .collect();
    let excluded_fraction = excluded as f64 / replicates as f64;
    Ok(NormalityReport {
        model: model.clone(),
        theta_star,
        n,
        replicates,
        seed,
        param_box: bx,
        scaled_errors,
        empirical_covariance,
        reference_inverse: inverse,
        reference,
        frobenius_relative_error,
        coverage,
        excluded,
        excluded_fraction,
        excluded_within_limit: excluded_fraction <= opts.max_excluded_fraction,
        likelihood: "stationary",
        fits,
    })
}
