//! Fisher information matrices, singularity verdicts, the finite-horizon
//! equivalence scan and the conditional-information convergence sweep.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::sample_observations;
use crate::linalg::{
    max_asymmetry, pack_upper, pair_count, pair_index, serde_matrix, sorted_eigen, spectral_norm_sym,
    symmetrize, unpack_symmetric,
};
use crate::mc::{derive_seed, par_map, replicate_rng, MeanEstimate};
use crate::model::ParamHmm;
use crate::sensitivity::{
    score_hessian_conditional, score_hessian_conditional_with_joint, score_hessian_stationary,
    score_hessian_stationary_with,
};

pub const DEFAULT_TAU_REL: f64 = 1e-8;
pub const DEFAULT_TAU_ABS: f64 = 1e-12;

/// Largest number of observation sequences summed by exact enumeration.
pub const ENUMERATION_LIMIT: f64 = 1e6;

/// Tolerance on the hessian-form vs score-outer-product-form mismatch of an
/// exact information matrix, relative to `max(1, max |I|)`.
pub const BARTLETT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    ExactEnumeration,
    MonteCarlo,
}

/// The expectation an [`InfoMatrix`] estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InfoTarget {
    /// `-E ∇² log p̄(Y_1^n)`.
    Stationary { n: usize },
    /// `-E ∇² log p̄(Y_1^n | Y_{-k-m}^{-k})`.
    Conditional { n: usize, k: usize, m: usize },
    /// Per-observation information from one long path.
    HorizonAverage { horizon: usize, batches: usize },
    /// `-E ∇² log p̄(Y_1 | Y_{-m}^0)`.
    ConditionalLimit { memory: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct InfoMatrix {
    #[serde(with = "serde_matrix")]
    pub matrix: DMatrix<f64>,
    pub estimator: Estimator,
    pub target: InfoTarget,
    pub n_obs: usize,
    pub samples: Option<usize>,
    #[serde(with = "serde_matrix::option")]
    pub stderr: Option<DMatrix<f64>>,
    /// Covariance of the packed upper triangle of `matrix` (Monte Carlo only).
    #[serde(skip)]
    pub packed_covariance: Option<DMatrix<f64>>,
    /// Hessian-form minus score-outer-product form, max abs (exact only).
    pub bartlett_gap: Option<f64>,
}

impl InfoMatrix {
    pub fn param_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn from_estimate(est: MeanEstimate, p: usize, target: InfoTarget, n_obs: usize, samples: usize) -> Self {
        let matrix = unpack_symmetric(est.mean.as_slice(), p);
        let se = est.stderr();
        Self {
            matrix,
            estimator: Estimator::MonteCarlo,
            target,
            n_obs,
            samples: Some(samples),
            stderr: Some(unpack_symmetric(se.as_slice(), p)),
            packed_covariance: Some(est.mean_covariance),
            bartlett_gap: None,
        }
    }

    /// `vᵀ I v` and, for Monte Carlo estimates, its standard error.
    pub fn quadratic_form(&self, v: &DVector<f64>) -> (f64, Option<f64>) {
        let value = (v.transpose() * &self.matrix * v)[(0, 0)];
        let se = self.packed_covariance.as_ref().map(|c| {
            let w = quad_weights(v);
            (w.transpose() * c * &w)[(0, 0)].max(0.0).sqrt()
        });
        (value, se)
    }
}

/// Weights `w` with `vᵀ I v = Σ_k w_k packed(I)_k`.
fn quad_weights(v: &DVector<f64>) -> DVector<f64> {
    let p = v.len();
    let mut w = DVector::zeros(pair_count(p));
    for r in 0..p {
        for s in r..p {
            let f = if r == s { 1.0 } else { 2.0 };
            w[pair_index(r, s, p)] = f * v[r] * v[s];
        }
    }
    w
}

fn negated_packed(h: &DMatrix<f64>) -> Vec<f64> {
    pack_upper(h).into_iter().map(|v| -v).collect()
}

fn finite_alphabet(model: &ParamHmm, what: &'static str) -> Result<Vec<f64>> {
    model.alphabet().ok_or(Error::RequiresFiniteAlphabet(what))
}

/// Sums `f(y, acc)` over every sequence `y` of length `len`, in parallel
/// chunks reduced in a fixed order.
fn enumerate_sum<F>(alphabet: &[f64], len: usize, width: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()> + Sync + Send,
{
    let a = alphabet.len();
    let total = (a as f64).powi(len as i32);
    if total > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            what: "observation sequence enumeration",
            size: total,
            limit: ENUMERATION_LIMIT,
        });
    }
    let total = total as usize;
    let chunks = total.min(64);
    let partial = par_map(chunks, |c| {
        let mut acc = vec![0.0; width];
        let mut y = vec![0.0; len];
        for code in c * total / chunks..(c + 1) * total / chunks {
            let mut rest = code;
            for v in y.iter_mut() {
                *v = alphabet[rest % a];
                rest /= a;
            }
            f(&y, &mut acc)?;
        }
        Ok(acc)
    })?;
    let mut acc = vec![0.0; width];
    for part in partial {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    Ok(acc)
}

/// `I_{Y_1^n}(θ)` by summing over every observation sequence of length `n`.
pub fn info_exact(model: &ParamHmm, n: usize) -> Result<InfoMatrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("horizon n must be at least 1".into()));
    }
    let alphabet = finite_alphabet(model, "exact information")?;
    let p = model.param_dim();
    let pc = pair_count(p);
    let acc = enumerate_sum(&alphabet, n, 2 * pc + 1, |y, acc| {
        let sh = score_hessian_stationary(model, y)?;
        let w = sh.loglik.exp();
        for r in 0..p {
            for s in r..p {
                let k = pair_index(r, s, p);
                acc[k] -= w * sh.hessian[(r, s)];
                acc[pc + k] += w * sh.score[r] * sh.score[s];
            }
        }
        acc[2 * pc] += w;
        Ok(())
    })?;
    let mass = acc[2 * pc];
    if (mass - 1.0).abs() > 1e-10 {
        return Err(Error::Numerical(format!("sequence probabilities sum to {mass}")));
    }
    let hess_form = unpack_symmetric(&acc[..pc], p);
    let outer_form = unpack_symmetric(&acc[pc..2 * pc], p);
    let gap = (&hess_form - &outer_form).amax();
    if gap > BARTLETT_TOLERANCE * hess_form.amax().max(1.0) {
        return Err(Error::Numerical(format!(
            "hessian and score-outer-product information differ by {gap:.3e}"
        )));
    }
    Ok(InfoMatrix {
        matrix: hess_form,
        estimator: Estimator::ExactEnumeration,
        target: InfoTarget::Stationary { n },
        n_obs: n,
        samples: None,
        stderr: None,
        packed_covariance: None,
        bartlett_gap: Some(gap),
    })
}

/// `I_{Y_1^n | Y_{-k-m}^{-k}}(θ)` by enumerating the past block (length
/// `m + 1`) and the future block jointly; the `k` points between them are
/// marginalized.
pub fn info_exact_conditional(model: &ParamHmm, n: usize, k: usize, m: usize) -> Result<InfoMatrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("horizon n must be at least 1".into()));
    }
    let alphabet = finite_alphabet(model, "exact conditional information")?;
    let p = model.param_dim();
    let pc = pair_count(p);
    let past_len = m + 1;
    let acc = enumerate_sum(&alphabet, past_len + n, pc, |y, acc| {
        let (past, future) = y.split_at(past_len);
        let (joint, sh) = score_hessian_conditional_with_joint(model, past, future, k)?;
        let w = joint.exp();
        for (a, v) in acc.iter_mut().zip(negated_packed(&sh.hessian)) {
            *a += w * v;
        }
        Ok(())
    })?;
    Ok(InfoMatrix {
        matrix: unpack_symmetric(&acc, p),
        estimator: Estimator::ExactEnumeration,
        target: InfoTarget::Conditional { n, k, m },
        n_obs: n,
        samples: None,
        stderr: None,
        packed_covariance: None,
        bartlett_gap: None,
    })
}

fn check_replicates(r: usize) -> Result<()> {
    if r < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least 2 replicates are needed for a standard error, got {r}"
        )));
    }
    Ok(())
}

/// Monte Carlo `I_{Y_1^n}(θ)` from `replicates` stationary paths.
pub fn info_monte_carlo(model: &ParamHmm, n: usize, replicates: usize, seed: u64) -> Result<InfoMatrix> {
    check_replicates(replicates)?;
    if n == 0 {
        return Err(Error::InvalidArgument("horizon n must be at least 1".into()));
    }
    let samples = par_map(replicates, |i| {
        let mut rng = replicate_rng(seed, i as u64);
        let y = sample_observations(model, n, &mut rng)?;
        Ok(negated_packed(&score_hessian_stationary(model, &y)?.hessian))
    })?;
    let est = MeanEstimate::from_samples(&samples)?;
    Ok(InfoMatrix::from_estimate(
        est,
        model.param_dim(),
        InfoTarget::Stationary { n },
        n,
        replicates,
    ))
}

/// Largest future block summed exactly inside a conditional replicate.
const FUTURE_SUM_LIMIT: f64 = 1024.0;

/// Every future block of length `n`, when the alphabet makes that cheap.
fn enumerable_futures(model: &ParamHmm, n: usize) -> Option<Vec<Vec<f64>>> {
    let alphabet = model.alphabet()?;
    let a = alphabet.len();
    if (a as f64).powi(n as i32) > FUTURE_SUM_LIMIT {
        return None;
    }
    Some(
        (0..a.pow(n as u32))
            .map(|code| {
                let mut rest = code;
                (0..n)
                    .map(|_| {
                        let v = alphabet[rest % a];
                        rest /= a;
                        v
                    })
                    .collect()
            })
            .collect(),
    )
}

/// Monte Carlo `I_{Y_1^n | Y_{-k-m}^{-k}}(θ)`. Each replicate simulates the
/// stationary past block of `m + 1` points. For finite alphabets the
/// expectation over the future block given the past is then summed exactly;
/// otherwise the replicate also simulates the `k` skipped points and the
/// future block.
pub fn info_conditional(
    model: &ParamHmm,
    n: usize,
    k: usize,
    m: usize,
    replicates: usize,
    seed: u64,
) -> Result<InfoMatrix> {
    check_replicates(replicates)?;
    if n == 0 {
        return Err(Error::InvalidArgument("horizon n must be at least 1".into()));
    }
    let past_len = m + 1;
    let futures = enumerable_futures(model, n);
    let samples = par_map(replicates, |i| {
        let mut rng = replicate_rng(seed, i as u64);
        match &futures {
            Some(futures) => {
                let past = sample_observations(model, past_len, &mut rng)?;
                let mut acc = vec![0.0; pair_count(model.param_dim())];
                for future in futures {
                    let sh = score_hessian_conditional(model, &past, future, k)?;
                    let w = sh.loglik.exp();
                    for (a, v) in acc.iter_mut().zip(negated_packed(&sh.hessian)) {
                        *a += w * v;
                    }
                }
                Ok(acc)
            }
            None => {
                let y = sample_observations(model, past_len + k + n, &mut rng)?;
                let sh = score_hessian_conditional(model, &y[..past_len], &y[past_len + k..], k)?;
                Ok(negated_packed(&sh.hessian))
            }
        }
    })?;
    let est = MeanEstimate::from_samples(&samples)?;
    Ok(InfoMatrix::from_estimate(
        est,
        model.param_dim(),
        InfoTarget::Conditional { n, k, m },
        n,
        replicates,
    ))
}

/// The two limits that define the asymptotic information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "route", rename_all = "kebab-case")]
pub enum AsymptoticRoute {
    /// `I_{Y_1^N} / N` along one path, stderr from `batches` batch means.
    HorizonAverage { horizon: usize, batches: usize },
    /// `E[-∇² log p̄(Y_1 | Y_{-m}^0)]` over `replicates` windows.
    ConditionalLimit { memory: usize, replicates: usize },
}

pub fn info_asymptotic(model: &ParamHmm, route: AsymptoticRoute, seed: u64) -> Result<InfoMatrix> {
    match route {
        AsymptoticRoute::HorizonAverage { horizon, batches } => {
            if batches < 2 || horizon < batches {
                return Err(Error::InvalidArgument(format!(
                    "horizon {horizon} cannot be split into {batches} batches"
                )));
            }
            let p = model.param_dim();
            let pc = pair_count(p);
            let size = horizon / batches;
            let mut rng = replicate_rng(seed, 0);
            let y = sample_observations(model, size * batches, &mut rng)?;
            let mut sums = vec![vec![0.0; pc]; batches];
            let mut step = 0usize;
            score_hessian_stationary_with(model, &y, &mut |_, _, hess| {
                let b = &mut sums[step / size];
                for (a, v) in b.iter_mut().zip(hess) {
                    *a -= v;
                }
                step += 1;
            })?;
            for b in sums.iter_mut() {
                b.iter_mut().for_each(|v| *v /= size as f64);
            }
            let est = MeanEstimate::from_samples(&sums)?;
            Ok(InfoMatrix::from_estimate(
                est,
                p,
                InfoTarget::HorizonAverage { horizon, batches },
                size * batches,
                batches,
            ))
        }
        AsymptoticRoute::ConditionalLimit { memory, replicates } => {
            let mut info = info_conditional(model, 1, 0, memory, replicates, seed)?;
            info.target = InfoTarget::ConditionalLimit { memory };
            Ok(info)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Singular,
    Nonsingular,
}

#[derive(Debug, Clone, Serialize)]
pub struct SingularityReport {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `max(tau_rel · λ_max, tau_abs)`.
    pub threshold: f64,
    pub tau_rel: f64,
    pub tau_abs: f64,
    pub numerical_rank: usize,
    pub null_dimension: usize,
    /// Orthonormal eigenvectors with eigenvalue at or below the threshold.
    pub null_basis: Vec<Vec<f64>>,
    pub verdict: Verdict,
    /// Standard error of `λ_min`, from the estimate's covariance.
    pub lambda_min_stderr: Option<f64>,
    /// Monte Carlo verdict: nonsingular iff `λ_min > max(threshold, 3 · stderr)`.
    pub statistical_verdict: Option<Verdict>,
}

impl SingularityReport {
    /// Verdict to act on: the statistical one when available.
    pub fn effective_verdict(&self) -> Verdict {
        self.statistical_verdict.unwrap_or(self.verdict)
    }

    /// Angle between `v` and the null space (π/2 when it is trivial).
    pub fn null_space_angle(&self, v: &DVector<f64>) -> f64 {
        let norm = v.norm();
        let mut proj = DVector::zeros(v.len());
        for b in &self.null_basis {
            let b = DVector::from_column_slice(b);
            proj += &b * b.dot(v);
        }
        let cos = (proj.norm() / norm).min(1.0);
        cos.acos()
    }
}

/// Eigenvalue-based singularity verdict for an information matrix. Monte
/// Carlo estimates also get a statistical verdict from the standard error of
/// `λ_min`.
pub fn singularity_test(info: &InfoMatrix, tau_rel: f64, tau_abs: f64) -> Result<SingularityReport> {
    let (mut report, v_min) = eigen_verdict(&info.matrix, tau_rel, tau_abs)?;
    report.lambda_min_stderr = info.quadratic_form(&v_min).1;
    report.statistical_verdict = report.lambda_min_stderr.map(|se| {
        if report.lambda_min > report.threshold.max(3.0 * se) {
            Verdict::Nonsingular
        } else {
            Verdict::Singular
        }
    });
    Ok(report)
}

/// Deterministic verdict for a plain symmetric matrix.
pub fn singularity_of_matrix(matrix: &DMatrix<f64>, tau_rel: f64, tau_abs: f64) -> Result<SingularityReport> {
    Ok(eigen_verdict(matrix, tau_rel, tau_abs)?.0)
}

fn eigen_verdict(matrix: &DMatrix<f64>, tau_rel: f64, tau_abs: f64) -> Result<(SingularityReport, DVector<f64>)> {
    if matrix.nrows() == 0 || !matrix.is_square() {
        return Err(Error::InvalidArgument("expected a non-empty square matrix".into()));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
    }
    let asym = max_asymmetry(matrix);
    if asym > 1e-9 * matrix.amax().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    if !(tau_rel >= 0.0 && tau_abs >= 0.0) {
        return Err(Error::InvalidArgument("tolerances must be non-negative".into()));
    }
    let (vals, vecs) = sorted_eigen(&symmetrize(matrix));
    let lambda_min = vals[0];
    let lambda_max = *vals.last().unwrap();
    let threshold = (tau_rel * lambda_max.max(0.0)).max(tau_abs);
    let null_basis: Vec<Vec<f64>> = vals
        .iter()
        .zip(&vecs)
        .filter(|(l, _)| **l <= threshold)
        .map(|(_, v)| v.iter().copied().collect())
        .collect();
    let null_dimension = null_basis.len();
    let verdict = if lambda_min <= threshold {
        Verdict::Singular
    } else {
        Verdict::Nonsingular
    };
    let report = SingularityReport {
        eigenvalues: vals.clone(),
        lambda_min,
        lambda_max,
        threshold,
        tau_rel,
        tau_abs,
        numerical_rank: vals.len() - null_dimension,
        null_dimension,
        null_basis,
        verdict,
        lambda_min_stderr: None,
        statistical_verdict: None,
    };
    Ok((report, vecs[0].clone()))
}

/// How the scan computes each finite-horizon matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanEstimator {
    /// Enumeration when the alphabet is finite and small enough, else Monte Carlo.
    #[default]
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScanOptions {
    pub n_max: usize,
    pub estimator: ScanEstimator,
    pub tau_rel: f64,
    pub tau_abs: f64,
    pub seed: u64,
    /// Replicates for horizons that cannot be enumerated.
    pub replicates: usize,
    pub asymptotic: AsymptoticRoute,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            n_max: 6,
            estimator: ScanEstimator::Auto,
            tau_rel: DEFAULT_TAU_REL,
            tau_abs: DEFAULT_TAU_ABS,
            seed: 0,
            replicates: 20_000,
            asymptotic: AsymptoticRoute::ConditionalLimit {
                memory: 200,
                replicates: 20_000,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonVerdict {
    pub n: usize,
    pub info: InfoMatrix,
    pub singularity: SingularityReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceScan {
    pub model: ParamHmm,
    pub options: ScanOptions,
    pub horizons: Vec<HorizonVerdict>,
    /// Smallest horizon with a nonsingular information matrix.
    pub n_star: Option<usize>,
    pub verdict: String,
    /// Null basis of the last horizon when every horizon is singular.
    pub persistent_null_basis: Vec<Vec<f64>>,
    pub asymptotic: HorizonVerdictAsymptotic,
    /// Whether "some horizon nonsingular" and "asymptotic nonsingular" agree.
    pub consistent: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonVerdictAsymptotic {
    pub info: InfoMatrix,
    pub singularity: SingularityReport,
}

fn info_for_horizon(model: &ParamHmm, n: usize, opts: &ScanOptions) -> Result<InfoMatrix> {
    let enumerable = match opts.estimator {
        ScanEstimator::Exact => true,
        ScanEstimator::MonteCarlo => false,
        ScanEstimator::Auto => model
            .alphabet()
            .is_some_and(|a| (a.len() as f64).powi(n as i32) <= ENUMERATION_LIMIT),
    };
    if enumerable {
        info_exact(model, n)
    } else {
        info_monte_carlo(model, n, opts.replicates, derive_seed(opts.seed, n as u64))
    }
}

/// Singularity of `I_{Y_1^n}` for `n = 1..=n_max` alongside the asymptotic
/// information's verdict.
pub fn equivalence_scan(model: &ParamHmm, opts: ScanOptions) -> Result<EquivalenceScan> {
    if opts.n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be at least 1".into()));
    }
    let mut horizons = Vec::with_capacity(opts.n_max);
    for n in 1..=opts.n_max {
        let info = info_for_horizon(model, n, &opts)?;
        let singularity = singularity_test(&info, opts.tau_rel, opts.tau_abs)?;
        horizons.push(HorizonVerdict { n, info, singularity });
    }
    let n_star = horizons
        .iter()
        .find(|h| h.singularity.effective_verdict() == Verdict::Nonsingular)
        .map(|h| h.n);
    let info = info_asymptotic(model, opts.asymptotic, derive_seed(opts.seed, u64::MAX))?;
    let singularity = singularity_test(&info, opts.tau_rel, opts.tau_abs)?;
    let asymptotic_nonsingular = singularity.effective_verdict() == Verdict::Nonsingular;
    let persistent_null_basis = if n_star.is_none() {
        horizons.last().unwrap().singularity.null_basis.clone()
    } else {
        Vec::new()
    };
    Ok(EquivalenceScan {
        model: model.clone(),
        options: opts,
        verdict: match n_star {
            Some(n) => format!("nonsingular from n = {n}"),
            None => "singular throughout".into(),
        },
        n_star,
        horizons,
        persistent_null_basis,
        consistent: n_star.is_some() == asymptotic_nonsingular,
        asymptotic: HorizonVerdictAsymptotic { info, singularity },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOptions {
    pub n: usize,
    pub k_grid: Vec<usize>,
    pub m_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    /// Gaussian draws used to turn the estimate covariance into a gap stderr.
    pub bootstrap_draws: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub k: usize,
    pub m: usize,
    pub gap: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SupGap {
    pub k: usize,
    /// Largest gap over the m-grid.
    pub gap: f64,
    pub stderr: f64,
    pub argmax_m: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceSweep {
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub reference_estimator: Estimator,
    pub cells: Vec<SweepCell>,
    pub sup_gaps: Vec<SupGap>,
    /// `exp` of the least-squares slope of `log gap` against `k`.
    pub fitted_rate: Option<f64>,
    /// Each sup-gap exceeds its predecessor by at most 3 combined stderr.
    pub monotone: bool,
    /// Every cell lies within 3 stderr (or rounding) of zero.
    pub all_at_noise_floor: bool,
    /// Final sup-gap within 3 stderr (or rounding) of zero.
    pub terminal_within_noise: bool,
    pub pass: bool,
}

impl ConvergenceSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,m,gap,stderr\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{:e},{:e}\n", c.k, c.m, c.gap, c.stderr));
        }
        out
    }
}

/// RMS spectral norm of a symmetric Gaussian matrix whose packed upper
/// triangle has covariance `cov`.
fn noise_norm_rms(cov: &DMatrix<f64>, p: usize, draws: usize, seed: u64) -> f64 {
    let (vals, vecs) = sorted_eigen(&symmetrize(cov));
    let d = vals.len();
    let root = DMatrix::from_fn(d, d, |i, j| vecs[j][i] * vals[j].max(0.0).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..draws {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e = &root * z;
        let n = spectral_norm_sym(&unpack_symmetric(e.as_slice(), p));
        acc += n * n;
    }
    (acc / draws.max(1) as f64).sqrt()
}

fn log_linear_rate(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(_, g)| *g > 0.0).map(|&(k, g)| (k, g.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mk = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mk).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mk) * (p.1 - ml)).sum();
    Some((sxy / sxx).exp())
}

/// Spectral-norm gaps `‖I_{Y_1^n | Y_{-k-m}^{-k}} - I_{Y_1^n}‖` over a
/// `(k, m)` grid.
pub fn proposition1_sweep(model: &ParamHmm, opts: &SweepOptions) -> Result<ConvergenceSweep> {
    if opts.k_grid.is_empty() || opts.m_grid.is_empty() {
        return Err(Error::InvalidArgument("k and m grids must be non-empty".into()));
    }
    let p = model.param_dim();
    let reference = match info_exact(model, opts.n) {
        Ok(i) => i,
        Err(Error::RequiresFiniteAlphabet(_)) | Err(Error::TooLarge { .. }) => {
            info_monte_carlo(model, opts.n, opts.replicates, derive_seed(opts.seed, u64::MAX))?
        }
        Err(e) => return Err(e),
    };
    let ref_cov = reference
        .packed_covariance
        .clone()
        .unwrap_or_else(|| DMatrix::zeros(pair_count(p), pair_count(p)));
    let mut k_sorted = opts.k_grid.clone();
    k_sorted.sort_unstable();
    k_sorted.dedup();
    let mut cells = Vec::new();
    let mut sup_gaps = Vec::new();
    let mut cell_index = 0u64;
    for &k in &k_sorted {
        let mut best: Option<SupGap> = None;
        for &m in &opts.m_grid {
            let cell_seed = derive_seed(opts.seed, cell_index);
            cell_index += 1;
            let info = info_conditional(model, opts.n, k, m, opts.replicates, cell_seed)?;
            let gap = spectral_norm_sym(&(&info.matrix - &reference.matrix));
            let cov = info.packed_covariance.as_ref().unwrap() + &ref_cov;
            let stderr = noise_norm_rms(&cov, p, opts.bootstrap_draws, derive_seed(cell_seed, 1));
            cells.push(SweepCell { k, m, gap, stderr });
            if best.as_ref().is_none_or(|b| gap > b.gap) {
                best = Some(SupGap {
                    k,
                    gap,
                    stderr,
                    argmax_m: m,
                });
            }
        }
        sup_gaps.push(best.unwrap());
    }
    let monotone = sup_gaps.windows(2).all(|w| {
        w[1].gap <= w[0].gap + 3.0 * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt()
    });
    let fitted_rate = log_linear_rate(&sup_gaps.iter().map(|s| (s.k as f64, s.gap)).collect::<Vec<_>>());
    // gaps this small are rounding, not signal
    let roundoff = 1e-10 * spectral_norm_sym(&reference.matrix).max(1.0);
    let within_noise = |gap: f64, stderr: f64| gap <= (3.0 * stderr).max(roundoff);
    let last = sup_gaps.last().unwrap();
    let terminal_within_noise = within_noise(last.gap, last.stderr);
    let all_at_noise_floor = cells.iter().all(|c| within_noise(c.gap, c.stderr));
    let decays = fitted_rate.is_some_and(|r| r < 1.0);
    Ok(ConvergenceSweep {
        n: opts.n,
        replicates: opts.replicates,
        seed: opts.seed,
        reference_estimator: reference.estimator,
        cells,
        sup_gaps,
        fitted_rate,
        monotone,
        all_at_noise_floor,
        terminal_within_noise,
        pass: terminal_within_noise && (decays || all_at_noise_floor),
    })
}
