//! Exact checks of the explicit forgetting and boundedness inequalities on
//! finite-state models.
//!
//! Constants are evaluated pointwise at the model's θ: `σ- = min q`,
//! `σ+ = max q`, `ρ = 1 - σ-/σ+`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::sample_observations;
use crate::inference::{fixedstart_loglik, stationary_trace};
use crate::model::ParamHmm;
use crate::sensitivity::score_hessian_fixedstart;
use crate::stationary::{solve_poisson, stationary_distribution, StationaryAnalysis};

/// Arithmetic slack allowed on every bound.
pub const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct BoundTrial {
    pub k: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundCheckResult {
    pub bound_name: String,
    pub trials: Vec<BoundTrial>,
    /// `max(lhs - rhs)`; positive means the bound was exceeded.
    pub max_violation: f64,
    pub pass: bool,
}

impl BoundCheckResult {
    pub fn new(bound_name: &str, trials: Vec<BoundTrial>) -> Self {
        let max_violation = trials
            .iter()
            .map(|t| t.lhs - t.rhs)
            .fold(f64::NEG_INFINITY, f64::max);
        Self {
            bound_name: bound_name.into(),
            pass: trials.is_empty() || max_violation <= BOUND_SLACK,
            trials,
            max_violation,
        }
    }

    /// Largest lhs per `k` with its envelope, as CSV `k,lhs,envelope`.
    pub fn decay_csv(&self) -> String {
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for t in &self.trials {
            match rows.iter_mut().find(|r| r.0 == t.k) {
                Some(r) => {
                    r.1 = r.1.max(t.lhs);
                    r.2 = r.2.min(t.rhs);
                }
                None => rows.push((t.k, t.lhs, t.rhs)),
            }
        }
        rows.sort_by_key(|r| r.0);
        let mut out = String::from("k,lhs,envelope\n");
        for (k, l, e) in rows {
            out.push_str(&format!("{k},{l:e},{e:e}\n"));
        }
        out
    }
}

/// Pointwise `(σ-, σ+)` of the transition kernel.
pub fn pointwise_sigmas(model: &ParamHmm) -> (f64, f64) {
    let q = model.transition();
    (q.min(), q.max())
}

fn require_ergodic(model: &ParamHmm) -> Result<(f64, f64)> {
    let (lo, hi) = pointwise_sigmas(model);
    if !(lo > 0.0) {
        return Err(Error::UniformErgodicity(format!("min transition probability is {lo}")));
    }
    Ok((lo, hi))
}

fn require_len(y: &[f64], k_max: usize) -> Result<()> {
    if y.len() < k_max + 1 {
        return Err(Error::InvalidArgument(format!(
            "window of length {} is too short for k_max = {k_max}",
            y.len()
        )));
    }
    Ok(())
}

/// Laws of `X_{n-k}` given `y = Y_1^n` and `X_n = terminal`, for `k = 0..=k_max`,
/// by the backward kernels `F_j(u) q(u, v) / Σ_u' F_j(u') q(u', v)`.
pub fn reverse_posterior(model: &ParamHmm, y: &[f64], terminal: usize, k_max: usize) -> Result<Vec<DVector<f64>>> {
    require_len(y, k_max)?;
    let m = model.state_count();
    if terminal >= m {
        return Err(Error::InvalidArgument(format!("terminal state {terminal} out of range")));
    }
    let q = model.transition();
    let trace = stationary_trace(model, y)?;
    let n = y.len();
    let mut law = DVector::zeros(m);
    law[terminal] = 1.0;
    let mut out = vec![law.clone()];
    for k in 1..=k_max {
        let f = &trace.filtered[n - 1 - k];
        let mut next = DVector::zeros(m);
        for v in 0..m {
            if law[v] == 0.0 {
                continue;
            }
            let norm: f64 = (0..m).map(|u| f[u] * q[(u, v)]).sum();
            for u in 0..m {
                next[u] += law[v] * f[u] * q[(u, v)] / norm;
            }
        }
        law = next;
        out.push(law.clone());
    }
    Ok(out)
}

fn total_variation(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    0.5 * (a - b).abs().sum()
}

/// Total variation between reverse posteriors started from any two terminal
/// states, against `ρ^k`.
pub fn posterior_forgetting_check(model: &ParamHmm, y: &[f64], k_max: usize) -> Result<BoundCheckResult> {
    let (lo, hi) = require_ergodic(model)?;
    let rho = 1.0 - lo / hi;
    let m = model.state_count();
    let laws: Vec<Vec<DVector<f64>>> = (0..m)
        .map(|x| reverse_posterior(model, y, x, k_max))
        .collect::<Result<_>>()?;
    let mut trials = Vec::new();
    for k in 0..=k_max {
        for x in 0..m {
            for x2 in x..m {
                trials.push(BoundTrial {
                    k,
                    lhs: total_variation(&laws[x][k], &laws[x2][k]),
                    rhs: rho.powi(k as i32),
                });
            }
        }
    }
    Ok(BoundCheckResult::new("reverse posterior forgetting", trials))
}

/// `log p(y | X_{-k} = x)` for every start state, and the reference
/// `log inf_x p(y | X_0 = x)`.
fn start_logliks(model: &ParamHmm, y: &[f64], k: usize) -> Result<Vec<f64>> {
    (0..model.state_count())
        .map(|x| fixedstart_loglik(model, y, x, k))
        .collect()
}

fn log_inf_start(model: &ParamHmm, y: &[f64]) -> Result<f64> {
    Ok(start_logliks(model, y, 0)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// `sup_{x,x'} |p(y|X_{-k}=x) - p(y|X_{-k}=x')| / inf_x p(y|X_0=x)` against
/// `2 (1 - σ-)^k σ+/σ-`.
pub fn likelihood_forgetting_check(model: &ParamHmm, y: &[f64], k_max: usize) -> Result<BoundCheckResult> {
    let (lo, hi) = require_ergodic(model)?;
    if y.is_empty() {
        return Err(Error::InvalidArgument("observation window is empty".into()));
    }
    let base = log_inf_start(model, y)?;
    let mut trials = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let scaled: Vec<f64> = start_logliks(model, y, k)?.iter().map(|l| (l - base).exp()).collect();
        let hi_v = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo_v = scaled.iter().copied().fold(f64::INFINITY, f64::min);
        trials.push(BoundTrial {
            k,
            lhs: hi_v - lo_v,
            rhs: 2.0 * (1.0 - lo).powi(k as i32) * hi / lo,
        });
    }
    Ok(BoundCheckResult::new("likelihood forgetting", trials))
}

/// `sup_x p(y|X_0=x) / inf_x p(y|X_0=x)` against `σ+/σ-`, one trial per window.
pub fn likelihood_ratio_check(model: &ParamHmm, windows: &[Vec<f64>]) -> Result<BoundCheckResult> {
    let (lo, hi) = require_ergodic(model)?;
    let mut trials = Vec::with_capacity(windows.len());
    for y in windows {
        let l = start_logliks(model, y, 0)?;
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = l.iter().copied().fold(f64::INFINITY, f64::min);
        trials.push(BoundTrial {
            k: y.len(),
            lhs: (max - min).exp(),
            rhs: hi / lo,
        });
    }
    Ok(BoundCheckResult::new("likelihood ratio", trials))
}

/// `∇p(y | X_{-k} = x) - ∇p(y | X_{-k} = x')` for every pair `x < x'`,
/// scaled by `1 / inf_x p(y | X_0 = x)`.
pub fn fixedstart_gradient_differences(model: &ParamHmm, y: &[f64], k: usize) -> Result<Vec<DVector<f64>>> {
    let base = log_inf_start(model, y)?;
    let grads: Vec<DVector<f64>> = (0..model.state_count())
        .map(|x| {
            let sh = score_hessian_fixedstart(model, y, x, k)?;
            Ok(sh.score * (sh.loglik - base).exp())
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for x in 0..grads.len() {
        for x2 in x + 1..grads.len() {
            out.push(&grads[x] - &grads[x2]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayFit {
    pub k: Vec<usize>,
    pub values: Vec<f64>,
    /// `exp` of the least-squares slope of `log value` against `k`, over the
    /// values above rounding; 0 when the sequence collapses to rounding.
    pub fitted_rate: Option<f64>,
    /// `1 - σ-`, for context only.
    pub lower_envelope: f64,
    pub pass: bool,
}

impl DecayFit {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,lhs,envelope\n");
        for (k, v) in self.k.iter().zip(&self.values) {
            out.push_str(&format!("{k},{v:e},{:e}\n", self.lower_envelope.powi(*k as i32)));
        }
        out
    }
}

/// Geometric fit of `sup_{x,x'} ‖∇p(y|X_{-k}=x) - ∇p(y|X_{-k}=x')‖ / inf_x p(y|X_0=x)`.
pub fn gradient_forgetting_fit(model: &ParamHmm, y: &[f64], k_grid: &[usize]) -> Result<DecayFit> {
    let (lo, _) = require_ergodic(model)?;
    if k_grid.len() < 2 {
        return Err(Error::InvalidArgument("k grid needs at least 2 points".into()));
    }
    let mut ks = k_grid.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let values: Vec<f64> = ks
        .iter()
        .map(|&k| {
            Ok(fixedstart_gradient_differences(model, y, k)?
                .iter()
                .map(|d| d.norm())
                .fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    let peak = values.iter().copied().fold(0.0, f64::max);
    let floor = 1e-13 * peak;
    let pts: Vec<(f64, f64)> = ks
        .iter()
        .zip(&values)
        .filter(|(_, v)| **v > floor)
        .map(|(&k, &v)| (k as f64, v.ln()))
        .collect();
    let fitted_rate = if peak == 0.0 {
        None
    } else if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mk = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mk).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mk) * (p.1 - ml)).sum();
        Some((sxy / sxx).exp())
    } else if pts.len() < ks.len() {
        Some(0.0)
    } else {
        None
    };
    Ok(DecayFit {
        k: ks,
        values,
        pass: fitted_rate.is_some_and(|r| r < 1.0),
        fitted_rate,
        lower_envelope: 1.0 - lo,
    })
}

/// Largest Euclidean norm of `∇ log q(x, x')` over all pairs.
pub fn grad_log_q_sup(model: &ParamHmm) -> f64 {
    let k = model.kernel();
    let m = model.state_count();
    let mut sup: f64 = 0.0;
    for x in 0..m {
        for x2 in 0..m {
            let norm: f64 = k
                .dq
                .iter()
                .map(|d| (d[(x, x2)] / k.q[(x, x2)]).powi(2))
                .sum::<f64>()
                .sqrt();
            sup = sup.max(norm);
        }
    }
    sup
}

/// Poisson-solution bound, the `∇π` functional bound and the likelihood
/// ratio bound over random functions and simulated windows.
pub fn static_bounds_check(model: &ParamHmm, trials: usize, seed: u64) -> Result<Vec<BoundCheckResult>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let (lo, _) = require_ergodic(model)?;
    let q = model.transition();
    let pi = stationary_distribution(&q)?;
    let st = StationaryAnalysis::new(model)?;
    let m = model.state_count();
    let c = 2.0 * grad_log_q_sup(model) / lo;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut poisson = Vec::with_capacity(trials);
    let mut functional = Vec::with_capacity(trials);
    for _ in 0..trials {
        let f = DVector::from_fn(m, |_, _| rng.random_range(-1.0..=1.0));
        let sup_f = f.amax();
        let v = solve_poisson(&q, &pi, &f)?;
        poisson.push(BoundTrial {
            k: 0,
            lhs: v.amax(),
            rhs: 2.0 * sup_f / lo,
        });
        let g = DVector::from_fn(st.d_pi.len(), |r, _| st.d_pi[r].dot(&f));
        functional.push(BoundTrial {
            k: 0,
            lhs: g.norm(),
            rhs: c * sup_f,
        });
    }
    let windows: Vec<Vec<f64>> = (0..trials)
        .map(|_| {
            let n = rng.random_range(1..=12);
            sample_observations(model, n, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(vec![
        BoundCheckResult::new("poisson solution", poisson),
        BoundCheckResult::new("stationary derivative functional", functional),
        likelihood_ratio_check(model, &windows)?,
    ])
}
