//! Exact likelihoods by normalized forward recursions.
//!
//! A likelihood is described by an initial law for the hidden state at the
//! first time point and a sequence of [`Step`]s. Each step either emits an
//! observation or is skipped (a time point whose observation is
//! marginalized out); every step is followed by one transition of the chain.
//! All recursions carry normalized laws and accumulate log normalizers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamHmm;
use crate::stationary::stationary_distribution;

/// Contiguous block of observations `Y_origin, ..., Y_{origin + len - 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub values: Vec<f64>,
    pub index_origin: i64,
}

impl ObservationWindow {
    pub fn new(values: Vec<f64>, index_origin: i64) -> Self {
        Self {
            values,
            index_origin,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the last observation.
    pub fn last_index(&self) -> i64 {
        self.index_origin + self.values.len() as i64 - 1
    }
}

/// Per-observation filter state of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct FilterTrace {
    /// Law of `X_i` given the observations strictly before `i`.
    pub predictive: Vec<DVector<f64>>,
    /// Law of `X_i` given the observations up to and including `i`.
    pub filtered: Vec<DVector<f64>>,
    /// `log p(Y_i | earlier observations)`.
    pub log_normalizers: Vec<f64>,
}

impl FilterTrace {
    pub fn loglik(&self) -> f64 {
        self.log_normalizers.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Step {
    Observe(f64),
    Skip,
}

/// Steps for `past`, `gap` skipped time points, then `future`.
pub(crate) fn gap_steps(past: &[f64], gap: usize, future: &[f64]) -> Vec<Step> {
    past.iter()
        .map(|&y| Step::Observe(y))
        .chain(std::iter::repeat_n(Step::Skip, gap))
        .chain(future.iter().map(|&y| Step::Observe(y)))
        .collect()
}

/// Steps for `p(Y_1^n | X_{-lag} = x)`: the Dirac law sits at time `-lag`,
/// the `lag + 1` time points `-lag, ..., 0` are unobserved, then `y` follows.
pub(crate) fn fixedstart_steps(y: &[f64], lag: usize) -> Vec<Step> {
    std::iter::repeat_n(Step::Skip, lag + 1)
        .chain(y.iter().map(|&v| Step::Observe(v)))
        .collect()
}

pub(crate) fn dirac(m: usize, x: usize) -> Result<DVector<f64>> {
    if x >= m {
        return Err(Error::InvalidArgument(format!(
            "start state {x} out of range for {m} states"
        )));
    }
    let mut v = DVector::zeros(m);
    v[x] = 1.0;
    Ok(v)
}

pub(crate) struct ForwardValue {
    /// Sum of all log normalizers.
    pub total: f64,
    /// Sum of the log normalizers of observation steps at or after `count_from`.
    pub counted: f64,
}

/// Row vector times matrix, `law · Q`.
#[inline]
pub(crate) fn propagate(law: &DVector<f64>, q: &DMatrix<f64>) -> DVector<f64> {
    let m = law.len();
    DVector::from_fn(m, |j, _| (0..m).map(|i| law[i] * q[(i, j)]).sum())
}

/// Shifted emission weights `exp(log g(y|x) - M)` and the shift `M`.
pub(crate) fn emission_weights(model: &ParamHmm, y: f64, index: usize) -> Result<(DVector<f64>, f64)> {
    let m = model.state_count();
    let mut lg = DVector::zeros(m);
    for x in 0..m {
        lg[x] = model.log_emission(y, x)?;
    }
    let shift = lg.max();
    if shift == f64::NEG_INFINITY {
        return Err(Error::ZeroProbability { index });
    }
    Ok((lg.map(|v| (v - shift).exp()), shift))
}

pub(crate) fn run_forward(
    model: &ParamHmm,
    q: &DMatrix<f64>,
    init: DVector<f64>,
    steps: &[Step],
    count_from: usize,
    mut trace: Option<&mut FilterTrace>,
) -> Result<ForwardValue> {
    let mut pred = init;
    let mut total = 0.0;
    let mut counted = 0.0;
    let mut obs_index = 0;
    for (i, step) in steps.iter().enumerate() {
        let filt = match *step {
            Step::Observe(y) => {
                let (w, shift) = emission_weights(model, y, obs_index)?;
                obs_index += 1;
                let u = pred.component_mul(&w);
                let c = u.sum();
                if !(c > 0.0) {
                    return Err(Error::ZeroProbability { index: obs_index - 1 });
                }
                let log_c = c.ln() + shift;
                total += log_c;
                if i >= count_from {
                    counted += log_c;
                }
                let filt = u / c;
                if let Some(t) = trace.as_deref_mut() {
                    t.predictive.push(pred.clone());
                    t.filtered.push(filt.clone());
                    t.log_normalizers.push(log_c);
                }
                filt
            }
            Step::Skip => pred,
        };
        pred = propagate(&filt, q);
    }
    Ok(ForwardValue { total, counted })
}

fn require_nonempty(y: &[f64], what: &str) -> Result<()> {
    if y.is_empty() {
        Err(Error::InvalidArgument(format!("{what} observation window is empty")))
    } else {
        Ok(())
    }
}

/// `log p̄_θ(y)`: forward recursion started from the stationary law.
pub fn stationary_loglik(model: &ParamHmm, y: &[f64]) -> Result<f64> {
    require_nonempty(y, "stationary")?;
    let q = model.transition();
    let pi = stationary_distribution(&q)?;
    let steps: Vec<Step> = y.iter().map(|&v| Step::Observe(v)).collect();
    Ok(run_forward(model, &q, pi, &steps, 0, None)?.total)
}

/// Forward pass from the stationary law, keeping every filter state.
pub fn stationary_trace(model: &ParamHmm, y: &[f64]) -> Result<FilterTrace> {
    require_nonempty(y, "stationary")?;
    let q = model.transition();
    let pi = stationary_distribution(&q)?;
    let steps: Vec<Step> = y.iter().map(|&v| Step::Observe(v)).collect();
    let mut trace = FilterTrace::default();
    run_forward(model, &q, pi, &steps, 0, Some(&mut trace))?;
    Ok(trace)
}

/// `log p_θ(Y_1^n | X_{-lag} = start)`: `lag` pure transitions followed by
/// the block `Π_{i=1}^n q(x_{i-1}, x_i) g(y_i | x_i)`.
pub fn fixedstart_loglik(model: &ParamHmm, y: &[f64], start: usize, lag: usize) -> Result<f64> {
    require_nonempty(y, "fixed-start")?;
    let q = model.transition();
    let init = dirac(model.state_count(), start)?;
    Ok(run_forward(model, &q, init, &fixedstart_steps(y, lag), 0, None)?.total)
}

/// `log p̄_θ(future | past)` where `gap` unobserved time points separate the
/// last past observation from the first future one.
pub fn conditional_loglik(model: &ParamHmm, past: &[f64], future: &[f64], gap: usize) -> Result<f64> {
    require_nonempty(past, "past")?;
    require_nonempty(future, "future")?;
    let q = model.transition();
    let pi = stationary_distribution(&q)?;
    let steps = gap_steps(past, gap, future);
    Ok(run_forward(model, &q, pi, &steps, past.len() + gap, None)?.counted)
}

/// [`conditional_loglik`] with the gap read off the window indices.
pub fn conditional_loglik_windows(
    model: &ParamHmm,
    past: &ObservationWindow,
    future: &ObservationWindow,
) -> Result<f64> {
    let gap = window_gap(past, future)?;
    conditional_loglik(model, &past.values, &future.values, gap)
}

pub(crate) fn window_gap(past: &ObservationWindow, future: &ObservationWindow) -> Result<usize> {
    let gap = future.index_origin - past.last_index() - 1;
    if gap < 0 {
        return Err(Error::InvalidArgument(format!(
            "future window starting at {} overlaps past window ending at {}",
            future.index_origin,
            past.last_index()
        )));
    }
    Ok(gap as usize)
}

/// `log p̄_θ(past, future)` with the gap marginalized.
pub fn joint_with_gap_loglik(model: &ParamHmm, past: &[f64], future: &[f64], gap: usize) -> Result<f64> {
    let q = model.transition();
    let pi = stationary_distribution(&q)?;
    let steps = gap_steps(past, gap, future);
    Ok(run_forward(model, &q, pi, &steps, 0, None)?.total)
}

const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// Sums `π(x_1) Π q(x_i, x_{i+1}) Π g(y_i | x_i)` over every hidden path.
/// Test oracle only; exponential in `y.len()`.
pub fn brute_force_loglik(model: &ParamHmm, y: &[f64]) -> Result<f64> {
    require_nonempty(y, "brute-force")?;
    let m = model.state_count();
    let n = y.len();
    let paths = (m as f64).powi(n as i32);
    if paths > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            what: "hidden path enumeration",
            size: paths,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let q = model.transition();
    let pi = stationary_distribution(&q)?;
    let mut g = DMatrix::zeros(n, m);
    for (i, &v) in y.iter().enumerate() {
        for x in 0..m {
            g[(i, x)] = model.log_emission(v, x)?.exp();
        }
    }
    let mut path = vec![0usize; n];
    let mut total = 0.0;
    loop {
        let mut w = pi[path[0]] * g[(0, path[0])];
        for i in 1..n {
            w *= q[(path[i - 1], path[i])] * g[(i, path[i])];
        }
        total += w;
        // odometer increment
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok(total.ln());
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < m {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// Posterior marginals and pairwise laws of the hidden chain given `y`.
#[derive(Debug, Clone)]
pub struct Smoothing {
    /// `P(X_i = x | y)`.
    pub marginals: Vec<DVector<f64>>,
    /// `P(X_i = x, X_{i+1} = x' | y)`, for `i = 1..n-1`.
    pub pairwise: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

/// Forward-backward smoother under the stationary initial law.
pub fn smooth(model: &ParamHmm, y: &[f64]) -> Result<Smoothing> {
    require_nonempty(y, "smoothing")?;
    let q = model.transition();
    let pi = stationary_distribution(&q)?;
    let n = y.len();
    let m = model.state_count();
    let mut filtered = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    let mut loglik = 0.0;
    let mut pred = pi;
    for (i, &v) in y.iter().enumerate() {
        let (w, shift) = emission_weights(model, v, i)?;
        let u = pred.component_mul(&w);
        let c = u.sum();
        if !(c > 0.0) {
            return Err(Error::ZeroProbability { index: i });
        }
        loglik += c.ln() + shift;
        let f = u / c;
        pred = propagate(&f, &q);
        filtered.push(f);
        weights.push(w);
        norms.push(c);
    }
    // scaled backward variables: beta_i(x) = p(y_{i+1..n} | x_i = x) / Π c
    let mut beta = vec![DVector::from_element(m, 1.0); n];
    for i in (0..n - 1).rev() {
        let next = beta[i + 1].component_mul(&weights[i + 1]) / norms[i + 1];
        beta[i] = &q * next;
    }
    let marginals: Vec<DVector<f64>> = (0..n).map(|i| filtered[i].component_mul(&beta[i])).collect();
    let pairwise = (0..n.saturating_sub(1))
        .map(|i| {
            DMatrix::from_fn(m, m, |x, x2| {
                filtered[i][x] * q[(x, x2)] * weights[i + 1][x2] * beta[i + 1][x2] / norms[i + 1]
            })
        })
        .collect();
    Ok(Smoothing {
        marginals,
        pairwise,
        loglik,
    })
}
