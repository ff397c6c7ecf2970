//! Parametric hidden Markov models on a finite hidden state space.
//!
//! A [`ParamHmm`] couples a [`Family`] (the functional form of the transition
//! matrix and the emission law) with a parameter vector. Every family supplies
//! hand-coded first and second derivatives of the transition matrix and of the
//! emission log-density; nothing here is obtained by finite differences.

mod catalog;
mod constants;

pub use catalog::{build_catalog_model, CatalogModel};
pub use constants::{
    check_assumptions, compute_constants, AssumptionReport, AssumptionStatus, ModelConstants,
    ParamBox,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pair_count, pair_index, unpack_symmetric};

/// Functional form of a model. The parameter layout is fixed per family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Two states, `Q = [[1-a, a], [b, 1-b]]`, Bernoulli emissions with
    /// `P(Y=1|x=1) = e1`, `P(Y=1|x=2) = e2`. Parameters `(a, b, e1, e2)`.
    Bernoulli2,
    /// Two states, same transitions; `P(Y=1|x=1) = t1 + t2` and
    /// `P(Y=1|x=2) = 0.8`. Parameters `(a, b, t1, t2)`, redundant along `t1 - t2`.
    RedundantBernoulli2,
    /// Two states, same transitions, unit-variance Gaussian emissions with
    /// means `(mu1, mu2)`. Parameters `(a, b, mu1, mu2)`.
    Gaussian2,
    /// `states` states and `symbols` emission symbols, each row of `Q` and each
    /// emission law a softmax of free logits (first entry pinned to zero).
    Softmax { states: usize, symbols: usize },
}

pub(crate) const REDUNDANT_SECOND_STATE_SUCCESS: f64 = 0.8;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

impl Family {
    pub fn state_count(&self) -> usize {
        match *self {
            Family::Softmax { states, .. } => states,
            _ => 2,
        }
    }

    pub fn param_dim(&self) -> usize {
        match *self {
            Family::Softmax { states, symbols } => {
                states * (states - 1) + states * (symbols - 1)
            }
            _ => 4,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match *self {
            Family::Bernoulli2 => ["a", "b", "e1", "e2"].map(String::from).to_vec(),
            Family::RedundantBernoulli2 => ["a", "b", "t1", "t2"].map(String::from).to_vec(),
            Family::Gaussian2 => ["a", "b", "mu1", "mu2"].map(String::from).to_vec(),
            Family::Softmax { states, symbols } => {
                let mut names = Vec::with_capacity(self.param_dim());
                for i in 0..states {
                    for j in 1..states {
                        names.push(format!("q{i}{j}"));
                    }
                }
                for x in 0..states {
                    for s in 1..symbols {
                        names.push(format!("g{x}{s}"));
                    }
                }
                names
            }
        }
    }

    /// Finite emission alphabet, if any. Densities are then probability masses.
    pub fn alphabet(&self) -> Option<Vec<f64>> {
        match *self {
            Family::Bernoulli2 | Family::RedundantBernoulli2 => Some(vec![0.0, 1.0]),
            Family::Gaussian2 => None,
            Family::Softmax { symbols, .. } => Some((0..symbols).map(|s| s as f64).collect()),
        }
    }

    /// Checks `theta` against the family's parameter region. With `closed`
    /// the boundary is accepted (used for assumption probing only).
    pub fn validate(&self, theta: &[f64], closed: bool) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::Dimension {
                expected: self.param_dim(),
                found: theta.len(),
            });
        }
        let names = self.param_names();
        for (name, &v) in names.iter().zip(theta) {
            if !v.is_finite() {
                return Err(Error::Inadmissible {
                    param: name.clone(),
                    value: v,
                    reason: "not finite".into(),
                });
            }
        }
        let unit = |name: &str, v: f64| -> Result<()> {
            let ok = if closed {
                (0.0..=1.0).contains(&v)
            } else {
                v > 0.0 && v < 1.0
            };
            if ok {
                Ok(())
            } else {
                Err(Error::Inadmissible {
                    param: name.to_string(),
                    value: v,
                    reason: if closed {
                        "must lie in [0, 1]".into()
                    } else {
                        "must lie in (0, 1)".into()
                    },
                })
            }
        };
        match *self {
            Family::Bernoulli2 => {
                for (name, &v) in names.iter().zip(theta) {
                    unit(name, v)?;
                }
            }
            Family::RedundantBernoulli2 => {
                unit("a", theta[0])?;
                unit("b", theta[1])?;
                unit("t1+t2", theta[2] + theta[3])?;
            }
            Family::Gaussian2 => {
                unit("a", theta[0])?;
                unit("b", theta[1])?;
            }
            Family::Softmax { states, symbols } => {
                if states < 2 || symbols < 2 {
                    return Err(Error::InvalidArgument(
                        "softmax family needs at least two states and two symbols".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Whether the admissible value of parameter `idx` is confined to the unit
    /// interval (used to intersect boxes with the admissible region).
    pub fn unit_interval_params(&self) -> Vec<bool> {
        match *self {
            Family::Bernoulli2 => vec![true; 4],
            // t1, t2 are individually unconstrained; their sum is checked by `validate`.
            Family::RedundantBernoulli2 | Family::Gaussian2 => vec![true, true, false, false],
            Family::Softmax { .. } => vec![false; self.param_dim()],
        }
    }
}

/// Transition matrix together with its packed first and second derivatives.
#[derive(Debug, Clone)]
pub struct Kernel {
    pub q: DMatrix<f64>,
    /// `dq[r] = dQ/dθ_r`.
    pub dq: Vec<DMatrix<f64>>,
    /// `d2q[pair_index(r, s)] = d²Q/dθ_r dθ_s`.
    pub d2q: Vec<DMatrix<f64>>,
}

/// A parametric HMM evaluated at a fixed parameter vector.
///
/// Evaluation is pure; the struct holds no RNG state and can be shared across
/// threads freely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamHmm {
    label: String,
    family: Family,
    theta: Vec<f64>,
}

impl ParamHmm {
    /// Builds a model, requiring `theta` to lie in the open admissible region.
    pub fn new(label: impl Into<String>, family: Family, theta: Vec<f64>) -> Result<Self> {
        family.validate(&theta, false)?;
        Ok(Self {
            label: label.into(),
            family,
            theta,
        })
    }

    /// Builds a model on the closed parameter region. Boundary models may have
    /// zero transition or emission entries; they exist for assumption probing.
    pub fn new_closed(label: impl Into<String>, family: Family, theta: Vec<f64>) -> Result<Self> {
        family.validate(&theta, true)?;
        Ok(Self {
            label: label.into(),
            family,
            theta,
        })
    }

    /// Same family and label at a different parameter.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.label.clone(), self.family, theta)
    }

    pub(crate) fn with_theta_closed(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new_closed(self.label.clone(), self.family, theta)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn state_count(&self) -> usize {
        self.family.state_count()
    }

    pub fn param_dim(&self) -> usize {
        self.family.param_dim()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.family.param_names()
    }

    pub fn alphabet(&self) -> Option<Vec<f64>> {
        self.family.alphabet()
    }

    pub fn transition(&self) -> DMatrix<f64> {
        self.kernel().q
    }

    pub fn d_transition(&self) -> Vec<DMatrix<f64>> {
        self.kernel().dq
    }

    /// Second derivatives as a full `p × p` family of matrices.
    pub fn d2_transition(&self) -> Vec<Vec<DMatrix<f64>>> {
        let p = self.param_dim();
        let k = self.kernel();
        (0..p)
            .map(|r| (0..p).map(|s| k.d2q[pair_index(r, s, p)].clone()).collect())
            .collect()
    }

    pub fn kernel(&self) -> Kernel {
        let p = self.param_dim();
        let m = self.state_count();
        let zero = DMatrix::zeros(m, m);
        match self.family {
            Family::Bernoulli2 | Family::RedundantBernoulli2 | Family::Gaussian2 => {
                let (a, b) = (self.theta[0], self.theta[1]);
                let q = DMatrix::from_row_slice(2, 2, &[1.0 - a, a, b, 1.0 - b]);
                let mut dq = vec![zero.clone(); p];
                dq[0] = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0]);
                dq[1] = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -1.0]);
                Kernel {
                    q,
                    dq,
                    d2q: vec![zero; pair_count(p)],
                }
            }
            Family::Softmax { states, .. } => {
                let w = states - 1;
                let mut q = DMatrix::zeros(m, m);
                for i in 0..states {
                    let row = softmax_row(&self.theta[i * w..(i + 1) * w]);
                    for (c, v) in row.into_iter().enumerate() {
                        q[(i, c)] = v;
                    }
                }
                let mut dq = vec![zero.clone(); p];
                let mut d2q = vec![zero; pair_count(p)];
                for i in 0..states {
                    for j in 1..states {
                        let r = i * w + (j - 1);
                        for c in 0..states {
                            dq[r][(i, c)] = q[(i, c)] * (delta(c, j) - q[(i, j)]);
                        }
                        for l in j..states {
                            let s = i * w + (l - 1);
                            let idx = pair_index(r, s, p);
                            for c in 0..states {
                                let qc = q[(i, c)];
                                d2q[idx][(i, c)] = qc
                                    * (delta(c, j) - q[(i, j)])
                                    * (delta(c, l) - q[(i, l)])
                                    - qc * q[(i, j)] * (delta(j, l) - q[(i, l)]);
                            }
                        }
                    }
                }
                Kernel { q, dq, d2q }
            }
        }
    }

    /// Log emission density (log mass for finite alphabets) of `y` in state `x`.
    pub fn log_emission(&self, y: f64, x: usize) -> Result<f64> {
        match self.family {
            Family::Bernoulli2 | Family::RedundantBernoulli2 => {
                let succ = self.success_prob(x);
                Ok(if bernoulli_symbol(y)? {
                    succ.ln()
                } else {
                    (1.0 - succ).ln()
                })
            }
            Family::Gaussian2 => {
                let z = y - self.theta[2 + x.min(1)];
                Ok(-LN_SQRT_2PI - 0.5 * z * z)
            }
            Family::Softmax { states, symbols } => {
                let s = softmax_symbol(y, symbols)?;
                let w = symbols - 1;
                let offset = states * (states - 1) + x * w;
                Ok(softmax_row(&self.theta[offset..offset + w])[s].ln())
            }
        }
    }

    fn success_prob(&self, x: usize) -> f64 {
        match (self.family, x) {
            (Family::Bernoulli2, 0) => self.theta[2],
            (Family::Bernoulli2, _) => self.theta[3],
            (_, 0) => self.theta[2] + self.theta[3],
            (_, _) => REDUNDANT_SECOND_STATE_SUCCESS,
        }
    }

    pub fn d_log_emission(&self, y: f64, x: usize) -> Result<DVector<f64>> {
        let p = self.param_dim();
        let mut g = vec![0.0; p];
        let mut h = vec![0.0; pair_count(p)];
        self.emission_derivs_into(y, x, &mut g, &mut h)?;
        Ok(DVector::from_vec(g))
    }

    pub fn d2_log_emission(&self, y: f64, x: usize) -> Result<DMatrix<f64>> {
        let p = self.param_dim();
        let mut g = vec![0.0; p];
        let mut h = vec![0.0; pair_count(p)];
        self.emission_derivs_into(y, x, &mut g, &mut h)?;
        Ok(unpack_symmetric(&h, p))
    }

    /// Writes the gradient and packed Hessian of `log g(y|x)` into the buffers
    /// and returns `log g(y|x)`. The buffers are overwritten entirely.
    pub(crate) fn emission_derivs_into(
        &self,
        y: f64,
        x: usize,
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> Result<f64> {
        grad.iter_mut().for_each(|v| *v = 0.0);
        hess.iter_mut().for_each(|v| *v = 0.0);
        let p = self.param_dim();
        match self.family {
            Family::Bernoulli2 | Family::RedundantBernoulli2 => {
                let one = bernoulli_symbol(y)?;
                let (succ, idx): (f64, &[usize]) = match (self.family, x) {
                    (Family::Bernoulli2, 0) => (self.theta[2], &[2]),
                    (Family::Bernoulli2, _) => (self.theta[3], &[3]),
                    (_, 0) => (self.theta[2] + self.theta[3], &[2, 3]),
                    (_, _) => (REDUNDANT_SECOND_STATE_SUCCESS, &[]),
                };
                let (logg, d1, d2) = if one {
                    (succ.ln(), 1.0 / succ, -1.0 / (succ * succ))
                } else {
                    let f = 1.0 - succ;
                    (f.ln(), -1.0 / f, -1.0 / (f * f))
                };
                for &r in idx {
                    grad[r] = d1;
                    for &s in idx {
                        hess[pair_index(r, s, p)] = d2;
                    }
                }
                Ok(logg)
            }
            Family::Gaussian2 => {
                let r = 2 + x.min(1);
                let mu = self.theta[r];
                let z = y - mu;
                grad[r] = z;
                hess[pair_index(r, r, p)] = -1.0;
                Ok(-LN_SQRT_2PI - 0.5 * z * z)
            }
            Family::Softmax { states, symbols } => {
                let s = softmax_symbol(y, symbols)?;
                let w = symbols - 1;
                let offset = states * (states - 1) + x * w;
                let probs = softmax_row(&self.theta[offset..offset + w]);
                for l in 1..symbols {
                    let r = offset + l - 1;
                    grad[r] = delta(s, l) - probs[l];
                    for t in l..symbols {
                        let u = offset + t - 1;
                        hess[pair_index(r, u, p)] = -probs[l] * (delta(l, t) - probs[t]);
                    }
                }
                Ok(probs[s].ln())
            }
        }
    }

    /// Draws an observation from the emission law of state `x`.
    pub fn sample_emission<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> f64 {
        match self.family {
            Family::Bernoulli2 | Family::RedundantBernoulli2 => {
                let succ = self.success_prob(x);
                if rng.random::<f64>() < succ {
                    1.0
                } else {
                    0.0
                }
            }
            Family::Gaussian2 => {
                let z: f64 = rng.sample(StandardNormal);
                self.theta[2 + x.min(1)] + z
            }
            Family::Softmax { states, symbols } => {
                let w = symbols - 1;
                let offset = states * (states - 1) + x * w;
                let probs = softmax_row(&self.theta[offset..offset + w]);
                sample_categorical(&probs, rng) as f64
            }
        }
    }

    /// Observation values at which emission densities are probed for the
    /// assumption constants: the alphabet when finite, otherwise a grid plus
    /// the emission modes.
    pub fn emission_probe_points(&self) -> Vec<f64> {
        match self.alphabet() {
            Some(a) => a,
            None => {
                let mut pts: Vec<f64> = (0..=400).map(|i| -10.0 + 0.05 * i as f64).collect();
                pts.extend_from_slice(&self.theta[2..4]);
                pts
            }
        }
    }

}

#[inline]
fn delta(a: usize, b: usize) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

fn bernoulli_symbol(y: f64) -> Result<bool> {
    if y == 1.0 {
        Ok(true)
    } else if y == 0.0 {
        Ok(false)
    } else {
        Err(Error::InvalidObservation(y))
    }
}

fn softmax_symbol(y: f64, symbols: usize) -> Result<usize> {
    if y >= 0.0 && y.fract() == 0.0 && (y as usize) < symbols {
        Ok(y as usize)
    } else {
        Err(Error::InvalidObservation(y))
    }
}

/// Softmax over `[0, logits...]`.
fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(0.0_f64, f64::max);
    let mut out = Vec::with_capacity(logits.len() + 1);
    out.push((-max).exp());
    out.extend(logits.iter().map(|l| (l - max).exp()));
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
