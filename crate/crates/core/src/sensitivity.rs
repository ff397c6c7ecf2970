//! Exact score and Hessian of the log-likelihoods in [`crate::inference`].
//!
//! The normalized filter `F`, its gradient `F_r` and its packed Hessian
//! `F_rs` are propagated together through the same steps as the value
//! recursion. Each observation contributes `∇ log c` and `∇² log c` of its
//! normalizer `c`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{dirac, fixedstart_steps, gap_steps, smooth, Step};
use crate::linalg::{pair_count, pair_index, serde_matrix, serde_vector, unpack_symmetric};
use crate::model::{Kernel, ParamHmm};
use crate::stationary::StationaryAnalysis;

/// A log-likelihood with its gradient and Hessian in `θ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreHessian {
    pub loglik: f64,
    #[serde(serialize_with = "serde_vector::serialize")]
    pub score: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub hessian: DMatrix<f64>,
}

/// Initial law of the filter with its parameter derivatives.
pub(crate) struct Seed {
    pub law: Vec<f64>,
    /// `p × m`, row-major by parameter.
    pub d_law: Vec<f64>,
    /// `pair_count(p) × m`, row-major by packed pair.
    pub d2_law: Vec<f64>,
}

impl Seed {
    pub fn stationary(model: &ParamHmm) -> Result<Self> {
        let a = StationaryAnalysis::new(model)?;
        Ok(Self {
            law: a.pi.iter().copied().collect(),
            d_law: a.d_pi.iter().flat_map(|v| v.iter().copied()).collect(),
            d2_law: a.d2_pi.iter().flat_map(|v| v.iter().copied()).collect(),
        })
    }

    pub fn dirac(model: &ParamHmm, x: usize) -> Result<Self> {
        let m = model.state_count();
        let p = model.param_dim();
        Ok(Self {
            law: dirac(m, x)?.iter().copied().collect(),
            d_law: vec![0.0; p * m],
            d2_law: vec![0.0; pair_count(p) * m],
        })
    }
}

/// Output of a differentiated forward pass.
pub(crate) struct ForwardDerivs {
    /// Log-likelihood of every observation step.
    pub total_loglik: f64,
    /// Value and derivatives restricted to steps at or after `count_from`.
    pub counted: ScoreHessian,
}

/// Per-observation contribution `(log c, ∇ log c, packed ∇² log c)`.
pub(crate) type StepCallback<'a> = &'a mut dyn FnMut(f64, &[f64], &[f64]);

/// Differentiated forward recursion over `steps`.
pub(crate) fn forward_derivs(
    model: &ParamHmm,
    kernel: &Kernel,
    seed: Seed,
    steps: &[Step],
    count_from: usize,
    mut on_step: Option<StepCallback<'_>>,
) -> Result<ForwardDerivs> {
    let m = model.state_count();
    let p = model.param_dim();
    let pc = pair_count(p);
    let q = &kernel.q;
    let nonzero_d2q: Vec<bool> = kernel.d2q.iter().map(|d| d.iter().any(|&v| v != 0.0)).collect();

    let mut pred = seed.law;
    let mut pred_r = seed.d_law;
    let mut pred_rs = seed.d2_law;
    let mut filt = vec![0.0; m];
    let mut filt_r = vec![0.0; p * m];
    let mut filt_rs = vec![0.0; pc * m];

    // emission derivatives per state
    let mut lr = vec![0.0; p * m];
    let mut lrs = vec![0.0; pc * m];
    let mut lg = vec![0.0; m];
    let mut w = vec![0.0; m];
    let mut cr = vec![0.0; p];
    let mut crs = vec![0.0; pc];
    let mut inc_r = vec![0.0; p];
    let mut inc_rs = vec![0.0; pc];

    let mut total = 0.0;
    let mut counted = 0.0;
    let mut score = vec![0.0; p];
    let mut hess = vec![0.0; pc];
    let mut obs_index = 0;

    for (step_no, step) in steps.iter().enumerate() {
        match *step {
            Step::Observe(y) => {
                for x in 0..m {
                    lg[x] = model.emission_derivs_into(
                        y,
                        x,
                        &mut lr[x * p..(x + 1) * p],
                        &mut lrs[x * pc..(x + 1) * pc],
                    )?;
                }
                let shift = lg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if shift == f64::NEG_INFINITY {
                    return Err(Error::ZeroProbability { index: obs_index });
                }
                for x in 0..m {
                    w[x] = (lg[x] - shift).exp();
                }
                // unnormalized u, u_r, u_rs stored in the filt buffers
                let mut c = 0.0;
                for x in 0..m {
                    filt[x] = pred[x] * w[x];
                    c += filt[x];
                }
                if !(c > 0.0) {
                    return Err(Error::ZeroProbability { index: obs_index });
                }
                for r in 0..p {
                    let mut s = 0.0;
                    for x in 0..m {
                        let v = (pred_r[r * m + x] + pred[x] * lr[x * p + r]) * w[x];
                        filt_r[r * m + x] = v;
                        s += v;
                    }
                    cr[r] = s;
                }
                for r in 0..p {
                    for s in r..p {
                        let k = pair_index(r, s, p);
                        let mut acc = 0.0;
                        for x in 0..m {
                            let l_r = lr[x * p + r];
                            let l_s = lr[x * p + s];
                            let v = (pred_rs[k * m + x]
                                + pred_r[r * m + x] * l_s
                                + pred_r[s * m + x] * l_r
                                + pred[x] * (lrs[x * pc + k] + l_r * l_s))
                                * w[x];
                            filt_rs[k * m + x] = v;
                            acc += v;
                        }
                        crs[k] = acc;
                    }
                }
                let log_c = c.ln() + shift;
                for r in 0..p {
                    inc_r[r] = cr[r] / c;
                }
                for r in 0..p {
                    for s in r..p {
                        let k = pair_index(r, s, p);
                        inc_rs[k] = crs[k] / c - inc_r[r] * inc_r[s];
                    }
                }
                total += log_c;
                if step_no >= count_from {
                    counted += log_c;
                    for r in 0..p {
                        score[r] += inc_r[r];
                    }
                    for k in 0..pc {
                        hess[k] += inc_rs[k];
                    }
                    if let Some(cb) = on_step.as_mut() {
                        cb(log_c, &inc_r, &inc_rs);
                    }
                }
                // normalize: F = u/c, F_r = (u_r - F c_r)/c, F_rs = (u_rs - F_r c_s - F_s c_r - F c_rs)/c
                for x in 0..m {
                    filt[x] /= c;
                }
                for r in 0..p {
                    for x in 0..m {
                        filt_r[r * m + x] = (filt_r[r * m + x] - filt[x] * cr[r]) / c;
                    }
                }
                for r in 0..p {
                    for s in r..p {
                        let k = pair_index(r, s, p);
                        for x in 0..m {
                            filt_rs[k * m + x] = (filt_rs[k * m + x]
                                - filt_r[r * m + x] * cr[s]
                                - filt_r[s * m + x] * cr[r]
                                - filt[x] * crs[k])
                                / c;
                        }
                    }
                }
                obs_index += 1;
            }
            Step::Skip => {
                filt.copy_from_slice(&pred);
                filt_r.copy_from_slice(&pred_r);
                filt_rs.copy_from_slice(&pred_rs);
            }
        }
        // transition: P' = F Q, P'_r = F_r Q + F Q_r, P'_rs = F_rs Q + F_r Q_s + F_s Q_r + F Q_rs
        row_times(&filt, q, &mut pred);
        for r in 0..p {
            let out = &mut pred_r[r * m..(r + 1) * m];
            row_times(&filt_r[r * m..(r + 1) * m], q, out);
            row_times_add(&filt, &kernel.dq[r], out);
        }
        for r in 0..p {
            for s in r..p {
                let k = pair_index(r, s, p);
                let out = &mut pred_rs[k * m..(k + 1) * m];
                row_times(&filt_rs[k * m..(k + 1) * m], q, out);
                row_times_add(&filt_r[r * m..(r + 1) * m], &kernel.dq[s], out);
                row_times_add(&filt_r[s * m..(s + 1) * m], &kernel.dq[r], out);
                if nonzero_d2q[k] {
                    row_times_add(&filt, &kernel.d2q[k], out);
                }
            }
        }
    }
    Ok(ForwardDerivs {
        total_loglik: total,
        counted: ScoreHessian {
            loglik: counted,
            score: DVector::from_vec(score),
            hessian: unpack_symmetric(&hess, p),
        },
    })
}

#[inline]
fn row_times(v: &[f64], q: &DMatrix<f64>, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    row_times_add(v, q, out);
}

#[inline]
fn row_times_add(v: &[f64], q: &DMatrix<f64>, out: &mut [f64]) {
    let m = v.len();
    for j in 0..m {
        let mut acc = 0.0;
        for i in 0..m {
            acc += v[i] * q[(i, j)];
        }
        out[j] += acc;
    }
}

fn observe_all(y: &[f64]) -> Vec<Step> {
    y.iter().map(|&v| Step::Observe(v)).collect()
}

fn nonempty(y: &[f64], what: &str) -> Result<()> {
    if y.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} observation window is empty")));
    }
    Ok(())
}

/// Value, gradient and Hessian of `log p̄_θ(y)`.
pub fn score_hessian_stationary(model: &ParamHmm, y: &[f64]) -> Result<ScoreHessian> {
    nonempty(y, "stationary")?;
    let kernel = model.kernel();
    let seed = Seed::stationary(model)?;
    Ok(forward_derivs(model, &kernel, seed, &observe_all(y), 0, None)?.counted)
}

/// Like [`score_hessian_stationary`], calling `on_step` with each
/// observation's contribution `(log c_i, ∇ log c_i, packed ∇² log c_i)`.
pub fn score_hessian_stationary_with(
    model: &ParamHmm,
    y: &[f64],
    on_step: &mut dyn FnMut(f64, &[f64], &[f64]),
) -> Result<ScoreHessian> {
    nonempty(y, "stationary")?;
    let kernel = model.kernel();
    let seed = Seed::stationary(model)?;
    Ok(forward_derivs(model, &kernel, seed, &observe_all(y), 0, Some(on_step))?.counted)
}

/// Derivatives of `log p̄_θ(future | past)` with `gap` unobserved points
/// between the blocks.
pub fn score_hessian_conditional(
    model: &ParamHmm,
    past: &[f64],
    future: &[f64],
    gap: usize,
) -> Result<ScoreHessian> {
    nonempty(past, "past")?;
    nonempty(future, "future")?;
    let kernel = model.kernel();
    let seed = Seed::stationary(model)?;
    let steps = gap_steps(past, gap, future);
    Ok(forward_derivs(model, &kernel, seed, &steps, past.len() + gap, None)?.counted)
}

/// [`score_hessian_conditional`] together with `log p̄_θ(past, future)`.
pub(crate) fn score_hessian_conditional_with_joint(
    model: &ParamHmm,
    past: &[f64],
    future: &[f64],
    gap: usize,
) -> Result<(f64, ScoreHessian)> {
    let kernel = model.kernel();
    let seed = Seed::stationary(model)?;
    let steps = gap_steps(past, gap, future);
    let out = forward_derivs(model, &kernel, seed, &steps, past.len() + gap, None)?;
    Ok((out.total_loglik, out.counted))
}

/// Derivatives of `log p̄_θ(past, future)` with the gap marginalized.
pub fn score_hessian_joint_with_gap(
    model: &ParamHmm,
    past: &[f64],
    future: &[f64],
    gap: usize,
) -> Result<ScoreHessian> {
    let kernel = model.kernel();
    let seed = Seed::stationary(model)?;
    let steps = gap_steps(past, gap, future);
    Ok(forward_derivs(model, &kernel, seed, &steps, 0, None)?.counted)
}

/// Derivatives of `log p_θ(y | X_{-lag} = start)`.
pub fn score_hessian_fixedstart(model: &ParamHmm, y: &[f64], start: usize, lag: usize) -> Result<ScoreHessian> {
    nonempty(y, "fixed-start")?;
    let kernel = model.kernel();
    let seed = Seed::dirac(model, start)?;
    Ok(forward_derivs(model, &kernel, seed, &fixedstart_steps(y, lag), 0, None)?.counted)
}

/// Score of `log p̄_θ(y)` as the smoothed expectation of the complete-data
/// score. Independent of the differentiated filter.
pub fn score_fisher_identity(model: &ParamHmm, y: &[f64]) -> Result<DVector<f64>> {
    let sm = smooth(model, y)?;
    let st = StationaryAnalysis::new(model)?;
    let kernel = model.kernel();
    let p = model.param_dim();
    let m = model.state_count();
    let mut score = DVector::zeros(p);
    for x in 0..m {
        let g0 = sm.marginals[0][x];
        for r in 0..p {
            score[r] += g0 * st.d_pi[r][x] / st.pi[x];
        }
    }
    for xi in &sm.pairwise {
        for x in 0..m {
            for x2 in 0..m {
                let w = xi[(x, x2)];
                let qv = kernel.q[(x, x2)];
                for r in 0..p {
                    score[r] += w * kernel.dq[r][(x, x2)] / qv;
                }
            }
        }
    }
    for (i, &v) in y.iter().enumerate() {
        for x in 0..m {
            let d = model.d_log_emission(v, x)?;
            score += d * sm.marginals[i][x];
        }
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{conditional_loglik, fixedstart_loglik, stationary_loglik};
    use crate::model::{build_catalog_model, CatalogModel, Family};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_y(model: &ParamHmm, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let pi = crate::stationary::stationary_distribution(&model.transition()).unwrap();
        let q = model.transition();
        let mut x = crate::model::sample_categorical(pi.as_slice(), rng);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            y.push(model.sample_emission(x, rng));
            let row: Vec<f64> = q.row(x).iter().copied().collect();
            x = crate::model::sample_categorical(&row, rng);
        }
        y
    }

    fn fd_check(model: &ParamHmm, f: &dyn Fn(&ParamHmm) -> f64, sh: &dyn Fn(&ParamHmm) -> ScoreHessian) {
        let h = 1e-5;
        let p = model.param_dim();
        let base = sh(model);
        for r in 0..p {
            let mut tp = model.theta().to_vec();
            let mut tm = tp.clone();
            tp[r] += h;
            tm[r] -= h;
            let mp = model.with_theta(tp).unwrap();
            let mm = model.with_theta(tm).unwrap();
            let fd = (f(&mp) - f(&mm)) / (2.0 * h);
            let an = base.score[r];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "score r={r}: fd {fd} vs {an}");
            let fd_h = (sh(&mp).score - sh(&mm).score) / (2.0 * h);
            for s in 0..p {
                let an = base.hessian[(s, r)];
                assert!(
                    (fd_h[s] - an).abs() <= 1e-4 * an.abs().max(1.0),
                    "hessian ({s},{r}): fd {} vs {an}",
                    fd_h[s]
                );
            }
        }
    }

    #[test]
    fn stationary_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let models = [
            build_catalog_model("M1", None).unwrap(),
            build_catalog_model("M2", None).unwrap(),
            build_catalog_model("M4", None).unwrap(),
            ParamHmm::new("s", Family::Softmax { states: 3, symbols: 3 }, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap(),
        ];
        for model in &models {
            let y = sample_y(model, 30, &mut rng);
            let sh = score_hessian_stationary(model, &y).unwrap();
            assert!((sh.loglik - stationary_loglik(model, &y).unwrap()).abs() < 1e-10);
            fd_check(
                model,
                &|m| stationary_loglik(m, &y).unwrap(),
                &|m| score_hessian_stationary(m, &y).unwrap(),
            );
        }
    }

    #[test]
    fn conditional_and_fixedstart_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for model in [build_catalog_model("M1", None).unwrap(), build_catalog_model("M4", None).unwrap()] {
            let past = sample_y(&model, 4, &mut rng);
            let future = sample_y(&model, 3, &mut rng);
            fd_check(
                &model,
                &|m| conditional_loglik(m, &past, &future, 2).unwrap(),
                &|m| score_hessian_conditional(m, &past, &future, 2).unwrap(),
            );
            fd_check(
                &model,
                &|m| fixedstart_loglik(m, &future, 1, 3).unwrap(),
                &|m| score_hessian_fixedstart(m, &future, 1, 3).unwrap(),
            );
        }
    }

    #[test]
    fn redundant_pair_and_uninformative_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m2 = build_catalog_model("M2", None).unwrap();
        let m3 = build_catalog_model("M3-point", None).unwrap();
        for _ in 0..20 {
            let y = sample_y(&m2, 15, &mut rng);
            let sh = score_hessian_stationary(&m2, &y).unwrap();
            assert_eq!(sh.score[2], sh.score[3]);
            assert_eq!(sh.hessian[(2, 2)], sh.hessian[(3, 3)]);
            assert_eq!(sh.hessian[(0, 2)], sh.hessian[(0, 3)]);
            assert_eq!(sh.hessian[(1, 2)], sh.hessian[(1, 3)]);
            let fi = score_fisher_identity(&m2, &y).unwrap();
            assert!((fi[2] - fi[3]).abs() < 1e-12);

            let y3 = sample_y(&m3, 15, &mut rng);
            let sh3 = score_hessian_stationary(&m3, &y3).unwrap();
            assert!(sh3.score[0].abs() < 1e-13 && sh3.score[1].abs() < 1e-13);
        }
    }

    #[test]
    fn fisher_identity_agrees_with_filter_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut models: Vec<ParamHmm> = CatalogModel::ALL
            .iter()
            .map(|c| build_catalog_model(c.name(), None).unwrap())
            .collect();
        models.push(ParamHmm::new("s", Family::Softmax { states: 3, symbols: 2 }, vec![0.2, -0.3, 0.5, 0.1, -0.4, 0.0, 0.7, -0.6, 0.3]).unwrap());
        for model in &models {
            for _ in 0..100 {
                let n = rng.random_range(1..12);
                let y = sample_y(model, n, &mut rng);
                let a = score_hessian_stationary(model, &y).unwrap().score;
                let b = score_fisher_identity(model, &y).unwrap();
                assert!((a - b).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn single_observation_fisher_identity() {
        let m = build_catalog_model("M1", None).unwrap();
        let st = StationaryAnalysis::new(&m).unwrap();
        let sm = smooth(&m, &[1.0]).unwrap();
        let mut expect = DVector::zeros(4);
        for x in 0..2 {
            let mut term = m.d_log_emission(1.0, x).unwrap();
            for r in 0..4 {
                term[r] += st.d_pi[r][x] / st.pi[x];
            }
            expect += term * sm.marginals[0][x];
        }
        assert!((score_fisher_identity(&m, &[1.0]).unwrap() - expect).amax() < 1e-15);
    }

    #[test]
    fn conditional_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let iid = build_catalog_model("M1", Some(&[0.3, 0.7, 0.2, 0.8])).unwrap();
        let past = sample_y(&iid, 3, &mut rng);
        let future = sample_y(&iid, 4, &mut rng);
        let c = score_hessian_conditional(&iid, &past, &future, 2).unwrap();
        let s = score_hessian_stationary(&iid, &future).unwrap();
        assert!((c.loglik - s.loglik).abs() < 1e-14);
        assert!((c.score - s.score).amax() < 1e-12);
        assert!((c.hessian - s.hessian).amax() < 1e-12);

        let m1 = build_catalog_model("M1", None).unwrap();
        for _ in 0..20 {
            let past = sample_y(&m1, rng.random_range(1..6), &mut rng);
            let future = sample_y(&m1, rng.random_range(1..6), &mut rng);
            let gap = rng.random_range(0..5);
            let c = score_hessian_conditional(&m1, &past, &future, gap).unwrap();
            let j = score_hessian_joint_with_gap(&m1, &past, &future, gap).unwrap();
            let p = score_hessian_stationary(&m1, &past).unwrap();
            assert!((c.hessian - (j.hessian - p.hessian)).amax() < 1e-9);
            assert!((c.score - (j.score - p.score)).amax() < 1e-9);
        }
    }

    #[test]
    fn fixedstart_gradient_difference_decays() {
        let m = build_catalog_model("M1", None).unwrap();
        let y = [1.0, 0.0, 1.0];
        let diffs: Vec<f64> = (0..12)
            .map(|k| {
                let a = score_hessian_fixedstart(&m, &y, 0, k).unwrap().score;
                let b = score_hessian_fixedstart(&m, &y, 1, k).unwrap().score;
                (a - b).amax()
            })
            .collect();
        // Q has second eigenvalue 1 - a - b = 0.3
        for k in 1..12 {
            assert!(diffs[k] <= diffs[0] * 0.31_f64.powi(k as i32) * (k as f64 + 1.0) + 1e-13);
        }
    }

    #[test]
    fn expected_score_zero_and_bartlett() {
        for name in ["M1", "M2"] {
            let m = build_catalog_model(name, None).unwrap();
            for n in 1..=5 {
                let p = 4;
                let mut es = DVector::zeros(p);
                let mut neg_h = DMatrix::zeros(p, p);
                let mut outer = DMatrix::zeros(p, p);
                for code in 0..(1u32 << n) {
                    let y: Vec<f64> = (0..n).map(|i| f64::from((code >> i) & 1)).collect();
                    let sh = score_hessian_stationary(&m, &y).unwrap();
                    let w = sh.loglik.exp();
                    es += &sh.score * w;
                    neg_h -= &sh.hessian * w;
                    outer += &sh.score * sh.score.transpose() * w;
                }
                assert!(es.amax() < 1e-10);
                assert!((neg_h - outer).amax() < 1e-9);
            }
        }
    }
}
