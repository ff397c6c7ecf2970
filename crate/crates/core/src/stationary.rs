//! Stationary distribution, Poisson equation and parameter derivatives of the
//! stationary law of a finite, strictly positive transition matrix.
//!
//! Everything is expressed through the matrix `A = I - Q + 1π`, which is
//! invertible whenever `Q` has a unique stationary law. Its inverse gives the
//! deviation matrix `D = A⁻¹ - 1π = Σ_k (Q^k - 1π)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{pair_count, pair_index, serde_matrix};
use crate::model::ParamHmm;

const STATIONARY_RESIDUAL: f64 = 1e-12;
const POISSON_INPUT_RESIDUAL: f64 = 1e-10;

fn check_stochastic_positive(q: &DMatrix<f64>) -> Result<()> {
    if q.nrows() != q.ncols() || q.nrows() == 0 {
        return Err(Error::Dimension {
            expected: q.nrows(),
            found: q.ncols(),
        });
    }
    if let Some(v) = q.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::UniformErgodicity(format!(
            "transition matrix has a non-positive entry {v}"
        )));
    }
    Ok(())
}

/// `π` with `πQ = π`, `Σπ = 1`, from `(I - Q + 11ᵀ)ᵀ πᵀ = 1`.
pub fn stationary_distribution(q: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_stochastic_positive(q)?;
    let m = q.nrows();
    let a = DMatrix::identity(m, m) - q + DMatrix::from_element(m, m, 1.0);
    let pi = a
        .transpose()
        .lu()
        .solve(&DVector::from_element(m, 1.0))
        .ok_or_else(|| Error::UniformErgodicity("stationary system is singular".into()))?;
    let residual = stationary_residual(q, &pi);
    if residual > STATIONARY_RESIDUAL {
        return Err(Error::Numerical(format!(
            "stationary residual {residual:.3e} exceeds {STATIONARY_RESIDUAL:e}"
        )));
    }
    Ok(pi)
}

/// `‖πQ - π‖∞`.
pub fn stationary_residual(q: &DMatrix<f64>, pi: &DVector<f64>) -> f64 {
    let row = pi.transpose() * q;
    row.iter()
        .zip(pi.iter())
        .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()))
}

fn fundamental_inverse(q: &DMatrix<f64>, pi: &DVector<f64>) -> Result<DMatrix<f64>> {
    let m = q.nrows();
    let ones = DVector::from_element(m, 1.0);
    let a = DMatrix::identity(m, m) - q + &ones * pi.transpose();
    a.try_inverse()
        .ok_or_else(|| Error::UniformErgodicity("I - Q + 1π is singular".into()))
}

/// Deviation matrix `Σ_{k≥0} (Q^k - 1π)`.
pub fn deviation_matrix(q: &DMatrix<f64>, pi: &DVector<f64>) -> Result<DMatrix<f64>> {
    let m = q.nrows();
    let ones = DVector::from_element(m, 1.0);
    Ok(fundamental_inverse(q, pi)? - &ones * pi.transpose())
}

/// Solves `V - QV = f - π(f)1` with the centering `πV = 0`.
pub fn solve_poisson(q: &DMatrix<f64>, pi: &DVector<f64>, f: &DVector<f64>) -> Result<DVector<f64>> {
    check_stochastic_positive(q)?;
    if f.len() != q.nrows() || pi.len() != q.nrows() {
        return Err(Error::Dimension {
            expected: q.nrows(),
            found: f.len().min(pi.len()),
        });
    }
    let residual = stationary_residual(q, pi);
    if residual > POISSON_INPUT_RESIDUAL || (pi.sum() - 1.0).abs() > POISSON_INPUT_RESIDUAL {
        return Err(Error::NotStationary { residual });
    }
    let m = q.nrows();
    let ones = DVector::from_element(m, 1.0);
    let a = DMatrix::identity(m, m) - q + &ones * pi.transpose();
    let centered = f - &ones * pi.dot(f);
    a.lu()
        .solve(&centered)
        .ok_or_else(|| Error::UniformErgodicity("I - Q + 1π is singular".into()))
}

/// Stationary law of a model together with its first and second parameter
/// derivatives.
#[derive(Debug, Clone, Serialize)]
pub struct StationaryAnalysis {
    #[serde(serialize_with = "crate::linalg::serde_vector::serialize")]
    pub pi: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub fundamental: DMatrix<f64>,
    /// `d_pi[r]` is `∂π/∂θ_r`.
    #[serde(serialize_with = "crate::linalg::serde_vector::serialize_many")]
    pub d_pi: Vec<DVector<f64>>,
    /// `d2_pi[pair_index(r, s)]` is `∂²π/∂θ_r∂θ_s`.
    #[serde(skip)]
    pub d2_pi: Vec<DVector<f64>>,
}

impl StationaryAnalysis {
    pub fn new(model: &ParamHmm) -> Result<Self> {
        let k = model.kernel();
        let pi = stationary_distribution(&k.q)?;
        let d = deviation_matrix(&k.q, &pi)?;
        let p = model.param_dim();
        // δ_r (I - Q) = π ∂_r Q, δ_r 1 = 0  ⇒  δ_r = π ∂_r Q D
        let d_pi: Vec<DVector<f64>> = k
            .dq
            .iter()
            .map(|dq| (pi.transpose() * dq * &d).transpose())
            .collect();
        let mut d2_pi = vec![DVector::zeros(pi.len()); pair_count(p)];
        for r in 0..p {
            for s in r..p {
                let rhs = pi.transpose() * &k.d2q[pair_index(r, s, p)]
                    + d_pi[s].transpose() * &k.dq[r]
                    + d_pi[r].transpose() * &k.dq[s];
                d2_pi[pair_index(r, s, p)] = (rhs * &d).transpose();
            }
        }
        Ok(Self {
            pi,
            fundamental: d,
            d_pi,
            d2_pi,
        })
    }

    pub fn d2(&self, r: usize, s: usize) -> &DVector<f64> {
        let p = self.d_pi.len();
        &self.d2_pi[pair_index(r, s, p)]
    }
}

/// `∂π/∂θ` as a `p × m` matrix (row `r` is `∂π/∂θ_r`).
pub fn grad_stationary(model: &ParamHmm) -> Result<DMatrix<f64>> {
    let a = StationaryAnalysis::new(model)?;
    let m = a.pi.len();
    Ok(DMatrix::from_fn(a.d_pi.len(), m, |r, x| a.d_pi[r][x]))
}

/// `∂²π/∂θ_r∂θ_s`, indexed `[r][s]`.
pub fn hess_stationary(model: &ParamHmm) -> Result<Vec<Vec<DVector<f64>>>> {
    let a = StationaryAnalysis::new(model)?;
    let p = a.d_pi.len();
    Ok((0..p)
        .map(|r| (0..p).map(|s| a.d2(r, s).clone()).collect())
        .collect())
}

/// Gradient of `π(x)` through the fundamental series, as an expectation over
/// a stationary transition `(X0, X1)`.
///
/// Writing `π(x) = π(q(·, x))` and differentiating gives two terms: the
/// series term `E[∇log q(X0,X1) Σ_k (q^{k+1}(X1,x) - π(x))]`, which
/// differentiates the law with the test function `q(·, x)` frozen, and the
/// product-rule term `E_π[∇q(X0, x)]` from the test function itself.
pub fn grad_stationary_series(model: &ParamHmm) -> Result<DMatrix<f64>> {
    let (series, direct) = grad_stationary_series_terms(model)?;
    Ok(series + direct)
}

/// The two terms of [`grad_stationary_series`], separately (each `p × m`).
pub fn grad_stationary_series_terms(model: &ParamHmm) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = model.kernel();
    let m = model.state_count();
    let p = model.param_dim();
    let pi = stationary_distribution(&k.q)?;
    let d = deviation_matrix(&k.q, &pi)?;
    // Σ_{k≥0} (Q^{k+1} - 1π) = Q D
    let shifted = &k.q * &d;
    let mut series = DMatrix::zeros(p, m);
    let mut direct = DMatrix::zeros(p, m);
    for r in 0..p {
        for x in 0..m {
            let mut acc = 0.0;
            let mut acc_direct = 0.0;
            for x0 in 0..m {
                for x1 in 0..m {
                    let q = k.q[(x0, x1)];
                    let score = k.dq[r][(x0, x1)] / q;
                    acc += pi[x0] * q * score * shifted[(x1, x)];
                }
                acc_direct += pi[x0] * k.dq[r][(x0, x)];
            }
            series[(r, x)] = acc;
            direct[(r, x)] = acc_direct;
        }
    }
    Ok((series, direct))
}

/// `|LHS - RHS|` for `π_θ(f) - π_*(f) = π_θ (Q_θ - Q_*) V_*`, where `*` is
/// `model`'s parameter and `θ` is `theta_alt`.
pub fn verify_difference_identity(model: &ParamHmm, theta_alt: &[f64], f: &DVector<f64>) -> Result<f64> {
    let alt = model.with_theta(theta_alt.to_vec())?;
    let q_star = model.transition();
    let q_alt = alt.transition();
    let pi_star = stationary_distribution(&q_star)?;
    let pi_alt = stationary_distribution(&q_alt)?;
    let v = solve_poisson(&q_star, &pi_star, f)?;
    let lhs = pi_alt.dot(f) - pi_star.dot(f);
    let rhs = (pi_alt.transpose() * (&q_alt - &q_star) * v)[(0, 0)];
    Ok((lhs - rhs).abs())
}

/// Largest total-variation distance `max_x ‖Q^k(x,·) - π‖_TV` for `k = 0..=k_max`.
pub fn tv_to_stationary(q: &DMatrix<f64>, k_max: usize) -> Result<Vec<f64>> {
    let pi = stationary_distribution(q)?;
    let m = q.nrows();
    let mut power = DMatrix::<f64>::identity(m, m);
    let mut out = Vec::with_capacity(k_max + 1);
    for _ in 0..=k_max {
        let worst = (0..m)
            .map(|x| 0.5 * (0..m).map(|j| (power[(x, j)] - pi[j]).abs()).sum::<f64>())
            .fold(0.0_f64, f64::max);
        out.push(worst);
        power = &power * q;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_catalog_model, Family};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_positive_q(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let mut q = DMatrix::from_fn(m, m, |_, _| rng.random_range(0.05..1.0));
        for i in 0..m {
            let s = q.row(i).sum();
            q.row_mut(i).scale_mut(1.0 / s);
        }
        q
    }

    /// Power iteration oracle: uniform start pushed through `Q^200`.
    fn power_iteration(q: &DMatrix<f64>) -> DVector<f64> {
        let m = q.nrows();
        let mut v = DVector::from_element(m, 1.0 / m as f64).transpose();
        for _ in 0..200 {
            v = v * q;
        }
        v.transpose()
    }

    #[test]
    fn symmetric_and_two_state() {
        let q = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let pi = stationary_distribution(&q).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-15 && (pi[1] - 0.5).abs() < 1e-15);
        let q = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6]);
        let pi = stationary_distribution(&q).unwrap();
        assert!((pi[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((pi[1] - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = random_positive_q(5, &mut rng);
            let pi = stationary_distribution(&q).unwrap();
            let oracle = power_iteration(&q);
            assert!((pi - oracle).amax() < 1e-10);
        }
    }

    #[test]
    fn zero_entry_names_a1() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.4, 0.6]);
        let err = stationary_distribution(&q).unwrap_err();
        assert!(err.to_string().contains("A1"));
    }

    #[test]
    fn poisson_examples() {
        let m1 = build_catalog_model("M1", None).unwrap();
        let q = m1.transition();
        let pi = stationary_distribution(&q).unwrap();
        let v = solve_poisson(&q, &pi, &DVector::from_element(2, 3.0)).unwrap();
        assert!(v.amax() < 1e-14);
        let v = solve_poisson(&q, &pi, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        // two-state closed form (f - πf)/(a + b)
        assert!((v[0] - (3.0 / 7.0) / 0.7).abs() < 1e-12);
        assert!((v[1] + (4.0 / 7.0) / 0.7).abs() < 1e-12);
        assert!(pi.dot(&v).abs() < 1e-14);
    }

    #[test]
    fn poisson_residual_and_bound_on_random_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let q = random_positive_q(4, &mut rng);
            let pi = stationary_distribution(&q).unwrap();
            let f = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let v = solve_poisson(&q, &pi, &f).unwrap();
            let resid = &v - &q * &v - (&f - DVector::from_element(4, pi.dot(&f)));
            assert!(resid.amax() <= 1e-10);
            assert!(pi.dot(&v).abs() < 1e-12);
            let sigma_minus = q.min();
            assert!(v.amax() <= 2.0 * f.amax() / sigma_minus);
        }
    }

    #[test]
    fn poisson_rejects_non_stationary_pi() {
        let q = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6]);
        let pi = DVector::from_vec(vec![0.5, 0.5]);
        assert!(matches!(
            solve_poisson(&q, &pi, &DVector::from_vec(vec![1.0, 0.0])),
            Err(Error::NotStationary { .. })
        ));
    }

    #[test]
    fn m1_gradient_closed_forms() {
        let m1 = build_catalog_model("M1", None).unwrap();
        let g = grad_stationary(&m1).unwrap();
        // π1 = b/(a+b)
        assert!((g[(0, 0)] + 0.4 / 0.49).abs() < 1e-12);
        assert!((g[(1, 0)] - 0.3 / 0.49).abs() < 1e-12);
        for r in 2..4 {
            assert_eq!(g.row(r).amax(), 0.0);
        }
        for r in 0..4 {
            assert!(g.row(r).sum().abs() < 1e-10);
        }
        let h = hess_stationary(&m1).unwrap();
        // ∂²π1/∂a² = 2b/(a+b)³
        assert!((h[0][0][0] - 2.0 * 0.4 / 0.343).abs() < 1e-10);
        for r in 0..4 {
            for s in 0..4 {
                if r >= 2 || s >= 2 {
                    assert_eq!(h[r][s].amax(), 0.0);
                }
            }
        }
    }

    fn fd_pi(model: &ParamHmm, r: usize, h: f64) -> DVector<f64> {
        let mut up = model.theta().to_vec();
        let mut dn = up.clone();
        up[r] += h;
        dn[r] -= h;
        let pu = stationary_distribution(&model.with_theta(up).unwrap().transition()).unwrap();
        let pd = stationary_distribution(&model.with_theta(dn).unwrap().transition()).unwrap();
        (pu - pd) / (2.0 * h)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let family = Family::Softmax {
            states: 3,
            symbols: 2,
        };
        for _ in 0..20 {
            let theta: Vec<f64> = (0..family.param_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let model = ParamHmm::new("soft", family, theta).unwrap();
            let a = StationaryAnalysis::new(&model).unwrap();
            let p = model.param_dim();
            let h = 1e-5;
            for r in 0..p {
                let fd = fd_pi(&model, r, h);
                assert!((&a.d_pi[r] - &fd).amax() < 1e-6 * fd.amax().max(1.0));
                assert!(a.d_pi[r].sum().abs() < 1e-10);
                for s in 0..p {
                    let mut up = model.theta().to_vec();
                    let mut dn = up.clone();
                    up[s] += h;
                    dn[s] -= h;
                    let gu = StationaryAnalysis::new(&model.with_theta(up).unwrap()).unwrap();
                    let gd = StationaryAnalysis::new(&model.with_theta(dn).unwrap()).unwrap();
                    let fd2 = (&gu.d_pi[r] - &gd.d_pi[r]) / (2.0 * h);
                    assert!((a.d2(r, s) - &fd2).amax() < 1e-4);
                    assert!((a.d2(r, s) - a.d2(s, r)).amax() <= 1e-8);
                }
            }
            let series = grad_stationary_series(&model).unwrap();
            let linear = grad_stationary(&model).unwrap();
            assert!((series - linear).amax() < 1e-9);
        }
    }

    #[test]
    fn series_term_alone_misses_the_test_function_derivative() {
        let m1 = build_catalog_model("M1", None).unwrap();
        let (series, direct) = grad_stationary_series_terms(&m1).unwrap();
        let linear = grad_stationary(&m1).unwrap();
        assert!((&series + &direct - &linear).amax() < 1e-12);
        // the frozen-test-function term alone is off by E_π[∇q(X0, x)]
        assert!(direct.amax() > 0.1);
        assert!((&series - &linear).amax() > 0.1);
    }

    #[test]
    fn difference_identity() {
        let m1 = build_catalog_model("M1", None).unwrap();
        let f = DVector::from_vec(vec![1.0, 0.0]);
        assert!(verify_difference_identity(&m1, m1.theta(), &f).unwrap() < 1e-15);
        let r = verify_difference_identity(&m1, &[0.35, 0.4, 0.2, 0.8], &f).unwrap();
        assert!(r <= 1e-12);
        let c = DVector::from_element(2, 2.5);
        assert!(verify_difference_identity(&m1, &[0.35, 0.4, 0.2, 0.8], &c).unwrap() <= 1e-12);
    }

    #[test]
    fn geometric_ergodicity_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let q = random_positive_q(4, &mut rng);
            let sigma_minus = q.min();
            for (k, tv) in tv_to_stationary(&q, 30).unwrap().into_iter().enumerate() {
                assert!(tv <= (1.0 - sigma_minus).powi(k as i32) + 1e-12);
            }
        }
    }
}
