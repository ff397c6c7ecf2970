//! Grid-sampled uniform-ergodicity and moment constants, and the assumption
//! verdicts built from them.

use serde::{Deserialize, Serialize};

use super::ParamHmm;
use crate::error::{Error, Result};
use crate::linalg::{pair_count, pair_index};

/// Axis-aligned parameter box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if lower.is_empty() || lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument("empty parameter box".into()));
        }
        Ok(Self { lower, upper })
    }

    /// The single point `theta`.
    pub fn point(theta: &[f64]) -> Self {
        Self {
            lower: theta.to_vec(),
            upper: theta.to_vec(),
        }
    }

    /// `theta ± radius` in every coordinate.
    pub fn around(theta: &[f64], radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::InvalidArgument(format!("box radius {radius} must be >= 0")));
        }
        Self::new(
            theta.iter().map(|t| t - radius).collect(),
            theta.iter().map(|t| t + radius).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| *l <= *t && *t <= *u)
    }

    /// Clamps into the box shrunk by `margin` on every side (never past the
    /// midpoint).
    pub fn project(&self, theta: &[f64], margin: f64) -> Vec<f64> {
        theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, u))| {
                let half = 0.5 * (u - l);
                let m = margin.min(half);
                t.clamp(l + m, u - m)
            })
            .collect()
    }

    /// Intersects with `[0, 1]` along the coordinates flagged in `unit`.
    pub fn clip_unit(&self, unit: &[bool]) -> Result<Self> {
        let lower = self
            .lower
            .iter()
            .zip(unit)
            .map(|(l, &u)| if u { l.max(0.0) } else { *l })
            .collect();
        let upper = self
            .upper
            .iter()
            .zip(unit)
            .map(|(h, &u)| if u { h.min(1.0) } else { *h })
            .collect();
        Self::new(lower, upper)
    }

    /// Tensor grid with `per_dim` points per coordinate (the midpoint when
    /// `per_dim == 1`).
    pub fn grid(&self, per_dim: usize) -> Result<Vec<Vec<f64>>> {
        if per_dim == 0 {
            return Err(Error::InvalidArgument("grid_per_dim must be >= 1".into()));
        }
        let total = (per_dim as f64).powi(self.dim() as i32);
        if total > 1e6 {
            return Err(Error::TooLarge {
                what: "parameter grid",
                size: total,
                limit: 1e6,
            });
        }
        let axes: Vec<Vec<f64>> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| {
                if per_dim == 1 || l == u {
                    vec![0.5 * (l + u)]
                } else {
                    (0..per_dim)
                        .map(|i| l + (u - l) * i as f64 / (per_dim - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let mut points = vec![Vec::with_capacity(self.dim())];
        for axis in &axes {
            points = points
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        Ok(points)
    }
}

/// Grid-sampled model constants.
#[derive(Debug, Clone, Serialize)]
pub struct ModelConstants {
    pub sigma_minus: f64,
    pub sigma_plus: f64,
    /// `1 - sigma_minus / sigma_plus`, present only when A1 holds.
    pub rho: Option<f64>,
    pub b_plus: f64,
    /// `inf over the grid of sum_x g(y|x)` per probed observation value.
    pub b_minus: Vec<(f64, f64)>,
    /// Supremum over the grid of `|grad log q(x, x')|`.
    pub grad_log_q_sup: f64,
    pub hess_log_q_sup: f64,
    /// Supremum over grid and probe points of `|grad log g(y|x)|`.
    pub grad_log_g_sup: f64,
    pub grid_points: usize,
    pub a1_holds: bool,
    pub a2_holds: bool,
    pub a5_holds: bool,
    pub sigma_minus_witness: Vec<f64>,
    pub diagnostics: Vec<String>,
}

/// Evaluates the constants over `grid_per_dim^p` points of `bx`.
///
/// Grid points are evaluated on the closed parameter region, so boxes that
/// touch the boundary (zero transition entries, degenerate emissions) are
/// accepted and show up as failed assumptions.
pub fn compute_constants(model: &ParamHmm, bx: &ParamBox, grid_per_dim: usize) -> Result<ModelConstants> {
    if bx.dim() != model.param_dim() {
        return Err(Error::Dimension {
            expected: model.param_dim(),
            found: bx.dim(),
        });
    }
    let grid = bx.grid(grid_per_dim)?;
    let p = model.param_dim();
    let mut sigma_minus = f64::INFINITY;
    let mut sigma_plus: f64 = 0.0;
    let mut witness = grid[0].clone();
    let mut b_plus: f64 = 0.0;
    let mut grad_log_q_sup: f64 = 0.0;
    let mut hess_log_q_sup: f64 = 0.0;
    let mut grad_log_g_sup: f64 = 0.0;
    let mut b_minus: Vec<(f64, f64)> = Vec::new();
    let mut diagnostics = Vec::new();
    let mut degenerate: Vec<(f64, usize, Vec<f64>)> = Vec::new();

    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; pair_count(p)];
    for point in &grid {
        let at = model.with_theta_closed(point.clone()).map_err(|e| {
            Error::InvalidArgument(format!("model evaluation failed at grid point {point:?}: {e}"))
        })?;
        let k = at.kernel();
        let m = at.state_count();
        for i in 0..m {
            for j in 0..m {
                let q = k.q[(i, j)];
                if q < sigma_minus {
                    sigma_minus = q;
                    witness = point.clone();
                }
                sigma_plus = sigma_plus.max(q);
                let (gn, hn) = if q > 0.0 {
                    let g: Vec<f64> = (0..p).map(|r| k.dq[r][(i, j)] / q).collect();
                    let mut h2: f64 = 0.0;
                    for r in 0..p {
                        for s in 0..p {
                            let v = k.d2q[pair_index(r, s, p)][(i, j)] / q - g[r] * g[s];
                            h2 += v * v;
                        }
                    }
                    (g.iter().map(|v| v * v).sum::<f64>().sqrt(), h2.sqrt())
                } else {
                    (f64::INFINITY, f64::INFINITY)
                };
                grad_log_q_sup = grad_log_q_sup.max(gn);
                hess_log_q_sup = hess_log_q_sup.max(hn);
            }
        }
        let probes = at.emission_probe_points();
        if b_minus.is_empty() {
            b_minus = probes.iter().map(|&y| (y, f64::INFINITY)).collect();
        }
        for (yi, &y) in probes.iter().enumerate() {
            let mut mass = 0.0;
            for x in 0..m {
                let lg = at.emission_derivs_into(y, x, &mut grad, &mut hess)?;
                let g = lg.exp();
                mass += g;
                b_plus = b_plus.max(g);
                if g == 0.0 {
                    degenerate.push((y, x, point.clone()));
                } else {
                    grad_log_g_sup = grad_log_g_sup.max(grad.iter().map(|v| v * v).sum::<f64>().sqrt());
                }
            }
            // probe sets of continuous families depend on theta; only the
            // shared prefix is tracked for b_minus
            if yi < b_minus.len() && b_minus[yi].0 == y {
                b_minus[yi].1 = b_minus[yi].1.min(mass);
            }
        }
    }

    let a1_holds = sigma_minus > 0.0 && sigma_plus.is_finite();
    if !a1_holds {
        diagnostics.push(format!(
            "A1: minimum transition probability {sigma_minus} attained at theta = {witness:?}"
        ));
    }
    let zero_b_minus: Vec<f64> = b_minus.iter().filter(|(_, b)| *b <= 0.0).map(|(y, _)| *y).collect();
    for y in &zero_b_minus {
        diagnostics.push(format!("A2: b-(y) = 0 at y = {y}"));
    }
    if let Some((y, x, point)) = degenerate.first() {
        diagnostics.push(format!(
            "A2: b-(y) = 0 risk at y = {y}: emission mass of state {} vanishes at theta = {point:?}",
            x + 1
        ));
    }
    let a2_holds = b_plus.is_finite() && zero_b_minus.is_empty() && degenerate.is_empty();
    let a5_holds = grad_log_q_sup.is_finite()
        && hess_log_q_sup.is_finite()
        && grad_log_g_sup.is_finite()
        && degenerate.is_empty();
    if !a5_holds {
        diagnostics.push("A5: unbounded log-derivative on the grid".into());
    }
    Ok(ModelConstants {
        sigma_minus,
        sigma_plus,
        rho: a1_holds.then(|| 1.0 - sigma_minus / sigma_plus),
        b_plus,
        b_minus,
        grad_log_q_sup,
        hess_log_q_sup,
        grad_log_g_sup,
        grid_points: grid.len(),
        a1_holds,
        a2_holds,
        a5_holds,
        sigma_minus_witness: witness,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssumptionStatus {
    Pass,
    Fail,
    /// Identifiability is a property declared per catalog model.
    Declared,
    /// Smoothness holds because the derivatives are analytic.
    ByConstruction,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionVerdict {
    pub id: &'static str,
    pub status: AssumptionStatus,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub model: String,
    pub theta: Vec<f64>,
    pub param_box: ParamBox,
    pub constants: ModelConstants,
    pub verdicts: Vec<AssumptionVerdict>,
}

impl AssumptionReport {
    /// True when every algorithmically checkable assumption passes.
    pub fn all_checkable_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.status != AssumptionStatus::Fail)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.verdicts
            .iter()
            .filter(|v| v.status == AssumptionStatus::Fail)
            .map(|v| v.id)
            .collect()
    }
}

pub fn check_assumptions(model: &ParamHmm, bx: &ParamBox, grid_per_dim: usize) -> Result<AssumptionReport> {
    let c = compute_constants(model, bx, grid_per_dim)?;
    let pick = |ok: bool| if ok { AssumptionStatus::Pass } else { AssumptionStatus::Fail };
    let find = |prefix: &str| -> String {
        c.diagnostics
            .iter()
            .filter(|d| d.starts_with(prefix))
            .cloned()
            .collect::<Vec<_>>()
            .join("; ")
    };
    let identifiability = model
        .label()
        .parse::<super::CatalogModel>()
        .map(|c| c.identifiability().to_string())
        .unwrap_or_else(|_| "not declared for non-catalog models".into());
    let verdicts = vec![
        AssumptionVerdict {
            id: "A1",
            status: pick(c.a1_holds),
            detail: if c.a1_holds {
                format!("sigma- = {}, sigma+ = {}", c.sigma_minus, c.sigma_plus)
            } else {
                find("A1")
            },
        },
        AssumptionVerdict {
            id: "A2",
            status: pick(c.a2_holds),
            detail: if c.a2_holds {
                format!("b+ = {}", c.b_plus)
            } else {
                find("A2")
            },
        },
        AssumptionVerdict {
            id: "A3",
            status: AssumptionStatus::Declared,
            detail: format!("declared by catalog, not checked: {identifiability}"),
        },
        AssumptionVerdict {
            id: "A4",
            status: AssumptionStatus::ByConstruction,
            detail: "holds by construction: analytic derivatives".into(),
        },
        AssumptionVerdict {
            id: "A5",
            status: pick(c.a5_holds),
            detail: if c.a5_holds {
                format!(
                    "sup |grad log q| = {}, sup |hess log q| = {}, sup |grad log g| on probes = {}",
                    c.grad_log_q_sup, c.hess_log_q_sup, c.grad_log_g_sup
                )
            } else {
                find("A5")
            },
        },
    ];
    Ok(AssumptionReport {
        model: model.label().to_string(),
        theta: model.theta().to_vec(),
        param_box: bx.clone(),
        constants: c,
        verdicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_catalog_model;

    #[test]
    fn m1_point_constants() {
        let m = build_catalog_model("M1", None).unwrap();
        let c = compute_constants(&m, &ParamBox::point(m.theta()), 1).unwrap();
        assert!((c.sigma_minus - 0.3).abs() < 1e-15);
        assert!((c.sigma_plus - 0.7).abs() < 1e-15);
        assert!((c.rho.unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!(c.b_plus <= 1.0);
        assert!(c.a1_holds);
    }

    #[test]
    fn m1_box_reaching_zero_violates_a1() {
        let m = build_catalog_model("M1", Some(&[0.05, 0.4, 0.2, 0.8])).unwrap();
        let bx = ParamBox::around(m.theta(), 0.05).unwrap();
        let c = compute_constants(&m, &bx, 3).unwrap();
        assert!(!c.a1_holds);
        assert_eq!(c.sigma_minus, 0.0);
        assert!(c.rho.is_none());
    }

    #[test]
    fn m1_default_box_passes() {
        let m = build_catalog_model("M1", None).unwrap();
        let bx = ParamBox::around(m.theta(), 0.05).unwrap();
        let r = check_assumptions(&m, &bx, 3).unwrap();
        assert!(r.all_checkable_pass(), "{:?}", r.verdicts);
        assert_eq!(r.constants.grid_points, 81);
        // grid oracle: min entry over the box is a at its lower corner 0.25
        assert!((r.constants.sigma_minus - 0.25).abs() < 1e-12);
        assert!((r.constants.sigma_plus - 0.75).abs() < 1e-12);
        assert_eq!(r.verdicts[2].status, AssumptionStatus::Declared);
        assert_eq!(r.verdicts[3].status, AssumptionStatus::ByConstruction);
    }

    #[test]
    fn emission_touching_zero_flags_a2_at_y1() {
        let m = build_catalog_model("M1", Some(&[0.3, 0.4, 0.05, 0.8])).unwrap();
        let bx = ParamBox::around(m.theta(), 0.05).unwrap();
        let r = check_assumptions(&m, &bx, 3).unwrap();
        assert!(r.failed().contains(&"A2"));
        let a2 = &r.verdicts[1].detail;
        assert!(a2.contains("y = 1"), "{a2}");
    }

    #[test]
    fn m4_b_plus_is_gaussian_mode() {
        let m = build_catalog_model("M4", None).unwrap();
        let c = compute_constants(&m, &ParamBox::point(m.theta()), 1).unwrap();
        let mode = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((c.b_plus - mode).abs() < 1e-12);
        assert!(c.a2_holds);
    }

    #[test]
    fn grid_bounds_every_entry() {
        let m = build_catalog_model("M2", None).unwrap();
        let bx = ParamBox::around(m.theta(), 0.05).unwrap();
        let c = compute_constants(&m, &bx, 3).unwrap();
        for pt in bx.grid(3).unwrap() {
            let q = m.with_theta_closed(pt).unwrap().transition();
            assert!(q.iter().all(|&v| c.sigma_minus <= v && v <= c.sigma_plus));
        }
    }

    #[test]
    fn empty_box_rejected() {
        assert!(ParamBox::new(vec![0.5], vec![0.4]).is_err());
        assert!(ParamBox::new(vec![], vec![]).is_err());
        let m = build_catalog_model("M1", None).unwrap();
        assert!(compute_constants(&m, &ParamBox::point(m.theta()), 0).is_err());
    }
}
