//! Distortion of maps between Riemannian charts, conformality checks and the
//! invariance of n-harmonic functions under conformal maps.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aop::{make_aoperator, weak_residual, TestBasis};
use crate::coords::{build_chart, invert_chart, ChartRequest, ChartResult};
use crate::error::{Error, Result};
use crate::geometry::{christoffel, invert_spd, ConformalFactor, MetricField, SampledMap, ScaledMetric};
use crate::grid::{gradient, make_ball, pairwise_sum, DiscreteBall, DiscreteScalarField};
use crate::solver::SolverConfig;

/// Nodes with `|det Dφ|` below this are excluded from distortion maxima.
pub const DEGENERATE_DET: f64 = 1e-12;

/// Central-difference Jacobian of `φ` with step `h`, the map being sampled at
/// grid resolution.
pub fn sampled_jacobian(phi: &dyn SampledMap, x: &[f64], h: f64) -> DMatrix<f64> {
    crate::geometry::maps::fd_jacobian(phi, x, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JacobianSign {
    #[serde(rename = "+1")]
    Positive,
    #[serde(rename = "-1")]
    Negative,
    #[serde(rename = "mixed")]
    Mixed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistortionReport {
    /// Grid nodes at which the fields are sampled (interior nodes).
    pub nodes: Vec<usize>,
    /// `‖Dφ‖_op^n / |J_φ|`; `None` at degenerate nodes.
    pub k_euclidean_field: Vec<Option<f64>>,
    /// `‖Dφ‖_g^n / Det_g(Dφ)` with `‖Dφ‖_g = (tr(g⁻¹φ*h)/n)^{1/2}`.
    pub k_riemannian_field: Vec<Option<f64>>,
    /// `Det_g(Dφ) = det(g⁻¹φ*h)^{1/2}`.
    pub det_g_field: Vec<Option<f64>>,
    /// `c = tr(g⁻¹φ*h)/n`.
    pub conformal_factor_field: Vec<f64>,
    /// `max|φ*h - c g| / max|g|` per node.
    pub conformality_residual_field: Vec<f64>,
    pub ess_sup_k: f64,
    pub ess_sup_k_euclidean: f64,
    pub min_k: f64,
    pub min_k_euclidean: f64,
    pub conformality_residual: f64,
    pub jacobian_sign: JacobianSign,
    pub degenerate_nodes: Vec<usize>,
}

struct NodeDistortion {
    det: f64,
    k_e: Option<f64>,
    k_g: Option<f64>,
    det_g: Option<f64>,
    c: f64,
    residual: f64,
}

fn node_distortion(
    phi: &dyn SampledMap,
    g: &dyn MetricField,
    h: &dyn MetricField,
    x: &[f64],
    step: f64,
) -> Result<NodeDistortion> {
    let n = x.len();
    let y = phi.eval(x);
    if !h.domain().contains(&y) {
        return Err(Error::DomainEscape {
            point: y,
            what: "target metric",
        });
    }
    let jac = sampled_jacobian(phi, x, step);
    let det = jac.determinant();
    let gx = g.eval(x);
    let gp = invert_spd(&gx, x)?;
    let pulled = jac.transpose() * h.eval(&y) * &jac;
    let pulled = 0.5 * (&pulled + pulled.transpose());
    let m = &gp.inverse * &pulled;
    let c = m.trace() / n as f64;
    let residual = (&pulled - &gx * c).amax() / gx.amax();
    if det.abs() < DEGENERATE_DET {
        return Ok(NodeDistortion {
            det,
            k_e: None,
            k_g: None,
            det_g: None,
            c,
            residual,
        });
    }
    let sigma_max = jac.clone().singular_values().max();
    let k_e = sigma_max.powi(n as i32) / det.abs();
    let det_g = m.determinant().max(0.0).sqrt();
    let k_g = if det_g > 0.0 {
        Some(c.max(0.0).powf(n as f64 / 2.0) / det_g)
    } else {
        None
    };
    Ok(NodeDistortion {
        det,
        k_e: Some(k_e),
        k_g,
        det_g: Some(det_g),
        c,
        residual,
    })
}

/// Pointwise distortion of `φ: (grid region, g) → (ℝⁿ, h)` at the interior
/// nodes of `grid`, with `Dφ` sampled by central differences of step `h`.
pub fn distortion(
    phi: &dyn SampledMap,
    g: &dyn MetricField,
    h: &dyn MetricField,
    grid: &Arc<DiscreteBall>,
) -> Result<DistortionReport> {
    let n = grid.dim();
    if phi.dim_in() != n || g.dim() != n || h.dim() != phi.dim_out() {
        return Err(Error::spec("map and metric dimensions must match the grid"));
    }
    let nodes = grid.interior_nodes().to_vec();
    let per: Vec<NodeDistortion> = nodes
        .par_iter()
        .map(|&i| node_distortion(phi, g, h, &grid.coords(i), grid.h()))
        .collect::<Result<_>>()?;
    let mut degenerate_nodes = Vec::new();
    let (mut pos, mut neg) = (false, false);
    for (d, &i) in per.iter().zip(&nodes) {
        if d.k_e.is_none() {
            degenerate_nodes.push(i);
        } else if d.det > 0.0 {
            pos = true;
        } else {
            neg = true;
        }
    }
    let jacobian_sign = match (pos, neg) {
        (true, false) => JacobianSign::Positive,
        (false, true) => JacobianSign::Negative,
        _ => JacobianSign::Mixed,
    };
    let fold = |v: &dyn Fn(&NodeDistortion) -> Option<f64>, f: fn(f64, f64) -> f64, init: f64| {
        per.iter().filter_map(v).fold(init, f)
    };
    Ok(DistortionReport {
        ess_sup_k: fold(&|d| d.k_g, f64::max, 1.0),
        ess_sup_k_euclidean: fold(&|d| d.k_e, f64::max, 1.0),
        min_k: fold(&|d| d.k_g, f64::min, f64::INFINITY),
        min_k_euclidean: fold(&|d| d.k_e, f64::min, f64::INFINITY),
        conformality_residual: per.iter().map(|d| d.residual).fold(0.0, f64::max),
        k_euclidean_field: per.iter().map(|d| d.k_e).collect(),
        k_riemannian_field: per.iter().map(|d| d.k_g).collect(),
        det_g_field: per.iter().map(|d| d.det_g).collect(),
        conformal_factor_field: per.iter().map(|d| d.c).collect(),
        conformality_residual_field: per.iter().map(|d| d.residual).collect(),
        nodes,
        jacobian_sign,
        degenerate_nodes,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalizationCheck {
    /// `‖g‖_op^n / det g`.
    pub ratio_g: f64,
    /// `‖h⁻¹‖_op^n / det h⁻¹`.
    pub ratio_h: f64,
    /// `(1 + eps)^{1/2}`.
    pub threshold: f64,
    pub certified: bool,
    /// Entrywise deviation from the identity, along the directions of `g` and
    /// `h`, at which a ratio first reaches the threshold; `None` if it never
    /// does (identity or conformal input).
    pub delta_needed: Option<f64>,
}

fn distortion_ratio(m: &DMatrix<f64>) -> Option<f64> {
    let e = m.clone().symmetric_eigen().eigenvalues;
    let lmin = e.min();
    if !(lmin > 0.0) {
        return None;
    }
    let n = m.nrows() as i32;
    Some(e.max().powi(n) / e.iter().product::<f64>())
}

/// Smallest `δ` with `ratio(I + δD) ≥ threshold`, `D = (m - I)/max|m - I|`,
/// where `ratio` is applied to the matrix or (for `inverse`) its inverse.
fn threshold_deviation(m: &DMatrix<f64>, inverse: bool, threshold: f64) -> Option<f64> {
    let n = m.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let dev = m - &id;
    let scale = dev.amax();
    if scale == 0.0 {
        return None;
    }
    let dir = dev / scale;
    let ratio = |d: f64| -> Option<f64> {
        let a = &id + &dir * d;
        if inverse {
            distortion_ratio(&a.try_inverse()?)
        } else {
            distortion_ratio(&a)
        }
    };
    // Largest δ keeping I + δD positive definite, capped.
    let lmin_dir = dir.clone().symmetric_eigen().eigenvalues.min();
    let mut hi = if lmin_dir < 0.0 { (1.0 / -lmin_dir) * (1.0 - 1e-9) } else { 1e6 };
    if ratio(hi).is_none_or(|r| r < threshold) {
        return None;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid).is_none_or(|r| r >= threshold) {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Some(hi)
}

pub fn localization_bound(g_at_p: &DMatrix<f64>, h_at_fp: &DMatrix<f64>, eps: f64) -> Result<LocalizationCheck> {
    if !(eps > 0.0) {
        return Err(Error::spec("eps must be positive"));
    }
    let here = vec![f64::NAN; g_at_p.nrows()];
    invert_spd(g_at_p, &here)?;
    let hp = invert_spd(h_at_fp, &here)?;
    let ratio_g = distortion_ratio(g_at_p).expect("checked positive definite");
    let ratio_h = distortion_ratio(&hp.inverse).expect("checked positive definite");
    let threshold = (1.0 + eps).sqrt();
    let delta_needed = [
        threshold_deviation(g_at_p, false, threshold),
        threshold_deviation(h_at_fp, true, threshold),
    ]
    .into_iter()
    .flatten()
    .reduce(f64::min);
    Ok(LocalizationCheck {
        ratio_g,
        ratio_h,
        threshold,
        certified: ratio_g <= threshold && ratio_h <= threshold,
        delta_needed,
    })
}

/// `v∘φ` on `grid`, interpolating `v` cubically on its own grid.
pub fn compose(v: &DiscreteScalarField, phi: &dyn SampledMap, grid: &Arc<DiscreteBall>) -> Result<DiscreteScalarField> {
    let values = (0..grid.num_nodes())
        .into_par_iter()
        .map(|i| {
            let y = phi.eval(&grid.coords(i));
            v.sample_cubic(&y).ok_or(Error::DomainEscape {
                point: y,
                what: "target grid",
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DiscreteScalarField::new(grid.clone(), values)
}

/// Interior nodes at least one cell away from the region's boundary.
pub fn margin_mask(grid: &DiscreteBall) -> Vec<bool> {
    let mut mask = vec![false; grid.num_nodes()];
    for i in grid.nodes_with_margin(grid.h()) {
        mask[i] = true;
    }
    mask
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PullbackCheck {
    /// Weak residual of `v∘φ` under `(g, p = n)`.
    pub residual: f64,
    /// Conformality residual of `φ` from `(g)` to `(h)` on the grid.
    pub conformality_residual: f64,
}

pub fn pullback_nharmonic_residual(
    v: &DiscreteScalarField,
    phi: &dyn SampledMap,
    g: Arc<dyn MetricField>,
    h: &dyn MetricField,
    grid: &Arc<DiscreteBall>,
) -> Result<PullbackCheck> {
    let u = compose(v, phi, grid)?;
    let a = make_aoperator(g.clone(), grid.dim() as f64, 0.0)?;
    let residual = weak_residual(&a, &u, &TestBasis::Masked(margin_mask(grid)))?;
    let conformality_residual = distortion(phi, g.as_ref(), h, grid)?.conformality_residual;
    Ok(PullbackCheck {
        residual,
        conformality_residual,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainRuleCheck {
    /// `max |∇(v∘φ) - Dφᵀ (∇v)∘φ|`.
    pub gradient_error: f64,
    /// `max (|d(v∘φ)|_g^n - n^n K Det_g(Dφ) (|dv|_h^n)∘φ)`; nonpositive up to
    /// discretization error.
    pub inequality_excess: f64,
}

fn dual_norm(metric: &DMatrix<f64>, x: &[f64], q: &[f64]) -> Result<f64> {
    let inv = invert_spd(metric, x)?.inverse;
    let n = q.len();
    let mut s = 0.0;
    for a in 0..n {
        for b in 0..n {
            s += inv[(a, b)] * q[a] * q[b];
        }
    }
    Ok(s.max(0.0).sqrt())
}

pub fn chain_rule_check(
    v: &DiscreteScalarField,
    phi: &dyn SampledMap,
    g: &dyn MetricField,
    h: &dyn MetricField,
    grid: &Arc<DiscreteBall>,
) -> Result<ChainRuleCheck> {
    let n = grid.dim();
    let u = compose(v, phi, grid)?;
    let nodes = grid.nodes_with_margin(grid.h());
    let per = nodes
        .par_iter()
        .map(|&i| -> Result<(f64, f64)> {
            let x = grid.coords(i);
            let du = gradient(&u, i)?;
            let y = phi.eval(&x);
            let (_, dv) = v.sample_cubic_grad(&y).ok_or(Error::DomainEscape {
                point: y.clone(),
                what: "target grid",
            })?;
            let jac = sampled_jacobian(phi, &x, grid.h());
            let mut err: f64 = 0.0;
            for j in 0..n {
                let chain: f64 = (0..n).map(|a| jac[(a, j)] * dv[a]).sum();
                err = err.max((du[j] - chain).abs());
            }
            let d = node_distortion(phi, g, h, &x, grid.h())?;
            let excess = match (d.k_g, d.det_g) {
                (Some(k), Some(det_g)) => {
                    let lhs = dual_norm(&g.eval(&x), &x, &du)?.powi(n as i32);
                    let rhs = (n as f64).powi(n as i32) * k * det_g * dual_norm(&h.eval(&y), &y, &dv)?.powi(n as i32);
                    lhs - rhs
                }
                _ => f64::NEG_INFINITY,
            };
            Ok((err, excess))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainRuleCheck {
        gradient_error: per.iter().map(|p| p.0).fold(0.0, f64::max),
        inequality_excess: per.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubstitutionCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
}

/// Compares `∫ f∘φ Det_g(Dφ) dV_g` over `grid` with `∫ f dV_h` over the grid
/// of `f`. Both are nodal sums over all nodes, so `f` should vanish outside
/// `φ(grid)` and near the boundaries of both regions.
pub fn substitution_check(
    f: &DiscreteScalarField,
    phi: &dyn SampledMap,
    g: &dyn MetricField,
    h: &dyn MetricField,
    grid: &Arc<DiscreteBall>,
) -> Result<SubstitutionCheck> {
    let lhs_terms = (0..grid.num_nodes())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let x = grid.coords(i);
            let y = phi.eval(&x);
            let fy = f.sample_cubic(&y).ok_or(Error::DomainEscape {
                point: y.clone(),
                what: "target grid",
            })?;
            if fy == 0.0 {
                return Ok(0.0);
            }
            let gx = g.eval(&x);
            let gp = invert_spd(&gx, &x)?;
            let jac = sampled_jacobian(phi, &x, grid.h());
            let pulled = jac.transpose() * h.eval(&y) * &jac;
            let det_g = (&gp.inverse * pulled).determinant().abs().sqrt();
            Ok(fy * det_g * gp.sqrt_det())
        })
        .collect::<Result<Vec<_>>>()?;
    let tb = &f.ball;
    let rhs_terms = (0..tb.num_nodes())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            if f.values[i] == 0.0 {
                return Ok(0.0);
            }
            let y = tb.coords(i);
            Ok(f.values[i] * invert_spd(&h.eval(&y), &y)?.sqrt_det())
        })
        .collect::<Result<Vec<_>>>()?;
    let lhs = pairwise_sum(&lhs_terms) * grid.h().powi(grid.dim() as i32);
    let rhs = pairwise_sum(&rhs_terms) * tb.h().powi(tb.dim() as i32);
    Ok(SubstitutionCheck {
        lhs,
        rhs,
        rel_err: (lhs - rhs).abs() / (rhs.abs() + 1e-30),
    })
}

#[derive(Clone, Debug)]
pub struct Factorization {
    /// n-harmonic chart for `h` near `φ(x0)`.
    pub v_chart: ChartResult,
    /// `u = v∘φ` on a ball around `x0`.
    pub u: Vec<DiscreteScalarField>,
    /// Weak residuals of the `u^k` under `(g, p = n)`.
    pub u_residuals: Vec<f64>,
    /// `max |v⁻¹(u(x)) - φ(x)|` over interior nodes.
    pub recomposition_error: f64,
    pub conformality_residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorReport {
    pub v_chart: crate::coords::ChartReport,
    pub u_residuals: Vec<f64>,
    pub recomposition_error: f64,
    pub conformality_residual: f64,
}

impl Factorization {
    pub fn report(&self) -> FactorReport {
        FactorReport {
            v_chart: self.v_chart.report(),
            u_residuals: self.u_residuals.clone(),
            recomposition_error: self.recomposition_error,
            conformality_residual: self.conformality_residual,
        }
    }
}

/// Cells per radius of the source ball in [`factor_map`].
const FACTOR_CELLS: f64 = 32.0;

/// Writes `φ = v⁻¹∘u` near `x0`, with `v` an n-harmonic chart for `h` at
/// `φ(x0)` and `u = v∘φ`.
pub fn factor_map(
    phi: Arc<dyn SampledMap>,
    g: Arc<dyn MetricField>,
    h: Arc<dyn MetricField>,
    x0: &[f64],
    conformality_tol: f64,
    solver: &SolverConfig,
) -> Result<Factorization> {
    let n = g.dim();
    let y0 = phi.eval(x0);
    let mut req = ChartRequest::new(h.clone(), n as f64, y0.clone(), DMatrix::identity(n, n));
    req.solver = solver.clone();
    let v_chart = build_chart(&req)?.require_success()?;
    let eps = v_chart.eps_used;
    let jac0 = phi.jacobian(x0);
    let stretch = jac0.clone().singular_values().max();
    if !(stretch > 0.0) {
        return Err(Error::DegenerateJacobian("Dφ(x0) vanishes".into()));
    }
    let rho = 0.5 * eps / stretch;
    let grid = make_ball(n, rho, x0, rho / FACTOR_CELLS)?;
    let conformality_residual = distortion(phi.as_ref(), g.as_ref(), h.as_ref(), &grid)?.conformality_residual;
    if conformality_residual > conformality_tol {
        return Err(Error::NonConformalInput {
            residual: conformality_residual,
            tolerance: conformality_tol,
        });
    }
    let u = v_chart
        .coords
        .iter()
        .map(|vk| compose(vk, phi.as_ref(), &grid))
        .collect::<Result<Vec<_>>>()?;
    let a = make_aoperator(g.clone(), n as f64, 0.0)?;
    let mask = TestBasis::Masked(margin_mask(&grid));
    let u_residuals = u
        .iter()
        .map(|uk| weak_residual(&a, uk, &mask))
        .collect::<Result<Vec<_>>>()?;
    let recomposition_error = grid
        .interior_nodes()
        .par_iter()
        .map(|&i| -> Result<f64> {
            let x = grid.coords(i);
            let target: Vec<f64> = u.iter().map(|uk| uk.values[i]).collect();
            let fx = phi.eval(&x);
            let back = invert_chart(&v_chart.coords, &target, fx.clone())?;
            Ok(back.iter().zip(&fx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(Factorization {
        v_chart,
        u,
        u_residuals,
        recomposition_error,
        conformality_residual,
    })
}

/// `δ_g ω = -|g|^{-1/2} ∂_i(|g|^{1/2} g^{ij} ω_j)` by central differences.
pub fn codifferential_divergence(
    g: &dyn MetricField,
    omega: &dyn Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    step: f64,
) -> Result<f64> {
    let n = x.len();
    let flux = |y: &[f64], i: usize| -> Result<f64> {
        let pt = invert_spd(&g.eval(y), y)?;
        let w = omega(y);
        Ok(pt.sqrt_det() * (0..n).map(|j| pt.inverse[(i, j)] * w[j]).sum::<f64>())
    };
    let mut div = 0.0;
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + step;
        let plus = flux(&xp, i)?;
        xp[i] = x[i] - step;
        let minus = flux(&xp, i)?;
        xp[i] = x[i];
        div += (plus - minus) / (2.0 * step);
    }
    Ok(-div / invert_spd(&g.eval(x), x)?.sqrt_det())
}

/// `δ_g ω = -g^{ij}(∂_i ω_j - Γ^k_{ij} ω_k)` with analytic Christoffel
/// symbols and central differences for `∂_i ω_j`.
pub fn codifferential_covariant(
    g: Arc<dyn MetricField>,
    omega: &dyn Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    step: f64,
) -> Result<f64> {
    let n = x.len();
    let gam = christoffel(g.clone()).at(x)?;
    let ginv = invert_spd(&g.eval(x), x)?.inverse;
    let w = omega(x);
    let mut dw = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + step;
        let plus = omega(&xp);
        xp[i] = x[i] - step;
        let minus = omega(&xp);
        xp[i] = x[i];
        for j in 0..n {
            dw[(i, j)] = (plus[j] - minus[j]) / (2.0 * step);
        }
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let cov = dw[(i, j)] - (0..n).map(|k| gam.get(k, i, j) * w[k]).sum::<f64>();
            s += ginv[(i, j)] * cov;
        }
    }
    Ok(-s)
}

/// `max |δ_{cg} ω - c^{-n/2} δ_g(c^{(n-2)/2} ω)|` over the interior nodes of
/// `grid`; the two sides are discretized independently (covariant and
/// divergence forms), so the difference is a discretization error.
pub fn codifferential_identity_residual(
    g: Arc<dyn MetricField>,
    c: &ConformalFactor,
    omega: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
    grid: &Arc<DiscreteBall>,
) -> Result<f64> {
    let n = grid.dim() as f64;
    let cg: Arc<dyn MetricField> = Arc::new(ScaledMetric::new(g.clone(), c.clone()));
    let scaled = |y: &[f64]| -> Vec<f64> {
        let s = c.value(y).powf((n - 2.0) / 2.0);
        omega(y).into_iter().map(|w| s * w).collect()
    };
    let step = grid.h();
    let per = grid
        .interior_nodes()
        .par_iter()
        .map(|&i| -> Result<f64> {
            let x = grid.coords(i);
            let lhs = codifferential_covariant(cg.clone(), omega, &x, step)?;
            let rhs = c.value(&x).powf(-n / 2.0) * codifferential_divergence(g.as_ref(), &scaled, &x, step)?;
            Ok((lhs - rhs).abs())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::maps::{Affine, Inversion};
    use crate::geometry::{Domain, FlatMetric};
    use crate::grid::make_annulus;

    fn flat(n: usize) -> FlatMetric {
        FlatMetric::with_domain(n, Domain::Everywhere)
    }

    #[test]
    fn identity_has_unit_distortion() {
        let grid = make_ball(2, 1.0, &[0.0, 0.0], 0.1).unwrap();
        let r = distortion(&Affine::identity(2), &flat(2), &flat(2), &grid).unwrap();
        assert!((r.ess_sup_k - 1.0).abs() < 1e-12);
        assert!((r.ess_sup_k_euclidean - 1.0).abs() < 1e-12);
        assert!(r.conformality_residual < 1e-12);
        assert_eq!(r.jacobian_sign, JacobianSign::Positive);
    }

    #[test]
    fn inversion_is_conformal_in_3d() {
        let grid = make_annulus(3, 0.5, 1.0, &[0.0; 3], 0.05).unwrap();
        let r = distortion(&Inversion::unit(3), &flat(3), &flat(3), &grid).unwrap();
        assert!(r.ess_sup_k_euclidean - 1.0 < 5.0 * 0.05);
        assert!(r.min_k_euclidean >= 1.0 - 1e-12);
        assert_eq!(r.jacobian_sign, JacobianSign::Negative);
    }

    #[test]
    fn anisotropic_stretch() {
        let grid = make_ball(2, 1.0, &[0.0, 0.0], 0.1).unwrap();
        let phi = Affine::scaling(&[2.0, 1.0]);
        let r = distortion(&phi, &flat(2), &flat(2), &grid).unwrap();
        assert!((r.ess_sup_k_euclidean - 2.0).abs() < 1e-12);
        assert!((r.ess_sup_k - 1.25).abs() < 1e-12);
    }

    #[test]
    fn z_squared_has_degenerate_origin() {
        let grid = make_ball(2, 1.0, &[0.0, 0.0], 0.1).unwrap();
        let phi = crate::geometry::maps::ZSquared;
        let r = distortion(&phi, &flat(2), &flat(2), &grid).unwrap();
        assert_eq!(r.degenerate_nodes, vec![grid.center_node()]);
        assert_eq!(r.jacobian_sign, JacobianSign::Positive);
    }

    #[test]
    fn localization_examples() {
        let id = DMatrix::<f64>::identity(2, 2);
        for eps in [1e-6, 0.1, 10.0] {
            let r = localization_bound(&id, &id, eps).unwrap();
            assert!(r.certified);
            assert_eq!(r.delta_needed, None);
        }
        let g = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.5, 1.0]));
        let r = localization_bound(&g, &id, 0.1).unwrap();
        assert!(!r.certified);
        assert!((r.ratio_g - 1.5).abs() < 1e-14);
        assert!((r.delta_needed.unwrap() - (1.1f64.sqrt() - 1.0)).abs() < 1e-12);
        let s = &id * 1.7;
        assert!(localization_bound(&s, &s, 0.01).unwrap().certified);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(localization_bound(&bad, &id, 0.1), Err(Error::SingularMetric { .. })));
    }

    #[test]
    fn linear_chain_rule() {
        let target = make_ball(2, 3.0, &[0.0, 0.0], 0.1).unwrap();
        let v = DiscreteScalarField::from_fn(&target, |y| y[0]).unwrap();
        let grid = make_ball(2, 1.0, &[0.0, 0.0], 0.1).unwrap();
        let phi = Affine::dilation(2, 2.0);
        let r = chain_rule_check(&v, &phi, &flat(2), &flat(2), &grid).unwrap();
        assert!(r.gradient_error < 1e-12);
        let u = compose(&v, &phi, &grid).unwrap();
        let c = grid.center_node();
        assert!((gradient(&u, c).unwrap()[0] - 2.0).abs() < 1e-12);
        assert!(r.inequality_excess <= 1e-12);
    }

    #[test]
    fn substitution_identity_map() {
        let grid = make_ball(2, 1.0, &[0.0, 0.0], 0.05).unwrap();
        let target = make_ball(2, 1.3, &[0.0, 0.0], 0.05).unwrap();
        let f = DiscreteScalarField::from_fn(&target, |y| crate::geometry::metrics::bump(y, &[0.0, 0.0], 0.6).0).unwrap();
        let r = substitution_check(&f, &Affine::identity(2), &flat(2), &flat(2), &grid).unwrap();
        assert!(r.rel_err <= 1e-12);
    }

    #[test]
    fn affine_pullback_is_harmonic() {
        let target = make_ball(2, 2.0, &[0.0, 0.0], 0.1).unwrap();
        let v = DiscreteScalarField::from_fn(&target, |y| 0.3 * y[0] - y[1]).unwrap();
        let grid = make_ball(2, 1.0, &[0.0, 0.0], 0.1).unwrap();
        let g: Arc<dyn MetricField> = Arc::new(flat(2));
        let r = pullback_nharmonic_residual(&v, &Affine::identity(2), g, &flat(2), &grid).unwrap();
        assert!(r.residual <= 1e-10);
    }

    #[test]
    fn codifferential_identity_converges() {
        let g: Arc<dyn MetricField> = Arc::new(crate::geometry::DiagonalMetric::default_for(2));
        let c = ConformalFactor::Exp { a: vec![0.4, -0.2] };
        let omega = |x: &[f64]| vec![(x[0] * 2.0).sin() + x[1], x[0] * x[1] - (x[1]).cos()];
        let res: Vec<f64> = [0.1, 0.05]
            .iter()
            .map(|&h| {
                let grid = make_ball(2, 0.5, &[0.0, 0.0], h).unwrap();
                codifferential_identity_residual(g.clone(), &c, &omega, &grid).unwrap()
            })
            .collect();
        assert!(res[1] < res[0] / 3.0, "{res:?}");
    }
}
