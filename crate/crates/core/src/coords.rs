//! p-harmonic coordinate charts by the ε-dilation scheme: on shrinking balls
//! `B_ε(x0)` solve the Dirichlet problems with affine data `S(x - x0)` and
//! read off the Jacobian at the center.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aop::{make_aoperator, weak_residual, TestBasis};
use crate::error::{Error, Result};
use crate::geometry::{christoffel_pharmonic_residual, invert_spd, spectral_norm, GridMetric, MetricField};
use crate::grid::{make_ball, p1_grad_lp_norm, DiscreteBall, DiscreteScalarField};
use crate::solver::{solve_dirichlet, SolutionReport, SolverConfig};

/// `ε_k = 0.4 · 2^{-k}`, `k = 0..6`.
pub fn default_eps_schedule() -> Vec<f64> {
    (0..7).map(|k| 0.4 * 0.5f64.powi(k)).collect()
}

/// Grid cells per ball radius (`h = ε / 32`).
pub const DEFAULT_CELLS_PER_RADIUS: usize = 32;

#[derive(Clone)]
pub struct ChartRequest {
    pub g: Arc<dyn MetricField>,
    pub p: f64,
    pub x0: Vec<f64>,
    pub s: DMatrix<f64>,
    pub eps_schedule: Vec<f64>,
    pub jac_tol: f64,
    pub solver: SolverConfig,
    pub cells_per_radius: usize,
}

impl ChartRequest {
    pub fn new(g: Arc<dyn MetricField>, p: f64, x0: Vec<f64>, s: DMatrix<f64>) -> Self {
        Self {
            g,
            p,
            x0,
            s,
            eps_schedule: default_eps_schedule(),
            jac_tol: 0.05,
            solver: SolverConfig::default(),
            cells_per_radius: DEFAULT_CELLS_PER_RADIUS,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.g.dim();
        if self.x0.len() != n || self.s.nrows() != n || self.s.ncols() != n {
            return Err(Error::spec("x0 and S must match the metric dimension"));
        }
        if self.s.determinant().abs() <= 1e-12 {
            return Err(Error::spec("S must be invertible"));
        }
        let e = &self.eps_schedule;
        if e.is_empty() || e.iter().any(|v| !(*v > 0.0)) || e.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::spec("eps schedule must be positive and strictly decreasing"));
        }
        if self.cells_per_radius < 5 {
            return Err(Error::spec("cells_per_radius must be at least 5"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub eps: f64,
    pub jac_error: f64,
}

#[derive(Clone, Debug)]
pub struct ChartResult {
    pub eps_used: f64,
    /// Coordinate functions `u^1..u^n` on `B_ε(x0)`.
    pub coords: Vec<DiscreteScalarField>,
    /// `DU0[(k, j)] = ∂_j u^k(x0)`.
    pub du0: DMatrix<f64>,
    pub jac_error: f64,
    /// `DU0^{-T} G0 DU0^{-1}`.
    pub pulled_metric0: DMatrix<f64>,
    /// Weak residual of each coordinate under the unregularized operator.
    pub residuals: Vec<f64>,
    pub christoffel_check: f64,
    pub schedule: Vec<ScheduleEntry>,
    /// No ε reached `jac_tol`; the fields describe the best ε tried.
    pub schedule_exhausted: bool,
    pub solutions: Vec<SolutionReport>,
}

/// Serializable summary of a [`ChartResult`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChartReport {
    pub eps_used: f64,
    pub du0: Vec<Vec<f64>>,
    pub jac_error: f64,
    pub pulled_metric0: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub christoffel_check: f64,
    pub schedule: Vec<ScheduleEntry>,
    pub schedule_exhausted: bool,
    pub solutions: Vec<SolutionReport>,
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl ChartResult {
    pub fn report(&self) -> ChartReport {
        ChartReport {
            eps_used: self.eps_used,
            du0: rows(&self.du0),
            jac_error: self.jac_error,
            pulled_metric0: rows(&self.pulled_metric0),
            residuals: self.residuals.clone(),
            christoffel_check: self.christoffel_check,
            schedule: self.schedule.clone(),
            schedule_exhausted: self.schedule_exhausted,
            solutions: self.solutions.clone(),
        }
    }

    /// Converts an exhausted schedule into [`Error::ScheduleExhausted`].
    pub fn require_success(self) -> Result<Self> {
        if self.schedule_exhausted {
            Err(Error::ScheduleExhausted {
                best_eps: self.eps_used,
                best_error: self.jac_error,
            })
        } else {
            Ok(self)
        }
    }

    pub fn ball(&self) -> &Arc<DiscreteBall> {
        &self.coords[0].ball
    }
}

/// `DU[(k, j)] = ∂_j u^k` by central differences at the center node.
pub fn jacobian_at_center(coords: &[DiscreteScalarField]) -> Result<DMatrix<f64>> {
    let ball = &coords[0].ball;
    let node = ball
        .nearest_node(ball.center())
        .ok_or(Error::BoundaryNode(usize::MAX))?;
    let n = ball.dim();
    let mut du = DMatrix::zeros(coords.len(), n);
    for (k, u) in coords.iter().enumerate() {
        u.check_same_grid(&coords[0])?;
        let g = crate::grid::gradient(u, node)?;
        for j in 0..n {
            du[(k, j)] = g[j];
        }
    }
    Ok(du)
}

struct EpsSolve {
    eps: f64,
    coords: Vec<DiscreteScalarField>,
    reports: Vec<SolutionReport>,
    du0: DMatrix<f64>,
    jac_error: f64,
}

fn solve_at(req: &ChartRequest, eps: f64) -> Result<EpsSolve> {
    let n = req.g.dim();
    let ball = make_ball(n, eps, &req.x0, eps / req.cells_per_radius as f64)?;
    let a = make_aoperator(req.g.clone(), req.p, 0.0)?;
    let solved = (0..n)
        .into_par_iter()
        .map(|j| {
            let f = DiscreteScalarField::from_fn(&ball, |x| {
                (0..n).map(|i| req.s[(j, i)] * (x[i] - req.x0[i])).sum()
            })?;
            solve_dirichlet(&a, &ball, &f, &req.solver)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = solved.iter().map(|s| s.report()).collect();
    let coords: Vec<DiscreteScalarField> = solved.into_iter().map(|s| s.u).collect();
    let du0 = jacobian_at_center(&coords)?;
    let jac_error = spectral_norm(&(&du0 - &req.s));
    Ok(EpsSolve {
        eps,
        coords,
        reports,
        du0,
        jac_error,
    })
}

pub fn build_chart(req: &ChartRequest) -> Result<ChartResult> {
    req.validate()?;
    let mut schedule = Vec::new();
    let mut best: Option<EpsSolve> = None;
    let mut reached = false;
    for &eps in &req.eps_schedule {
        let s = solve_at(req, eps)?;
        schedule.push(ScheduleEntry {
            eps,
            jac_error: s.jac_error,
        });
        let done = s.jac_error < req.jac_tol;
        if best.as_ref().is_none_or(|b| s.jac_error <= b.jac_error) || done {
            best = Some(s);
        }
        if done {
            reached = true;
            break;
        }
    }
    let s = best.expect("schedule is nonempty");
    finish_chart(req, s, schedule, !reached)
}

fn finish_chart(
    req: &ChartRequest,
    s: EpsSolve,
    schedule: Vec<ScheduleEntry>,
    exhausted: bool,
) -> Result<ChartResult> {
    let a0 = make_aoperator(req.g.clone(), req.p, 0.0)?;
    let residuals = s
        .coords
        .iter()
        .map(|u| weak_residual(&a0, u, &TestBasis::InteriorHats))
        .collect::<Result<Vec<_>>>()?;
    let g0 = req.g.eval(&req.x0);
    let du_inv = s
        .du0
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::DegenerateJacobian("DU(x0) is singular".into()))?;
    let pm = du_inv.transpose() * g0 * &du_inv;
    let pulled_metric0 = 0.5 * (&pm + pm.transpose());
    let christoffel_check = christoffel_check(&req.g, &s.coords, req.p)?;
    Ok(ChartResult {
        eps_used: s.eps,
        coords: s.coords,
        du0: s.du0,
        jac_error: s.jac_error,
        pulled_metric0,
        residuals,
        christoffel_check,
        schedule,
        schedule_exhausted: exhausted,
        solutions: s.reports,
    })
}

/// `max_k |r^k|` of the p-harmonicity test for the pushed-forward metric at
/// `U(x0)`, sampled on a 5ⁿ lattice of spacing `h` around `U(x0)`.
pub fn christoffel_check(g: &Arc<dyn MetricField>, coords: &[DiscreteScalarField], p: f64) -> Result<f64> {
    let ball = &coords[0].ball;
    let center = ball.center().to_vec();
    let y0: Vec<f64> = coords
        .iter()
        .map(|u| {
            u.sample_cubic(&center)
                .ok_or(Error::DomainEscape { point: center.clone(), what: "chart" })
        })
        .collect::<Result<_>>()?;
    let h = ball.h();
    let axes: Vec<Vec<f64>> = y0
        .iter()
        .map(|c| (-2..=2).map(|k| c + k as f64 * h).collect())
        .collect();
    let gt = pushforward_metric(g, coords, axes)?;
    let r = christoffel_pharmonic_residual(&gt, p, &y0)?;
    Ok(r.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// Chart values and Jacobian at `x` from the cubic interpolants of `U`.
pub(crate) fn chart_at(coords: &[DiscreteScalarField], x: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let n = coords.len();
    let mut y = vec![0.0; n];
    let mut du = DMatrix::zeros(n, x.len());
    for (k, u) in coords.iter().enumerate() {
        let (v, g) = u.sample_cubic_grad(x)?;
        y[k] = v;
        for j in 0..x.len() {
            du[(k, j)] = g[j];
        }
    }
    Some((y, du))
}

/// Solves `U(x) = y` by Newton iteration on the cubic interpolant of `U`.
pub(crate) fn invert_chart(coords: &[DiscreteScalarField], y: &[f64], guess: Vec<f64>) -> Result<Vec<f64>> {
    let n = y.len();
    let mut x = guess;
    let scale = 1.0 + y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _ in 0..50 {
        let (yx, du) = chart_at(coords, &x).ok_or(Error::DomainEscape {
            point: x.clone(),
            what: "chart inverse",
        })?;
        let res = DVector::from_iterator(n, yx.iter().zip(y).map(|(a, b)| a - b));
        if res.amax() <= 1e-14 * scale {
            return Ok(x);
        }
        let step = du
            .lu()
            .solve(&res)
            .ok_or_else(|| Error::DegenerateJacobian(format!("singular DU at {x:?}")))?;
        for (xi, si) in x.iter_mut().zip(step.iter()) {
            *xi -= si;
        }
        if step.amax() <= 1e-15 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            return Ok(x);
        }
    }
    Err(Error::DomainEscape {
        point: y.to_vec(),
        what: "chart inverse (Newton did not converge)",
    })
}

/// `g̃(y) = DU⁻ᵀ g DU⁻¹` at `x = U⁻¹(y)` for every lattice point `y` spanned
/// by `axes`; `U⁻¹` by Newton iteration on the cubic interpolant of `U`.
pub fn pushforward_metric(
    g: &Arc<dyn MetricField>,
    coords: &[DiscreteScalarField],
    axes: Vec<Vec<f64>>,
) -> Result<GridMetric> {
    let ball = coords[0].ball.clone();
    let n = ball.dim();
    if coords.len() != n || axes.len() != n {
        return Err(Error::GridMismatch("chart needs n coordinate functions".into()));
    }
    let x0 = ball.center().to_vec();
    let (y0, du0) = chart_at(coords, &x0).ok_or(Error::DomainEscape {
        point: x0.clone(),
        what: "chart",
    })?;
    let du0_inv = du0
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::DegenerateJacobian("DU(x0) is singular".into()))?;
    let points = crate::geometry::metrics::lattice_indices(&axes);
    let values = points
        .par_iter()
        .map(|idx| -> Result<Vec<f64>> {
            let y: Vec<f64> = idx.iter().enumerate().map(|(a, &i)| axes[a][i]).collect();
            let dy = DVector::from_iterator(n, y.iter().zip(&y0).map(|(a, b)| a - b));
            let guess: Vec<f64> = x0.iter().zip((&du0_inv * dy).iter()).map(|(a, b)| a + b).collect();
            let x = invert_chart(coords, &y, guess)?;
            let (_, du) = chart_at(coords, &x).ok_or(Error::DomainEscape {
                point: x.clone(),
                what: "chart",
            })?;
            let smin = du.clone().singular_values().min();
            if smin <= 1e-8 {
                return Err(Error::DegenerateJacobian(format!(
                    "min singular value {smin:e} at {x:?}"
                )));
            }
            let inv = du.try_inverse().expect("nonsingular by the singular value check");
            let m = inv.transpose() * g.eval(&x) * &inv;
            let m = 0.5 * (&m + m.transpose());
            invert_spd(&m, &y)?;
            Ok(m.transpose().iter().copied().collect())
        })
        .collect::<Result<Vec<_>>>()?;
    GridMetric::new(axes, values.concat())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateStudy {
    pub p: f64,
    pub eps_list: Vec<f64>,
    /// `‖∇ũ - e₁‖_{L^p(B₁)}` at `h̃ = 1/cells_per_radius`.
    pub deviations: Vec<f64>,
    /// Same at half the spacing, for the two smallest ε.
    pub deviations_fine: Vec<Option<f64>>,
    pub discretization_error: f64,
    /// `None` when all deviations vanish to solver tolerance ("exact").
    pub fitted_slope: Option<f64>,
    pub expected_slope: f64,
    pub exact: bool,
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Deviation of the rescaled solution with data `x̃¹` from `x̃¹` itself.
pub fn rescaled_deviation(
    g: &Arc<dyn MetricField>,
    p: f64,
    x0: &[f64],
    eps: f64,
    h: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    let n = g.dim();
    let a = make_aoperator(g.clone(), p, 0.0)?.dilated(x0, eps)?;
    let ball = make_ball(n, 1.0, &vec![0.0; n], h)?;
    let f = DiscreteScalarField::from_fn(&ball, |x| x[0])?;
    let sol = solve_dirichlet(&a, &ball, &f, cfg)?;
    let diff = DiscreteScalarField::new(
        ball.clone(),
        sol.u.values.iter().zip(&f.values).map(|(u, f)| u - f).collect(),
    )?;
    Ok(p1_grad_lp_norm(&diff, p))
}

pub fn rate_study(
    g: &Arc<dyn MetricField>,
    p: f64,
    x0: &[f64],
    eps_list: &[f64],
    cfg: &SolverConfig,
    cells_per_radius: usize,
) -> Result<RateStudy> {
    if eps_list.len() < 4 {
        return Err(Error::spec("rate study needs at least 4 radii"));
    }
    let hi = eps_list.iter().cloned().fold(f64::MIN, f64::max);
    let lo = eps_list.iter().cloned().fold(f64::MAX, f64::min);
    if hi / lo < 8.0 - 1e-12 {
        return Err(Error::spec("radii must span at least a factor of 8"));
    }
    let mut order: Vec<usize> = (0..eps_list.len()).collect();
    order.sort_by(|a, b| eps_list[*b].total_cmp(&eps_list[*a]));
    let h = 1.0 / cells_per_radius as f64;
    let deviations = eps_list
        .par_iter()
        .map(|&e| rescaled_deviation(g, p, x0, e, h, cfg))
        .collect::<Result<Vec<_>>>()?;
    let smallest = [order[order.len() - 1], order[order.len() - 2]];
    let mut deviations_fine = vec![None; eps_list.len()];
    let fine = smallest
        .par_iter()
        .map(|&k| rescaled_deviation(g, p, x0, eps_list[k], h / 2.0, cfg))
        .collect::<Result<Vec<_>>>()?;
    for (k, v) in smallest.iter().zip(&fine) {
        deviations_fine[*k] = Some(*v);
    }
    let discretization_error = smallest
        .iter()
        .zip(&fine)
        .map(|(&k, f)| (deviations[k] - f).abs())
        .fold(0.0, f64::max);
    let expected_slope = 1.0f64.min(1.0 / (p - 1.0));
    let tol = 1e-9;
    let exact = deviations.iter().all(|d| *d <= tol);
    let fitted_slope = if exact {
        None
    } else {
        let signal = (deviations[smallest[0]] - deviations[smallest[1]]).abs();
        if signal < 2.0 * discretization_error {
            return Err(Error::SignalBelowNoise {
                signal,
                noise: discretization_error,
            });
        }
        Some(fit_loglog_slope(eps_list, &deviations))
    };
    Ok(RateStudy {
        p,
        eps_list: eps_list.to_vec(),
        deviations,
        deviations_fine,
        discretization_error,
        fitted_slope,
        expected_slope,
        exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{maps::Affine, FlatMetric};

    #[test]
    fn jacobian_of_affine_chart() {
        let ball = make_ball(2, 0.4, &[0.1, -0.2], 0.4 / 16.0).unwrap();
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -0.3, 1.0]);
        let coords: Vec<DiscreteScalarField> = (0..2)
            .map(|k| DiscreteScalarField::from_fn(&ball, |x| s[(k, 0)] * x[0] + s[(k, 1)] * x[1]).unwrap())
            .collect();
        let du = jacobian_at_center(&coords).unwrap();
        assert!((du - &s).amax() < 1e-12);
    }

    #[test]
    fn flat_chart_with_rotation() {
        let rot = Affine::rotation(2, std::f64::consts::PI / 6.0, None).unwrap().matrix;
        let mut req = ChartRequest::new(Arc::new(FlatMetric::new(2)), 3.0, vec![0.0, 0.0], rot.clone());
        req.jac_tol = 1e-8;
        let r = build_chart(&req).unwrap();
        assert!(!r.schedule_exhausted);
        assert_eq!(r.eps_used, 0.4);
        assert!(r.jac_error <= 1e-10);
        assert!((&r.du0 - rot).amax() < 1e-10);
        assert!(r.residuals.iter().all(|v| *v <= 1e-10));
    }

    #[test]
    fn pushforward_of_affine_chart() {
        let g: Arc<dyn MetricField> = Arc::new(FlatMetric::new(2));
        let ball = make_ball(2, 0.5, &[0.0, 0.0], 0.5 / 16.0).unwrap();
        let s = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, -0.1, 0.8]);
        let coords: Vec<DiscreteScalarField> = (0..2)
            .map(|k| DiscreteScalarField::from_fn(&ball, |x| s[(k, 0)] * x[0] + s[(k, 1)] * x[1]).unwrap())
            .collect();
        let axes = vec![vec![-0.05, 0.0, 0.05], vec![-0.05, 0.0, 0.05]];
        let gt = pushforward_metric(&g, &coords, axes).unwrap();
        let inv = s.clone().try_inverse().unwrap();
        let want = inv.transpose() * &inv;
        for y in [[0.0, 0.0], [0.03, -0.04]] {
            assert!((gt.eval(&y) - &want).amax() < 1e-12);
        }
    }

    #[test]
    fn slope_fit() {
        let x = [0.4, 0.2, 0.1, 0.05];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(0.5)).collect();
        assert!((fit_loglog_slope(&x, &y) - 0.5).abs() < 1e-12);
    }
}
