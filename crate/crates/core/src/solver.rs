//! Discrete A-harmonic Dirichlet problems by regularized energy minimization.
//!
//! Outer loop: Kačanov directions `d = -K_w⁻¹ ∇E(u)` with `K_w` the weighted
//! Laplacian whose simplex weights are frozen at the current iterate, solved
//! inexactly by Jacobi-preconditioned CG, followed by an exact-enough line
//! search on the directional derivative. The regularization `reg` is halved
//! between levels until the nodal change stalls or the floor is reached.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aop::{residual_from_gradient, AOperator, Assembly, TestBasis};
use crate::error::{Error, Result};
use crate::grid::{
    p1_grad_lp_norm, pairwise_sum, second_difference_bound, simplex_gradient, DiscreteBall,
    DiscreteScalarField, MAX_DIM,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegSchedule {
    /// Starting `reg`; `None` means `1e-3 · max|∇f|`.
    pub initial: Option<f64>,
    pub factor: f64,
    pub floor: f64,
}

impl Default for RegSchedule {
    fn default() -> Self {
        Self {
            initial: None,
            factor: 0.5,
            floor: 1e-10,
        }
    }
}

/// Line-search parameters: accept `t` once `-c|φ'(0)| <= φ'(t) <= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Damping {
    pub curvature: f64,
    pub max_evaluations: usize,
}

impl Default for Damping {
    fn default() -> Self {
        Self {
            curvature: 0.1,
            max_evaluations: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Cap on outer iterations summed over all reg levels.
    pub max_outer_iters: usize,
    /// Levels stop once the max nodal change between them falls below
    /// `energy_rel_tol · max(1, max|f|)`.
    pub energy_rel_tol: f64,
    pub reg_schedule: RegSchedule,
    pub damping: Damping,
    /// Floor for the relative residual of the inner CG solves.
    pub linear_solver_tol: f64,
    /// Relative tolerance of the inexact inner solves.
    pub inner_rel_tol: f64,
    pub max_linear_iters: usize,
    /// Weak-residual target, relative to `β · max|∇f|^{p-1}`.
    pub residual_tol: f64,
    /// Stagnation threshold on `max|t·d|`, relative to `max(1, max|f|)`.
    pub step_tol: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 5000,
            energy_rel_tol: 1e-10,
            reg_schedule: RegSchedule::default(),
            damping: Damping::default(),
            linear_solver_tol: 1e-12,
            inner_rel_tol: 1e-3,
            max_linear_iters: 20_000,
            residual_tol: 1e-10,
            step_tol: 1e-13,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.reg_schedule;
        let ok = self.max_outer_iters > 0
            && self.energy_rel_tol > 0.0
            && self.linear_solver_tol > 0.0
            && self.inner_rel_tol > 0.0
            && self.residual_tol > 0.0
            && self.step_tol > 0.0
            && s.floor >= 0.0
            && s.factor > 0.0
            && s.factor < 1.0
            && s.initial.is_none_or(|r| r >= 0.0)
            && self.damping.curvature > 0.0
            && self.damping.curvature < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::spec("solver tolerances must be positive and 0 < factor < 1"))
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegLevel {
    pub reg: f64,
    pub iterations: usize,
    /// Max nodal change relative to the previous level (`None` for the first).
    pub nodal_change: Option<f64>,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct DirichletSolution {
    pub u: DiscreteScalarField,
    pub iterations: usize,
    /// Regularized energy after every outer iteration (first entry: initial guess).
    pub energies: Vec<f64>,
    pub levels: Vec<RegLevel>,
    /// Unregularized energy of the result.
    pub final_energy: f64,
    /// Weak residual at the final regularization level.
    pub final_residual: f64,
    pub residual_tolerance: f64,
    /// `‖∇u‖_p / ((β/α) ‖∇f‖_p)`, norms over the simplices.
    pub energy_bound_ratio: f64,
    /// Constants at the quadrature points.
    pub alpha: f64,
    pub beta: f64,
}

/// Serializable summary of a [`DirichletSolution`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolutionReport {
    pub iterations: usize,
    pub energies: Vec<f64>,
    pub levels: Vec<RegLevel>,
    pub final_energy: f64,
    pub final_residual: f64,
    pub residual_tolerance: f64,
    pub energy_bound_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl DirichletSolution {
    pub fn report(&self) -> SolutionReport {
        SolutionReport {
            iterations: self.iterations,
            energies: self.energies.clone(),
            levels: self.levels.clone(),
            final_energy: self.final_energy,
            final_residual: self.final_residual,
            residual_tolerance: self.residual_tolerance,
            energy_bound_ratio: self.energy_bound_ratio,
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

fn max_abs(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest simplex gradient magnitude of a field.
fn max_simplex_gradient(ball: &DiscreteBall, values: &[f64]) -> f64 {
    let n = ball.dim();
    let nsimp = ball.kuhn().perms.len();
    (0..ball.num_cells())
        .into_par_iter()
        .map(|c| {
            let mut xi = [0.0; MAX_DIM];
            (0..nsimp)
                .map(|s| {
                    simplex_gradient(ball, values, c, s, &mut xi[..n]);
                    xi[..n].iter().map(|v| v * v).sum::<f64>().sqrt()
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

fn dot_interior(ball: &DiscreteBall, a: &[f64], b: &[f64]) -> f64 {
    let terms: Vec<f64> = ball.interior_nodes().iter().map(|&i| a[i] * b[i]).collect();
    pairwise_sum(&terms)
}

/// Jacobi-preconditioned CG for `K d = b` on the interior nodes.
fn pcg(
    asm: &Assembly,
    w: &[f64],
    b: &[f64],
    rel_tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    let ball = asm.ball();
    let interior = ball.interior_nodes();
    let nn = ball.num_nodes();
    let diag = asm.diagonal(w);
    for &i in interior {
        if !(diag[i] > 0.0 && diag[i].is_finite()) {
            return Err(Error::SingularLinearSystem(format!(
                "nonpositive diagonal {:e} at node {i}",
                diag[i]
            )));
        }
    }
    let mut x = vec![0.0; nn];
    let mut r = b.to_vec();
    let bnorm = dot_interior(ball, b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut z = vec![0.0; nn];
    for &i in interior {
        z[i] = r[i] / diag[i];
    }
    let mut p = z.clone();
    let mut rz = dot_interior(ball, &r, &z);
    for _ in 0..max_iters {
        let mut ap = asm.apply(w, &p);
        for &i in ball.boundary_nodes() {
            ap[i] = 0.0;
        }
        let pap = dot_interior(ball, &p, &ap);
        if !(pap > 0.0) {
            return Err(Error::SingularLinearSystem(format!("pᵀKp = {pap:e}")));
        }
        let alpha = rz / pap;
        for &i in interior {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot_interior(ball, &r, &r).sqrt() <= rel_tol * bnorm {
            break;
        }
        for &i in interior {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot_interior(ball, &r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for &i in interior {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(x)
}

/// `φ'(t) = ∇E(u + t d) · d`.
fn directional_derivative(asm: &Assembly, reg: f64, u: &[f64], d: &[f64], t: f64) -> f64 {
    let ball = asm.ball();
    let v: Vec<f64> = u.iter().zip(d).map(|(a, b)| a + t * b).collect();
    let (_, g) = asm.energy_and_gradient(reg, &v);
    dot_interior(ball, &g, d)
}

/// Step length with `-c|φ'(0)| <= φ'(t) <= 0`; since the energy is convex
/// along the line, any such `t` does not increase it. `φ'(t)` within
/// roundoff of zero counts as zero.
fn line_search(asm: &Assembly, reg: f64, u: &[f64], d: &[f64], dphi0: f64, damping: &Damping) -> f64 {
    let accept = |v: f64| v <= 1e-12 * dphi0.abs() && v >= -damping.curvature * dphi0.abs();
    let mut lo = (0.0, dphi0);
    let mut hi: Option<(f64, f64)> = None;
    let mut t = 1.0;
    let mut evals = 0;
    // expansion until the derivative changes sign
    while evals < damping.max_evaluations {
        let v = directional_derivative(asm, reg, u, d, t);
        evals += 1;
        if accept(v) {
            return t;
        }
        if v < 0.0 {
            lo = (t, v);
            t *= 2.0;
        } else {
            hi = Some((t, v));
            break;
        }
    }
    let Some(mut hi) = hi else {
        return lo.0;
    };
    // Illinois regula falsi inside [lo, hi]
    let mut side = 0i8;
    while evals < damping.max_evaluations {
        let t = (lo.0 * hi.1 - hi.0 * lo.1) / (hi.1 - lo.1);
        if !(t > lo.0 && t < hi.0) {
            break;
        }
        let v = directional_derivative(asm, reg, u, d, t);
        evals += 1;
        if accept(v) {
            return t;
        }
        if v < 0.0 {
            lo = (t, v);
            if side == -1 {
                hi.1 *= 0.5;
            }
            side = -1;
        } else {
            hi = (t, v);
            if side == 1 {
                lo.1 *= 0.5;
            }
            side = 1;
        }
    }
    lo.0
}

pub fn solve_dirichlet(
    a: &AOperator,
    ball: &Arc<DiscreteBall>,
    f: &DiscreteScalarField,
    cfg: &SolverConfig,
) -> Result<DirichletSolution> {
    solve_dirichlet_from(a, ball, f, &f.values, cfg)
}

/// As [`solve_dirichlet`], starting from `guess` at the interior nodes.
pub fn solve_dirichlet_from(
    a: &AOperator,
    ball: &Arc<DiscreteBall>,
    f: &DiscreteScalarField,
    guess: &[f64],
    cfg: &SolverConfig,
) -> Result<DirichletSolution> {
    cfg.validate()?;
    if !(Arc::ptr_eq(ball, &f.ball) || ball.same_grid(&f.ball)) {
        return Err(Error::GridMismatch("boundary data lives on another grid".into()));
    }
    if guess.len() != ball.num_nodes() {
        return Err(Error::GridMismatch("initial guess has the wrong length".into()));
    }
    let asm = Assembly::new(a, ball)?;
    let (alpha, beta) = asm.cells.quadrature_bounds(a.p);
    let p = a.p;

    let mut u = guess.to_vec();
    for &i in ball.boundary_nodes() {
        u[i] = f.values[i];
    }
    let grad_f = max_simplex_gradient(ball, &f.values);
    let u_scale = max_abs(f.values.iter().copied()).max(1.0);
    let residual_tolerance = cfg.residual_tol * beta * grad_f.max(1e-300).powf(p - 1.0).max(1e-300);
    let step_floor = cfg.step_tol * u_scale;
    let inner_tol = cfg.inner_rel_tol.max(cfg.linear_solver_tol);

    let mut reg = cfg
        .reg_schedule
        .initial
        .unwrap_or(1e-3 * grad_f)
        .max(cfg.reg_schedule.floor);
    let mut energies = Vec::new();
    let mut levels: Vec<RegLevel> = Vec::new();
    let mut total = 0usize;
    let mut previous: Option<Vec<f64>> = None;
    let mut last_residual;

    loop {
        let mut level_iters = 0usize;
        let (mut energy, mut grad) = asm.energy_and_gradient(reg, &u);
        energies.push(energy);
        loop {
            last_residual = residual_from_gradient(ball, &grad, &TestBasis::InteriorHats);
            if last_residual <= residual_tolerance {
                break;
            }
            if total >= cfg.max_outer_iters {
                return Err(Error::NoConvergence {
                    iterations: total,
                    residual: last_residual,
                });
            }
            let w = asm.weights(reg, &u);
            let mut b = vec![0.0; u.len()];
            for &i in ball.interior_nodes() {
                b[i] = -grad[i];
            }
            let d = pcg(&asm, &w, &b, inner_tol, cfg.max_linear_iters)?;
            let dphi0 = dot_interior(ball, &grad, &d);
            if !(dphi0 < 0.0) {
                // no descent left at working precision
                break;
            }
            let t = line_search(&asm, reg, &u, &d, dphi0, &cfg.damping);
            let step = t * max_abs(d.iter().copied());
            for (ui, di) in u.iter_mut().zip(&d) {
                *ui += t * di;
            }
            total += 1;
            level_iters += 1;
            (energy, grad) = asm.energy_and_gradient(reg, &u);
            energies.push(energy);
            if step <= step_floor {
                last_residual = residual_from_gradient(ball, &grad, &TestBasis::InteriorHats);
                break;
            }
        }
        let change = previous
            .as_ref()
            .map(|prev| max_abs(prev.iter().zip(&u).map(|(x, y)| x - y)));
        levels.push(RegLevel {
            reg,
            iterations: level_iters,
            nodal_change: change,
            residual: last_residual,
        });
        let stalled = change.is_some_and(|c| c < cfg.energy_rel_tol * u_scale);
        if stalled || reg <= cfg.reg_schedule.floor || (p == 2.0 && previous.is_some()) {
            break;
        }
        previous = Some(u.clone());
        reg = (reg * cfg.reg_schedule.factor).max(cfg.reg_schedule.floor);
    }

    let final_energy = asm.energy(0.0, &u);
    let u = DiscreteScalarField::new(ball.clone(), u)?;
    let grad_norm_f = p1_grad_lp_norm(f, p);
    let grad_norm_u = p1_grad_lp_norm(&u, p);
    let energy_bound_ratio = if grad_norm_u == 0.0 {
        0.0
    } else {
        grad_norm_u / ((beta / alpha) * grad_norm_f)
    };
    Ok(DirichletSolution {
        u,
        iterations: total,
        energies,
        levels,
        final_energy,
        final_residual: last_residual,
        residual_tolerance,
        energy_bound_ratio,
        alpha,
        beta,
    })
}

/// Interior nodes with `|∇u| >= threshold`, plus the second-difference
/// quotient restricted to them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradientRegion {
    pub nodes: Vec<usize>,
    pub second_difference: f64,
}

pub fn gradient_nonvanishing_region(sol: &DirichletSolution, threshold: f64) -> GradientRegion {
    field_gradient_region(&sol.u, threshold)
}

pub fn field_gradient_region(u: &DiscreteScalarField, threshold: f64) -> GradientRegion {
    let ball = &u.ball;
    let grads = crate::grid::gradient_field(u);
    let nodes: Vec<usize> = ball
        .interior_nodes()
        .iter()
        .zip(&grads)
        .filter(|(_, g)| g.iter().map(|v| v * v).sum::<f64>().sqrt() >= threshold)
        .map(|(&i, _)| i)
        .collect();
    let mut mask = vec![false; ball.num_nodes()];
    for &i in &nodes {
        mask[i] = true;
    }
    GradientRegion {
        second_difference: second_difference_bound(u, Some(&mask)),
        nodes,
    }
}

/// `ũ(x̃) = ε⁻¹ u(x0 + ε x̃)` on the unit ball, with `x0`, `ε` the center and
/// radius of `u`'s ball.
pub fn rescale_to_unit_ball(u: &DiscreteScalarField) -> Result<DiscreteScalarField> {
    let ball = &u.ball;
    if ball.inner_radius().is_some() {
        return Err(Error::GridMismatch("rescaling needs a solid ball".into()));
    }
    let eps = ball.radius();
    let unit = crate::grid::make_ball(ball.dim(), 1.0, &vec![0.0; ball.dim()], ball.h() / eps)?;
    transfer(u, &unit, 1.0 / eps)
}

/// Inverse of [`rescale_to_unit_ball`]: `u(x) = ε ũ((x - x0)/ε)`.
pub fn rescale_from_unit_ball(
    ut: &DiscreteScalarField,
    x0: &[f64],
    eps: f64,
) -> Result<DiscreteScalarField> {
    let ball = &ut.ball;
    if (ball.radius() - 1.0).abs() > 1e-12 || ball.center().iter().any(|c| *c != 0.0) {
        return Err(Error::GridMismatch("expected a field on the unit ball".into()));
    }
    let target = crate::grid::make_ball(ball.dim(), eps, x0, ball.h() * eps)?;
    transfer(ut, &target, eps)
}

fn transfer(u: &DiscreteScalarField, target: &Arc<DiscreteBall>, scale: f64) -> Result<DiscreteScalarField> {
    if target.num_nodes() != u.ball.num_nodes() {
        return Err(Error::GridMismatch("rescaled lattice differs".into()));
    }
    let mut values = vec![0.0; target.num_nodes()];
    for (i, v) in u.values.iter().enumerate() {
        let j = target
            .node_at(u.ball.lattice_index(i))
            .ok_or_else(|| Error::GridMismatch("rescaled lattice differs".into()))?;
        if target.kind(j) != u.ball.kind(i) {
            return Err(Error::GridMismatch("node classification differs after rescaling".into()));
        }
        values[j] = v * scale;
    }
    DiscreteScalarField::new(target.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aop::{make_aoperator, weak_residual};
    use crate::geometry::{FlatMetric, MetricField, PerturbedMetric};
    use crate::grid::make_ball;

    fn flat(n: usize) -> Arc<dyn MetricField> {
        Arc::new(FlatMetric::new(n))
    }

    #[test]
    fn affine_data_is_returned_exactly() {
        let ball = make_ball(2, 1.0, &[0.0, 0.0], 0.05).unwrap();
        let f = DiscreteScalarField::from_fn(&ball, |x| x[0]).unwrap();
        for p in [1.5, 2.0, 3.0, 4.0] {
            let a = make_aoperator(flat(2), p, 0.0).unwrap();
            let sol = solve_dirichlet(&a, &ball, &f, &SolverConfig::default()).unwrap();
            assert!(sol.u.max_abs_diff(&f).unwrap() < 1e-12);
            assert!(sol.final_residual < 1e-10);
        }
    }

    #[test]
    fn nonlinear_solve_converges_with_monotone_energy() {
        let g: Arc<dyn MetricField> = Arc::new(PerturbedMetric::standard(2, 0.3).unwrap());
        let ball = make_ball(2, 1.0, &[0.0, 0.0], 0.05).unwrap();
        let f = DiscreteScalarField::from_fn(&ball, |x| (x[0] + 0.5 * x[1]).sin() + x[1] * x[1]).unwrap();
        for p in [1.5, 3.0, 4.0] {
            let a = make_aoperator(g.clone(), p, 0.0).unwrap();
            let sol = solve_dirichlet(&a, &ball, &f, &SolverConfig::default()).unwrap();
            for w in sol.energies.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-13), "p = {p}: {} -> {}", w[0], w[1]);
            }
            assert!(sol.final_residual <= sol.residual_tolerance * 1e3, "p = {p}");
            assert!(sol.energy_bound_ratio <= 1.0);
            let r = weak_residual(&a.with_reg(0.0), &sol.u, &TestBasis::InteriorHats).unwrap();
            assert!(r < 1e-6, "p = {p}: {r:e}");
            for &i in ball.boundary_nodes() {
                assert_eq!(sol.u.values[i], f.values[i]);
            }
        }
    }

    #[test]
    fn rescaling_examples() {
        let ball = make_ball(2, 0.5, &[0.0, 0.0], 0.5 / 16.0).unwrap();
        let u = DiscreteScalarField::from_fn(&ball, |x| x[0] * x[0] + x[1] * x[1]).unwrap();
        let ut = rescale_to_unit_ball(&u).unwrap();
        for i in 0..ut.ball.num_nodes() {
            let x = ut.ball.coords(i);
            let want = 0.5 * (x[0] * x[0] + x[1] * x[1]);
            assert!((ut.values[i] - want).abs() < 1e-14);
        }
        let back = rescale_from_unit_ball(&ut, &[0.0, 0.0], 0.5).unwrap();
        assert!(back.max_abs_diff(&u).unwrap() < 1e-15);
    }

    #[test]
    fn gradient_region_examples() {
        let ball = make_ball(2, 1.0, &[0.0, 0.0], 0.05).unwrap();
        let x1 = DiscreteScalarField::from_fn(&ball, |x| x[0]).unwrap();
        assert_eq!(field_gradient_region(&x1, 0.5).nodes.len(), ball.interior_nodes().len());
        let zero = DiscreteScalarField::zeros(&ball);
        assert!(field_gradient_region(&zero, 1e-12).nodes.is_empty());
    }
}
