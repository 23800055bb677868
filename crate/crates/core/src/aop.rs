//! The metric-induced A-harmonic operator
//! `A^j(x, q) = |g|^{1/2} g^{jk} (g^{ab} q_a q_b + reg²)^{(p-2)/2} q_k`,
//! its structural constants, the p-Dirichlet energy and the weak residual.
//!
//! Discretization: continuous piecewise-linear functions on the Kuhn
//! triangulation of the active grid cells, with the metric frozen at each
//! cell center. The energy is
//! `E(u) = (1/p) Σ_simplices |g|^{1/2} (ξᵀ g⁻¹ ξ + reg²)^{p/2} · hⁿ/n!`
//! and its nodal gradient is the hat-function pairing `∫ A(x, ∇u)·∇w_i`.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{invert_spd, MetricField};
use crate::grid::{pairwise_sum, simplex_gradient, DiscreteBall, DiscreteScalarField, MAX_DIM};

/// Total number of metric samples used for `alpha`/`beta` over a metric's domain.
pub const CONSTANT_SAMPLES: usize = 20_000;
/// Samples for the monotonicity constant set by [`make_aoperator`].
pub const MONO_SAMPLES: usize = 4_000;
/// `delta_mono` is this fraction of the sampled monotonicity infimum.
pub const MONO_SAFETY: f64 = 0.5;

#[derive(Clone)]
pub struct AOperator {
    pub p: f64,
    pub reg: f64,
    metric: Arc<dyn MetricField>,
    pub alpha: f64,
    pub beta: f64,
    pub delta_mono: f64,
    /// Points used for the constants (a lattice over the metric's domain).
    samples: Arc<Vec<Vec<f64>>>,
}

impl std::fmt::Debug for AOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AOperator")
            .field("p", &self.p)
            .field("reg", &self.reg)
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .field("delta_mono", &self.delta_mono)
            .finish()
    }
}

fn check_exponent(p: f64) -> Result<()> {
    if p > 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::BadExponent(p))
    }
}

/// Pointwise bounds `α(x) = |g|^{1/2} μ_min^{p/2}` and
/// `β(x) = |g|^{1/2} max(μ_max^{p/2}, μ_max μ_*^{(p-2)/2})`, with `μ` the
/// eigenvalues of `g⁻¹` and `μ_* = μ_max` for `p >= 2`, `μ_min` otherwise.
/// `β` dominates both `A·ξ/|ξ|^p` and `|A|/|ξ|^{p-1}`.
fn pointwise_bounds(sqrtg: f64, mu_min: f64, mu_max: f64, p: f64) -> (f64, f64) {
    let alpha = sqrtg * mu_min.powf(p / 2.0);
    let mu_star = if p >= 2.0 { mu_max } else { mu_min };
    let beta = sqrtg * mu_max.powf(p / 2.0).max(mu_max * mu_star.powf((p - 2.0) / 2.0));
    (alpha, beta)
}

pub fn make_aoperator(g: Arc<dyn MetricField>, p: f64, reg: f64) -> Result<AOperator> {
    check_exponent(p)?;
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(Error::spec("reg must be finite and nonnegative"));
    }
    let n = g.dim();
    let per_axis = ((CONSTANT_SAMPLES as f64).powf(1.0 / n as f64).floor() as usize).max(9);
    let samples = g.domain().lattice_samples(n, per_axis);
    if samples.is_empty() {
        return Err(Error::spec("metric domain has no sample points"));
    }
    let mut alpha = f64::INFINITY;
    let mut beta: f64 = 0.0;
    for x in &samples {
        let pt = invert_spd(&g.eval(x), x)?;
        let (a, b) = pointwise_bounds(pt.sqrt_det(), 1.0 / pt.lambda_max, 1.0 / pt.lambda_min, p);
        alpha = alpha.min(a);
        beta = beta.max(b);
    }
    let mut op = AOperator {
        p,
        reg,
        metric: g,
        alpha,
        beta,
        delta_mono: 0.0,
        samples: Arc::new(samples),
    };
    let report = estimate_structural_constants(&op.with_reg(0.0), MONO_SAMPLES, 0)?;
    op.delta_mono = MONO_SAFETY * report.delta_est;
    Ok(op)
}

impl AOperator {
    pub fn metric(&self) -> &Arc<dyn MetricField> {
        &self.metric
    }

    pub fn dim(&self) -> usize {
        self.metric.dim()
    }

    pub fn with_reg(&self, reg: f64) -> AOperator {
        AOperator {
            reg,
            ..self.clone()
        }
    }

    /// `A(x, ξ)`.
    pub fn eval(&self, x: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let pt = invert_spd(&self.metric.eval(x), x)?;
        let v = DVector::from_column_slice(xi);
        let gxi = &pt.inverse * &v;
        let q = v.dot(&gxi) + self.reg * self.reg;
        let w = if q > 0.0 {
            pt.sqrt_det() * q.powf((self.p - 2.0) / 2.0)
        } else {
            0.0
        };
        Ok(gxi.iter().map(|c| w * c).collect())
    }

    /// Operator over the dilated ball: `A_ε(x̃, q) = A(x0 + ε x̃, q)`.
    pub fn dilated(&self, x0: &[f64], eps: f64) -> Result<AOperator> {
        let g: Arc<dyn MetricField> = Arc::new(crate::geometry::DilatedMetric::new(
            self.metric.clone(),
            x0.to_vec(),
            eps,
        ));
        make_aoperator(g, self.p, self.reg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorstPoint {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub zeta: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StructuralReport {
    pub alpha_est: f64,
    pub beta_est: f64,
    pub delta_est: f64,
    pub samples: usize,
    /// Extremal samples for alpha, beta and delta, in that order.
    pub worst_points: Vec<WorstPoint>,
}

fn random_vector<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mag = 10f64.powf(rng.gen_range(-2.0..2.0));
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|t| t * mag / norm).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}

/// Sampled ratios for the structural constants (at `reg = 0`): points are
/// drawn from the operator's metric sample lattice, vector pairs are a mix of
/// independent, nearly equal and nearly opposite pairs over four decades of
/// magnitude.
pub fn estimate_structural_constants(
    a: &AOperator,
    num_samples: usize,
    seed: u64,
) -> Result<StructuralReport> {
    let op = a.with_reg(0.0);
    let n = op.dim();
    let p = op.p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..num_samples.max(1))
        .map(|k| {
            let x = op.samples[rng.gen_range(0..op.samples.len())].clone();
            let xi = random_vector(&mut rng, n);
            let zeta = match k % 3 {
                0 => random_vector(&mut rng, n),
                1 => {
                    let d = random_vector(&mut rng, n);
                    let s = 1e-3 * norm(&xi) / norm(&d);
                    xi.iter().zip(&d).map(|(a, b)| a + s * b).collect()
                }
                _ => {
                    let t = rng.gen_range(0.1..10.0);
                    let d = random_vector(&mut rng, n);
                    let s = 0.05 * norm(&xi) / norm(&d);
                    xi.iter().zip(&d).map(|(a, b)| -t * a + s * b).collect()
                }
            };
            (x, xi, zeta)
        })
        .collect();
    let ratios = draws
        .par_iter()
        .map(|(x, xi, zeta)| -> Result<(f64, f64, f64)> {
            let axi = op.eval(x, xi)?;
            let azeta = op.eval(x, zeta)?;
            let nxi = norm(xi);
            let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            let alpha = dot(&axi, xi) / nxi.powf(p);
            let beta = norm(&axi) / nxi.powf(p - 1.0);
            let dxi: Vec<f64> = xi.iter().zip(zeta).map(|(a, b)| a - b).collect();
            let da: Vec<f64> = axi.iter().zip(&azeta).map(|(a, b)| a - b).collect();
            let delta =
                dot(&da, &dxi) / ((nxi + norm(zeta)).powf(p - 2.0) * dot(&dxi, &dxi));
            Ok((alpha, beta, delta))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = [(f64::INFINITY, 0usize), (f64::NEG_INFINITY, 0), (f64::INFINITY, 0)];
    for (k, (al, be, de)) in ratios.iter().enumerate() {
        if *al < best[0].0 {
            best[0] = (*al, k);
        }
        if *be > best[1].0 {
            best[1] = (*be, k);
        }
        if de.is_finite() && *de < best[2].0 {
            best[2] = (*de, k);
        }
    }
    let worst = |k: usize, same: bool| WorstPoint {
        x: draws[k].0.clone(),
        xi: draws[k].1.clone(),
        zeta: if same { draws[k].1.clone() } else { draws[k].2.clone() },
    };
    Ok(StructuralReport {
        alpha_est: best[0].0,
        beta_est: best[1].0,
        delta_est: best[2].0,
        samples: ratios.len(),
        worst_points: vec![worst(best[0].1, true), worst(best[1].1, true), worst(best[2].1, false)],
    })
}

/// Metric data frozen at the active cell centers of a grid.
#[derive(Clone, Debug)]
pub struct CellMetrics {
    pub ball: Arc<DiscreteBall>,
    pub sqrtg: Vec<f64>,
    /// `g⁻¹` per cell, row-major `n*n`.
    pub ginv: Vec<f64>,
    /// Extreme eigenvalues of `g⁻¹` per cell.
    pub mu_min: Vec<f64>,
    pub mu_max: Vec<f64>,
}

impl CellMetrics {
    pub fn new(metric: &dyn MetricField, ball: &Arc<DiscreteBall>) -> Result<Self> {
        let n = ball.dim();
        if metric.dim() != n {
            return Err(Error::GridMismatch(format!(
                "metric dimension {} on a {n}-dimensional grid",
                metric.dim()
            )));
        }
        let h = ball.h();
        let domain = metric.domain();
        let per_cell = (0..ball.num_cells())
            .into_par_iter()
            .map(|c| -> Result<(f64, Vec<f64>, f64, f64)> {
                let mut x = ball.coords(ball.cell_corners(c)[0] as usize);
                for v in x.iter_mut() {
                    *v += 0.5 * h;
                }
                if !domain.contains(&x) {
                    return Err(Error::DomainEscape {
                        point: x,
                        what: "metric",
                    });
                }
                let pt = invert_spd(&metric.eval(&x), &x)?;
                Ok((
                    pt.sqrt_det(),
                    pt.inverse.transpose().iter().copied().collect(),
                    1.0 / pt.lambda_max,
                    1.0 / pt.lambda_min,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = CellMetrics {
            ball: ball.clone(),
            sqrtg: Vec::with_capacity(per_cell.len()),
            ginv: Vec::with_capacity(per_cell.len() * n * n),
            mu_min: Vec::with_capacity(per_cell.len()),
            mu_max: Vec::with_capacity(per_cell.len()),
        };
        for (s, gi, lo, hi) in per_cell {
            out.sqrtg.push(s);
            out.ginv.extend(gi);
            out.mu_min.push(lo);
            out.mu_max.push(hi);
        }
        Ok(out)
    }

    /// `(α, β)` over the quadrature points: the sharp constants for the
    /// discrete energy.
    pub fn quadrature_bounds(&self, p: f64) -> (f64, f64) {
        let mut alpha = f64::INFINITY;
        let mut beta: f64 = 0.0;
        for c in 0..self.sqrtg.len() {
            let (a, b) = pointwise_bounds(self.sqrtg[c], self.mu_min[c], self.mu_max[c], p);
            alpha = alpha.min(a);
            beta = beta.max(b);
        }
        (alpha, beta)
    }
}

/// Assembly kernels for one (metric, grid, p) triple.
#[derive(Clone, Debug)]
pub struct Assembly {
    pub cells: CellMetrics,
    pub p: f64,
}

impl Assembly {
    pub fn new(a: &AOperator, ball: &Arc<DiscreteBall>) -> Result<Self> {
        Ok(Self {
            cells: CellMetrics::new(&**a.metric(), ball)?,
            p: a.p,
        })
    }

    pub fn ball(&self) -> &Arc<DiscreteBall> {
        &self.cells.ball
    }

    fn nsimp(&self) -> usize {
        self.ball().kuhn().perms.len()
    }

    /// Sums per-cell local vectors (`2^n` per cell) into nodal vectors.
    fn gather(&self, local: &[f64]) -> Vec<f64> {
        let ball = self.ball();
        let corners = 1usize << ball.dim();
        (0..ball.num_nodes())
            .into_par_iter()
            .map(|i| {
                let mut s = 0.0;
                for (b, &c) in ball.node_cells(i).iter().enumerate() {
                    if c != u32::MAX {
                        s += local[c as usize * corners + b];
                    }
                }
                s
            })
            .collect()
    }

    /// Scatters the flux `coef · g⁻¹ ξ` of simplex `s` into the cell's local vector.
    #[inline]
    fn scatter(&self, c: usize, s: usize, coef: f64, gxi: &[f64], local: &mut [f64]) {
        let kuhn = self.ball().kuhn();
        let perm = &kuhn.perms[s];
        let path = &kuhn.paths[s];
        for k in 0..perm.len() {
            let f = coef * gxi[perm[k]];
            local[path[k + 1]] += f;
            local[path[k]] -= f;
        }
        let _ = c;
    }

    #[inline]
    fn apply_ginv(&self, c: usize, xi: &[f64], out: &mut [f64]) -> f64 {
        let n = xi.len();
        let g = &self.cells.ginv[c * n * n..(c + 1) * n * n];
        let mut q = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += g[i * n + j] * xi[j];
            }
            out[i] = s;
            q += s * xi[i];
        }
        q
    }

    /// Energy and its gradient with respect to all nodal values.
    pub fn energy_and_gradient(&self, reg: f64, values: &[f64]) -> (f64, Vec<f64>) {
        let ball = self.ball();
        let n = ball.dim();
        let corners = 1usize << n;
        let vol = ball.simplex_volume();
        let h = ball.h();
        let p = self.p;
        let nsimp = self.nsimp();
        let mut local = vec![0.0; ball.num_cells() * corners];
        let energies: Vec<f64> = local
            .par_chunks_mut(corners)
            .enumerate()
            .map(|(c, loc)| {
                let mut xi = [0.0; MAX_DIM];
                let mut gxi = [0.0; MAX_DIM];
                let sg = self.cells.sqrtg[c];
                let mut e = 0.0;
                for s in 0..nsimp {
                    simplex_gradient(ball, values, c, s, &mut xi[..n]);
                    let base = self.apply_ginv(c, &xi[..n], &mut gxi[..n]) + reg * reg;
                    if base > 0.0 {
                        let pw = base.powf((p - 2.0) / 2.0);
                        e += sg * pw * base / p;
                        self.scatter(c, s, sg * pw * vol / h, &gxi[..n], loc);
                    }
                }
                e * vol
            })
            .collect();
        (pairwise_sum(&energies), self.gather(&local))
    }

    pub fn energy(&self, reg: f64, values: &[f64]) -> f64 {
        let ball = self.ball();
        let n = ball.dim();
        let p = self.p;
        let nsimp = self.nsimp();
        let energies: Vec<f64> = (0..ball.num_cells())
            .into_par_iter()
            .map(|c| {
                let mut xi = [0.0; MAX_DIM];
                let mut gxi = [0.0; MAX_DIM];
                let mut e = 0.0;
                for s in 0..nsimp {
                    simplex_gradient(ball, values, c, s, &mut xi[..n]);
                    let base = self.apply_ginv(c, &xi[..n], &mut gxi[..n]) + reg * reg;
                    e += base.powf(p / 2.0);
                }
                e * self.cells.sqrtg[c] / p
            })
            .collect();
        pairwise_sum(&energies) * ball.simplex_volume()
    }

    /// Frozen Kačanov weights `|g|^{1/2} (ξᵀg⁻¹ξ + reg²)^{(p-2)/2}` per simplex.
    pub fn weights(&self, reg: f64, values: &[f64]) -> Vec<f64> {
        let ball = self.ball();
        let n = ball.dim();
        let p = self.p;
        let nsimp = self.nsimp();
        let mut w = vec![0.0; ball.num_cells() * nsimp];
        w.par_chunks_mut(nsimp).enumerate().for_each(|(c, wc)| {
            let mut xi = [0.0; MAX_DIM];
            let mut gxi = [0.0; MAX_DIM];
            for (s, ws) in wc.iter_mut().enumerate() {
                simplex_gradient(ball, values, c, s, &mut xi[..n]);
                let base = self.apply_ginv(c, &xi[..n], &mut gxi[..n]) + reg * reg;
                *ws = self.cells.sqrtg[c] * base.powf((p - 2.0) / 2.0);
            }
        });
        w
    }

    /// `K_w d` for the weighted Laplacian with simplex weights `w`.
    pub fn apply(&self, w: &[f64], d: &[f64]) -> Vec<f64> {
        let ball = self.ball();
        let n = ball.dim();
        let corners = 1usize << n;
        let vol = ball.simplex_volume();
        let h = ball.h();
        let nsimp = self.nsimp();
        let mut local = vec![0.0; ball.num_cells() * corners];
        local.par_chunks_mut(corners).enumerate().for_each(|(c, loc)| {
            let mut xi = [0.0; MAX_DIM];
            let mut gxi = [0.0; MAX_DIM];
            for s in 0..nsimp {
                simplex_gradient(ball, d, c, s, &mut xi[..n]);
                self.apply_ginv(c, &xi[..n], &mut gxi[..n]);
                self.scatter(c, s, w[c * nsimp + s] * vol / h, &gxi[..n], loc);
            }
        });
        self.gather(&local)
    }

    /// Diagonal of `K_w`.
    pub fn diagonal(&self, w: &[f64]) -> Vec<f64> {
        let ball = self.ball();
        let n = ball.dim();
        let corners = 1usize << n;
        let vol = ball.simplex_volume();
        let h2 = ball.h() * ball.h();
        let nsimp = self.nsimp();
        let kuhn = ball.kuhn();
        let mut local = vec![0.0; ball.num_cells() * corners];
        local.par_chunks_mut(corners).enumerate().for_each(|(c, loc)| {
            let g = &self.cells.ginv[c * n * n..(c + 1) * n * n];
            for s in 0..nsimp {
                let perm = &kuhn.perms[s];
                let path = &kuhn.paths[s];
                let ws = w[c * nsimp + s] * vol / h2;
                for k in 0..=n {
                    // hat gradient at path vertex k: (e_{π_k}[k>=1] - e_{π_{k+1}}[k<n]) / h
                    let mut q = 0.0;
                    if k >= 1 {
                        q += g[perm[k - 1] * n + perm[k - 1]];
                    }
                    if k < n {
                        q += g[perm[k] * n + perm[k]];
                    }
                    if k >= 1 && k < n {
                        q -= 2.0 * g[perm[k - 1] * n + perm[k]];
                    }
                    loc[path[k]] += ws * q;
                }
            }
        });
        self.gather(&local)
    }
}

/// Test functions for [`weak_residual`].
#[derive(Clone, Debug)]
pub enum TestBasis {
    /// Hat functions at all interior nodes.
    InteriorHats,
    /// Hat functions at the interior nodes flagged `true`.
    Masked(Vec<bool>),
}

fn check_field(a: &AOperator, u: &DiscreteScalarField) -> Result<()> {
    if a.dim() != u.ball.dim() {
        return Err(Error::GridMismatch(format!(
            "operator dimension {} vs field dimension {}",
            a.dim(),
            u.ball.dim()
        )));
    }
    Ok(())
}

pub fn dirichlet_energy(a: &AOperator, u: &DiscreteScalarField) -> Result<f64> {
    check_field(a, u)?;
    Ok(Assembly::new(a, &u.ball)?.energy(a.reg, &u.values))
}

/// Nodal gradient of [`dirichlet_energy`].
pub fn energy_gradient(a: &AOperator, u: &DiscreteScalarField) -> Result<Vec<f64>> {
    check_field(a, u)?;
    Ok(Assembly::new(a, &u.ball)?.energy_and_gradient(a.reg, &u.values).1)
}

/// Largest hat-function pairing `|∫ A(x, ∇u)·∇w_i| / ∫ w_i` over the basis.
///
/// Dividing by the hat's mass `hⁿ` makes the value a consistent
/// approximation of the strong residual `|div A(x, ∇u)|`, so it decays
/// under refinement exactly when the discrete field approaches a solution.
pub fn weak_residual(a: &AOperator, u: &DiscreteScalarField, basis: &TestBasis) -> Result<f64> {
    let grad = energy_gradient(a, u)?;
    Ok(residual_from_gradient(&u.ball, &grad, basis))
}

pub(crate) fn residual_from_gradient(ball: &DiscreteBall, grad: &[f64], basis: &TestBasis) -> f64 {
    let mass = ball.h().powi(ball.dim() as i32);
    ball.interior_nodes()
        .iter()
        .filter(|&&i| match basis {
            TestBasis::InteriorHats => true,
            TestBasis::Masked(m) => m[i],
        })
        .map(|&i| grad[i].abs() / mass)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ConformalFactor, FlatMetric, PerturbedMetric, ScaledMetric};
    use crate::grid::make_ball;
    use std::f64::consts::PI;

    fn flat(n: usize) -> Arc<dyn MetricField> {
        Arc::new(FlatMetric::new(n))
    }

    #[test]
    fn eval_examples() {
        let a = make_aoperator(flat(2), 2.0, 0.0).unwrap();
        assert_eq!(a.eval(&[0.1, 0.2], &[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
        assert!((a.alpha - 1.0).abs() < 1e-15 && (a.beta - 1.0).abs() < 1e-15);
        let a = make_aoperator(flat(2), 4.0, 0.0).unwrap();
        assert_eq!(a.eval(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let four = Arc::new(ScaledMetric::new(flat(2), ConformalFactor::Constant { value: 4.0 }));
        let a = make_aoperator(four, 2.0, 0.0).unwrap();
        let v = a.eval(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1].abs() < 1e-15);
        assert!(matches!(make_aoperator(flat(2), 1.0, 0.0), Err(Error::BadExponent(_))));
    }

    #[test]
    fn structural_constants_flat() {
        let a = make_aoperator(flat(2), 2.0, 0.0).unwrap();
        let r = estimate_structural_constants(&a, 2000, 1).unwrap();
        for v in [r.alpha_est, r.beta_est, r.delta_est] {
            assert!((v - 1.0).abs() < 1e-12, "{v}");
        }
        let a = make_aoperator(flat(2), 4.0, 0.0).unwrap();
        let r = estimate_structural_constants(&a, 100_000, 2).unwrap();
        assert!(r.delta_est > 0.0 && r.delta_est <= 1.0);
        let g = Arc::new(PerturbedMetric::standard(2, 0.3).unwrap());
        let a = make_aoperator(g, 3.0, 0.0).unwrap();
        let r = estimate_structural_constants(&a, 20_000, 3).unwrap();
        assert!(r.alpha_est > 0.0 && r.delta_est > 0.0);
        assert!(r.alpha_est <= 1.0 && 1.0 <= r.beta_est);
        assert!(r.alpha_est >= a.alpha * (1.0 - 1e-12) && r.beta_est <= a.beta * (1.0 + 1e-12));
    }

    #[test]
    fn energy_closed_forms() {
        let ball = make_ball(2, 1.0, &[0.0, 0.0], 0.01).unwrap();
        let x1 = DiscreteScalarField::from_fn(&ball, |x| x[0]).unwrap();
        // active cells cover the disc up to O(h), so the energies converge to π/2, π/4
        let e2 = dirichlet_energy(&make_aoperator(flat(2), 2.0, 0.0).unwrap(), &x1).unwrap();
        assert!((e2 - PI / 2.0).abs() < 0.03, "{e2}");
        let e4 = dirichlet_energy(&make_aoperator(flat(2), 4.0, 0.0).unwrap(), &x1).unwrap();
        assert!((e4 - PI / 4.0).abs() < 0.02, "{e4}");
        let c = DiscreteScalarField::from_fn(&ball, |_| 2.0).unwrap();
        assert_eq!(dirichlet_energy(&make_aoperator(flat(2), 3.0, 0.0).unwrap(), &c).unwrap(), 0.0);
    }

    #[test]
    fn affine_fields_have_zero_residual() {
        for p in [1.5, 2.0, 3.0, 4.0] {
            let ball = make_ball(3, 1.0, &[0.0; 3], 0.1).unwrap();
            let a = make_aoperator(flat(3), p, 0.0).unwrap();
            let u = DiscreteScalarField::from_fn(&ball, |x| 0.5 + x[0] - 2.0 * x[1] + 0.3 * x[2])
                .unwrap();
            let r = weak_residual(&a, &u, &TestBasis::InteriorHats).unwrap();
            // roundoff relative to the flux magnitude |ξ|^{p-1}
            let flux = (1.0f64 + 4.0 + 0.09).sqrt().powf(p - 1.0);
            assert!(r < 1e-12 * flux, "p = {p}: {r:e}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = Arc::new(PerturbedMetric::standard(2, 0.3).unwrap());
        let ball = make_ball(2, 1.0, &[0.0, 0.0], 0.1).unwrap();
        let u = DiscreteScalarField::from_fn(&ball, |x| (2.0 * x[0]).sin() + x[1] * x[1]).unwrap();
        for p in [1.5, 3.0] {
            let a = make_aoperator(g.clone(), p, 1e-2).unwrap();
            let asm = Assembly::new(&a, &ball).unwrap();
            let (_, grad) = asm.energy_and_gradient(a.reg, &u.values);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..20 {
                let i = rng.gen_range(0..ball.num_nodes());
                let step = 1e-6;
                let mut v = u.values.clone();
                v[i] += step;
                let ep = asm.energy(a.reg, &v);
                v[i] -= 2.0 * step;
                let em = asm.energy(a.reg, &v);
                let fd = (ep - em) / (2.0 * step);
                assert!(
                    (fd - grad[i]).abs() <= 1e-6 * grad[i].abs().max(1e-6),
                    "node {i}: {fd:e} vs {:e}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn weighted_laplacian_matches_energy_hessian_at_p2() {
        let g = Arc::new(PerturbedMetric::standard(2, 0.3).unwrap());
        let ball = make_ball(2, 1.0, &[0.0, 0.0], 0.2).unwrap();
        let a = make_aoperator(g, 2.0, 0.0).unwrap();
        let asm = Assembly::new(&a, &ball).unwrap();
        let zeros = vec![0.0; ball.num_nodes()];
        let w = asm.weights(0.0, &zeros);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d: Vec<f64> = (0..ball.num_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // at p = 2 the energy gradient is linear: ∇E(d) = K d
        let kd = asm.apply(&w, &d);
        let (_, grad) = asm.energy_and_gradient(0.0, &d);
        for (x, y) in kd.iter().zip(&grad) {
            assert!((x - y).abs() < 1e-12);
        }
        let diag = asm.diagonal(&w);
        for i in [0, 5, ball.num_nodes() / 2] {
            let mut e = vec![0.0; ball.num_nodes()];
            e[i] = 1.0;
            assert!((asm.apply(&w, &e)[i] - diag[i]).abs() < 1e-12);
        }
    }
}
