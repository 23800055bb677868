//! Riemannian metrics on Euclidean charts and the tensor quantities derived
//! from them: inverse and determinant, Christoffel symbols, pullbacks by
//! smooth maps, and the coordinate p-harmonicity test
//! `Γ^k = ((p-2)/2) g^{ki} ∂_i log g^{kk}`.
//!
//! Metrics are immutable trait objects ([`MetricField`]) and may be shared
//! across threads. Builtin analytic families live in [`metrics`], smooth maps
//! between charts in [`maps`].

pub mod maps;
pub mod metrics;

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use maps::{MapSpec, SampledMap};
pub use metrics::{
    ConformalFactor, DiagonalMetric, DilatedMetric, FlatMetric, GridMetric, MetricSpec,
    PerturbedMetric, PulledBackMetric, ScaledMetric,
};

/// Condition-number ceiling past which a metric is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Region of ℝⁿ on which a metric or map is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Domain {
    Everywhere,
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// Complement of the closed ball `|x - center| <= inner`.
    Exterior { center: Vec<f64>, inner: f64 },
}

impl Domain {
    pub fn cube(dim: usize, half_width: f64) -> Self {
        Domain::Box {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        const SLACK: f64 = 1e-12;
        match self {
            Domain::Everywhere => x.iter().all(|v| v.is_finite()),
            Domain::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (l, h))| *v >= l - SLACK && *v <= h + SLACK),
            Domain::Ball { center, radius } => dist(x, center) <= radius + SLACK,
            Domain::Exterior { center, inner } => dist(x, center) > *inner,
        }
    }

    /// The set of `x̃` with `x0 + scale * x̃` in `self`.
    pub fn dilated_preimage(&self, x0: &[f64], scale: f64) -> Domain {
        let pull = |y: &[f64]| -> Vec<f64> {
            y.iter().zip(x0).map(|(a, b)| (a - b) / scale).collect()
        };
        match self {
            Domain::Everywhere => Domain::Everywhere,
            Domain::Box { lo, hi } => Domain::Box {
                lo: pull(lo),
                hi: pull(hi),
            },
            Domain::Ball { center, radius } => Domain::Ball {
                center: pull(center),
                radius: radius / scale,
            },
            Domain::Exterior { center, inner } => Domain::Exterior {
                center: pull(center),
                inner: inner / scale,
            },
        }
    }

    /// Deterministic sample points covering the domain (tensor lattice with
    /// `per_axis` points per axis, restricted to the domain). Unbounded
    /// domains are sampled on the cube `[-2, 2]^n`.
    pub fn lattice_samples(&self, dim: usize, per_axis: usize) -> Vec<Vec<f64>> {
        let (lo, hi) = match self {
            Domain::Box { lo, hi } => (lo.clone(), hi.clone()),
            Domain::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            Domain::Everywhere | Domain::Exterior { .. } => (vec![-2.0; dim], vec![2.0; dim]),
        };
        let per_axis = per_axis.max(2);
        let total = per_axis.pow(dim as u32);
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; dim];
        for _ in 0..total {
            let x: Vec<f64> = (0..dim)
                .map(|a| lo[a] + (hi[a] - lo[a]) * idx[a] as f64 / (per_axis - 1) as f64)
                .collect();
            if self.contains(&x) {
                out.push(x);
            }
            for a in 0..dim {
                idx[a] += 1;
                if idx[a] < per_axis {
                    break;
                }
                idx[a] = 0;
            }
        }
        out
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// A smooth symmetric positive-definite matrix field `g_{jk}(x)` on a chart.
pub trait MetricField: Send + Sync {
    fn dim(&self) -> usize;
    /// `g_{jk}(x)`.
    fn eval(&self, x: &[f64]) -> DMatrix<f64>;
    /// `∂_i g_{jk}(x)`, entry `i` of the returned vector.
    fn eval_grad(&self, x: &[f64]) -> Vec<DMatrix<f64>>;
    fn domain(&self) -> Domain;
}

impl<M: MetricField + ?Sized> MetricField for Arc<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        (**self).eval(x)
    }
    fn eval_grad(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        (**self).eval_grad(x)
    }
    fn domain(&self) -> Domain {
        (**self).domain()
    }
}

/// Central-difference gradient of a metric, used where no closed form exists.
pub fn fd_metric_grad<M: MetricField + ?Sized>(g: &M, x: &[f64], step: f64) -> Vec<DMatrix<f64>> {
    let mut xp = x.to_vec();
    (0..g.dim())
        .map(|i| {
            xp[i] = x[i] + step;
            let plus = g.eval(&xp);
            xp[i] = x[i] - step;
            let minus = g.eval(&xp);
            xp[i] = x[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Inverse, determinant and spectral extremes of a metric at one point.
#[derive(Clone, Debug)]
pub struct MetricPoint {
    pub g: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub det: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl MetricPoint {
    pub fn sqrt_det(&self) -> f64 {
        self.det.sqrt()
    }
}

/// Checks symmetry, positive definiteness and conditioning of `g` and returns
/// its inverse and determinant.
pub fn invert_spd(g: &DMatrix<f64>, x: &[f64]) -> Result<MetricPoint> {
    let n = g.nrows();
    let scale = g.amax().max(f64::MIN_POSITIVE);
    let asym = (g - g.transpose()).amax();
    let singular = |reason: String| Error::SingularMetric {
        point: x.to_vec(),
        reason,
    };
    if !g.iter().all(|v| v.is_finite()) {
        return Err(singular("non-finite entries".into()));
    }
    if asym > 1e-12 * scale {
        return Err(singular(format!("asymmetry {asym:e}")));
    }
    let eig = SymmetricEigen::new(g.clone());
    let lambda_min = eig.eigenvalues.min();
    let lambda_max = eig.eigenvalues.max();
    if lambda_min <= 0.0 {
        return Err(singular(format!("lambda_min = {lambda_min:e}")));
    }
    if lambda_max / lambda_min > MAX_CONDITION {
        return Err(singular(format!(
            "condition number {:e}",
            lambda_max / lambda_min
        )));
    }
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| singular("cholesky failed".into()))?;
    let det = chol.l().diagonal().iter().map(|d| d * d).product();
    let mut inverse = chol.inverse();
    // exact symmetry for downstream quadratic forms
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inverse[(i, j)] + inverse[(j, i)]);
            inverse[(i, j)] = m;
            inverse[(j, i)] = m;
        }
    }
    Ok(MetricPoint {
        g: g.clone(),
        inverse,
        det,
        lambda_min,
        lambda_max,
    })
}

/// `(g^{jk}(x), |g|(x))`.
pub fn inverse_and_det<M: MetricField + ?Sized>(g: &M, x: &[f64]) -> Result<(DMatrix<f64>, f64)> {
    let pt = invert_spd(&g.eval(x), x)?;
    Ok((pt.inverse, pt.det))
}

/// Christoffel symbols of the second kind at one point, stored `[k][i][j]`.
#[derive(Clone, Debug)]
pub struct ChristoffelAt {
    pub dim: usize,
    pub gamma: Vec<f64>,
    /// `Γ^k = g^{ij} Γ^k_{ij}`.
    pub contracted: Vec<f64>,
}

impl ChristoffelAt {
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.gamma[(k * self.dim + i) * self.dim + j]
    }
}

/// Christoffel symbols of a metric field, evaluated lazily.
#[derive(Clone)]
pub struct ChristoffelField {
    metric: Arc<dyn MetricField>,
}

impl ChristoffelField {
    pub fn at(&self, x: &[f64]) -> Result<ChristoffelAt> {
        let g = &self.metric;
        let n = g.dim();
        let pt = invert_spd(&g.eval(x), x)?;
        let dg = g.eval_grad(x);
        let ginv = &pt.inverse;
        let mut gamma = vec![0.0; n * n * n];
        for k in 0..n {
            for i in 0..n {
                for j in 0..=i {
                    let mut s = 0.0;
                    for l in 0..n {
                        s += ginv[(k, l)] * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                    }
                    gamma[(k * n + i) * n + j] = 0.5 * s;
                    gamma[(k * n + j) * n + i] = 0.5 * s;
                }
            }
        }
        let contracted = (0..n)
            .map(|k| {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += ginv[(i, j)] * gamma[(k * n + i) * n + j];
                    }
                }
                s
            })
            .collect();
        Ok(ChristoffelAt {
            dim: n,
            gamma,
            contracted,
        })
    }

    pub fn metric(&self) -> &Arc<dyn MetricField> {
        &self.metric
    }
}

pub fn christoffel(g: Arc<dyn MetricField>) -> ChristoffelField {
    ChristoffelField { metric: g }
}

/// `(φ*h)(x) = Dφ(x)ᵀ h(φ(x)) Dφ(x)`.
pub fn pullback_metric<H, P>(h: &H, phi: &P, x: &[f64]) -> Result<DMatrix<f64>>
where
    H: MetricField + ?Sized,
    P: SampledMap + ?Sized,
{
    let y = phi.eval(x);
    if !h.domain().contains(&y) {
        return Err(Error::DomainEscape {
            point: y,
            what: "target metric",
        });
    }
    let jac = phi.jacobian(x);
    let m = jac.transpose() * h.eval(&y) * &jac;
    Ok(0.5 * (&m + m.transpose()))
}

/// `r^k = Γ^k - ((p-2)/2) g^{ki} ∂_i log g^{kk}`; vanishes iff the coordinate
/// function `x^k` is p-harmonic for `g` at `x`.
pub fn christoffel_pharmonic_residual<M: MetricField + ?Sized>(
    g: &M,
    p: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::BadExponent(p));
    }
    let n = g.dim();
    let pt = invert_spd(&g.eval(x), x)?;
    let ginv = &pt.inverse;
    let dg = g.eval_grad(x);
    // Γ^k = g^{ij} Γ^k_ij = g^{kl} (g^{ij} ∂_i g_jl - ½ g^{ij} ∂_l g_ij)
    let mut first = vec![0.0; n]; // v_l = g^{ij} ∂_i g_{jl} - ½ g^{ij} ∂_l g_{ij}
    for (l, fl) in first.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += ginv[(i, j)] * (dg[i][(j, l)] - 0.5 * dg[l][(i, j)]);
            }
        }
        *fl = s;
    }
    let mut out = vec![0.0; n];
    for k in 0..n {
        let gamma_k: f64 = (0..n).map(|l| ginv[(k, l)] * first[l]).sum();
        // ∂_i g^{kk} = -(g^{-1} ∂_i g g^{-1})_{kk}
        let log_term: f64 = (0..n)
            .map(|i| {
                let row = ginv.row(k);
                let d_inv_kk = -(row * &dg[i] * row.transpose())[(0, 0)];
                ginv[(k, i)] * d_inv_kk / ginv[(k, k)]
            })
            .sum();
        out[k] = gamma_k - 0.5 * (p - 2.0) * log_term;
    }
    Ok(out)
}

/// Symmetric square root of an SPD matrix.
pub fn spd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}
