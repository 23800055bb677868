//! Builtin metric families and metric wrappers.
//!
//! Analytic families carry closed-form gradients; sampled and composite
//! metrics fall back to central differences.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{dist, fd_metric_grad, Domain, MetricField, SampledMap};
use crate::error::{Error, Result};

/// Half width of the default box domain of the builtin families.
pub const DEFAULT_HALF_WIDTH: f64 = 2.0;

fn default_domain(dim: usize) -> Domain {
    Domain::cube(dim, DEFAULT_HALF_WIDTH)
}

/// Compactly supported smooth bump `exp(1 - 1/(1 - |x-c|²/w²))`, equal to 1
/// at the center. Returns the value and gradient.
pub fn bump(x: &[f64], center: &[f64], width: f64) -> (f64, Vec<f64>) {
    let t: f64 = x
        .iter()
        .zip(center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / (width * width);
    if t >= 1.0 {
        return (0.0, vec![0.0; x.len()]);
    }
    let v = (1.0 - 1.0 / (1.0 - t)).exp();
    let dv_dt = -v / ((1.0 - t) * (1.0 - t));
    let grad = x
        .iter()
        .zip(center)
        .map(|(a, b)| dv_dt * 2.0 * (a - b) / (width * width))
        .collect();
    (v, grad)
}

#[derive(Clone, Debug)]
pub struct FlatMetric {
    dim: usize,
    domain: Domain,
}

impl FlatMetric {
    pub fn new(dim: usize) -> Self {
        Self::with_domain(dim, Domain::Everywhere)
    }

    pub fn with_domain(dim: usize, domain: Domain) -> Self {
        Self { dim, domain }
    }
}

impl MetricField for FlatMetric {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }
    fn eval_grad(&self, _x: &[f64]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(self.dim, self.dim); self.dim]
    }
    fn domain(&self) -> Domain {
        self.domain.clone()
    }
}

/// Positive scalar factor `c(x)` for conformal scalings `c·g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "factor", rename_all = "lowercase", deny_unknown_fields)]
pub enum ConformalFactor {
    Constant { value: f64 },
    /// `exp(a·x)`
    Exp { a: Vec<f64> },
    /// `(1 + b|x|²)^power`
    Poly {
        b: f64,
        #[serde(default = "one")]
        power: f64,
    },
    /// `1 + s·bump(x; center, width)`
    Bump {
        s: f64,
        center: Vec<f64>,
        width: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl ConformalFactor {
    pub fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self {
            ConformalFactor::Constant { value } => (*value, vec![0.0; x.len()]),
            ConformalFactor::Exp { a } => {
                let c = a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>().exp();
                (c, a.iter().map(|a| a * c).collect())
            }
            ConformalFactor::Poly { b, power } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let base = 1.0 + b * r2;
                let c = base.powf(*power);
                let d = power * base.powf(power - 1.0) * 2.0 * b;
                (c, x.iter().map(|v| d * v).collect())
            }
            ConformalFactor::Bump { s, center, width } => {
                let (v, g) = bump(x, center, *width);
                (1.0 + s * v, g.into_iter().map(|d| s * d).collect())
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.value_and_grad(x).0
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            ConformalFactor::Constant { value } if *value <= 0.0 => {
                Err(Error::spec("constant conformal factor must be positive"))
            }
            ConformalFactor::Exp { a } if a.len() != dim => {
                Err(Error::spec("exp factor needs `a` of length dim"))
            }
            ConformalFactor::Bump { s, center, width } => {
                if center.len() != dim || *width <= 0.0 || *s <= -1.0 {
                    Err(Error::spec("bump factor needs center of length dim, width > 0, s > -1"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// `c(x)·g(x)`.
#[derive(Clone)]
pub struct ScaledMetric {
    base: Arc<dyn MetricField>,
    factor: ConformalFactor,
}

impl ScaledMetric {
    pub fn new(base: Arc<dyn MetricField>, factor: ConformalFactor) -> Self {
        Self { base, factor }
    }

    pub fn factor(&self) -> &ConformalFactor {
        &self.factor
    }
}

impl MetricField for ScaledMetric {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        self.base.eval(x) * self.factor.value(x)
    }
    fn eval_grad(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let (c, dc) = self.factor.value_and_grad(x);
        let g = self.base.eval(x);
        self.base
            .eval_grad(x)
            .into_iter()
            .zip(dc)
            .map(|(dg, dci)| dg * c + &g * dci)
            .collect()
    }
    fn domain(&self) -> Domain {
        self.base.domain()
    }
}

/// One diagonal entry `g_jj = Σ_m coeffs[m] (x^var)^m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagonalTerm {
    pub var: usize,
    pub coeffs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DiagonalMetric {
    terms: Vec<DiagonalTerm>,
    domain: Domain,
}

impl DiagonalMetric {
    pub fn new(terms: Vec<DiagonalTerm>, domain: Domain) -> Result<Self> {
        let n = terms.len();
        if terms.iter().any(|t| t.var >= n || t.coeffs.is_empty()) {
            return Err(Error::spec("diagonal term var out of range or empty coeffs"));
        }
        Ok(Self { terms, domain })
    }

    pub fn constant(diag: &[f64]) -> Self {
        let terms = diag
            .iter()
            .map(|d| DiagonalTerm {
                var: 0,
                coeffs: vec![*d],
            })
            .collect();
        Self {
            terms,
            domain: default_domain(diag.len()),
        }
    }

    /// `diag(1, 1 + (x^1)², ..., 1 + (x^1)²)`.
    pub fn default_for(dim: usize) -> Self {
        let terms = (0..dim)
            .map(|j| DiagonalTerm {
                var: 0,
                coeffs: if j == 0 { vec![1.0] } else { vec![1.0, 0.0, 1.0] },
            })
            .collect();
        Self {
            terms,
            domain: default_domain(dim),
        }
    }

    fn poly(coeffs: &[f64], t: f64) -> (f64, f64) {
        let mut v = 0.0;
        let mut d = 0.0;
        for (m, c) in coeffs.iter().enumerate().rev() {
            d = d * t + v;
            v = v * t + c;
            let _ = m;
        }
        (v, d)
    }
}

impl MetricField for DiagonalMetric {
    fn dim(&self) -> usize {
        self.terms.len()
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let mut g = DMatrix::zeros(n, n);
        for (j, t) in self.terms.iter().enumerate() {
            g[(j, j)] = Self::poly(&t.coeffs, x[t.var]).0;
        }
        g
    }
    fn eval_grad(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.dim();
        let mut out = vec![DMatrix::zeros(n, n); n];
        for (j, t) in self.terms.iter().enumerate() {
            out[t.var][(j, j)] = Self::poly(&t.coeffs, x[t.var]).1;
        }
        out
    }
    fn domain(&self) -> Domain {
        self.domain.clone()
    }
}

/// `I + s·bump(x)·M` with `M` a fixed symmetric shape matrix.
#[derive(Clone, Debug)]
pub struct PerturbedMetric {
    s: f64,
    center: Vec<f64>,
    width: f64,
    shape: DMatrix<f64>,
    domain: Domain,
}

impl PerturbedMetric {
    pub const MAX_STRENGTH: f64 = 0.4;

    /// Default shape: alternating diagonal ±0.6 with 0.3 on the first
    /// off-diagonals (indefinite, so the perturbation both stretches and
    /// shrinks).
    pub fn default_shape(dim: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            m[(j, j)] = if j % 2 == 0 { 0.6 } else { -0.6 };
            if j + 1 < dim {
                m[(j, j + 1)] = 0.3;
                m[(j + 1, j)] = 0.3;
            }
        }
        m
    }

    pub fn default_center(dim: usize) -> Vec<f64> {
        [0.3, 0.2, 0.1]
            .iter()
            .cycle()
            .take(dim)
            .copied()
            .collect()
    }

    pub fn new(
        s: f64,
        center: Vec<f64>,
        width: f64,
        shape: DMatrix<f64>,
        domain: Domain,
    ) -> Result<Self> {
        let n = center.len();
        if shape.nrows() != n || shape.ncols() != n {
            return Err(Error::spec("perturbation shape must be dim x dim"));
        }
        if (&shape - shape.transpose()).amax() > 0.0 {
            return Err(Error::spec("perturbation shape must be symmetric"));
        }
        if s.abs() > Self::MAX_STRENGTH || width <= 0.0 {
            return Err(Error::spec("perturbation needs |s| <= 0.4 and width > 0"));
        }
        if s.abs() * super::spectral_norm(&shape) >= 1.0 {
            return Err(Error::spec("perturbation would lose positive definiteness"));
        }
        Ok(Self {
            s,
            center,
            width,
            shape,
            domain,
        })
    }

    pub fn standard(dim: usize, s: f64) -> Result<Self> {
        Self::new(
            s,
            Self::default_center(dim),
            1.0,
            Self::default_shape(dim),
            default_domain(dim),
        )
    }
}

impl MetricField for PerturbedMetric {
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let (b, _) = bump(x, &self.center, self.width);
        DMatrix::identity(self.dim(), self.dim()) + &self.shape * (self.s * b)
    }
    fn eval_grad(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let (_, db) = bump(x, &self.center, self.width);
        db.into_iter().map(|d| &self.shape * (self.s * d)).collect()
    }
    fn domain(&self) -> Domain {
        self.domain.clone()
    }
}

/// `g_ε(x̃) = g(x0 + ε x̃)`: the metric seen on the unit ball after dilating
/// `B_ε(x0)`.
#[derive(Clone)]
pub struct DilatedMetric {
    inner: Arc<dyn MetricField>,
    x0: Vec<f64>,
    eps: f64,
}

impl DilatedMetric {
    pub fn new(inner: Arc<dyn MetricField>, x0: Vec<f64>, eps: f64) -> Self {
        Self { inner, x0, eps }
    }

    fn map(&self, xt: &[f64]) -> Vec<f64> {
        xt.iter().zip(&self.x0).map(|(a, b)| b + self.eps * a).collect()
    }
}

impl MetricField for DilatedMetric {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        self.inner.eval(&self.map(x))
    }
    fn eval_grad(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        self.inner
            .eval_grad(&self.map(x))
            .into_iter()
            .map(|d| d * self.eps)
            .collect()
    }
    fn domain(&self) -> Domain {
        self.inner.domain().dilated_preimage(&self.x0, self.eps)
    }
}

/// `φ*h` viewed as a metric on the source chart; gradient by central differences.
#[derive(Clone)]
pub struct PulledBackMetric {
    h: Arc<dyn MetricField>,
    phi: Arc<dyn SampledMap>,
    source: Domain,
    step: f64,
}

impl PulledBackMetric {
    pub fn new(h: Arc<dyn MetricField>, phi: Arc<dyn SampledMap>, source: Domain) -> Self {
        Self {
            h,
            phi,
            source,
            step: 1e-5,
        }
    }
}

impl MetricField for PulledBackMetric {
    fn dim(&self) -> usize {
        self.phi.dim_in()
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let jac = self.phi.jacobian(x);
        let m = jac.transpose() * self.h.eval(&self.phi.eval(x)) * &jac;
        0.5 * (&m + m.transpose())
    }
    fn eval_grad(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        fd_metric_grad(self, x, self.step)
    }
    fn domain(&self) -> Domain {
        self.source.clone()
    }
}

/// Metric sampled on a tensor lattice; multilinear in between, gradients by
/// central differences of the samples.
#[derive(Clone, Debug)]
pub struct GridMetric {
    dim: usize,
    axes: Vec<Vec<f64>>,
    /// Row-major full matrices, `dim*dim` values per lattice point; lattice
    /// index is lexicographic with the last axis fastest.
    values: Vec<f64>,
}

impl GridMetric {
    pub fn new(axes: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        let dim = axes.len();
        let count: usize = axes.iter().map(|a| a.len()).product();
        if axes.iter().any(|a| a.len() < 2 || a.windows(2).any(|w| w[1] <= w[0])) {
            return Err(Error::spec("grid metric axes need >= 2 increasing coordinates"));
        }
        if values.len() != count * dim * dim {
            return Err(Error::spec("grid metric sample count does not match lattice"));
        }
        Ok(Self { dim, axes, values })
    }

    /// Samples `g` on the lattice spanned by `axes`.
    pub fn sample<M: MetricField + ?Sized>(g: &M, axes: Vec<Vec<f64>>) -> Result<Self> {
        let dim = axes.len();
        let mut values = Vec::new();
        for idx in lattice_indices(&axes) {
            let x: Vec<f64> = idx.iter().enumerate().map(|(a, &i)| axes[a][i]).collect();
            values.extend(g.eval(&x).transpose().iter());
        }
        let _ = dim;
        Self::new(axes, values)
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (i, a)| acc * a.len() + i)
    }

    fn node(&self, idx: &[usize]) -> &[f64] {
        let k = self.flat_index(idx) * self.dim * self.dim;
        &self.values[k..k + self.dim * self.dim]
    }

    /// Central (one-sided at the lattice edge) difference along `axis` at a node.
    fn node_derivative(&self, idx: &[usize], axis: usize) -> Vec<f64> {
        let len = self.axes[axis].len();
        let lo = idx[axis].saturating_sub(1);
        let hi = (idx[axis] + 1).min(len - 1);
        let mut a = idx.to_vec();
        let mut b = idx.to_vec();
        a[axis] = lo;
        b[axis] = hi;
        let dx = self.axes[axis][hi] - self.axes[axis][lo];
        self.node(&b)
            .iter()
            .zip(self.node(&a))
            .map(|(p, m)| (p - m) / dx)
            .collect()
    }

    /// Multilinear weights: for each corner (bitmask) the lattice index and weight.
    fn stencil(&self, x: &[f64]) -> Vec<(Vec<usize>, f64)> {
        let mut base = Vec::with_capacity(self.dim);
        let mut frac = Vec::with_capacity(self.dim);
        for (a, axis) in self.axes.iter().enumerate() {
            let v = x[a].clamp(axis[0], axis[axis.len() - 1]);
            let mut i = axis.partition_point(|c| *c <= v).saturating_sub(1);
            i = i.min(axis.len() - 2);
            base.push(i);
            frac.push((v - axis[i]) / (axis[i + 1] - axis[i]));
        }
        (0..1usize << self.dim)
            .map(|mask| {
                let mut idx = base.clone();
                let mut w = 1.0;
                for a in 0..self.dim {
                    if mask >> a & 1 == 1 {
                        idx[a] += 1;
                        w *= frac[a];
                    } else {
                        w *= 1.0 - frac[a];
                    }
                }
                (idx, w)
            })
            .collect()
    }
}

pub(crate) fn lattice_indices(axes: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let dim = axes.len();
    let total: usize = axes.iter().map(|a| a.len()).product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        out.push(idx.clone());
        for a in (0..dim).rev() {
            idx[a] += 1;
            if idx[a] < axes[a].len() {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

impl MetricField for GridMetric {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim;
        let mut acc = vec![0.0; n * n];
        for (idx, w) in self.stencil(x) {
            if w != 0.0 {
                for (a, v) in acc.iter_mut().zip(self.node(&idx)) {
                    *a += w * v;
                }
            }
        }
        DMatrix::from_row_slice(n, n, &acc)
    }
    fn eval_grad(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.dim;
        let stencil = self.stencil(x);
        (0..n)
            .map(|axis| {
                let mut acc = vec![0.0; n * n];
                for (idx, w) in &stencil {
                    if *w != 0.0 {
                        for (a, v) in acc.iter_mut().zip(self.node_derivative(idx, axis)) {
                            *a += w * v;
                        }
                    }
                }
                DMatrix::from_row_slice(n, n, &acc)
            })
            .collect()
    }
    fn domain(&self) -> Domain {
        Domain::Box {
            lo: self.axes.iter().map(|a| a[0]).collect(),
            hi: self.axes.iter().map(|a| a[a.len() - 1]).collect(),
        }
    }
}

/// JSON metric description: `{"family": ..., "dim": n, "params": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub family: String,
    pub dim: usize,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagonalParams {
    terms: Vec<DiagonalTerm>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PerturbedParams {
    #[serde(default = "default_s")]
    s: f64,
    center: Option<Vec<f64>>,
    #[serde(default = "one")]
    width: f64,
    shape: Option<Vec<Vec<f64>>>,
}

fn default_s() -> f64 {
    0.3
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampledParams {
    path: String,
}

impl MetricSpec {
    pub fn new(family: &str, dim: usize, params: serde_json::Value) -> Self {
        Self {
            family: family.to_string(),
            dim,
            params,
            domain: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn params_or_empty(&self) -> serde_json::Value {
        if self.params.is_null() {
            serde_json::json!({})
        } else {
            self.params.clone()
        }
    }

    pub fn build(&self) -> Result<Arc<dyn MetricField>> {
        let n = self.dim;
        if n == 0 {
            return Err(Error::spec("metric dim must be positive"));
        }
        let domain = self.domain.clone().unwrap_or_else(|| default_domain(n));
        let params = self.params_or_empty();
        let metric: Arc<dyn MetricField> = match self.family.as_str() {
            "flat" => Arc::new(FlatMetric::with_domain(n, domain)),
            "conformal" => {
                let factor: ConformalFactor = serde_json::from_value(params)?;
                factor.validate(n)?;
                Arc::new(ScaledMetric::new(
                    Arc::new(FlatMetric::with_domain(n, domain)),
                    factor,
                ))
            }
            "diagonal" => {
                let terms = if self.params.is_null() {
                    DiagonalMetric::default_for(n).terms
                } else {
                    serde_json::from_value::<DiagonalParams>(params)?.terms
                };
                if terms.len() != n {
                    return Err(Error::spec("diagonal metric needs one term per dimension"));
                }
                Arc::new(DiagonalMetric::new(terms, domain)?)
            }
            "perturbed" => {
                let p: PerturbedParams = serde_json::from_value(params)?;
                let shape = match p.shape {
                    Some(rows) => {
                        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                            return Err(Error::spec("shape must be dim x dim"));
                        }
                        DMatrix::from_fn(n, n, |i, j| rows[i][j])
                    }
                    None => PerturbedMetric::default_shape(n),
                };
                let center = p.center.unwrap_or_else(|| PerturbedMetric::default_center(n));
                if center.len() != n {
                    return Err(Error::spec("center must have length dim"));
                }
                Arc::new(PerturbedMetric::new(p.s, center, p.width, shape, domain)?)
            }
            "sampled" => {
                let p: SampledParams = serde_json::from_value(params)?;
                let g = crate::io::read_metric_csv(std::path::Path::new(&p.path))?;
                if g.dim() != n {
                    return Err(Error::spec("sampled metric dimension mismatch"));
                }
                Arc::new(g)
            }
            other => return Err(Error::spec(format!("unknown metric family `{other}`"))),
        };
        Ok(metric)
    }
}

/// Distance helper re-exported for metric-domain checks in tests.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    dist(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn builtins(n: usize) -> Vec<(&'static str, Arc<dyn MetricField>)> {
        let flat = || -> Arc<dyn MetricField> { Arc::new(FlatMetric::new(n)) };
        let mut a = vec![0.0; n];
        a[0] = 0.7;
        vec![
            ("flat", flat()),
            ("exp", Arc::new(ScaledMetric::new(flat(), ConformalFactor::Exp { a }))),
            (
                "poly",
                Arc::new(ScaledMetric::new(flat(), ConformalFactor::Poly { b: 1.0, power: -2.0 })),
            ),
            (
                "bump",
                Arc::new(ScaledMetric::new(
                    flat(),
                    ConformalFactor::Bump {
                        s: 0.5,
                        center: vec![0.1; n],
                        width: 1.2,
                    },
                )),
            ),
            ("diag", Arc::new(DiagonalMetric::default_for(n))),
            ("perturbed", Arc::new(PerturbedMetric::standard(n, 0.4).unwrap())),
        ]
    }

    #[test]
    fn builtin_metrics_are_valid_with_consistent_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2usize, 3] {
            for (name, g) in builtins(n) {
                for _ in 0..100 {
                    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let m = g.eval(&x);
                    assert_eq!((&m - m.transpose()).amax(), 0.0, "{name}");
                    let pt = super::super::invert_spd(&m, &x).unwrap();
                    let ident = &pt.inverse * &m;
                    assert!((ident - DMatrix::identity(n, n)).amax() < 1e-12, "{name}");

                    // O(h²) central-difference consistency under step halving
                    let exact = g.eval_grad(&x);
                    let err = |h: f64| -> f64 {
                        fd_metric_grad(&*g, &x, h)
                            .iter()
                            .zip(&exact)
                            .map(|(a, b)| (a - b).amax())
                            .fold(0.0, f64::max)
                    };
                    let (e1, e2) = (err(1e-2), err(5e-3));
                    let scale = exact.iter().map(|d| d.amax()).fold(1e-300, f64::max);
                    assert!(
                        e1 < 1e-12 * scale.max(1.0) || e2 <= e1 / 3.0 || e2 < 1e-9,
                        "{name}: {e1:e} -> {e2:e}"
                    );
                }
            }
        }
    }

    #[test]
    fn perturbed_rejects_strong_perturbations() {
        assert!(PerturbedMetric::standard(2, 0.5).is_err());
        assert!(PerturbedMetric::standard(2, 0.4).is_ok());
    }

    #[test]
    fn grid_metric_reproduces_affine_fields() {
        // g = diag(1 + 0.1 x, 2 + 0.2 y): affine entries are reproduced exactly
        let g = DiagonalMetric::new(
            vec![
                DiagonalTerm { var: 0, coeffs: vec![1.0, 0.1] },
                DiagonalTerm { var: 1, coeffs: vec![2.0, 0.2] },
            ],
            Domain::Everywhere,
        )
        .unwrap();
        let axis: Vec<f64> = (0..11).map(|i| -1.0 + 0.2 * i as f64).collect();
        let s = GridMetric::sample(&g, vec![axis.clone(), axis]).unwrap();
        let x = [0.13, -0.47];
        assert!((s.eval(&x) - g.eval(&x)).amax() < 1e-14);
        let (ds, dg) = (s.eval_grad(&x), g.eval_grad(&x));
        assert!((&ds[0] - &dg[0]).amax() < 1e-12);
        assert!((&ds[1] - &dg[1]).amax() < 1e-12);
    }

    #[test]
    fn spec_parsing() {
        let spec = MetricSpec::from_json(
            r#"{"family":"conformal","dim":2,"params":{"factor":"exp","a":[1.0,0.0]}}"#,
        )
        .unwrap();
        let g = spec.build().unwrap();
        assert!((g.eval(&[1.0, 0.0])[(0, 0)] - 1f64.exp()).abs() < 1e-14);
        assert!(MetricSpec::from_json(r#"{"family":"flat","dim":2,"bogus":1}"#).is_err());
        let bad = MetricSpec::new("perturbed", 2, serde_json::json!({"s": 0.9}));
        assert!(bad.build().is_err());
        let unknown = MetricSpec::new("hyperbolic", 2, serde_json::Value::Null);
        assert!(unknown.build().is_err());
    }
}
