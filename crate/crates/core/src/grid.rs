//! Uniform Cartesian grids restricted to balls (and annuli), nodal scalar
//! fields, finite-difference gradients, discrete norms and the interpolation
//! and second-difference diagnostics.
//!
//! Each grid also carries the Kuhn triangulation of its active cells: every
//! cell whose `2^n` corners are all nodes is split into `n!` simplices along
//! monotone lattice paths. The energy and weak residual in [`crate::aop`] use
//! piecewise-linear elements on these simplices.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported dimension (the Kuhn triangulation has `n!` simplices per cell).
pub const MAX_DIM: usize = 4;

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Interior,
    Boundary,
}

/// Serializable description of a grid; enough to rebuild it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallMeta {
    pub dim: usize,
    pub radius: f64,
    pub center: Vec<f64>,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner: Option<f64>,
}

impl BallMeta {
    pub fn build(&self) -> Result<Arc<DiscreteBall>> {
        match self.inner {
            None => make_ball(self.dim, self.radius, &self.center, self.h),
            Some(inner) => make_annulus(self.dim, inner, self.radius, &self.center, self.h),
        }
    }
}

/// Kuhn (Freudenthal) triangulation of the unit cube.
#[derive(Clone, Debug)]
pub struct Kuhn {
    /// Axis order `π` of each simplex.
    pub perms: Vec<Vec<usize>>,
    /// Corner bitmasks `v_0 = 0, v_k = v_{k-1} | 1 << π_k` along each path.
    pub paths: Vec<Vec<usize>>,
}

impl Kuhn {
    fn new(n: usize) -> Self {
        let mut perms = Vec::new();
        permutations(&mut (0..n).collect::<Vec<_>>(), 0, &mut perms);
        perms.sort();
        let paths = perms
            .iter()
            .map(|p| {
                let mut mask = 0usize;
                let mut path = vec![0];
                for &a in p {
                    mask |= 1 << a;
                    path.push(mask);
                }
                path
            })
            .collect();
        Self { perms, paths }
    }
}

fn permutations(v: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == v.len() {
        out.push(v.clone());
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, out);
        v.swap(k, i);
    }
}

/// Uniform grid `center + h·k`, `k ∈ ℤⁿ`, restricted to `|x - center| <= R`
/// (and `>= inner` for annuli).
///
/// A node is interior when the closed cube of half-diagonal `√n·h` around it
/// stays inside the region, so every cell touching an interior node is
/// active; all other nodes are boundary nodes carrying Dirichlet data.
#[derive(Debug)]
pub struct DiscreteBall {
    dim: usize,
    radius: f64,
    inner: Option<f64>,
    center: Vec<f64>,
    h: f64,
    half: usize,
    side: usize,
    lattice_to_node: Vec<u32>,
    node_lattice: Vec<Vec<i64>>,
    kind: Vec<NodeKind>,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    /// `2^n` corner node ids per active cell, corner `b` at `base + b`.
    cell_corners: Vec<u32>,
    /// For each node and each `b`, the cell whose corner `b` is this node.
    node_cells: Vec<u32>,
    kuhn: Kuhn,
}

pub fn make_ball(dim: usize, radius: f64, center: &[f64], h: f64) -> Result<Arc<DiscreteBall>> {
    DiscreteBall::build(dim, radius, None, center, h)
}

pub fn make_annulus(
    dim: usize,
    inner: f64,
    outer: f64,
    center: &[f64],
    h: f64,
) -> Result<Arc<DiscreteBall>> {
    if !(inner > 0.0 && inner < outer) {
        return Err(Error::spec("annulus needs 0 < inner < outer"));
    }
    DiscreteBall::build(dim, outer, Some(inner), center, h)
}

impl DiscreteBall {
    fn build(
        dim: usize,
        radius: f64,
        inner: Option<f64>,
        center: &[f64],
        h: f64,
    ) -> Result<Arc<Self>> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::spec(format!("dimension must be in 1..={MAX_DIM}")));
        }
        if center.len() != dim {
            return Err(Error::GridMismatch(format!(
                "center has length {} for dim {dim}",
                center.len()
            )));
        }
        if !(radius > 0.0 && h > 0.0 && radius.is_finite()) {
            return Err(Error::spec("radius and h must be positive"));
        }
        if h >= radius / 4.0 {
            return Err(Error::TooCoarse {
                h,
                limit: radius / 4.0,
            });
        }
        let tol = 1e-9 * h;
        let half = (radius / h + 1e-9).floor() as usize;
        let side = 2 * half + 1;
        let total = side.pow(dim as u32);
        let band = (dim as f64).sqrt() * h;

        let mut lattice_to_node = vec![NONE; total];
        let mut node_lattice = Vec::new();
        let mut kind = Vec::new();
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        let mut k = vec![0i64; dim];
        for (flat, slot) in lattice_to_node.iter_mut().enumerate() {
            unflatten(flat, side, &mut k);
            let r = (k.iter().map(|&v| ((v - half as i64) as f64).powi(2)).sum::<f64>()).sqrt() * h;
            let inside = r <= radius + tol && inner.is_none_or(|a| r >= a - tol);
            if !inside {
                continue;
            }
            let id = node_lattice.len();
            *slot = id as u32;
            node_lattice.push(k.iter().map(|&v| v - half as i64).collect());
            let deep = r <= radius - band + tol && inner.is_none_or(|a| r >= a + band - tol);
            if deep {
                interior.push(id);
                kind.push(NodeKind::Interior);
            } else {
                boundary.push(id);
                kind.push(NodeKind::Boundary);
            }
        }
        if interior.is_empty() {
            return Err(Error::TooCoarse {
                h,
                limit: radius / 4.0,
            });
        }

        let corners = 1usize << dim;
        let mut cell_corners = Vec::new();
        let nodes = node_lattice.len();
        let mut node_cells = vec![NONE; nodes * corners];
        let mut corner_ids = vec![0u32; corners];
        for flat in 0..total {
            if lattice_to_node[flat] == NONE {
                continue;
            }
            unflatten(flat, side, &mut k);
            let mut complete = true;
            for (b, cid) in corner_ids.iter_mut().enumerate() {
                let mut f = 0usize;
                for a in 0..dim {
                    let v = k[a] as usize + (b >> a & 1);
                    if v >= side {
                        complete = false;
                        break;
                    }
                    f = f * side + v;
                }
                if !complete {
                    break;
                }
                *cid = lattice_to_node[f];
                if *cid == NONE {
                    complete = false;
                    break;
                }
            }
            if complete {
                let cell = (cell_corners.len() / corners) as u32;
                for (b, cid) in corner_ids.iter().enumerate() {
                    node_cells[*cid as usize * corners + b] = cell;
                }
                cell_corners.extend_from_slice(&corner_ids);
            }
        }

        Ok(Arc::new(Self {
            dim,
            radius,
            inner,
            center: center.to_vec(),
            h,
            half,
            side,
            lattice_to_node,
            node_lattice,
            kind,
            interior,
            boundary,
            cell_corners,
            node_cells,
            kuhn: Kuhn::new(dim),
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn inner_radius(&self) -> Option<f64> {
        self.inner
    }
    pub fn center(&self) -> &[f64] {
        &self.center
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn num_nodes(&self) -> usize {
        self.node_lattice.len()
    }
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }
    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary
    }
    pub fn kind(&self, node: usize) -> NodeKind {
        self.kind[node]
    }
    pub fn is_interior(&self, node: usize) -> bool {
        self.kind[node] == NodeKind::Interior
    }
    pub fn num_cells(&self) -> usize {
        self.cell_corners.len() >> self.dim
    }
    pub fn cell_corners(&self, cell: usize) -> &[u32] {
        let c = 1 << self.dim;
        &self.cell_corners[cell * c..(cell + 1) * c]
    }
    /// Cells adjacent to `node`; entry `b` is the cell in which the node is corner `b`.
    pub fn node_cells(&self, node: usize) -> &[u32] {
        let c = 1 << self.dim;
        &self.node_cells[node * c..(node + 1) * c]
    }
    pub fn kuhn(&self) -> &Kuhn {
        &self.kuhn
    }
    /// Volume of one Kuhn simplex, `hⁿ/n!`.
    pub fn simplex_volume(&self) -> f64 {
        self.h.powi(self.dim as i32) / self.kuhn.perms.len() as f64
    }

    pub fn meta(&self) -> BallMeta {
        BallMeta {
            dim: self.dim,
            radius: self.radius,
            center: self.center.clone(),
            h: self.h,
            inner: self.inner,
        }
    }

    /// Same lattice parameters (used to validate field pairs).
    pub fn same_grid(&self, other: &DiscreteBall) -> bool {
        self.meta() == other.meta()
    }

    pub fn lattice_index(&self, node: usize) -> &[i64] {
        &self.node_lattice[node]
    }

    pub fn coords_into(&self, node: usize, out: &mut [f64]) {
        for ((o, k), c) in out.iter_mut().zip(&self.node_lattice[node]).zip(&self.center) {
            *o = c + self.h * *k as f64;
        }
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        self.coords_into(node, &mut x);
        x
    }

    /// Distance of a node from the center.
    pub fn node_radius(&self, node: usize) -> f64 {
        self.node_lattice[node]
            .iter()
            .map(|&k| (k as f64).powi(2))
            .sum::<f64>()
            .sqrt()
            * self.h
    }

    /// Node at lattice offset `k` (relative to the center), if present.
    pub fn node_at(&self, k: &[i64]) -> Option<usize> {
        let mut f = 0usize;
        for &v in k {
            let s = v + self.half as i64;
            if s < 0 || s as usize >= self.side {
                return None;
            }
            f = f * self.side + s as usize;
        }
        match self.lattice_to_node[f] {
            NONE => None,
            id => Some(id as usize),
        }
    }

    pub fn neighbor(&self, node: usize, axis: usize, step: i64) -> Option<usize> {
        let mut k = self.node_lattice[node].clone();
        k[axis] += step;
        self.node_at(&k)
    }

    /// The node at the center of the grid.
    pub fn center_node(&self) -> usize {
        self.node_at(&vec![0; self.dim])
            .expect("center node exists for solid balls")
    }

    /// Nearest lattice node to `x`, if it belongs to the grid.
    pub fn nearest_node(&self, x: &[f64]) -> Option<usize> {
        let k: Vec<i64> = x
            .iter()
            .zip(&self.center)
            .map(|(a, c)| ((a - c) / self.h).round() as i64)
            .collect();
        self.node_at(&k)
    }

    /// Interior nodes at distance at least `margin` from the region's boundary.
    pub fn nodes_with_margin(&self, margin: f64) -> Vec<usize> {
        let tol = 1e-9 * self.h;
        self.interior
            .iter()
            .copied()
            .filter(|&i| {
                let r = self.node_radius(i);
                r <= self.radius - margin + tol && self.inner.is_none_or(|a| r >= a + margin - tol)
            })
            .collect()
    }
}

fn unflatten(mut flat: usize, side: usize, k: &mut [i64]) {
    for v in k.iter_mut().rev() {
        *v = (flat % side) as i64;
        flat /= side;
    }
}

/// Nodal values on a [`DiscreteBall`].
#[derive(Clone, Debug)]
pub struct DiscreteScalarField {
    pub ball: Arc<DiscreteBall>,
    pub values: Vec<f64>,
}

impl DiscreteScalarField {
    pub fn new(ball: Arc<DiscreteBall>, values: Vec<f64>) -> Result<Self> {
        if values.len() != ball.num_nodes() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                ball.num_nodes()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::spec(format!("non-finite value at node {i}")));
        }
        Ok(Self { ball, values })
    }

    pub fn from_fn<F>(ball: &Arc<DiscreteBall>, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let values = (0..ball.num_nodes())
            .into_par_iter()
            .map(|i| f(&ball.coords(i)))
            .collect();
        Self::new(ball.clone(), values)
    }

    pub fn zeros(ball: &Arc<DiscreteBall>) -> Self {
        Self {
            ball: ball.clone(),
            values: vec![0.0; ball.num_nodes()],
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            ball: self.ball.clone(),
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn check_same_grid(&self, other: &DiscreteScalarField) -> Result<()> {
        if Arc::ptr_eq(&self.ball, &other.ball) || self.ball.same_grid(&other.ball) {
            Ok(())
        } else {
            Err(Error::GridMismatch("fields live on different grids".into()))
        }
    }

    pub fn max_abs_diff(&self, other: &DiscreteScalarField) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Keys cubic interpolation at `y`; `None` if the 4ⁿ stencil leaves the grid.
    pub fn sample_cubic(&self, y: &[f64]) -> Option<f64> {
        self.cubic(y, false).map(|(v, _)| v)
    }

    /// Keys cubic interpolation and its gradient at `y`.
    pub fn sample_cubic_grad(&self, y: &[f64]) -> Option<(f64, Vec<f64>)> {
        self.cubic(y, true)
    }

    fn cubic(&self, y: &[f64], with_grad: bool) -> Option<(f64, Vec<f64>)> {
        let ball = &self.ball;
        let n = ball.dim;
        let h = ball.h;
        let mut base = [0i64; MAX_DIM];
        let mut w = [[0.0; 4]; MAX_DIM];
        let mut dw = [[0.0; 4]; MAX_DIM];
        for a in 0..n {
            let t = (y[a] - ball.center[a]) / h;
            if !t.is_finite() {
                return None;
            }
            let fl = t.floor();
            base[a] = fl as i64;
            let s = t - fl;
            for (m, off) in [-1.0, 0.0, 1.0, 2.0].iter().enumerate() {
                let d = s - off;
                w[a][m] = keys(d);
                dw[a][m] = keys_deriv(d) / h;
            }
        }
        let mut value = 0.0;
        let mut grad = vec![0.0; if with_grad { n } else { 0 }];
        let mut k = [0i64; MAX_DIM];
        for combo in 0..4usize.pow(n as u32) {
            let mut c = combo;
            let mut weight = 1.0;
            for a in 0..n {
                let m = c % 4;
                c /= 4;
                k[a] = base[a] + m as i64 - 1;
                weight *= w[a][m];
            }
            let node = ball.node_at(&k[..n])?;
            let v = self.values[node];
            value += weight * v;
            if with_grad {
                let mut c = combo;
                let ms: Vec<usize> = (0..n)
                    .map(|_| {
                        let m = c % 4;
                        c /= 4;
                        m
                    })
                    .collect();
                for (g, gi) in grad.iter_mut().enumerate() {
                    let mut prod = 1.0;
                    for a in 0..n {
                        prod *= if a == g { dw[a][ms[a]] } else { w[a][ms[a]] };
                    }
                    *gi += prod * v;
                }
            }
        }
        Some((value, grad))
    }

    /// Multilinear interpolation at `y`; `None` outside active cells.
    pub fn sample_linear(&self, y: &[f64]) -> Option<f64> {
        let ball = &self.ball;
        let n = ball.dim;
        let mut base = [0i64; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for a in 0..n {
            let t = (y[a] - ball.center[a]) / ball.h;
            base[a] = t.floor() as i64;
            frac[a] = t - t.floor();
        }
        let mut k = [0i64; MAX_DIM];
        let mut value = 0.0;
        for b in 0..1usize << n {
            let mut wgt = 1.0;
            for a in 0..n {
                let bit = b >> a & 1;
                k[a] = base[a] + bit as i64;
                wgt *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if wgt != 0.0 {
                value += wgt * self.values[ball.node_at(&k[..n])?];
            }
        }
        Some(value)
    }
}

const KEYS_A: f64 = -0.5;

fn keys(s: f64) -> f64 {
    let a = KEYS_A;
    let t = s.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

fn keys_deriv(s: f64) -> f64 {
    let a = KEYS_A;
    let t = s.abs();
    let d = if t <= 1.0 {
        (3.0 * (a + 2.0) * t - 2.0 * (a + 3.0)) * t
    } else if t < 2.0 {
        (3.0 * a * t - 10.0 * a) * t + 8.0 * a
    } else {
        0.0
    };
    d * s.signum()
}

/// Central-difference gradient at an interior node.
pub fn gradient(u: &DiscreteScalarField, node: usize) -> Result<Vec<f64>> {
    let ball = &u.ball;
    if node >= ball.num_nodes() || !ball.is_interior(node) {
        return Err(Error::BoundaryNode(node));
    }
    (0..ball.dim)
        .map(|a| {
            let plus = ball.neighbor(node, a, 1).ok_or(Error::BoundaryNode(node))?;
            let minus = ball.neighbor(node, a, -1).ok_or(Error::BoundaryNode(node))?;
            Ok((u.values[plus] - u.values[minus]) / (2.0 * ball.h))
        })
        .collect()
}

/// Central-difference gradients at every interior node, in interior order.
pub fn gradient_field(u: &DiscreteScalarField) -> Vec<Vec<f64>> {
    u.ball
        .interior
        .par_iter()
        .map(|&i| gradient(u, i).expect("interior nodes have all axis neighbors"))
        .collect()
}

/// Deterministic pairwise summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 128;
    if v.len() <= BLOCK {
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        s
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

fn norm_of_terms(terms: Vec<f64>, p: f64, h_n: f64) -> f64 {
    (pairwise_sum(&terms) * h_n).powf(1.0 / p)
}

/// `(Σ_interior |u|^p hⁿ)^{1/p}`.
pub fn lp_norm(u: &DiscreteScalarField, p: f64) -> f64 {
    let terms = u.ball.interior.iter().map(|&i| u.values[i].abs().powf(p)).collect();
    norm_of_terms(terms, p, u.ball.h.powi(u.ball.dim as i32))
}

/// `(Σ_interior |∇u|^p hⁿ)^{1/p}` with central differences.
pub fn grad_lp_norm(u: &DiscreteScalarField, p: f64) -> f64 {
    let terms = gradient_field(u)
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p))
        .collect();
    norm_of_terms(terms, p, u.ball.h.powi(u.ball.dim as i32))
}

pub fn w1p_norm(u: &DiscreteScalarField, p: f64) -> f64 {
    (lp_norm(u, p).powf(p) + grad_lp_norm(u, p).powf(p)).powf(1.0 / p)
}

/// Piecewise-constant gradient on simplex `s` of `cell`, `ξ_{π_k} = Δ_k u / h`.
pub fn simplex_gradient(
    ball: &DiscreteBall,
    values: &[f64],
    cell: usize,
    s: usize,
    out: &mut [f64],
) {
    let corners = ball.cell_corners(cell);
    let perm = &ball.kuhn.perms[s];
    let path = &ball.kuhn.paths[s];
    for k in 0..ball.dim {
        let hi = values[corners[path[k + 1]] as usize];
        let lo = values[corners[path[k]] as usize];
        out[perm[k]] = (hi - lo) / ball.h;
    }
}

/// `(Σ_simplices |ξ|^p vol)^{1/p}`: the exact L^p norm of the gradient of the
/// piecewise-linear interpolant over the active cells.
pub fn p1_grad_lp_norm(u: &DiscreteScalarField, p: f64) -> f64 {
    let ball = &u.ball;
    let n = ball.dim;
    let terms: Vec<f64> = (0..ball.num_cells())
        .into_par_iter()
        .map(|c| {
            let mut xi = [0.0; MAX_DIM];
            let mut acc = 0.0;
            for s in 0..ball.kuhn.perms.len() {
                simplex_gradient(ball, &u.values, c, s, &mut xi[..n]);
                acc += xi[..n].iter().map(|v| v * v).sum::<f64>().powf(p / 2.0);
            }
            acc
        })
        .collect();
    (pairwise_sum(&terms) * ball.simplex_volume()).powf(1.0 / p)
}

/// Hölder seminorm lower bound from all axis-adjacent pairs plus
/// `sample_pairs` seeded random pairs.
pub fn holder_seminorm(u: &DiscreteScalarField, a: f64, sample_pairs: usize, seed: u64) -> f64 {
    let ball = &u.ball;
    let h = ball.h;
    let adjacent = (0..ball.num_nodes())
        .into_par_iter()
        .map(|i| {
            (0..ball.dim)
                .filter_map(|ax| ball.neighbor(i, ax, 1))
                .map(|j| (u.values[i] - u.values[j]).abs() / h.powf(a))
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ball.num_nodes();
    let pairs: Vec<(usize, usize)> = (0..sample_pairs)
        .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
        .collect();
    let random = pairs
        .par_iter()
        .filter(|(i, j)| i != j)
        .map(|&(i, j)| {
            let d = crate::geometry::dist(&ball.coords(i), &ball.coords(j));
            (u.values[i] - u.values[j]).abs() / d.powf(a)
        })
        .reduce(|| 0.0, f64::max);
    adjacent.max(random)
}

pub const DEFAULT_HOLDER_PAIRS: usize = 100_000;

/// Volume of the unit ball in ℝⁿ.
pub fn unit_ball_volume(n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / n as f64 * unit_ball_volume(n - 2),
    }
}

/// Result of the interpolation inequality check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterpolationCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub holder_estimate: f64,
    pub lp: f64,
    pub constant: f64,
}

/// The constant `(1 + C_{n,p,a}) / c_{n,p}` with `c_{n,p} = |B₁|^{1/p}` and
/// `C_{n,p,a} = (n|B₁|/(ap + n))^{1/p}`.
pub fn interpolation_constant(n: usize, p: f64, a: f64) -> f64 {
    let vol = unit_ball_volume(n);
    let c = vol.powf(1.0 / p);
    let big = (n as f64 * vol / (a * p + n as f64)).powf(1.0 / p);
    (1.0 + big) / c
}

/// Checks `‖u‖_{L^∞(K)} <= C M^{n/(n+ap)} ‖u‖_p^{ap/(n+ap)}` with `K` the
/// nodes at distance `>= compact_margin` from the boundary.
pub fn interpolation_bound(
    u: &DiscreteScalarField,
    a: f64,
    p: f64,
    compact_margin: f64,
    holder_bound: f64,
    seed: u64,
) -> Result<InterpolationCheck> {
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::spec("Hölder exponent must lie in (0, 1]"));
    }
    if p < 1.0 {
        return Err(Error::BadExponent(p));
    }
    let n = u.ball.dim as f64;
    let holder_estimate = holder_seminorm(u, a, DEFAULT_HOLDER_PAIRS, seed);
    let lp = lp_norm(u, p);
    if holder_estimate > holder_bound {
        return Err(Error::HypothesisViolated(format!(
            "Hölder seminorm estimate {holder_estimate:e} exceeds M = {holder_bound:e}"
        )));
    }
    let cap = compact_margin.powf((n + a * p) / p) * holder_bound;
    if lp > cap {
        return Err(Error::HypothesisViolated(format!(
            "L^p norm {lp:e} exceeds δ0^((n+ap)/p)·M = {cap:e}"
        )));
    }
    let lhs = u
        .ball
        .nodes_with_margin(compact_margin)
        .iter()
        .map(|&i| u.values[i].abs())
        .fold(0.0, f64::max);
    let constant = interpolation_constant(u.ball.dim, p, a);
    let rhs = constant * holder_bound.powf(n / (n + a * p)) * lp.powf(a * p / (n + a * p));
    Ok(InterpolationCheck {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-9),
        holder_estimate,
        lp,
        constant,
    })
}

/// One randomized input for [`interpolation_bound`].
#[derive(Clone, Debug)]
pub struct InterpolationCase {
    pub field: DiscreteScalarField,
    pub a: f64,
    pub p: f64,
    pub margin: f64,
    pub holder_bound: f64,
    /// Seed for the Hölder pair sampling.
    pub seed: u64,
}

/// Seeded suite of smooth fields (sums of random bumps and a linear term) on
/// unit balls in dimensions 1 to 3. Each `M` is 1.5 times the sampled Hölder
/// estimate, raised if needed to meet the `L^p` precondition.
pub fn random_interpolation_suite(count: usize, seed: u64) -> Result<Vec<InterpolationCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let n = 1 + k % 3;
            let h = [0.01, 0.02, 0.05][n - 1];
            let ball = make_ball(n, 1.0, &vec![0.0; n], h)?;
            let bumps: Vec<(Vec<f64>, f64, f64)> = (0..3)
                .map(|_| {
                    let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
                    (c, rng.gen_range(0.3..0.8), rng.gen_range(-1.0..1.0))
                })
                .collect();
            let lin: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let a = rng.gen_range(0.2..1.0);
            let p = rng.gen_range(1.2..4.0);
            let margin: f64 = rng.gen_range(0.1..0.5);
            let field = DiscreteScalarField::from_fn(&ball, |x| {
                let b: f64 = bumps
                    .iter()
                    .map(|(c, w, s)| s * crate::geometry::metrics::bump(x, c, *w).0)
                    .sum();
                b + lin.iter().zip(x).map(|(l, v)| l * v).sum::<f64>()
            })?;
            let case_seed = seed ^ k as u64;
            let estimate = holder_seminorm(&field, a, DEFAULT_HOLDER_PAIRS, case_seed);
            let need = lp_norm(&field, p) / margin.powf((n as f64 + a * p) / p);
            Ok(InterpolationCase {
                field,
                a,
                p,
                margin,
                holder_bound: (1.5 * estimate).max(1.01 * need),
                seed: case_seed,
            })
        })
        .collect()
}

/// `max_j ‖∇u(· + h e_j) - ∇u(·)‖_{L²} / h` over nodes `x` with `x` and
/// `x + h e_j` interior (and in `mask` when given).
pub fn second_difference_bound(u: &DiscreteScalarField, mask: Option<&[bool]>) -> f64 {
    let ball = &u.ball;
    let h = ball.h;
    let h_n = h.powi(ball.dim as i32);
    let allowed = |i: usize| ball.is_interior(i) && mask.is_none_or(|m| m[i]);
    (0..ball.dim)
        .map(|j| {
            let terms: Vec<f64> = ball
                .interior
                .par_iter()
                .filter_map(|&i| {
                    let k = ball.neighbor(i, j, 1)?;
                    if !(allowed(i) && allowed(k)) {
                        return None;
                    }
                    let g0 = gradient(u, i).ok()?;
                    let g1 = gradient(u, k).ok()?;
                    Some(g0.iter().zip(&g1).map(|(a, b)| (b - a) * (b - a)).sum::<f64>())
                })
                .collect();
            (pairwise_sum(&terms) * h_n).sqrt() / h
        })
        .fold(0.0, f64::max)
}

/// Norms of one field, gathered for reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormReport {
    pub p: f64,
    pub lp: f64,
    pub w1p: f64,
    /// `(margin, max |u|)` over nodes at distance `>= margin` from the boundary.
    pub linf_on: Vec<(f64, f64)>,
    /// `(exponent, seminorm estimate)`.
    pub holder_seminorm: Vec<(f64, f64)>,
}

pub fn norm_report(
    u: &DiscreteScalarField,
    p: f64,
    margins: &[f64],
    holder_exponents: &[f64],
    seed: u64,
) -> NormReport {
    NormReport {
        p,
        lp: lp_norm(u, p),
        w1p: w1p_norm(u, p),
        linf_on: margins
            .iter()
            .map(|&m| {
                let v = u
                    .ball
                    .nodes_with_margin(m)
                    .iter()
                    .map(|&i| u.values[i].abs())
                    .fold(0.0, f64::max);
                (m, v)
            })
            .collect(),
        holder_seminorm: holder_exponents
            .iter()
            .map(|&a| (a, holder_seminorm(u, a, DEFAULT_HOLDER_PAIRS, seed)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_example() {
        let b = make_ball(1, 1.0, &[0.0], 0.5).unwrap_err();
        // h = R/2 is too coarse; use h = 0.2 for the 1D enumeration
        assert!(matches!(b, Error::TooCoarse { .. }));
        let b = make_ball(1, 1.0, &[0.0], 0.2).unwrap();
        let xs: Vec<f64> = (0..b.num_nodes()).map(|i| b.coords(i)[0]).collect();
        assert_eq!(xs.len(), 11);
        let bd: Vec<f64> = b.boundary_nodes().iter().map(|&i| b.coords(i)[0]).collect();
        assert_eq!(bd.len(), 2);
        assert!((bd[0] + 1.0).abs() < 1e-12 && (bd[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interior_nodes_have_all_neighbors() {
        for (n, h) in [(2, 0.1), (3, 0.15), (2, 0.07)] {
            let b = make_ball(n, 1.0, &vec![0.1; n], h).unwrap();
            for &i in b.interior_nodes() {
                for a in 0..n {
                    assert!(b.neighbor(i, a, 1).is_some() && b.neighbor(i, a, -1).is_some());
                }
                // every cell touching an interior node is active
                assert!(b.node_cells(i).iter().all(|&c| c != NONE));
            }
            for i in 0..b.num_nodes() {
                assert!(crate::geometry::dist(&b.coords(i), b.center()) <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn annulus_classification() {
        let b = make_annulus(2, 0.5, 1.0, &[0.0, 0.0], 0.05).unwrap();
        for i in 0..b.num_nodes() {
            let r = b.node_radius(i);
            assert!((0.5 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
        assert!(b.interior_nodes().iter().all(|&i| b.node_cells(i).iter().all(|&c| c != NONE)));
    }

    #[test]
    fn gradient_exact_on_quadratics() {
        let b = make_ball(2, 1.0, &[0.0, 0.0], 0.1).unwrap();
        let u = DiscreteScalarField::from_fn(&b, |x| x[0] * x[0] + x[1] * x[1]).unwrap();
        let node = b.nearest_node(&[0.3, 0.4]).unwrap();
        let g = gradient(&u, node).unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
        let bnode = b.boundary_nodes()[0];
        assert!(matches!(gradient(&u, bnode), Err(Error::BoundaryNode(_))));
    }

    #[test]
    fn cubic_interpolation_reproduces_quadratics() {
        let b = make_ball(2, 1.0, &[0.0, 0.0], 0.05).unwrap();
        let q = |x: &[f64]| 0.3 + x[0] - 2.0 * x[1] + x[0] * x[1] + 0.7 * x[1] * x[1];
        let u = DiscreteScalarField::from_fn(&b, q).unwrap();
        let y = [0.123, -0.271];
        let (v, g) = u.sample_cubic_grad(&y).unwrap();
        assert!((v - q(&y)).abs() < 1e-12);
        assert!((g[0] - (1.0 + y[1])).abs() < 1e-11);
        assert!((g[1] - (-2.0 + y[0] + 1.4 * y[1])).abs() < 1e-11);
        assert!(u.sample_cubic(&[0.99, 0.0]).is_none());
        assert!((u.sample_linear(&[0.1, 0.2]).unwrap() - q(&[0.1, 0.2])).abs() < 1e-12);
    }

    #[test]
    fn norms_match_closed_forms() {
        let b = make_ball(2, 1.0, &[0.0, 0.0], 0.01).unwrap();
        let one = DiscreteScalarField::from_fn(&b, |_| 1.0).unwrap();
        // interior nodes stop √n·h short of the sphere, an O(h) deficit
        assert!((lp_norm(&one, 2.0).powi(2) - PI).abs() < 0.1);
        let x1 = DiscreteScalarField::from_fn(&b, |x| x[0]).unwrap();
        assert!((lp_norm(&x1, 2.0).powi(2) - PI / 4.0).abs() < 0.06);
        assert_eq!(lp_norm(&DiscreteScalarField::zeros(&b), 3.0), 0.0);
        let s = -2.5;
        assert!((lp_norm(&x1.scaled(s), 3.0) - s.abs() * lp_norm(&x1, 3.0)).abs() < 1e-12);
        assert!(lp_norm(&x1, 2.0) <= w1p_norm(&x1, 2.0));
    }

    #[test]
    fn holder_examples() {
        let b = make_ball(2, 1.0, &[0.0, 0.0], 0.1).unwrap();
        let x1 = DiscreteScalarField::from_fn(&b, |x| x[0]).unwrap();
        assert!((holder_seminorm(&x1, 1.0, 1000, 1) - 1.0).abs() < 1e-12);
        let c = DiscreteScalarField::from_fn(&b, |_| 3.0).unwrap();
        assert_eq!(holder_seminorm(&c, 0.5, 1000, 1), 0.0);

        let b1 = make_ball(1, 1.0, &[0.0], 0.01).unwrap();
        let sq = DiscreteScalarField::from_fn(&b1, |x| x[0].abs().sqrt()).unwrap();
        let v = holder_seminorm(&sq, 0.5, 10_000, 1);
        assert!(v <= 1.0 + 1e-12 && v > 0.999);
    }

    #[test]
    fn second_difference_of_quadratic() {
        let b = make_ball(2, 1.0, &[0.0, 0.0], 0.02).unwrap();
        let u = DiscreteScalarField::from_fn(&b, |x| x[0] * x[0] + x[1] * x[1]).unwrap();
        let q = second_difference_bound(&u, None);
        assert!((q - 2.0 * PI.sqrt()).abs() < 0.15, "{q}");
        let aff = DiscreteScalarField::from_fn(&b, |x| 1.0 + x[0] - x[1]).unwrap();
        assert!(second_difference_bound(&aff, None) < 1e-10);
    }

    #[test]
    fn interpolation_zero_and_coordinate() {
        let b = make_ball(2, 1.0, &[0.0, 0.0], 0.05).unwrap();
        let z = DiscreteScalarField::zeros(&b);
        let r = interpolation_bound(&z, 0.5, 2.0, 0.5, 1.0, 1).unwrap();
        assert!(r.holds && r.lhs == 0.0 && r.rhs == 0.0);
        let x1 = DiscreteScalarField::from_fn(&b, |x| x[0]).unwrap();
        // ‖x¹‖₂ ≈ 0.886 > 0.5^{2}·1, so M = 1 violates the second hypothesis
        assert!(matches!(
            interpolation_bound(&x1, 1.0, 2.0, 0.5, 1.0, 1),
            Err(Error::HypothesisViolated(_))
        ));
        let r = interpolation_bound(&x1, 1.0, 2.0, 0.5, 4.0, 1).unwrap();
        assert!(r.holds);
    }
}
