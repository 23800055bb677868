#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pharmcoords::geometry::{invert_spd, MetricField};
use pharmcoords::grid::{DiscreteBall, DiscreteScalarField};

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Direct dense solve of the linear (p = 2) Dirichlet problem, assembled
/// from scratch: P1 on the Kuhn simplices of each active cell, metric frozen
/// at the cell center.
pub fn dense_linear_solve(g: &dyn MetricField, ball: &Arc<DiscreteBall>, f: &DiscreteScalarField) -> Vec<f64> {
    let n = ball.dim();
    let h = ball.h();
    let vol = h.powi(n as i32) / (1..=n).product::<usize>() as f64;
    let interior = ball.interior_nodes();
    let mut slot = vec![usize::MAX; ball.num_nodes()];
    for (k, &i) in interior.iter().enumerate() {
        slot[i] = k;
    }
    let m = interior.len();
    let mut kmat = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    let perms = permutations(n);
    for cell in 0..ball.num_cells() {
        let base = ball.cell_corners(cell)[0] as usize;
        let base_k = ball.lattice_index(base).to_vec();
        let mut center = ball.coords(base);
        for c in center.iter_mut() {
            *c += 0.5 * h;
        }
        let gm = g.eval(&center);
        let pt = invert_spd(&gm, &center).unwrap();
        let w = &pt.inverse * pt.sqrt_det();
        for perm in &perms {
            let mut verts = vec![base];
            let mut k = base_k.clone();
            for &ax in perm {
                k[ax] += 1;
                verts.push(ball.node_at(&k).expect("cell corner"));
            }
            // B[(ax, v)] = ∂_ax φ_v
            let mut b = DMatrix::<f64>::zeros(n, n + 1);
            for (step, &ax) in perm.iter().enumerate() {
                b[(ax, step + 1)] += 1.0 / h;
                b[(ax, step)] -= 1.0 / h;
            }
            let local = b.transpose() * &w * &b * vol;
            for a in 0..=n {
                let ia = slot[verts[a]];
                if ia == usize::MAX {
                    continue;
                }
                for c in 0..=n {
                    let ic = slot[verts[c]];
                    if ic == usize::MAX {
                        rhs[ia] -= local[(a, c)] * f.values[verts[c]];
                    } else {
                        kmat[(ia, ic)] += local[(a, c)];
                    }
                }
            }
        }
    }
    let sol = kmat.cholesky().expect("stiffness matrix is SPD").solve(&rhs);
    let mut u = f.values.clone();
    for (k, &i) in interior.iter().enumerate() {
        u[i] = sol[k];
    }
    u
}

/// Smooth nonaffine boundary data.
pub fn smooth_data(x: &[f64]) -> f64 {
    let s: f64 = x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
    x[0] + 0.3 * s.sin() + 0.2 * x.iter().map(|v| v * v).sum::<f64>()
}
