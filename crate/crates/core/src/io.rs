//! CSV field and metric I/O.
//!
//! Fields are written as `x1,...,xn,value` rows in node order, with a JSON
//! sidecar (`<stem>.json`) holding the grid parameters.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::GridMetric;
use crate::grid::{BallMeta, DiscreteScalarField};

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn write_field_csv(u: &DiscreteScalarField, path: &Path) -> Result<()> {
    let n = u.ball.dim();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.push("value".into());
    w.write_record(&header)?;
    let mut x = vec![0.0; n];
    for (i, v) in u.values.iter().enumerate() {
        u.ball.coords_into(i, &mut x);
        let mut row: Vec<String> = x.iter().map(|c| format!("{c:e}")).collect();
        row.push(format!("{v:e}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&u.ball.meta())?,
    )?;
    Ok(())
}

pub fn read_field_csv(path: &Path) -> Result<DiscreteScalarField> {
    let meta: BallMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let ball = meta.build()?;
    let n = ball.dim();
    let mut r = csv::Reader::from_path(path)?;
    let mut values = Vec::with_capacity(ball.num_nodes());
    let mut x = vec![0.0; n];
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != n + 1 {
            return Err(Error::GridMismatch(format!("row {i} has {} columns", rec.len())));
        }
        if i >= ball.num_nodes() {
            return Err(Error::GridMismatch("more rows than grid nodes".into()));
        }
        ball.coords_into(i, &mut x);
        for (a, xa) in x.iter().enumerate() {
            let c = parse(&rec[a])?;
            if (c - xa).abs() > 1e-9 * (1.0 + xa.abs()) {
                return Err(Error::GridMismatch(format!("row {i} is not node {i}")));
            }
        }
        values.push(parse(&rec[n])?);
    }
    DiscreteScalarField::new(ball, values)
}

fn parse(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::spec(format!("not a number: `{s}`")))
}

/// Reads a metric sampled on a tensor lattice. Columns are `x1..xn` followed
/// by either the `n(n+1)/2` upper-triangle entries `g11,g12,..,gnn` or all
/// `n²` entries in row-major order (symmetrized from the upper triangle).
pub fn read_metric_csv(path: &Path) -> Result<GridMetric> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let n = header.iter().filter(|h| h.trim().starts_with('x')).count();
    if n == 0 {
        return Err(Error::spec("metric CSV needs x1..xn columns"));
    }
    let ncols = header.len() - n;
    let full = ncols == n * n;
    if !full && ncols != n * (n + 1) / 2 {
        return Err(Error::spec(format!(
            "metric CSV has {ncols} entry columns; expected {} or {}",
            n * (n + 1) / 2,
            n * n
        )));
    }
    let mut rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let nums = rec.iter().map(parse).collect::<Result<Vec<f64>>>()?;
        let (x, e) = nums.split_at(n);
        let mut g = vec![0.0; n * n];
        let mut k = 0;
        for i in 0..n {
            for j in 0..n {
                if full {
                    if j >= i {
                        g[i * n + j] = e[i * n + j];
                        g[j * n + i] = e[i * n + j];
                    }
                } else if j >= i {
                    g[i * n + j] = e[k];
                    g[j * n + i] = e[k];
                    k += 1;
                }
            }
        }
        rows.push((x.to_vec(), g));
    }
    let mut axes: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (a, axis) in axes.iter_mut().enumerate() {
        let mut v: Vec<f64> = rows.iter().map(|(x, _)| x[a]).collect();
        v.sort_by(f64::total_cmp);
        v.dedup_by(|p, q| (*p - *q).abs() <= 1e-12 * (1.0 + q.abs()));
        *axis = v;
    }
    let count: usize = axes.iter().map(Vec::len).product();
    if count != rows.len() {
        return Err(Error::GridMismatch(format!(
            "{} rows do not form a {count}-point tensor lattice",
            rows.len()
        )));
    }
    let mut values = vec![f64::NAN; count * n * n];
    for (x, g) in &rows {
        let mut flat = 0usize;
        for (a, axis) in axes.iter().enumerate() {
            let i = axis
                .iter()
                .position(|c| (c - x[a]).abs() <= 1e-12 * (1.0 + c.abs()))
                .expect("coordinate present by construction");
            flat = flat * axis.len() + i;
        }
        values[flat * n * n..(flat + 1) * n * n].copy_from_slice(g);
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::GridMismatch("duplicate lattice points".into()));
    }
    GridMetric::new(axes, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{metrics::DiagonalTerm, DiagonalMetric, Domain, MetricField};
    use crate::grid::make_ball;
    use std::io::Write;

    #[test]
    fn field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ball = make_ball(2, 1.0, &[0.2, -0.1], 0.1).unwrap();
        let u = DiscreteScalarField::from_fn(&ball, |x| x[0].sin() + x[1]).unwrap();
        let path = dir.path().join("u.csv");
        write_field_csv(&u, &path).unwrap();
        let back = read_field_csv(&path).unwrap();
        assert!(u.max_abs_diff(&back).unwrap() < 1e-14);
    }

    #[test]
    fn metric_csv_upper_triangle() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let g = DiagonalMetric::new(
            vec![
                DiagonalTerm { var: 0, coeffs: vec![1.0, 0.5] },
                DiagonalTerm { var: 0, coeffs: vec![2.0] },
            ],
            Domain::Everywhere,
        )
        .unwrap();
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "x1,x2,g11,g12,g22").unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let x = [i as f64 * 0.25, j as f64 * 0.25];
                let m = g.eval(&x);
                writeln!(f, "{},{},{},0.1,{}", x[0], x[1], m[(0, 0)], m[(1, 1)]).unwrap();
            }
        }
        drop(f);
        let s = read_metric_csv(&path).unwrap();
        let m = s.eval(&[0.3, 0.6]);
        assert!((m[(0, 0)] - 1.15).abs() < 1e-12);
        assert!((m[(0, 1)] - 0.1).abs() < 1e-12 && (m[(1, 0)] - 0.1).abs() < 1e-12);
        assert!((s.eval_grad(&[0.5, 0.5])[0][(0, 0)] - 0.5).abs() < 1e-12);
    }
}
