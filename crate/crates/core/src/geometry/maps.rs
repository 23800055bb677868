//! Smooth maps between charts with closed-form Jacobians.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Domain;
use crate::error::{Error, Result};

/// A smooth map `φ: ℝⁿ ⊃ source_domain → ℝⁿ` with its Jacobian
/// `Dφ[(a, i)] = ∂_i φ^a`.
pub trait SampledMap: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize {
        self.dim_in()
    }
    fn eval(&self, x: &[f64]) -> Vec<f64>;
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64>;
    fn source_domain(&self) -> Domain {
        Domain::Everywhere
    }
}

impl<M: SampledMap + ?Sized> SampledMap for Arc<M> {
    fn dim_in(&self) -> usize {
        (**self).dim_in()
    }
    fn dim_out(&self) -> usize {
        (**self).dim_out()
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        (**self).eval(x)
    }
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        (**self).jacobian(x)
    }
    fn source_domain(&self) -> Domain {
        (**self).source_domain()
    }
}

/// Central-difference Jacobian, for checking closed forms.
pub fn fd_jacobian<M: SampledMap + ?Sized>(phi: &M, x: &[f64], step: f64) -> DMatrix<f64> {
    let n = phi.dim_in();
    let mut jac = DMatrix::zeros(phi.dim_out(), n);
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + step;
        let plus = phi.eval(&xp);
        xp[i] = x[i] - step;
        let minus = phi.eval(&xp);
        xp[i] = x[i];
        for a in 0..phi.dim_out() {
            jac[(a, i)] = (plus[a] - minus[a]) / (2.0 * step);
        }
    }
    jac
}

/// `x ↦ M x + b`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl Affine {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>) -> Self {
        Self { matrix, offset }
    }

    pub fn identity(dim: usize) -> Self {
        Self::linear(DMatrix::identity(dim, dim))
    }

    pub fn linear(matrix: DMatrix<f64>) -> Self {
        let n = matrix.nrows();
        Self::new(matrix, DVector::zeros(n))
    }

    pub fn dilation(dim: usize, factor: f64) -> Self {
        Self::linear(DMatrix::identity(dim, dim) * factor)
    }

    pub fn translation(offset: &[f64]) -> Self {
        let n = offset.len();
        Self::new(DMatrix::identity(n, n), DVector::from_column_slice(offset))
    }

    pub fn scaling(factors: &[f64]) -> Self {
        Self::linear(DMatrix::from_diagonal(&DVector::from_column_slice(factors)))
    }

    /// Rotation by `angle` in the plane; in 3D about `axis` (Rodrigues).
    pub fn rotation(dim: usize, angle: f64, axis: Option<&[f64]>) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        let m = match dim {
            2 => DMatrix::from_row_slice(2, 2, &[c, -s, s, c]),
            3 => {
                let a = axis.unwrap_or(&[0.0, 0.0, 1.0]);
                let norm = (a.iter().map(|v| v * v).sum::<f64>()).sqrt();
                if a.len() != 3 || norm == 0.0 {
                    return Err(Error::spec("rotation axis must be a nonzero 3-vector"));
                }
                let k = [a[0] / norm, a[1] / norm, a[2] / norm];
                let kx = DMatrix::from_row_slice(
                    3,
                    3,
                    &[0.0, -k[2], k[1], k[2], 0.0, -k[0], -k[1], k[0], 0.0],
                );
                DMatrix::identity(3, 3) + &kx * s + &kx * &kx * (1.0 - c)
            }
            _ => {
                // rotate the (x¹, x²) plane
                let mut m = DMatrix::identity(dim, dim);
                m[(0, 0)] = c;
                m[(0, 1)] = -s;
                m[(1, 0)] = s;
                m[(1, 1)] = c;
                m
            }
        };
        Ok(Self::linear(m))
    }
}

impl SampledMap for Affine {
    fn dim_in(&self) -> usize {
        self.matrix.ncols()
    }
    fn dim_out(&self) -> usize {
        self.matrix.nrows()
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(x) + &self.offset)
            .iter()
            .copied()
            .collect()
    }
    fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// Sphere inversion `x ↦ c + r² (x - c)/|x - c|²`.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Inversion {
    pub fn unit(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            radius: 1.0,
        }
    }
}

impl SampledMap for Inversion {
    fn dim_in(&self) -> usize {
        self.center.len()
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = x.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let r2: f64 = v.iter().map(|t| t * t).sum();
        let s = self.radius * self.radius / r2;
        v.iter().zip(&self.center).map(|(t, c)| c + s * t).collect()
    }
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim_in();
        let v = DVector::from_iterator(n, x.iter().zip(&self.center).map(|(a, c)| a - c));
        let r2 = v.norm_squared();
        let k = self.radius * self.radius;
        (DMatrix::identity(n, n) / r2 - &v * v.transpose() * (2.0 / (r2 * r2))) * k
    }
    fn source_domain(&self) -> Domain {
        Domain::Exterior {
            center: self.center.clone(),
            inner: 0.0,
        }
    }
}

/// `z ↦ z²` on ℝ² ≅ ℂ.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZSquared;

impl SampledMap for ZSquared {
    fn dim_in(&self) -> usize {
        2
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0] * x[0] - x[1] * x[1], 2.0 * x[0] * x[1]]
    }
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[2.0 * x[0], -2.0 * x[1], 2.0 * x[1], 2.0 * x[0]])
    }
}

/// `x ↦ x + Σ_m amp_m · dir_m · sin(k_m · x + phase_m)`: a smooth, generally
/// non-conformal perturbation of the identity.
#[derive(Clone, Debug)]
pub struct WaveMap {
    pub modes: Vec<WaveMode>,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveMode {
    pub amplitude: f64,
    pub direction: Vec<f64>,
    pub wavevector: Vec<f64>,
    pub phase: f64,
}

impl WaveMap {
    /// Random map from `rng`; amplitudes are chosen so `|Dφ - I| < 1`.
    pub fn random<R: rand::Rng>(dim: usize, modes: usize, rng: &mut R) -> Self {
        let modes = (0..modes)
            .map(|_| {
                let wavevector: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let kn = wavevector.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
                let direction: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let dn = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
                WaveMode {
                    amplitude: rng.gen_range(0.0..0.6) / (kn * dn * modes as f64),
                    direction,
                    wavevector,
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        Self { modes, dim }
    }
}

impl SampledMap for WaveMap {
    fn dim_in(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for m in &self.modes {
            let arg: f64 = m.wavevector.iter().zip(x).map(|(k, v)| k * v).sum::<f64>() + m.phase;
            let s = m.amplitude * arg.sin();
            for (yi, d) in y.iter_mut().zip(&m.direction) {
                *yi += s * d;
            }
        }
        y
    }
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim;
        let mut j = DMatrix::identity(n, n);
        for m in &self.modes {
            let arg: f64 = m.wavevector.iter().zip(x).map(|(k, v)| k * v).sum::<f64>() + m.phase;
            let c = m.amplitude * arg.cos();
            for a in 0..n {
                for i in 0..n {
                    j[(a, i)] += c * m.direction[a] * m.wavevector[i];
                }
            }
        }
        j
    }
}

/// Maps applied left to right: `maps[k] ∘ ... ∘ maps[0]`.
#[derive(Clone)]
pub struct Composition {
    pub maps: Vec<Arc<dyn SampledMap>>,
}

impl SampledMap for Composition {
    fn dim_in(&self) -> usize {
        self.maps[0].dim_in()
    }
    fn dim_out(&self) -> usize {
        self.maps[self.maps.len() - 1].dim_out()
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.maps.iter().fold(x.to_vec(), |y, m| m.eval(&y))
    }
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut y = x.to_vec();
        let mut jac = DMatrix::identity(self.dim_in(), self.dim_in());
        for m in &self.maps {
            jac = m.jacobian(&y) * jac;
            y = m.eval(&y);
        }
        jac
    }
    fn source_domain(&self) -> Domain {
        self.maps[0].source_domain()
    }
}

/// JSON map description, tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MapSpec {
    Identity {
        dim: usize,
    },
    Rotation {
        dim: usize,
        angle: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        axis: Option<Vec<f64>>,
    },
    Dilation {
        dim: usize,
        factor: f64,
    },
    Translation {
        offset: Vec<f64>,
    },
    Scaling {
        factors: Vec<f64>,
    },
    Affine {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
    Inversion {
        center: Vec<f64>,
        #[serde(default = "unit_radius")]
        radius: f64,
    },
    ZSquared {},
    Composition {
        maps: Vec<MapSpec>,
    },
}

fn unit_radius() -> f64 {
    1.0
}

impl MapSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Whether the builtin is conformal for flat metrics on both sides.
    pub fn is_conformal(&self) -> bool {
        match self {
            MapSpec::Scaling { factors } => factors.windows(2).all(|w| w[0] == w[1]),
            MapSpec::Affine { .. } | MapSpec::ZSquared {} => false,
            MapSpec::Composition { maps } => maps.iter().all(|m| m.is_conformal()),
            _ => true,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn SampledMap>> {
        Ok(match self {
            MapSpec::Identity { dim } => Arc::new(Affine::identity(*dim)),
            MapSpec::Rotation { dim, angle, axis } => {
                Arc::new(Affine::rotation(*dim, *angle, axis.as_deref())?)
            }
            MapSpec::Dilation { dim, factor } => {
                if *factor == 0.0 {
                    return Err(Error::spec("dilation factor must be nonzero"));
                }
                Arc::new(Affine::dilation(*dim, *factor))
            }
            MapSpec::Translation { offset } => Arc::new(Affine::translation(offset)),
            MapSpec::Scaling { factors } => Arc::new(Affine::scaling(factors)),
            MapSpec::Affine { matrix, offset } => {
                let n = offset.len();
                if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                    return Err(Error::spec("affine matrix must be n x n with offset of length n"));
                }
                Arc::new(Affine::new(
                    DMatrix::from_fn(n, n, |i, j| matrix[i][j]),
                    DVector::from_column_slice(offset),
                ))
            }
            MapSpec::Inversion { center, radius } => {
                if *radius <= 0.0 {
                    return Err(Error::spec("inversion radius must be positive"));
                }
                Arc::new(Inversion {
                    center: center.clone(),
                    radius: *radius,
                })
            }
            MapSpec::ZSquared {} => Arc::new(ZSquared),
            MapSpec::Composition { maps } => {
                if maps.is_empty() {
                    return Err(Error::spec("composition needs at least one map"));
                }
                let built = maps.iter().map(|m| m.build()).collect::<Result<Vec<_>>>()?;
                let n = built[0].dim_in();
                if built.iter().any(|m| m.dim_in() != n || m.dim_out() != n) {
                    return Err(Error::spec("composed maps must share one dimension"));
                }
                Arc::new(Composition { maps: built })
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_jacobian(phi: &dyn SampledMap, x: &[f64]) {
        let exact = phi.jacobian(x);
        let e1 = (fd_jacobian(phi, x, 1e-2) - &exact).amax();
        let e2 = (fd_jacobian(phi, x, 5e-3) - &exact).amax();
        assert!(e1 < 1e-10 || e2 <= e1 / 3.0, "{e1:e} -> {e2:e}");
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let maps: Vec<Arc<dyn SampledMap>> = vec![
            Arc::new(Affine::rotation(3, 0.7, Some(&[1.0, 2.0, 0.5])).unwrap()),
            Arc::new(Inversion::unit(3)),
            Arc::new(WaveMap::random(3, 3, &mut rng)),
            Arc::new(Composition {
                maps: vec![
                    Arc::new(Inversion::unit(3)),
                    Arc::new(Affine::translation(&[0.1, 0.2, 0.3])),
                    Arc::new(Inversion::unit(3)),
                ],
            }),
        ];
        for m in &maps {
            check_jacobian(&**m, &[0.4, -0.3, 0.6]);
        }
        check_jacobian(&ZSquared, &[0.4, -0.3]);
    }

    #[test]
    fn rotation_is_orthogonal() {
        let r = Affine::rotation(3, 1.1, Some(&[0.3, -0.2, 0.9])).unwrap();
        let q = &r.matrix;
        assert!((q.transpose() * q - DMatrix::identity(3, 3)).amax() < 1e-14);
        assert!((q.determinant() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn inversion_is_an_involution() {
        let inv = Inversion {
            center: vec![0.1, 0.2],
            radius: 0.7,
        };
        let x = [0.9, -0.4];
        let back = inv.eval(&inv.eval(&x));
        assert!((back[0] - x[0]).abs() < 1e-14 && (back[1] - x[1]).abs() < 1e-14);
    }

    #[test]
    fn spec_round_trip_and_composition_order() {
        let spec = MapSpec::Composition {
            maps: vec![
                MapSpec::Dilation { dim: 2, factor: 2.0 },
                MapSpec::Translation { offset: vec![1.0, 0.0] },
            ],
        };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(MapSpec::from_json(&text).unwrap(), spec);
        // dilate first, then translate
        let y = spec.build().unwrap().eval(&[1.0, 1.0]);
        assert_eq!(y, vec![3.0, 2.0]);
        assert!(spec.is_conformal());
        assert!(!MapSpec::Scaling { factors: vec![2.0, 1.0] }.is_conformal());
        assert!(MapSpec::from_json(r#"{"kind":"z-squared","extra":1}"#).is_err());
    }
}
