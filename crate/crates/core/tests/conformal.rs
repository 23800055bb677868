use std::sync::Arc;

use pharmcoords::cli::gallery_metric;
use pharmcoords::conformal::{chain_rule_check, factor_map, pullback_nharmonic_residual};
use pharmcoords::coords::fit_loglog_slope;
use pharmcoords::geometry::maps::{Affine, Composition, Inversion};
use pharmcoords::geometry::{Domain, FlatMetric, MetricField, SampledMap};
use pharmcoords::grid::{make_annulus, DiscreteScalarField};
use pharmcoords::solver::SolverConfig;
use pharmcoords::Error;

fn flat(n: usize) -> Arc<dyn MetricField> {
    Arc::new(FlatMetric::with_domain(n, Domain::Everywhere))
}

#[test]
fn chain_rule_converges_under_inversion() {
    let g = flat(2);
    let hs = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
    let mut errors = Vec::new();
    for &h in &hs {
        let source = make_annulus(2, 0.5, 1.0, &[0.0, 0.0], h).unwrap();
        let target = make_annulus(2, 0.9 - 3.0 * h, 2.1 + 3.0 * h, &[0.0, 0.0], h).unwrap();
        let v = DiscreteScalarField::from_fn(&target, |y| y[0] * y[1] + (y[0] * y[0] + y[1] * y[1]).sqrt().ln()).unwrap();
        let r = chain_rule_check(&v, &Inversion::unit(2), g.as_ref(), g.as_ref(), &source).unwrap();
        assert!(r.inequality_excess <= 0.0, "h={h}: {r:?}");
        errors.push(r.gradient_error);
    }
    assert!(fit_loglog_slope(&hs, &errors) >= 0.9, "{errors:?}");
}

#[test]
fn factoring_a_similarity_is_exact() {
    let phi: Arc<dyn SampledMap> = Arc::new(Composition {
        maps: vec![
            Arc::new(Affine::rotation(2, 0.3, None).unwrap()),
            Arc::new(Affine::dilation(2, 1.5)),
            Arc::new(Affine::translation(&[0.2, -0.1])),
        ],
    });
    let f = factor_map(phi, flat(2), flat(2), &[0.2, 0.1], 1e-8, &SolverConfig::default()).unwrap();
    assert!(f.u_residuals.iter().all(|r| *r <= 1e-10), "{:?}", f.u_residuals);
    assert!(f.recomposition_error <= 1e-10, "{}", f.recomposition_error);
}

#[test]
fn factoring_the_inversion() {
    let phi: Arc<dyn SampledMap> = Arc::new(Inversion::unit(2));
    let f = factor_map(phi, flat(2), flat(2), &[0.7, 0.2], 1e-3, &SolverConfig::default()).unwrap();
    assert!(f.recomposition_error <= 1e-10, "{}", f.recomposition_error);
    assert!(f.u_residuals.iter().all(|r| *r <= 1e-2), "{:?}", f.u_residuals);
}

#[test]
fn identity_from_a_conformal_metric_factors_with_harmonic_pullbacks() {
    let g = gallery_metric("conformal-exp", 2).unwrap().build().unwrap();
    let f = factor_map(Arc::new(Affine::identity(2)), g, flat(2), &[0.1, 0.0], 1e-8, &SolverConfig::default()).unwrap();
    assert!(f.u_residuals.iter().all(|r| *r <= 1e-10), "{:?}", f.u_residuals);
}

#[test]
fn factoring_rejects_non_conformal_maps() {
    let phi: Arc<dyn SampledMap> = Arc::new(Affine::scaling(&[2.0, 1.0]));
    let err = factor_map(phi, flat(2), flat(2), &[0.0, 0.0], 1e-6, &SolverConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NonConformalInput { .. }), "{err}");
}

#[test]
fn log_norm_after_rotation_converges() {
    let g = flat(2);
    let hs = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
    let res: Vec<f64> = hs
        .iter()
        .map(|&h| {
            let source = make_annulus(2, 0.5, 1.0, &[0.0, 0.0], h).unwrap();
            let target = make_annulus(2, 0.5 - 3.0 * h, 1.0 + 3.0 * h, &[0.0, 0.0], h).unwrap();
            let v = DiscreteScalarField::from_fn(&target, |y| (y[0] * y[0] + y[1] * y[1]).sqrt().ln()).unwrap();
            let phi = Affine::rotation(2, 0.7, None).unwrap();
            pullback_nharmonic_residual(&v, &phi, g.clone(), g.as_ref(), &source).unwrap().residual
        })
        .collect();
    // Cubic interpolation error over the second-difference stencil leaves
    // first-order decay near the inner circle.
    assert!(res.windows(2).all(|w| w[1] < 0.7 * w[0]), "{res:?}");
}
