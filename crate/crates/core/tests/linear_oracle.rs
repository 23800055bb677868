mod common;

use std::sync::Arc;

use pharmcoords::aop::make_aoperator;
use pharmcoords::cli::gallery_metric;
use pharmcoords::grid::{make_ball, DiscreteScalarField};
use pharmcoords::solver::{solve_dirichlet, SolverConfig};

#[test]
fn p2_matches_dense_cholesky() {
    for name in ["flat", "conformal-exp", "diagonal", "bump-perturbed"] {
        let g = gallery_metric(name, 2).unwrap().build().unwrap();
        let ball = make_ball(2, 1.0, &[0.0, 0.0], 0.05).unwrap();
        let f = DiscreteScalarField::from_fn(&ball, common::smooth_data).unwrap();
        let a = make_aoperator(Arc::clone(&g), 2.0, 0.0).unwrap();
        let sol = solve_dirichlet(&a, &ball, &f, &SolverConfig::default()).unwrap();
        let oracle = common::dense_linear_solve(g.as_ref(), &ball, &f);
        let err = sol
            .u
            .values
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-8, "{name}: {err:e}");
    }
}
