//! Property tests for the grid-density invariants: normalization
//! idempotence, the metric axioms of W2 on random densities, and the
//! quantile/CDF inverse pair.

use proptest::prelude::*;

use mfcert_core::grid1d::{normalize, Grid, GridDensity};

/// Random smooth log-concave-ish density: Gaussian log-weight plus a bounded
/// linear tilt, on a window wide enough to keep tails resolved.
fn density_strategy() -> impl Strategy<Value = GridDensity> {
    (
        -2.0f64..2.0,     // mean
        0.3f64..2.5,      // standard deviation
        -0.8f64..0.8,     // linear tilt
        7usize..9,        // log2(m - 1)
    )
        .prop_map(|(mean, sd, tilt, log_m)| {
            let m = (1usize << log_m) + 1;
            let grid = Grid::new(-30.0, 30.0, m).unwrap();
            let logw: Vec<f64> = grid
                .points()
                .map(|x| -(x - mean) * (x - mean) / (2.0 * sd * sd) + tilt * x)
                .collect();
            normalize(logw, grid).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_is_idempotent(q in density_strategy()) {
        let logdens = q.log_density_vec();
        let renorm = normalize(logdens, q.grid()).unwrap();
        prop_assert!(renorm.logz1().abs() <= 1e-12, "logz1 = {}", renorm.logz1());
    }

    #[test]
    fn w2_metric_axioms(a in density_strategy(), b in density_strategy(), c in density_strategy()) {
        // Identity and symmetry.
        prop_assert!(a.w2(&a) <= 1e-9);
        prop_assert!((a.w2(&b) - b.w2(&a)).abs() <= 1e-12);
        // Triangle inequality within quadrature tolerance.
        prop_assert!(a.w2(&c) <= a.w2(&b) + b.w2(&c) + 1e-6);
    }

    #[test]
    fn quantile_inverts_cdf_within_one_cell(q in density_strategy(), u in 0.02f64..0.98) {
        let x = q.quantile(u).unwrap();
        // Recompute the CDF at x by trapezoid up to the containing node.
        let grid = q.grid();
        let cdf = q.cdf_nodes();
        let pos = (x - grid.lo()) / grid.spacing();
        let k = (pos.floor() as usize).min(grid.len() - 2);
        let frac = pos - k as f64;
        let cdf_x = cdf[k] + frac * (cdf[k + 1] - cdf[k]);
        let total = cdf[grid.len() - 1];
        // One grid cell of probability mass bounds the inversion error.
        let cell_mass = (cdf[k + 1] - cdf[k]).max(1e-15);
        prop_assert!(
            (cdf_x / total - u).abs() <= cell_mass + 1e-10,
            "u = {u}, cdf(x)/total = {}",
            cdf_x / total
        );
    }

    #[test]
    fn moments_are_finite_and_consistent(q in density_strategy()) {
        let m1 = q.moment(1);
        let m2 = q.moment(2);
        prop_assert!(m1.is_finite() && m2.is_finite());
        // Second moment dominates squared first moment.
        prop_assert!(m2 + 1e-12 >= m1 * m1);
    }
}
