//! Ground-truth engines for tests and acceptance: Gaussian closed forms and
//! tensor-grid brute force for tiny n.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid1d::{normalize, Grid, GridDensity, ProductMeasure};
use crate::linalg::SymMatrix;
use crate::models::Model;

/// Brute-force dimension caps.
pub const BRUTE_LOGZ_MAX_DIM: usize = 4;
pub const BRUTE_MARGINAL_MAX_DIM: usize = 3;

/// Grid sizes tried by the doubling rule, coarsest first.
const BRUTE_GRIDS: [usize; 3] = [65, 129, 257];
const BRUTE_DOUBLING_TOL: f64 = 1e-7;

/// Closed forms for a centered Gaussian with precision matrix A.
#[derive(Debug, Clone, Serialize)]
pub struct GaussianTruth {
    pub n: usize,
    pub logz: f64,
    /// Variances 1/A_ii of the mean-field optimizer's marginals.
    pub qstar_vars: Vec<f64>,
    /// Exact mean-field error R_f = (1/2) log(prod A_ii / det A).
    pub rf_exact: f64,
    /// True marginal variances (A^{-1})_ii.
    pub marginal_vars: Vec<f64>,
    /// Variances of the reversed entropic projection (product of marginals).
    pub pstar_vars: Vec<f64>,
}

/// Closed-form Gaussian facts: the H(.|P) projection keeps the precision
/// diagonal, the reversed projection keeps the covariance diagonal.
pub fn gaussian_truth(a: &SymMatrix) -> Result<GaussianTruth> {
    let n = a.n();
    let chol = a.cholesky()?;
    let log_det = chol.log_det();
    let logz = 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det;
    let qstar_vars: Vec<f64> = (0..n).map(|i| 1.0 / a.get(i, i)).collect();
    let sum_log_aii: f64 = (0..n).map(|i| a.get(i, i).ln()).sum();
    let rf_exact = 0.5 * (sum_log_aii - log_det);
    let marginal_vars = chol.inverse_diagonal();
    Ok(GaussianTruth {
        n,
        logz,
        qstar_vars,
        rf_exact,
        marginal_vars: marginal_vars.clone(),
        pstar_vars: marginal_vars,
    })
}

/// Default brute-force window for a model: center +- 12/sqrt(kappa).
pub fn default_windows(model: &Model, m: usize) -> Result<Vec<Grid>> {
    let kappa = model.kappa()?;
    let hw = 12.0 / kappa.sqrt();
    let centers = model.default_center()?;
    centers.iter().map(|&c| Grid::new(c - hw, c + hw, m)).collect()
}

fn tensor_log_integral(f: &(dyn Fn(&[f64]) -> f64 + Sync), grids: &[Grid]) -> f64 {
    let n = grids.len();
    let dims: Vec<usize> = grids.iter().map(|g| g.len()).collect();
    let outer = dims[0];

    // Pass 1: global max of f + log-weight, for stable log-sum-exp.
    let slab_max = |k0: usize| -> f64 {
        let mut point = vec![0.0; n];
        let mut best = f64::NEG_INFINITY;
        point[0] = grids[0].point(k0);
        let lw0 = grids[0].weight(k0).ln();
        for_each_index(&dims[1..], &mut |rest: &[usize]| {
            let mut lw = lw0;
            for (axis, &k) in rest.iter().enumerate() {
                point[axis + 1] = grids[axis + 1].point(k);
                lw += grids[axis + 1].weight(k).ln();
            }
            let v = f(&point) + lw;
            if v > best {
                best = v;
            }
        });
        best
    };
    let max: f64 = (0..outer)
        .into_par_iter()
        .map(slab_max)
        .collect::<Vec<_>>()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);

    // Pass 2: per-slab partial sums of exp(f + log w - max), folded in order.
    let slab_sum = |k0: usize| -> f64 {
        let mut point = vec![0.0; n];
        let mut acc = 0.0;
        point[0] = grids[0].point(k0);
        let lw0 = grids[0].weight(k0).ln();
        for_each_index(&dims[1..], &mut |rest: &[usize]| {
            let mut lw = lw0;
            for (axis, &k) in rest.iter().enumerate() {
                point[axis + 1] = grids[axis + 1].point(k);
                lw += grids[axis + 1].weight(k).ln();
            }
            acc += (f(&point) + lw - max).exp();
        });
        acc
    };
    let total: f64 = (0..outer)
        .into_par_iter()
        .map(slab_sum)
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    max + total.ln()
}

fn for_each_index(dims: &[usize], f: &mut impl FnMut(&[usize])) {
    let mut idx = vec![0usize; dims.len()];
    if dims.is_empty() {
        f(&idx);
        return;
    }
    loop {
        f(&idx);
        let mut axis = dims.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < dims[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// log \int e^{f} over the given windows, one resolution.
pub fn brute_logz_fn(f: &(dyn Fn(&[f64]) -> f64 + Sync), grids: &[Grid]) -> f64 {
    tensor_log_integral(f, grids)
}

/// log \int e^{f}, refining the per-axis grid (65 -> 129 -> 257) until one
/// doubling changes the result by less than 1e-7.
pub fn brute_logz_fn_adaptive(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    windows: &[(f64, f64)],
) -> Result<f64> {
    if windows.len() > BRUTE_LOGZ_MAX_DIM {
        return Err(Error::DimensionTooLarge(windows.len(), BRUTE_LOGZ_MAX_DIM));
    }
    let mut prev: Option<f64> = None;
    for &m in &BRUTE_GRIDS {
        let grids: Vec<Grid> = windows
            .iter()
            .map(|&(lo, hi)| Grid::new(lo, hi, m))
            .collect::<Result<_>>()?;
        let value = tensor_log_integral(f, &grids);
        if let Some(p) = prev {
            if (value - p).abs() < BRUTE_DOUBLING_TOL {
                return Ok(value);
            }
        }
        prev = Some(value);
    }
    Err(Error::NoConvergence { iterations: BRUTE_GRIDS.len(), residual: f64::NAN })
}

/// Brute-force log partition function of a model over default windows.
pub fn brute_logz(model: &Model) -> Result<f64> {
    let n = model.dim();
    if n > BRUTE_LOGZ_MAX_DIM {
        return Err(Error::DimensionTooLarge(n, BRUTE_LOGZ_MAX_DIM));
    }
    let windows: Vec<(f64, f64)> = default_windows(model, 16)?
        .iter()
        .map(|g| (g.lo(), g.hi()))
        .collect();
    let f = |x: &[f64]| model.eval_f(x).unwrap_or(f64::NEG_INFINITY);
    brute_logz_fn_adaptive(&f, &windows)
}

/// Marginal density of coordinate i by integrating e^f over the other axes.
pub fn brute_marginal(model: &Model, grids: &[Grid], i: usize) -> Result<GridDensity> {
    let n = model.dim();
    if n > BRUTE_MARGINAL_MAX_DIM {
        return Err(Error::DimensionTooLarge(n, BRUTE_MARGINAL_MAX_DIM));
    }
    if grids.len() != n || i >= n {
        return Err(Error::OutOfRange(format!("marginal axis {i} of {n}")));
    }
    let axis = grids[i];
    let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let f = |x: &[f64]| model.eval_f(x).unwrap_or(f64::NEG_INFINITY);
    let logw: Vec<f64> = (0..axis.len())
        .into_par_iter()
        .map(|k| {
            let xi = axis.point(k);
            if others.is_empty() {
                return f(&[xi]);
            }
            let sub: Vec<Grid> = others.iter().map(|&j| grids[j]).collect();
            let g = |rest: &[f64]| {
                let mut full = vec![0.0; n];
                full[i] = xi;
                for (slot, &j) in others.iter().enumerate() {
                    full[j] = rest[slot];
                }
                f(&full)
            };
            tensor_log_integral(&g, &sub)
        })
        .collect();
    normalize(logw, axis)
}

/// H(Q | P) for a product measure Q against P ~ e^{f - logz}, by tensor
/// quadrature of q log(q/p) on the given grids.
pub fn relative_entropy_to_gibbs(
    q: &ProductMeasure,
    model: &Model,
    logz: f64,
    grids: &[Grid],
) -> Result<f64> {
    let n = q.dim();
    if n > BRUTE_LOGZ_MAX_DIM {
        return Err(Error::DimensionTooLarge(n, BRUTE_LOGZ_MAX_DIM));
    }
    if grids.len() != n {
        return Err(Error::LengthMismatch(grids.len(), n));
    }
    // Precompute interpolated log q_i at the tensor grid nodes.
    let logq: Vec<Vec<f64>> = (0..n)
        .map(|i| grids[i].points().map(|x| q.marginals[i].log_density_at(x)).collect())
        .collect();
    let dims: Vec<usize> = grids.iter().map(|g| g.len()).collect();
    let outer = dims[0];
    let slab = |k0: usize| -> f64 {
        let mut acc = 0.0;
        let mut point = vec![0.0; n];
        point[0] = grids[0].point(k0);
        let w0 = grids[0].weight(k0);
        for_each_index(&dims[1..], &mut |rest: &[usize]| {
            let mut w = w0;
            let mut lq = logq[0][k0];
            for (axis, &k) in rest.iter().enumerate() {
                point[axis + 1] = grids[axis + 1].point(k);
                w *= grids[axis + 1].weight(k);
                lq += logq[axis + 1][k];
            }
            if lq > f64::NEG_INFINITY {
                let logp = model.eval_f(&point).unwrap_or(f64::NEG_INFINITY) - logz;
                acc += w * lq.exp() * (lq - logp);
            }
        });
        acc
    };
    Ok((0..outer)
        .into_par_iter()
        .map(slab)
        .collect::<Vec<_>>()
        .into_iter()
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymMatrix;
    use crate::models::{CouplingMatrix, InteractionKernel, PairwiseGibbs, QuadraticModel, ScalarPotential};
    use crate::rng::CounterRng;

    fn pair_model() -> Model {
        Model::Pairwise(
            PairwiseGibbs::new(
                ScalarPotential::gaussian_well(1.0),
                InteractionKernel::neg_quadratic(),
                CouplingMatrix::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn gaussian_truth_identity_and_fixture() {
        let id = SymMatrix::identity(2);
        let t = gaussian_truth(&id).unwrap();
        assert!((t.logz - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!(t.rf_exact.abs() < 1e-12);

        let a = SymMatrix::from_rows(&[vec![1.5, -0.5], vec![-0.5, 1.5]]).unwrap();
        let t = gaussian_truth(&a).unwrap();
        assert!((t.logz - 1.4913035).abs() < 1e-6);
        assert!((t.rf_exact - 0.0588915).abs() < 1e-6);
        assert!((t.qstar_vars[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.marginal_vars[0] - 0.75).abs() < 1e-12);

        let b = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let t = gaussian_truth(&b).unwrap();
        assert!((t.rf_exact - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn brute_logz_gaussian_cases() {
        // n = 1 standard Gaussian.
        let m1 = Model::Quadratic(QuadraticModel::new(SymMatrix::identity(1)).unwrap());
        let z1 = brute_logz(&m1).unwrap();
        assert!((z1 - 0.9189385).abs() < 1e-7, "z1 = {z1}");

        // The Gaussian pair written as a pairwise model.
        let z2 = brute_logz(&pair_model()).unwrap();
        assert!((z2 - 1.4913035).abs() < 1e-6, "z2 = {z2}");
    }

    #[test]
    fn brute_logz_rejects_large_dimension() {
        let m = Model::Quadratic(QuadraticModel::new(SymMatrix::identity(5)).unwrap());
        assert!(matches!(brute_logz(&m), Err(Error::DimensionTooLarge(5, 4))));
    }

    #[test]
    fn brute_marginal_separable_and_pair() {
        // J = 0: the marginal is proportional to e^V.
        let sep = Model::Pairwise(
            PairwiseGibbs::new(
                ScalarPotential::gaussian_well(1.0),
                InteractionKernel::neg_quadratic(),
                CouplingMatrix::zeros(2),
            )
            .unwrap(),
        );
        let grids = default_windows(&sep, 129).unwrap();
        let q0 = brute_marginal(&sep, &grids, 0).unwrap();
        for k in 0..grids[0].len() {
            let x = grids[0].point(k);
            let expect = -x * x / 2.0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
            assert!((q0.log_density(k) - expect).abs() < 1e-8);
        }

        // Gaussian pair: the true marginal is N(0, 0.75).
        let grids = default_windows(&pair_model(), 257).unwrap();
        let q0 = brute_marginal(&pair_model(), &grids, 0).unwrap();
        assert!((q0.variance() - 0.75).abs() < 1e-6);
        let exact = {
            let g = q0.grid();
            let logw = g.points().map(|x| -x * x / (2.0 * 0.75)).collect();
            normalize(logw, g).unwrap()
        };
        assert!(q0.w2(&exact) < 1e-4);
    }

    #[test]
    fn quartic_chain_marginal_is_stable_under_refinement() {
        // The n=3 quartic-chain marginal regenerates to itself when the grid
        // doubles, which is the self-consistency check behind treating the
        // coarse run as a golden file.
        let model = Model::Pairwise(
            PairwiseGibbs::new(
                ScalarPotential::quartic_well(1.0, 1.0),
                InteractionKernel::neg_sqrt(),
                CouplingMatrix::from_rows(&[
                    vec![0.0, 0.5, 0.0],
                    vec![0.5, 0.0, 0.5],
                    vec![0.0, 0.5, 0.0],
                ])
                .unwrap(),
            )
            .unwrap(),
        );
        let coarse = brute_marginal(&model, &default_windows(&model, 129).unwrap(), 1).unwrap();
        let fine = brute_marginal(&model, &default_windows(&model, 257).unwrap(), 1).unwrap();
        // Coarse nodes are every second fine node; compare log densities
        // pointwise wherever the density carries mass.
        let mut sup_log: f64 = 0.0;
        for k in 0..coarse.grid().len() {
            if coarse.density(k) > 1e-12 {
                sup_log = sup_log.max((coarse.log_density(k) - fine.log_density(2 * k)).abs());
            }
        }
        assert!(sup_log < 1e-8, "sup log diff = {sup_log}");
        assert!((coarse.variance() - fine.variance()).abs() < 1e-8);
    }

    #[test]
    fn gaussian_truth_agrees_with_brute_on_random_spd() {
        let rng = CounterRng::new(31);
        for trial in 0..6u64 {
            let n = 2 + (trial % 2) as usize;
            let mut rows = vec![vec![0.0; n]; n];
            for i in 0..n {
                rows[i][i] = 1.0 + rng.uniform(trial, i as u64, 0, 0);
            }
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = 0.3 * (2.0 * rng.uniform(trial, i as u64, j as u64, 1) - 1.0) / n as f64;
                    rows[i][j] = v;
                    rows[j][i] = v;
                }
            }
            let a = SymMatrix::from_rows(&rows).unwrap();
            let truth = gaussian_truth(&a).unwrap();
            let model = Model::Quadratic(QuadraticModel::new(a).unwrap());
            let z = brute_logz(&model).unwrap();
            assert!((z - truth.logz).abs() < 1e-6, "trial {trial}: {z} vs {}", truth.logz);
        }
    }

    #[test]
    fn reversed_projection_minimizes_h_p_given_q() {
        // H(P|Q) over perturbed products stays above H(P|P*), P* = product of
        // true marginals. Evaluated by tensor quadrature on the pair fixture.
        let model = pair_model();
        let grids = default_windows(&model, 129).unwrap();
        let logz = brute_logz(&model).unwrap();
        let marginals: Vec<GridDensity> =
            (0..2).map(|i| brute_marginal(&model, &grids, i).unwrap()).collect();

        let h_p_q = |q: &[GridDensity]| -> f64 {
            let mut acc = 0.0;
            for k0 in 0..grids[0].len() {
                for k1 in 0..grids[1].len() {
                    let x = [grids[0].point(k0), grids[1].point(k1)];
                    let w = grids[0].weight(k0) * grids[1].weight(k1);
                    let logp = model.eval_f(&x).unwrap() - logz;
                    let logq = q[0].log_density(k0) + q[1].log_density(k1);
                    acc += w * logp.exp() * (logp - logq);
                }
            }
            acc
        };
        let base = h_p_q(&marginals);
        let rng = CounterRng::new(77);
        for trial in 0..20u64 {
            let perturbed: Vec<GridDensity> = marginals
                .iter()
                .enumerate()
                .map(|(i, q)| {
                    let tilt = 0.2 * (2.0 * rng.uniform(trial, i as u64, 0, 0) - 1.0);
                    let curve = 0.1 * rng.uniform(trial, i as u64, 1, 0);
                    let logw: Vec<f64> = q
                        .grid()
                        .points()
                        .zip(q.logw())
                        .map(|(x, lw)| lw + tilt * x - curve * x * x)
                        .collect();
                    normalize(logw, q.grid()).unwrap()
                })
                .collect();
            assert!(h_p_q(&perturbed) >= base - 1e-8);
        }
    }
}
