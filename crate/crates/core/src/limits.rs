//! Asymptotic mean-field problems: the scalar fixed point for doubly
//! stochastic couplings and the block (step-graphon) fixed point, plus the
//! comparison of finite-n solver output against the limits.

use serde::{Deserialize, Serialize};

use crate::certify;
use crate::error::{Error, Result};
use crate::grid1d::{kernel_table, normalize, Grid, GridDensity};
use crate::mfsolver::{cavi_solve, Init, SolveOptions, SolveResult, DEFAULT_GRID_M};
use crate::models::{InteractionKernel, Model, ScalarPotential};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitOptions {
    /// Log-space mixing toward the previous iterate; the limit map is not a
    /// coordinate-ascent step, so damping stabilizes it.
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub m: usize,
    #[serde(default)]
    pub half_width: Option<f64>,
    /// Linear log-tilt applied to the default initialization (restart knob
    /// for uniqueness probes).
    #[serde(default)]
    pub init_tilt: Option<f64>,
}

impl Default for LimitOptions {
    fn default() -> Self {
        LimitOptions {
            damping: 0.5,
            tol: 1e-9,
            max_iter: 20_000,
            m: DEFAULT_GRID_M,
            half_width: None,
            init_tilt: None,
        }
    }
}

/// Fixed point of q ∝ exp(V + K*q) and the limiting free energy per site.
#[derive(Debug, Clone, Serialize)]
pub struct ScalarLimit {
    pub q: GridDensity,
    /// sup_Q ( ∫V dQ + 1/2 ∬K Q Q - H(Q) ).
    pub value: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Step-graphon fixed point: one density per block.
#[derive(Debug, Clone, Serialize)]
pub struct BlockLimit {
    pub blocks: Vec<GridDensity>,
    pub weights: Vec<Vec<f64>>,
    /// Step-graphon objective at the fixed point (normalized-V convention).
    pub value: f64,
    /// Uniform mixture of the block densities (the empirical-measure limit).
    pub mixture: GridDensity,
    /// Additive constant removed from V so that ∫ e^V = 1.
    pub v_shift: f64,
    pub iterations: usize,
    pub residual: f64,
}

fn limit_grid(v: &ScalarPotential, opts: &LimitOptions) -> Result<Grid> {
    let hw = opts.half_width.unwrap_or(12.0 / v.kappa().sqrt());
    Grid::new(-hw, hw, opts.m)
}

fn damped_fixed_point(
    grid: &Grid,
    v_tab: &[f64],
    coupling: impl Fn(&[GridDensity], usize) -> Vec<f64>,
    n_blocks: usize,
    opts: &LimitOptions,
) -> Result<(Vec<GridDensity>, usize, f64)> {
    let m = grid.len();
    let tilt = opts.init_tilt.unwrap_or(0.0);
    let init_logw: Vec<f64> =
        grid.points().zip(v_tab).map(|(x, v)| v + tilt * x).collect();
    let q0 = normalize(init_logw, *grid)?;
    let mut blocks = vec![q0; n_blocks];
    let mut residual = f64::INFINITY;
    for iter in 0..opts.max_iter {
        // Jacobi update: every block reads the previous iterate.
        let mut next = Vec::with_capacity(n_blocks);
        let mut worst: f64 = 0.0;
        for a in 0..n_blocks {
            let smooth = coupling(&blocks, a);
            let mut logw = vec![0.0; m];
            for k in 0..m {
                let target = v_tab[k] + smooth[k];
                logw[k] =
                    (1.0 - opts.damping) * target + opts.damping * blocks[a].log_density(k);
            }
            let qa = normalize(logw, *grid)?;
            for k in 0..m {
                worst = worst.max((qa.log_density(k) - blocks[a].log_density(k)).abs());
            }
            next.push(qa);
        }
        blocks = next;
        residual = worst;
        if residual < opts.tol {
            return Ok((blocks, iter + 1, residual));
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, residual })
}

/// Solve q ∝ exp(V + K*q); value is the scalar free-energy functional.
pub fn scalar_limit(
    v: &ScalarPotential,
    k: &InteractionKernel,
    opts: &LimitOptions,
) -> Result<ScalarLimit> {
    if v.kappa() <= 0.0 {
        return Err(Error::NotStronglyConcave(v.kappa()));
    }
    let grid = limit_grid(v, opts)?;
    v.probe_check(grid.hi(), true)?;
    k.probe_check(2.0 * grid.hi())?;
    let v_tab: Vec<f64> = grid.points().map(|x| v.eval(x)).collect();
    let k_tab = kernel_table(&grid, |u| k.eval(u))?;
    let couple = |blocks: &[GridDensity], _a: usize| blocks[0].kernel_smooth_tabled(&k_tab);
    let (blocks, iterations, residual) =
        damped_fixed_point(&grid, &v_tab, couple, 1, opts)?;
    let q = blocks.into_iter().next().unwrap();
    // value = ∫V dq + 1/2 ∬K q q - H(q).
    let smooth = q.kernel_smooth_tabled(&k_tab);
    let mut pair = 0.0;
    let mut v_term = 0.0;
    for kk in 0..grid.len() {
        let w = grid.weight(kk) * q.density(kk);
        pair += w * smooth[kk];
        v_term += w * v_tab[kk];
    }
    let value = v_term + 0.5 * pair - q.entropy();
    Ok(ScalarLimit { q, value, iterations, residual })
}

/// Solve the m-block step-graphon fixed point
/// q_a ∝ exp(V + (1/m) sum_b W_ab (K*q_b)), with V renormalized so that
/// ∫ e^V = 1 (the shift is reported).
pub fn block_limit(
    v: &ScalarPotential,
    k: &InteractionKernel,
    weights: &[Vec<f64>],
    opts: &LimitOptions,
) -> Result<BlockLimit> {
    let nb = weights.len();
    if nb == 0 || weights.iter().any(|r| r.len() != nb) {
        return Err(Error::InvalidSpec("weights must be square and non-empty".into()));
    }
    for i in 0..nb {
        for j in 0..nb {
            if weights[i][j] < 0.0 {
                return Err(Error::InvalidSpec("weights must be nonnegative".into()));
            }
            if (weights[i][j] - weights[j][i]).abs() > 1e-12 {
                return Err(Error::InvalidSpec("weights must be symmetric".into()));
            }
        }
    }
    if v.kappa() <= 0.0 {
        return Err(Error::NotStronglyConcave(v.kappa()));
    }
    let grid = limit_grid(v, opts)?;
    v.probe_check(grid.hi(), true)?;
    k.probe_check(2.0 * grid.hi())?;
    k.check_nonpositive(2.0 * grid.hi())?;

    // Renormalize V so that e^V is a probability density.
    let raw_v: Vec<f64> = grid.points().map(|x| v.eval(x)).collect();
    let rho = normalize(raw_v.clone(), grid)?;
    let v_shift = rho.logz1();
    let v_tab: Vec<f64> = raw_v.iter().map(|x| x - v_shift).collect();

    let k_tab = kernel_table(&grid, |u| k.eval(u))?;
    let couple = |blocks: &[GridDensity], a: usize| {
        let m = grid.len();
        let mut acc = vec![0.0; m];
        for (b, block) in blocks.iter().enumerate() {
            let w_ab = weights[a][b];
            if w_ab != 0.0 {
                let smooth = block.kernel_smooth_tabled(&k_tab);
                for (s, out) in smooth.iter().zip(acc.iter_mut()) {
                    *out += w_ab * s / nb as f64;
                }
            }
        }
        acc
    };
    let (blocks, iterations, residual) =
        damped_fixed_point(&grid, &v_tab, couple, nb, opts)?;

    // value = (1/2m^2) sum_ab W_ab ∬K q_a q_b - (1/m) sum_a H(q_a | rho).
    let mut pair = 0.0;
    for a in 0..nb {
        let smooth_sum = couple(&blocks, a);
        for kk in 0..grid.len() {
            pair += grid.weight(kk) * blocks[a].density(kk) * smooth_sum[kk];
        }
    }
    pair /= 2.0 * nb as f64;
    let mut rel_ent = 0.0;
    for block in &blocks {
        let mut h = block.entropy();
        for kk in 0..grid.len() {
            let w = grid.weight(kk) * block.density(kk);
            if w > 0.0 {
                h -= w * v_tab[kk];
            }
        }
        rel_ent += h;
    }
    rel_ent /= nb as f64;
    let value = pair - rel_ent;

    // Uniform mixture of the blocks.
    let mix_logw: Vec<f64> = (0..grid.len())
        .map(|kk| {
            let dens: f64 = blocks.iter().map(|b| b.density(kk)).sum::<f64>() / nb as f64;
            if dens > 0.0 {
                dens.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mixture = normalize(mix_logw, grid)?;

    Ok(BlockLimit {
        blocks,
        weights: weights.to_vec(),
        value,
        mixture,
        v_shift,
        iterations,
        residual,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FiniteVsLimit {
    pub per_site_gap: f64,
    pub rf_budget_per_site: f64,
    pub elbo_per_site: f64,
    pub solve: SolveResult,
}

/// Compare the finite-n doubly stochastic problem against the scalar limit:
/// the finite optimizer is i.i.d., so the per-site objective must match.
pub fn finite_vs_limit(
    model: &Model,
    limit: &ScalarLimit,
    opts: &SolveOptions,
) -> Result<FiniteVsLimit> {
    let pg = match model {
        Model::Pairwise(pg) => pg,
        _ => return Err(Error::InvalidSpec("finite_vs_limit needs a pairwise model".into())),
    };
    let dev = pg.j().max_row_sum_deviation();
    if dev > 1e-10 {
        return Err(Error::NotDoublyStochastic(dev));
    }
    let n = model.dim() as f64;
    let solve = cavi_solve(model, Init::Default, opts)?;
    let elbo_per_site = solve.elbo / n;
    let per_site_gap = (elbo_per_site - limit.value).abs();
    let rf_budget_per_site = certify::trj2_bound(model, &solve.qstar)? / n;
    Ok(FiniteVsLimit { per_site_gap, rf_budget_per_site, elbo_per_site, solve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CouplingMatrix, PairwiseGibbs};

    fn v_gauss() -> ScalarPotential {
        ScalarPotential::gaussian_well(1.0)
    }

    #[test]
    fn scalar_limit_decoupled_case() {
        // K == 0: q ∝ e^V and value = log ∫ e^V. A zero kernel is encoded as
        // neg_quadratic scaled by zero weight, so use a custom zero kernel.
        let zero = InteractionKernel::custom(
            std::sync::Arc::new(|_| 0.0),
            std::sync::Arc::new(|_| 0.0),
            std::sync::Arc::new(|_| 0.0),
            (1e-12, 0.0),
        );
        let lim = scalar_limit(&v_gauss(), &zero, &LimitOptions::default()).unwrap();
        let expect = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lim.value - expect).abs() < 1e-8, "value = {}", lim.value);
        assert!((lim.q.variance() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn scalar_limit_gaussian_fixture() {
        let lim = scalar_limit(
            &v_gauss(),
            &InteractionKernel::neg_quadratic(),
            &LimitOptions::default(),
        )
        .unwrap();
        // Fixed point N(0, 1/2); value = -1/4 - 1/4 + (1/2) log(pi e).
        assert!((lim.q.variance() - 0.5).abs() < 1e-6, "var = {}", lim.q.variance());
        assert!((lim.value - 0.5723649).abs() < 1e-5, "value = {}", lim.value);
    }

    #[test]
    fn scalar_limit_unique_from_tilted_restarts() {
        let k = InteractionKernel::neg_logcosh();
        let base = scalar_limit(&v_gauss(), &k, &LimitOptions::default()).unwrap();
        for tilt in [0.8, -1.3] {
            let opts = LimitOptions { init_tilt: Some(tilt), ..LimitOptions::default() };
            let other = scalar_limit(&v_gauss(), &k, &opts).unwrap();
            assert!(base.q.w2(&other.q) <= 1e-5);
        }
    }

    #[test]
    fn block_limit_single_block_reduces_to_scalar() {
        let k = InteractionKernel::neg_quadratic();
        let block = block_limit(&v_gauss(), &k, &[vec![1.0]], &LimitOptions::default()).unwrap();
        // Compare against the scalar solve of the renormalized potential: the
        // scalar objective shifts by exactly v_shift.
        let scalar = scalar_limit(&v_gauss(), &k, &LimitOptions::default()).unwrap();
        assert!(
            (block.value - (scalar.value - block.v_shift)).abs() < 1e-10,
            "block {} vs scalar {} shift {}",
            block.value,
            scalar.value,
            block.v_shift
        );
        assert!(block.blocks[0].w2(&scalar.q) < 1e-9);
    }

    #[test]
    fn block_limit_block_diagonal_decouples() {
        let k = InteractionKernel::neg_quadratic();
        let w = vec![vec![2.0, 0.0], vec![0.0, 0.5]];
        let block = block_limit(&v_gauss(), &k, &w, &LimitOptions::default()).unwrap();
        // Each block solves the scalar problem with kernel scaled by w_a/m;
        // the objective decomposes as the average of those scalar values.
        let mut expect = 0.0;
        for wa in [2.0, 0.5] {
            let scaled = InteractionKernel::custom(
                {
                    let k = k.clone();
                    std::sync::Arc::new(move |u| 0.5 * wa * k.eval(u))
                },
                {
                    let k = k.clone();
                    std::sync::Arc::new(move |u| 0.5 * wa * k.d1(u))
                },
                {
                    let k = k.clone();
                    std::sync::Arc::new(move |u| 0.5 * wa * k.d2(u))
                },
                (wa * wa, 0.0),
            );
            let s = scalar_limit(&v_gauss(), &scaled, &LimitOptions::default()).unwrap();
            expect += 0.5 * (s.value - block.v_shift);
        }
        assert!((block.value - expect).abs() < 1e-8, "{} vs {expect}", block.value);
    }

    #[test]
    fn block_limit_symmetric_cross_matches_single_block() {
        let k = InteractionKernel::neg_quadratic();
        let cross = block_limit(
            &v_gauss(),
            &k,
            &[vec![0.0, 2.0], vec![2.0, 0.0]],
            &LimitOptions::default(),
        )
        .unwrap();
        let single = block_limit(&v_gauss(), &k, &[vec![1.0]], &LimitOptions::default()).unwrap();
        assert!((cross.value - single.value).abs() < 1e-6);
        assert!(cross.blocks[0].w2(&cross.blocks[1]) < 1e-8);
        assert!(cross.mixture.w2(&single.blocks[0]) < 1e-6);
    }

    #[test]
    fn finite_complete_graph_matches_scalar_limit() {
        let k = InteractionKernel::neg_quadratic();
        let lim = scalar_limit(&v_gauss(), &k, &LimitOptions::default()).unwrap();
        let j = CouplingMatrix::complete(8).unwrap().row_normalized().unwrap();
        let model =
            Model::Pairwise(PairwiseGibbs::new(v_gauss(), k.clone(), j).unwrap());
        let cmp = finite_vs_limit(&model, &lim, &SolveOptions::default()).unwrap();
        assert!(cmp.per_site_gap <= 1e-6, "gap = {}", cmp.per_site_gap);
        // Tr(J^2) = n/(n-1) for the normalized complete graph.
        let expect_budget = (8.0 / 7.0) / (8.0);
        assert!((cmp.rf_budget_per_site - expect_budget).abs() < 1e-9);
    }

    #[test]
    fn non_doubly_stochastic_is_gated() {
        let k = InteractionKernel::neg_quadratic();
        let lim = scalar_limit(&v_gauss(), &k, &LimitOptions::default()).unwrap();
        let j = CouplingMatrix::cycle(6).unwrap();
        let model = Model::Pairwise(PairwiseGibbs::new(v_gauss(), k, j).unwrap());
        assert!(matches!(
            finite_vs_limit(&model, &lim, &SolveOptions::default()),
            Err(Error::NotDoublyStochastic(_))
        ));
    }

    #[test]
    fn cavi_keeps_marginals_equal_under_doubly_stochastic_coupling() {
        let k = InteractionKernel::neg_sqrt();
        let j = CouplingMatrix::cycle(5).unwrap().row_normalized().unwrap();
        let model = Model::Pairwise(PairwiseGibbs::new(v_gauss(), k, j).unwrap());
        let r = cavi_solve(&model, Init::Default, &SolveOptions::default()).unwrap();
        for i in 1..5 {
            assert!(r.qstar.marginals[0].w2(&r.qstar.marginals[i]) <= 1e-10);
        }
    }

    #[test]
    fn grid_refinement_stability() {
        let k = InteractionKernel::neg_quadratic();
        let coarse = scalar_limit(&v_gauss(), &k, &LimitOptions::default()).unwrap();
        let fine = scalar_limit(
            &v_gauss(),
            &k,
            &LimitOptions { m: 2049, ..LimitOptions::default() },
        )
        .unwrap();
        assert!((coarse.value - fine.value).abs() < 1e-6);
    }
}
