//! Distributed stochastic control on horizon T with running cost
//! (1/2n) sum_i ∫ |alpha_i|^2 dt and terminal reward g(X_T).
//!
//! Three nested control classes are evaluated: all Markovian controls
//! (v_orig, via log ∫ e^{ng} dγ_T), per-coordinate distributed controls
//! (v_dstr, the mean-field value), and deterministic controls (v_det, the
//! Gaussian tilt). The distributed optimizer itself is synthesized as a
//! per-coordinate drift steering Brownian motion to terminal law Q*_i, and
//! simulated with Euler-Maruyama to cross-check v_dstr.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify;
use crate::error::{Error, Result};
use crate::gauss_hermite::GaussHermite;
use crate::grid1d::{normalize, Grid, GridDensity, ProductMeasure};
use crate::linalg::SymMatrix;
use crate::mfsolver::{cavi_solve_ref, tilt_solve, Init, SolveOptions, SolveResult};
use crate::models::{
    BayesLinReg, BlackBoxModel, Model, PairwiseGibbs, QuadraticModel, ScalarPotential,
};
use crate::oracle;
use crate::rng::CounterRng;

/// Reference grid half-width in units of sqrt(T), around the tilt span.
const REF_WINDOW_SIGMAS: f64 = 14.0;
const REF_GRID_M: usize = 1025;
/// Fraction of drift evaluations allowed to hit the clip bound.
const CLIP_BUDGET: f64 = 1e-3;
/// Dimension above which v_orig becomes a certified interval.
const BRUTE_DIM_CAP: usize = 4;

#[derive(Debug, Clone)]
pub struct ControlProblem {
    n: usize,
    horizon: f64,
    g: Model,
}

impl ControlProblem {
    pub fn new(n: usize, horizon: f64, g: Model) -> Result<Self> {
        if g.dim() != n {
            return Err(Error::LengthMismatch(g.dim(), n));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::OutOfRange(format!("horizon {horizon} must be positive")));
        }
        // Growth gate c2 < 1/(2T) on the declared envelope of g.
        let c2 = declared_growth_exponent(&g);
        if !(c2 < 1.0 / (2.0 * horizon)) {
            return Err(Error::InvariantViolated(format!(
                "declared growth exponent {c2} violates c2 < 1/(2T) = {}",
                1.0 / (2.0 * horizon)
            )));
        }
        Ok(ControlProblem { n, horizon, g })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn g(&self) -> &Model {
        &self.g
    }

    /// Concavity of ng + sum log gamma_T: n kappa_g + 1/T.
    pub fn kappa_eff(&self) -> f64 {
        self.n as f64 * self.g.kappa_or_zero() + 1.0 / self.horizon
    }
}

fn declared_growth_exponent(g: &Model) -> f64 {
    match g {
        Model::Pairwise(m) => m.v().growth().1,
        Model::Bayes(m) => m.prior().growth().1,
        // Polynomial families satisfy the envelope for every positive
        // exponent, so the gate passes vacuously.
        Model::Quadratic(_) | Model::BlackBox(_) => 0.0,
    }
}

/// The model n*g, used because V_orig = (1/n) log ∫ e^{ng} dγ_T.
pub fn scale_model(g: &Model, factor: f64) -> Result<Model> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::OutOfRange(format!("scale factor {factor}")));
    }
    Ok(match g {
        Model::Quadratic(m) => {
            let rows: Vec<Vec<f64>> = m
                .a()
                .rows()
                .iter()
                .map(|r| r.iter().map(|v| v * factor).collect())
                .collect();
            let a = SymMatrix::from_rows(&rows)?;
            let b: Vec<f64> = m.b().iter().map(|v| v * factor).collect();
            Model::Quadratic(QuadraticModel::psd(a, b, m.c() * factor)?)
        }
        Model::Pairwise(m) => {
            let v = m.v().clone();
            let (c1, c2) = v.growth();
            let kappa = v.kappa() * factor;
            let (fv, f1, f2) = (factor, factor, factor);
            let v_eval = {
                let v = v.clone();
                std::sync::Arc::new(move |x: f64| fv * v.eval(x))
            };
            let v_d1 = {
                let v = v.clone();
                std::sync::Arc::new(move |x: f64| f1 * v.d1(x))
            };
            let v_d2 = {
                let v = v.clone();
                std::sync::Arc::new(move |x: f64| f2 * v.d2(x))
            };
            let scaled_v =
                ScalarPotential::custom(v_eval, v_d1, v_d2, kappa, (c1 * factor, c2));
            let j = m.j().scale(factor)?;
            Model::Pairwise(PairwiseGibbs::new(scaled_v, m.k().clone(), j)?)
        }
        Model::Bayes(m) => {
            let prior = m.prior().clone();
            let (c1, c2) = prior.growth();
            let kappa = prior.kappa() * factor;
            let f = factor;
            let p_eval = {
                let p = prior.clone();
                std::sync::Arc::new(move |x: f64| f * p.eval(x))
            };
            let p_d1 = {
                let p = prior.clone();
                std::sync::Arc::new(move |x: f64| f * p.d1(x))
            };
            let p_d2 = {
                let p = prior.clone();
                std::sync::Arc::new(move |x: f64| f * p.d2(x))
            };
            let scaled_prior =
                ScalarPotential::custom(p_eval, p_d1, p_d2, kappa, (c1 * factor, c2));
            Model::Bayes(BayesLinReg::new(
                m.design().to_vec(),
                m.y().to_vec(),
                m.sigma2() / factor,
                scaled_prior,
            )?)
        }
        Model::BlackBox(_) => {
            let inner = g.clone();
            let kappa = inner.kappa_or_zero() * factor;
            let (fe, fg, fc) = (factor, factor, factor);
            let e_model = inner.clone();
            let g_model = inner.clone();
            let c_model = inner.clone();
            Model::BlackBox(BlackBoxModel::new(
                inner.dim(),
                std::sync::Arc::new(move |x: &[f64]| {
                    fe * e_model.eval_f(x).unwrap_or(f64::NAN)
                }),
                std::sync::Arc::new(move |x: &[f64], i: usize| {
                    fg * g_model.partial_i(x, i).unwrap_or(f64::NAN)
                }),
                std::sync::Arc::new(move |x: &[f64], i: usize, j: usize| {
                    fc * c_model.cross_ij(x, i, j).unwrap_or(f64::NAN)
                }),
                kappa.max(1e-12),
            )?)
        }
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(untagged)]
pub enum ValueOrInterval {
    Point(f64),
    Interval { lo: f64, hi: f64 },
}

impl ValueOrInterval {
    pub fn lo(&self) -> f64 {
        match self {
            ValueOrInterval::Point(v) => *v,
            ValueOrInterval::Interval { lo, .. } => *lo,
        }
    }

    pub fn hi(&self) -> f64 {
        match self {
            ValueOrInterval::Point(v) => *v,
            ValueOrInterval::Interval { hi, .. } => *hi,
        }
    }
}

/// Reference product measure: n copies of the gamma_T marginal on a window
/// wide enough to hold both gamma_T and the tilted optimizers.
fn reference_measure(prob: &ControlProblem, tilt_span: (f64, f64)) -> Result<ProductMeasure> {
    let sd = prob.horizon.sqrt();
    let lo = tilt_span.0.min(0.0) - REF_WINDOW_SIGMAS * sd;
    let hi = tilt_span.1.max(0.0) + REF_WINDOW_SIGMAS * sd;
    let grid = Grid::new(lo, hi, REF_GRID_M)?;
    let logw: Vec<f64> =
        grid.points().map(|x| -x * x / (2.0 * prob.horizon)).collect();
    let marginal = normalize(logw, grid)?;
    ProductMeasure::new(vec![marginal; prob.n])
}

/// Optimal value over all Markovian controls: (1/n) log ∫ e^{ng} dγ_T.
/// Exact tensor quadrature for n <= 4, a certified interval above that.
pub fn value_orig(prob: &ControlProblem, opts: &SolveOptions) -> Result<ValueOrInterval> {
    let n = prob.n;
    let scaled = scale_model(&prob.g, n as f64)?;
    if n <= BRUTE_DIM_CAP {
        let tilt = tilt_solve(&scaled, prob.horizon, opts)?;
        let sd = prob.horizon.sqrt();
        let windows: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let c = tilt.ystar[i];
                (c.min(0.0) - 13.0 * sd, c.max(0.0) + 13.0 * sd)
            })
            .collect();
        let log_gauss_norm = -0.5 * (2.0 * std::f64::consts::PI * prob.horizon).ln();
        let t2 = 2.0 * prob.horizon;
        let f_tot = move |x: &[f64]| {
            let g = scaled.eval_f(x).unwrap_or(f64::NEG_INFINITY);
            let gauss: f64 = x.iter().map(|xi| -xi * xi / t2 + log_gauss_norm).sum();
            g + gauss
        };
        let logz = oracle::brute_logz_fn_adaptive(&f_tot, &windows)?;
        Ok(ValueOrInterval::Point(logz / n as f64))
    } else {
        let (_, solve, rho) = value_dstr_full(prob, opts)?;
        let cert = certify::certify_ref(&scaled, &rho, &solve.qstar, prob.kappa_eff())?;
        Ok(ValueOrInterval::Interval {
            lo: cert.logz_lo / n as f64,
            hi: cert.logz_hi / n as f64,
        })
    }
}

/// Distributed value: mean-field objective of ng against gamma_T, per site.
pub fn value_dstr(prob: &ControlProblem, opts: &SolveOptions) -> Result<(f64, SolveResult)> {
    let (v, solve, _) = value_dstr_full(prob, opts)?;
    Ok((v, solve))
}

fn value_dstr_full(
    prob: &ControlProblem,
    opts: &SolveOptions,
) -> Result<(f64, SolveResult, ProductMeasure)> {
    let scaled = scale_model(&prob.g, prob.n as f64)?;
    let tilt = tilt_solve(&scaled, prob.horizon, opts)?;
    let span = tilt
        .ystar
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |acc, &y| (acc.0.min(y), acc.1.max(y)));
    let rho = reference_measure(prob, span)?;
    let solve = cavi_solve_ref(&scaled, &rho, Init::Default, opts)?;
    Ok((solve.elbo / prob.n as f64, solve, rho))
}

/// Deterministic-control value via the Gaussian tilt of ng.
pub fn value_det(prob: &ControlProblem, opts: &SolveOptions) -> Result<(f64, Vec<f64>)> {
    let scaled = scale_model(&prob.g, prob.n as f64)?;
    let tilt = tilt_solve(&scaled, prob.horizon, opts)?;
    Ok((tilt.value / prob.n as f64, tilt.ystar))
}

/// (gap_bound, det_gap_bound):
/// nT^2 sum_{i<j} E_{Q*}|d_ij g|^2 and (nT^2/2) sum_{i,j} E_{γ_{y*,T}}|d_ij g|^2.
pub fn gap_bounds(
    prob: &ControlProblem,
    qstar: &ProductMeasure,
    ystar: &[f64],
) -> Result<(f64, f64)> {
    let n = prob.n as f64;
    let t2 = prob.horizon * prob.horizon;
    let (raw_cross, cross_se) = certify::raw_cross_square_sum(&prob.g, qstar)?;
    let cross = match cross_se {
        Some(se) => raw_cross + 3.0 * se,
        None => raw_cross,
    };
    let gap_bound = n * t2 * cross;
    let det_gap_bound = 0.5 * n * t2 * full_hessian_square_sum(&prob.g, ystar, prob.horizon)?;
    Ok((gap_bound, det_gap_bound))
}

/// sum_{i,j} E_{γ_{y,T}} |d_ij g|^2 including the diagonal.
fn full_hessian_square_sum(g: &Model, y: &[f64], t: f64) -> Result<f64> {
    let n = g.dim();
    let gh = GaussHermite::new(40);
    match g {
        Model::Quadratic(m) => {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += m.a().get(i, j).powi(2);
                }
            }
            Ok(acc)
        }
        Model::Bayes(m) => {
            let s2 = m.sigma2();
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        let jii = m.gram().get(i, i);
                        acc += gh.expect(y[i], t, |x| (m.prior().d2(x) - jii / s2).powi(2));
                    } else {
                        acc += (m.gram().get(i, j) / s2).powi(2);
                    }
                }
            }
            Ok(acc)
        }
        Model::Pairwise(m) => {
            // Off-diagonal: E K''(X_i - X_j)^2 with the difference Gaussian.
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let jij = m.j().get(i, j);
                        if jij != 0.0 {
                            acc += jij * jij
                                * gh.expect(y[i] - y[j], 2.0 * t, |u| m.k().d2(u).powi(2));
                        }
                    }
                }
            }
            // Diagonal: E (V''(X_i) + sum_j J_ij K''(X_i - X_j))^2, inner
            // conditional mean/variance over independent X_j per x_i node.
            for i in 0..n {
                let term = gh.expect(y[i], t, |xi| {
                    let mut mean = 0.0;
                    let mut var = 0.0;
                    for j in 0..n {
                        if j != i {
                            let jij = m.j().get(i, j);
                            if jij != 0.0 {
                                let e1 = gh.expect(y[j], t, |xj| m.k().d2(xi - xj));
                                let e2 = gh.expect(y[j], t, |xj| m.k().d2(xi - xj).powi(2));
                                mean += jij * e1;
                                var += jij * jij * (e2 - e1 * e1).max(0.0);
                            }
                        }
                    }
                    let d = m.v().d2(xi) + mean;
                    d * d + var
                });
                acc += term;
            }
            Ok(acc)
        }
        Model::BlackBox(_) => {
            // Monte Carlo with finite-difference diagonal, 3-sigma inflated.
            let rng = CounterRng::new(0xDE7_6A9);
            let samples = 2048;
            let mut terms = Vec::with_capacity(samples);
            let mut x = vec![0.0; n];
            let h = 1e-4 * t.sqrt();
            for s in 0..samples {
                for i in 0..n {
                    x[i] = y[i] + t.sqrt() * rng.std_normal(2, s as u64, i as u64, 0xF0);
                }
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            acc += g.cross_ij(&x, i, j)?.powi(2);
                        }
                    }
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let dii = (g.partial_i(&xp, i)? - g.partial_i(&xm, i)?) / (2.0 * h);
                    acc += dii * dii;
                }
                terms.push(acc);
            }
            let m = terms.iter().sum::<f64>() / samples as f64;
            let var = terms.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                / (samples as f64 - 1.0);
            Ok(m + 3.0 * (var / samples as f64).sqrt())
        }
    }
}

/// Per-coordinate drift alpha_i(t, x) = d/dx log E[h_i(x + B_T - B_t)] where
/// h_i = dQ*_i / dγ_T^(1). One-off evaluation; the simulator uses the cached
/// lattice instead.
pub fn follmer_drift(qi: &GridDensity, horizon: f64, t: f64, x: f64) -> Result<f64> {
    if !(0.0..horizon).contains(&t) {
        return Err(Error::TimeOutOfRange(t));
    }
    let log_h = log_h_table(qi, horizon);
    let tau = horizon - t;
    let grid = qi.grid();
    let smoothed = smooth_full(&grid, &log_h, tau);
    Ok(lookup_gradient(&grid, &smoothed, x).0)
}

/// log h = log q - log gamma_T on the grid nodes.
fn log_h_table(qi: &GridDensity, horizon: f64) -> Vec<f64> {
    let grid = qi.grid();
    let half_log = 0.5 * (2.0 * std::f64::consts::PI * horizon).ln();
    (0..grid.len())
        .map(|k| {
            let x = grid.point(k);
            qi.log_density(k) + x * x / (2.0 * horizon) + half_log
        })
        .collect()
}

/// Dense log-space Gaussian smoothing: LSE_y( logh(y) + log w_y - (x-y)^2/2tau ).
fn smooth_full(grid: &Grid, log_h: &[f64], tau: f64) -> Vec<f64> {
    if tau <= 0.0 {
        return log_h.to_vec();
    }
    let m = grid.len();
    let h = grid.spacing();
    let norm = -0.5 * (2.0 * std::f64::consts::PI * tau).ln();
    let logw: Vec<f64> = (0..m).map(|k| log_h[k] + grid.weight(k).ln()).collect();
    (0..m)
        .map(|k| {
            let mut best = f64::NEG_INFINITY;
            for (l, &lw) in logw.iter().enumerate() {
                let d = (k as f64 - l as f64) * h;
                let s = lw - d * d / (2.0 * tau);
                if s > best {
                    best = s;
                }
            }
            let mut acc = 0.0;
            for (l, &lw) in logw.iter().enumerate() {
                let d = (k as f64 - l as f64) * h;
                acc += (lw - d * d / (2.0 * tau) - best).exp();
            }
            best + acc.ln() + norm
        })
        .collect()
}

/// Banded variant used by the step-by-step semigroup construction.
fn smooth_banded(grid: &Grid, log_s: &[f64], dt: f64) -> Vec<f64> {
    let m = grid.len();
    let h = grid.spacing();
    let band = ((10.0 * dt.sqrt() / h).ceil() as usize + 2).min(m - 1);
    let norm = -0.5 * (2.0 * std::f64::consts::PI * dt).ln();
    let logw: Vec<f64> = (0..m).map(|k| log_s[k] + grid.weight(k).ln()).collect();
    (0..m)
        .map(|k| {
            let lo = k.saturating_sub(band);
            let hi = (k + band).min(m - 1);
            let mut best = f64::NEG_INFINITY;
            for l in lo..=hi {
                let d = (k as f64 - l as f64) * h;
                let s = logw[l] - d * d / (2.0 * dt);
                if s > best {
                    best = s;
                }
            }
            if best == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let mut acc = 0.0;
            for l in lo..=hi {
                let d = (k as f64 - l as f64) * h;
                acc += (logw[l] - d * d / (2.0 * dt) - best).exp();
            }
            best + acc.ln() + norm
        })
        .collect()
}

/// Central-difference gradient of a nodal table with linear interpolation;
/// the bool reports whether x fell outside the grid (edge value used).
fn lookup_gradient(grid: &Grid, table: &[f64], x: f64) -> (f64, bool) {
    let m = grid.len();
    let h = grid.spacing();
    let grad_at = |k: usize| -> f64 {
        if k == 0 {
            (table[1] - table[0]) / h
        } else if k == m - 1 {
            (table[m - 1] - table[m - 2]) / h
        } else {
            (table[k + 1] - table[k - 1]) / (2.0 * h)
        }
    };
    if x <= grid.lo() {
        return (grad_at(0), true);
    }
    if x >= grid.hi() {
        return (grad_at(m - 1), true);
    }
    let pos = (x - grid.lo()) / h;
    let k = (pos.floor() as usize).min(m - 2);
    let frac = pos - k as f64;
    ((1.0 - frac) * grad_at(k) + frac * grad_at(k + 1), false)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdeOptions {
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
}

impl SdeOptions {
    fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.dt > 0.0) || self.dt > horizon / 100.0 {
            return Err(Error::OutOfRange(format!(
                "dt = {} must be positive and at most T/100",
                self.dt
            )));
        }
        if self.paths < 1000 {
            return Err(Error::OutOfRange(format!("paths = {} must be >= 1000", self.paths)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    /// Monte Carlo estimate of E[g(X_T) - (1/2n) sum ∫ |alpha_i|^2 dt].
    pub mean: f64,
    pub stderr: f64,
    pub clip_fraction: f64,
    pub paths: usize,
    pub steps: usize,
    /// Terminal states, row-major paths x n.
    #[serde(skip)]
    pub terminal: Vec<f64>,
}

/// Drift tables per coordinate and time step, built once by Gaussian
/// semigroup smoothing of log h and differentiated on the lattice.
struct DriftCache {
    grid: Grid,
    /// tables[coord][step][node]; step k holds the drift at t = k dt.
    tables: Vec<Vec<Vec<f64>>>,
}

impl DriftCache {
    fn build(qstar: &ProductMeasure, horizon: f64, dt: f64, steps: usize) -> Result<Self> {
        let grid = qstar.marginals[0].grid();
        for marg in &qstar.marginals {
            if marg.grid() != grid {
                return Err(Error::InvalidSpec("terminal marginals must share a grid".into()));
            }
        }
        let tables: Vec<Vec<Vec<f64>>> = qstar
            .marginals
            .par_iter()
            .map(|marg| {
                let mut rows = vec![Vec::new(); steps];
                let mut log_s = log_h_table(marg, horizon);
                // tau = j dt after j smoothing steps; simulation time index
                // k uses tau = T - k dt, i.e. j = steps - k.
                for j in 1..=steps {
                    log_s = smooth_banded(&grid, &log_s, dt);
                    let k = steps - j;
                    let m = grid.len();
                    let h = grid.spacing();
                    let mut drift = Vec::with_capacity(m);
                    for node in 0..m {
                        let d = if node == 0 {
                            (log_s[1] - log_s[0]) / h
                        } else if node == m - 1 {
                            (log_s[m - 1] - log_s[m - 2]) / h
                        } else {
                            (log_s[node + 1] - log_s[node - 1]) / (2.0 * h)
                        };
                        drift.push(d);
                    }
                    rows[k] = drift;
                }
                rows
            })
            .collect();
        Ok(DriftCache { grid, tables })
    }

    /// Linear interpolation in x; outside the grid uses the edge drift and
    /// reports a clip event.
    fn drift(&self, coord: usize, step: usize, x: f64) -> (f64, bool) {
        let table = &self.tables[coord][step];
        let m = self.grid.len();
        if x <= self.grid.lo() {
            return (table[0], true);
        }
        if x >= self.grid.hi() {
            return (table[m - 1], true);
        }
        let pos = (x - self.grid.lo()) / self.grid.spacing();
        let k = (pos.floor() as usize).min(m - 2);
        let frac = pos - k as f64;
        ((1.0 - frac) * table[k] + frac * table[k + 1], false)
    }
}

/// Euler-Maruyama under the per-coordinate drift toward terminal law Q*.
pub fn simulate(
    prob: &ControlProblem,
    qstar: &ProductMeasure,
    sde: &SdeOptions,
) -> Result<SimReport> {
    sde.validate(prob.horizon)?;
    if qstar.dim() != prob.n {
        return Err(Error::LengthMismatch(qstar.dim(), prob.n));
    }
    let steps = (prob.horizon / sde.dt).round() as usize;
    if steps == 0 {
        return Err(Error::OutOfRange("horizon shorter than dt".into()));
    }
    let dt = prob.horizon / steps as f64;
    let cache = DriftCache::build(qstar, prob.horizon, dt, steps)?;
    let clip_bound = 50.0 / (prob.horizon * prob.kappa_eff()).sqrt();
    let rng = CounterRng::new(sde.seed);
    let n = prob.n;

    struct PathOut {
        value: f64,
        terminal: Vec<f64>,
        clipped: u64,
    }

    let outputs: Vec<Result<PathOut>> = (0..sde.paths)
        .into_par_iter()
        .map(|p| {
            let mut x = vec![0.0; n];
            let mut cost = 0.0;
            let mut clipped = 0u64;
            let sqrt_dt = dt.sqrt();
            for k in 0..steps {
                for i in 0..n {
                    let (raw, edge) = cache.drift(i, k, x[i]);
                    let mut a = raw;
                    let mut clip = edge;
                    if a.abs() > clip_bound {
                        a = a.signum() * clip_bound;
                        clip = true;
                    }
                    if clip {
                        clipped += 1;
                    }
                    cost += a * a * dt;
                    x[i] += a * dt
                        + sqrt_dt * rng.std_normal(p as u64, k as u64, i as u64, 0x5DE0);
                }
            }
            let value = prob.g.eval_f(&x)? - cost / (2.0 * n as f64);
            Ok(PathOut { value, terminal: x, clipped })
        })
        .collect();

    let mut values = Vec::with_capacity(sde.paths);
    let mut terminal = Vec::with_capacity(sde.paths * n);
    let mut clipped = 0u64;
    for out in outputs {
        let out = out?;
        values.push(out.value);
        terminal.extend_from_slice(&out.terminal);
        clipped += out.clipped;
    }
    let total_evals = (sde.paths * steps * n) as u64;
    let clip_fraction = clipped as f64 / total_evals as f64;
    if clip_fraction > CLIP_BUDGET {
        return Err(Error::ClipBudgetExceeded { clipped, total: total_evals });
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() as f64 - 1.0);
    Ok(SimReport {
        mean,
        stderr: (var / values.len() as f64).sqrt(),
        clip_fraction,
        paths: sde.paths,
        steps,
        terminal,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlReport {
    pub v_orig: ValueOrInterval,
    pub v_dstr: f64,
    pub v_det: f64,
    pub ystar: Vec<f64>,
    pub gap_bound: f64,
    pub det_gap_bound: f64,
    pub sim_mean: f64,
    pub sim_stderr: f64,
    pub clip_fraction: f64,
    pub ordering_ok: bool,
    pub flags: Vec<String>,
    /// Terminal states from the simulation (row-major paths x n), kept out
    /// of the JSON report; the CLI emits them as CSV.
    #[serde(skip)]
    pub sim_terminal: Vec<f64>,
}

/// Evaluate all three values, the gap bounds, and the simulation cross-check.
pub fn run_control(
    prob: &ControlProblem,
    opts: &SolveOptions,
    sde: &SdeOptions,
) -> Result<ControlReport> {
    let (v_det, ystar) = value_det(prob, opts)?;
    let (v_dstr, solve) = value_dstr(prob, opts)?;
    let v_orig = value_orig(prob, opts)?;
    let (gap_bound, det_gap_bound) = gap_bounds(prob, &solve.qstar, &ystar)?;
    let sim = simulate(prob, &solve.qstar, sde)?;

    let tol = 1e-5;
    let mut flags = Vec::new();
    let mut ordering_ok = true;
    // The deterministic class sits inside the distributed class; a violation
    // is flagged, not fatal.
    if v_det > v_dstr + tol {
        flags.push(format!("v_det {v_det} exceeds v_dstr {v_dstr}"));
    }
    if v_dstr > v_orig.hi() + tol {
        ordering_ok = false;
        flags.push(format!("v_dstr {v_dstr} exceeds v_orig {}", v_orig.hi()));
    }
    if v_orig.lo() - v_dstr > gap_bound + tol {
        ordering_ok = false;
        flags.push(format!(
            "gap {} exceeds bound {gap_bound}",
            v_orig.lo() - v_dstr
        ));
    }
    if v_orig.lo() - v_det > det_gap_bound + tol {
        ordering_ok = false;
        flags.push(format!(
            "deterministic gap {} exceeds bound {det_gap_bound}",
            v_orig.lo() - v_det
        ));
    }
    let sim_dev = (sim.mean - v_dstr).abs();
    if sim_dev > 3.0 * sim.stderr + 1e-3 {
        flags.push(format!(
            "simulation mean {} deviates from v_dstr {v_dstr} by {sim_dev}",
            sim.mean
        ));
    }
    Ok(ControlReport {
        v_orig,
        v_dstr,
        v_det,
        ystar,
        gap_bound,
        det_gap_bound,
        sim_mean: sim.mean,
        sim_stderr: sim.stderr,
        clip_fraction: sim.clip_fraction,
        ordering_ok,
        flags,
        sim_terminal: sim.terminal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler;

    /// g = -(x1+x2)^2/8 as a PSD quadratic.
    fn coupled_problem() -> ControlProblem {
        let a = SymMatrix::from_rows(&[vec![0.25, 0.25], vec![0.25, 0.25]]).unwrap();
        let g = Model::Quadratic(QuadraticModel::psd(a, vec![0.0; 2], 0.0).unwrap());
        ControlProblem::new(2, 1.0, g).unwrap()
    }

    fn affine_problem(c: f64, n: usize, t: f64) -> ControlProblem {
        let b = vec![c / n as f64; n];
        let g = Model::Quadratic(QuadraticModel::psd(SymMatrix::zeros(n), b, 0.0).unwrap());
        ControlProblem::new(n, t, g).unwrap()
    }

    fn zero_problem(n: usize) -> ControlProblem {
        let g = Model::Quadratic(
            QuadraticModel::psd(SymMatrix::zeros(n), vec![0.0; n], 0.0).unwrap(),
        );
        ControlProblem::new(n, 1.0, g).unwrap()
    }

    #[test]
    fn zero_reward_values_vanish() {
        let prob = zero_problem(2);
        let opts = SolveOptions::default();
        let (v_det, ystar) = value_det(&prob, &opts).unwrap();
        assert!(v_det.abs() < 1e-12 && ystar.iter().all(|y| y.abs() < 1e-12));
        let (v_dstr, solve) = value_dstr(&prob, &opts).unwrap();
        assert!(v_dstr.abs() < 1e-9, "v_dstr = {v_dstr}");
        let v_orig = value_orig(&prob, &opts).unwrap();
        assert!(v_orig.lo().abs() < 1e-7);
        let (gap, det_gap) = gap_bounds(&prob, &solve.qstar, &ystar).unwrap();
        assert_eq!(gap, 0.0);
        assert_eq!(det_gap, 0.0);
    }

    #[test]
    fn coupled_fixture_closed_forms() {
        let prob = coupled_problem();
        let opts = SolveOptions::default();
        let v_orig = value_orig(&prob, &opts).unwrap();
        assert!((v_orig.lo() - (-0.25 * 2.0f64.ln())).abs() < 1e-6, "v_orig = {:?}", v_orig);
        let (v_dstr, solve) = value_dstr(&prob, &opts).unwrap();
        assert!((v_dstr - (-0.2027325)).abs() < 1e-4, "v_dstr = {v_dstr}");
        let (v_det, ystar) = value_det(&prob, &opts).unwrap();
        assert!((v_det - (-0.25)).abs() < 1e-8, "v_det = {v_det}");
        assert!(ystar.iter().all(|y| y.abs() < 1e-9));
        let (gap, det_gap) = gap_bounds(&prob, &solve.qstar, &ystar).unwrap();
        assert!((gap - 0.125).abs() < 1e-9);
        assert!((det_gap - 0.25).abs() < 1e-9);
        // Ordering chain.
        let actual_gap = v_orig.lo() - v_dstr;
        assert!((actual_gap - 0.0294457).abs() < 1e-4);
        assert!(actual_gap >= 0.0 && actual_gap <= gap);
        assert!(v_det <= v_dstr && v_orig.lo() - v_det <= det_gap + 1e-9);
    }

    #[test]
    fn affine_reward_collapses_all_three_values() {
        let prob = affine_problem(1.0, 2, 1.0);
        let opts = SolveOptions::default();
        let v_orig = value_orig(&prob, &opts).unwrap().lo();
        let (v_dstr, solve) = value_dstr(&prob, &opts).unwrap();
        let (v_det, ystar) = value_det(&prob, &opts).unwrap();
        // All equal c^2 T / 2.
        assert!((v_orig - 0.5).abs() < 1e-6, "v_orig = {v_orig}");
        assert!((v_dstr - 0.5).abs() < 1e-6, "v_dstr = {v_dstr}");
        assert!((v_det - 0.5).abs() < 1e-8, "v_det = {v_det}");
        let (gap, det_gap) = gap_bounds(&prob, &solve.qstar, &ystar).unwrap();
        assert_eq!(gap, 0.0);
        assert_eq!(det_gap, 0.0);
    }

    #[test]
    fn follmer_drift_closed_forms() {
        let horizon = 1.0;
        let grid = Grid::new(-14.0, 14.0, 1025).unwrap();
        // Q* = gamma_T marginal: zero drift.
        let gamma: GridDensity =
            normalize(grid.points().map(|x| -x * x / 2.0).collect(), grid).unwrap();
        for (t, x) in [(0.0, 0.3), (0.5, -1.2), (0.9, 2.0)] {
            let a = follmer_drift(&gamma, horizon, t, x).unwrap();
            assert!(a.abs() < 1e-6, "drift {a} at ({t},{x})");
        }

        // Q* = N(m, T): constant drift m/T.
        let mean = 0.8;
        let shifted: GridDensity =
            normalize(grid.points().map(|x| -(x - mean) * (x - mean) / 2.0).collect(), grid)
                .unwrap();
        for (t, x) in [(0.0, 0.0), (0.4, 1.0), (0.8, -0.5)] {
            let a = follmer_drift(&shifted, horizon, t, x).unwrap();
            assert!((a - mean / horizon).abs() < 1e-6, "drift {a} at ({t},{x})");
        }

        // Q* = N(0, s^2), s^2 < T: alpha = -gamma x / (1 + gamma (T - t)).
        let s2 = 0.5;
        let narrow: GridDensity =
            normalize(grid.points().map(|x| -x * x / (2.0 * s2)).collect(), grid).unwrap();
        let gamma_coef = 1.0 / s2 - 1.0 / horizon;
        for (t, x) in [(0.0, 1.0), (0.3, -0.7), (0.7, 0.4)] {
            let a = follmer_drift(&narrow, horizon, t, x).unwrap();
            let expect = -gamma_coef * x / (1.0 + gamma_coef * (horizon - t));
            assert!((a - expect).abs() < 1e-5, "drift {a} vs {expect} at ({t},{x})");
        }

        assert!(matches!(
            follmer_drift(&gamma, horizon, 1.0, 0.0),
            Err(Error::TimeOutOfRange(_))
        ));
    }

    #[test]
    fn simulate_pure_brownian_motion() {
        let prob = zero_problem(2);
        let opts = SolveOptions::default();
        let (_, solve) = value_dstr(&prob, &opts).unwrap();
        let sde = SdeOptions { dt: 1e-2, paths: 4000, seed: 11 };
        let sim = simulate(&prob, &solve.qstar, &sde).unwrap();
        assert!(sim.mean.abs() <= 3.0 * sim.stderr + 1e-6);
        // Terminal variance ~ T per coordinate.
        for i in 0..2 {
            let col: Vec<f64> = (0..sim.paths).map(|p| sim.terminal[p * 2 + i]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (col.len() as f64 - 1.0);
            assert!((var - 1.0).abs() < 0.07, "terminal var {var}");
        }
        assert!(sim.clip_fraction < 1e-6);
    }

    #[test]
    fn simulate_matches_v_dstr_on_coupled_fixture() {
        let prob = coupled_problem();
        let opts = SolveOptions::default();
        let (v_dstr, solve) = value_dstr(&prob, &opts).unwrap();
        let sde = SdeOptions { dt: 1e-3, paths: 20_000, seed: 7 };
        let sim = simulate(&prob, &solve.qstar, &sde).unwrap();
        assert!(
            (sim.mean - v_dstr).abs() <= 3.0 * sim.stderr + 2e-3,
            "sim {} vs v_dstr {v_dstr} (se {})",
            sim.mean,
            sim.stderr
        );
        // Bridge consistency: terminal marginals match Q* up to the
        // statistical floor of two independent exact sample sets.
        let n_draws = sim.paths;
        let exact_a = sampler::sample_q(&solve.qstar, n_draws, 100).unwrap();
        let exact_b = sampler::sample_q(&solve.qstar, n_draws, 200).unwrap();
        for i in 0..2 {
            let sim_col: Vec<f64> = (0..n_draws).map(|p| sim.terminal[p * 2 + i]).collect();
            let floor =
                sampler::empirical_w2(&exact_a.column(i), &exact_b.column(i)).unwrap();
            let dist = sampler::empirical_w2(&sim_col, &exact_a.column(i)).unwrap();
            assert!(dist <= 5.0 * floor.max(1e-3), "w2 {dist} vs floor {floor}");
        }
    }

    #[test]
    fn run_control_assembles_consistent_report() {
        let prob = coupled_problem();
        let report = run_control(
            &prob,
            &SolveOptions::default(),
            &SdeOptions { dt: 5e-3, paths: 4000, seed: 3 },
        )
        .unwrap();
        assert!(report.ordering_ok, "flags: {:?}", report.flags);
        assert!(report.v_det <= report.v_dstr + 1e-9);
        assert!(report.v_dstr <= report.v_orig.hi() + 1e-6);
        assert!(report.gap_bound >= 0.0 && report.det_gap_bound >= 0.0);
    }

    #[test]
    fn growth_gate_rejects_fast_potentials() {
        // kappa = 8 pairwise potential declares c2 = 2 >= 1/(2T) at T = 1.
        let v = ScalarPotential::gaussian_well(8.0);
        let k = crate::models::InteractionKernel::neg_quadratic();
        let j = crate::models::CouplingMatrix::zeros(2);
        let g = Model::Pairwise(PairwiseGibbs::new(v, k, j).unwrap());
        assert!(matches!(
            ControlProblem::new(2, 1.0, g),
            Err(Error::InvariantViolated(_))
        ));
    }
}
