//! Sampling engines for the probabilistic checks: MALA/ULA chains targeting
//! P, exact product sampling of Q* by inverse CDF, exact Gaussian sampling,
//! empirical 1D Wasserstein-2, and the empirical-measure LLN check.
//!
//! All randomness is drawn from counter streams keyed by
//! (seed, chain, step, coordinate), so every result is a pure function of its
//! inputs and independent of the parallel schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::Certificate;
use crate::error::{Error, Result};
use crate::grid1d::ProductMeasure;
use crate::linalg::SymMatrix;
use crate::models::Model;
use crate::rng::CounterRng;

/// Optimal MALA acceptance rate targeted by the auto-tuner.
pub const MALA_TARGET_ACCEPTANCE: f64 = 0.574;
/// Batch count for batch-means diagnostics.
const ESS_BATCHES: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainOptions {
    pub steps: usize,
    pub burnin: usize,
    /// Fixed step size, or auto-tuned during burn-in toward 0.574 acceptance.
    pub step_size: StepSize,
    pub n_chains: usize,
    pub seed: u64,
    /// Metropolis-adjusted when true; unadjusted Langevin otherwise.
    pub mala: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSize {
    Auto,
    Fixed(f64),
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions {
            steps: 20_000,
            burnin: 2_000,
            step_size: StepSize::Auto,
            n_chains: 4,
            seed: 0,
            mala: true,
        }
    }
}

impl ChainOptions {
    fn validate(&self) -> Result<()> {
        if self.steps <= self.burnin {
            return Err(Error::OutOfRange(format!(
                "steps {} must exceed burnin {}",
                self.steps, self.burnin
            )));
        }
        if self.n_chains == 0 {
            return Err(Error::OutOfRange("n_chains must be >= 1".into()));
        }
        if let StepSize::Fixed(h) = self.step_size {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::OutOfRange(format!("step size {h} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Mala,
    Ula,
    GaussianExact,
    ProductExact,
}

/// Draws in row-major order (n_draws x n) plus chain diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct SampleSet {
    pub n: usize,
    pub n_draws: usize,
    pub draws: Vec<f64>,
    pub source: SampleSource,
    pub acceptance_rate: f64,
    /// Per-coordinate effective sample size estimate (batch means).
    pub ess: Vec<f64>,
    /// Frozen step size per chain (MCMC sources only).
    pub step_sizes: Vec<f64>,
}

impl SampleSet {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.draws[r * self.n..(r + 1) * self.n]
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.n_draws).map(|r| self.draws[r * self.n + i]).collect()
    }

    pub fn column_mean(&self, i: usize) -> f64 {
        self.column(i).iter().sum::<f64>() / self.n_draws as f64
    }

    pub fn column_variance(&self, i: usize) -> f64 {
        let col = self.column(i);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (col.len() - 1) as f64
    }

    fn check_finite(&self) -> Result<()> {
        if self.draws.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample draw".into()));
        }
        Ok(())
    }
}

struct ChainOutput {
    states: Vec<f64>,
    accepted: u64,
    proposed: u64,
    step_size: f64,
}

/// MALA (or ULA) targeting P ~ e^f, one independent chain per lane.
pub fn sample_p(model: &Model, opts: &ChainOptions) -> Result<SampleSet> {
    opts.validate()?;
    let kappa = model.kappa()?;
    let n = model.dim();
    let center = model.default_center()?;
    let window = 12.0 / kappa.sqrt();
    let divergence_radius = 4.0 * window;

    // Step-size stability ceiling where the top curvature is computable:
    // quadratic targets must keep h below 2/lambda_max.
    let h_cap = match model {
        Model::Quadratic(m) => Some(1.98 / m.a().lambda_max()?),
        _ => None,
    };

    let chains: Vec<Result<ChainOutput>> = (0..opts.n_chains)
        .into_par_iter()
        .map(|chain| {
            run_chain(model, opts, chain as u64, kappa, &center, divergence_radius, h_cap)
        })
        .collect();

    let kept_per_chain = opts.steps - opts.burnin;
    let n_draws = kept_per_chain * opts.n_chains;
    let mut draws = Vec::with_capacity(n_draws * n);
    let mut accepted = 0u64;
    let mut proposed = 0u64;
    let mut step_sizes = Vec::with_capacity(opts.n_chains);
    let mut per_chain_states: Vec<Vec<f64>> = Vec::with_capacity(opts.n_chains);
    for chain in chains {
        let out = chain?;
        accepted += out.accepted;
        proposed += out.proposed;
        step_sizes.push(out.step_size);
        per_chain_states.push(out.states);
    }
    for states in &per_chain_states {
        draws.extend_from_slice(states);
    }
    let acceptance_rate = if proposed == 0 { 1.0 } else { accepted as f64 / proposed as f64 };
    let ess = batch_means_ess(&per_chain_states, n, kept_per_chain);
    let set = SampleSet {
        n,
        n_draws,
        draws,
        source: if opts.mala { SampleSource::Mala } else { SampleSource::Ula },
        acceptance_rate,
        ess,
        step_sizes,
    };
    set.check_finite()?;
    Ok(set)
}

#[allow(clippy::too_many_arguments)]
fn run_chain(
    model: &Model,
    opts: &ChainOptions,
    chain: u64,
    kappa: f64,
    center: &[f64],
    divergence_radius: f64,
    h_cap: Option<f64>,
) -> Result<ChainOutput> {
    let n = model.dim();
    let rng = CounterRng::new(opts.seed);
    // Start at the window center plus a seeded O(1/sqrt(kappa)) jitter.
    let mut x: Vec<f64> = (0..n)
        .map(|i| center[i] + rng.std_normal(chain, u64::MAX, i as u64, 0x1417) / kappa.sqrt())
        .collect();
    let mut fx = model.eval_f(&x)?;
    let mut grad = gradient(model, &x)?;

    let log_cap = h_cap.map(f64::ln);
    let mut log_h = match opts.step_size {
        StepSize::Fixed(h) => h.ln(),
        // Classic d^{-1/3} scaling as a starting point for the tuner.
        StepSize::Auto => {
            let h0 = (1.0 / (kappa * (n as f64).powf(1.0 / 3.0))).ln();
            match log_cap {
                Some(c) => h0.min(c),
                None => h0,
            }
        }
    };
    let tune = matches!(opts.step_size, StepSize::Auto);

    let kept = opts.steps - opts.burnin;
    let mut states = Vec::with_capacity(kept * n);
    let mut accepted = 0u64;
    let mut proposed = 0u64;
    let mut y = vec![0.0; n];

    for step in 0..opts.steps {
        let h = log_h.exp();
        let sqrt_h = h.sqrt();
        for i in 0..n {
            y[i] = x[i]
                + 0.5 * h * grad[i]
                + sqrt_h * rng.std_normal(chain, step as u64, i as u64, 0x90_05);
        }
        let fy = model.eval_f(&y)?;
        let grad_y = gradient(model, &y)?;
        let log_alpha = if opts.mala {
            // log q(x|y) - log q(y|x) with q(b|a) = N(a + h/2 grad(a), h I).
            let mut forward = 0.0;
            let mut backward = 0.0;
            for i in 0..n {
                let df = y[i] - x[i] - 0.5 * h * grad[i];
                let db = x[i] - y[i] - 0.5 * h * grad_y[i];
                forward += df * df;
                backward += db * db;
            }
            fy - fx + (forward - backward) / (2.0 * h)
        } else {
            0.0
        };
        let alpha = log_alpha.min(0.0).exp();
        let accept = if opts.mala {
            rng.uniform(chain, step as u64, n as u64, 0xACC0).ln() < log_alpha
        } else {
            true
        };
        if step >= opts.burnin {
            proposed += 1;
            if accept {
                accepted += 1;
            }
        }
        if accept {
            x.copy_from_slice(&y);
            fx = fy;
            grad = grad_y;
        }
        if tune && step < opts.burnin {
            // Robbins-Monro on log h toward the target acceptance rate.
            let gain = 0.5 / (1.0 + step as f64).powf(0.6);
            log_h += gain * (alpha - MALA_TARGET_ACCEPTANCE);
            if let Some(c) = log_cap {
                log_h = log_h.min(c);
            }
        }
        for (i, &xi) in x.iter().enumerate() {
            if (xi - center[i]).abs() > divergence_radius {
                return Err(Error::DivergentChain { coord: i, value: xi });
            }
        }
        if step >= opts.burnin {
            states.extend_from_slice(&x);
        }
    }
    Ok(ChainOutput { states, accepted, proposed, step_size: log_h.exp() })
}

fn gradient(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    (0..x.len()).map(|i| model.partial_i(x, i)).collect()
}

/// Per-coordinate ESS by batch means, pooled over chains.
fn batch_means_ess(per_chain: &[Vec<f64>], n: usize, kept: usize) -> Vec<f64> {
    let mut ess = vec![0.0; n];
    if kept < 2 * ESS_BATCHES {
        // Not enough draws to batch, report the plain count.
        for e in ess.iter_mut() {
            *e = (per_chain.len() * kept) as f64;
        }
        return ess;
    }
    let batch_size = kept / ESS_BATCHES;
    for (i, e) in ess.iter_mut().enumerate() {
        let mut tau_sum = 0.0;
        for states in per_chain {
            let col: Vec<f64> = (0..kept).map(|r| states[r * n + i]).collect();
            let mean = col.iter().sum::<f64>() / kept as f64;
            let var =
                col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (kept as f64 - 1.0);
            let mut bm_var = 0.0;
            for b in 0..ESS_BATCHES {
                let bm = col[b * batch_size..(b + 1) * batch_size].iter().sum::<f64>()
                    / batch_size as f64;
                bm_var += (bm - mean) * (bm - mean);
            }
            bm_var /= (ESS_BATCHES - 1) as f64;
            let tau = (batch_size as f64 * bm_var / var.max(1e-300)).max(1.0);
            tau_sum += tau;
        }
        let tau = tau_sum / per_chain.len() as f64;
        *e = (per_chain.len() * kept) as f64 / tau;
    }
    ess
}

/// Exact i.i.d. draws from a product measure via per-coordinate inverse CDF.
pub fn sample_q(q: &ProductMeasure, n_draws: usize, seed: u64) -> Result<SampleSet> {
    let n = q.dim();
    let rng = CounterRng::new(seed);
    let mut draws = vec![0.0; n_draws * n];
    for (j, marg) in q.marginals.iter().enumerate() {
        for s in 0..n_draws {
            draws[s * n + j] = marg.quantile(rng.uniform(0, s as u64, j as u64, 0x0E5A))?;
        }
    }
    let set = SampleSet {
        n,
        n_draws,
        draws,
        source: SampleSource::ProductExact,
        acceptance_rate: 1.0,
        ess: vec![n_draws as f64; n],
        step_sizes: vec![],
    };
    set.check_finite()?;
    Ok(set)
}

/// Exact draws from N(mean, A^{-1}) given the precision matrix A.
pub fn sample_gaussian_exact(
    a: &SymMatrix,
    mean: Option<&[f64]>,
    n_draws: usize,
    seed: u64,
) -> Result<SampleSet> {
    let n = a.n();
    let chol = a.cholesky()?;
    let rng = CounterRng::new(seed);
    let mut draws = vec![0.0; n_draws * n];
    let mut z = vec![0.0; n];
    for s in 0..n_draws {
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = rng.std_normal(1, s as u64, i as u64, 0x6A05);
        }
        // x = L^{-T} z has covariance (L L^T)^{-1} = A^{-1}.
        let x = chol.solve_lt(&z);
        for i in 0..n {
            draws[s * n + i] = x[i] + mean.map_or(0.0, |m| m[i]);
        }
    }
    let set = SampleSet {
        n,
        n_draws,
        draws,
        source: SampleSource::GaussianExact,
        acceptance_rate: 1.0,
        ess: vec![n_draws as f64; n],
        step_sizes: vec![],
    };
    set.check_finite()?;
    Ok(set)
}

/// 1D empirical W2: RMS difference of the two sorted samples.
pub fn empirical_w2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::OutOfRange("empirical_w2 needs length >= 2".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let acc: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((acc / a.len() as f64).sqrt())
}

/// Named 1-Lipschitz test functions for the LLN check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LipschitzFn {
    Identity,
    Abs,
    Tanh,
}

impl LipschitzFn {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            LipschitzFn::Identity => x,
            LipschitzFn::Abs => x.abs(),
            LipschitzFn::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LlnReport {
    /// Monte Carlo estimate of E_P[((1/n) sum phi(X_i) - c)^2].
    pub lhs_estimate: f64,
    /// Certified budget (1 + sqrt(2 R))^2 / (kappa n).
    pub rhs: f64,
    /// Batch-means standard error of the estimate.
    pub stderr: f64,
    pub n_draws: usize,
    pub phi: LipschitzFn,
}

/// Empirical-measure concentration check: sample P and compare the squared
/// deviation of the phi-average from its Q* counterpart against the budget.
pub fn lln_check(
    model: &Model,
    q: &ProductMeasure,
    phi: LipschitzFn,
    cert: &Certificate,
    opts: &ChainOptions,
) -> Result<LlnReport> {
    let n = model.dim();
    if q.dim() != n {
        return Err(Error::LengthMismatch(q.dim(), n));
    }
    let target: f64 =
        q.marginals.iter().map(|m| m.expect(|x| phi.apply(x))).sum::<f64>() / n as f64;
    let samples = sample_p(model, opts)?;
    let kept = opts.steps - opts.burnin;
    // Y_t per draw, kept chain-major so batch means see each chain's series.
    let ys: Vec<f64> = (0..samples.n_draws)
        .map(|r| {
            let row = samples.row(r);
            let avg = row.iter().map(|&x| phi.apply(x)).sum::<f64>() / n as f64;
            (avg - target) * (avg - target)
        })
        .collect();
    let lhs = ys.iter().sum::<f64>() / ys.len() as f64;
    let stderr = chain_major_stderr(&ys, opts.n_chains, kept);
    let rbar = (cert.logz_hi - cert.logz_lo).max(0.0);
    let rhs = (1.0 + (2.0 * rbar).sqrt()).powi(2) / (cert.kappa * n as f64);
    Ok(LlnReport { lhs_estimate: lhs, rhs, stderr, n_draws: samples.n_draws, phi })
}

/// Standard error of the grand mean from batch means within each chain.
fn chain_major_stderr(ys: &[f64], n_chains: usize, kept: usize) -> f64 {
    if kept < 2 * ESS_BATCHES {
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var =
            ys.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (ys.len() as f64 - 1.0);
        return (var / ys.len() as f64).sqrt();
    }
    let batch_size = kept / ESS_BATCHES;
    let mut var_of_mean = 0.0;
    for chain in 0..n_chains {
        let series = &ys[chain * kept..(chain + 1) * kept];
        let mean = series.iter().sum::<f64>() / kept as f64;
        let mut bm_var = 0.0;
        for b in 0..ESS_BATCHES {
            let bm = series[b * batch_size..(b + 1) * batch_size].iter().sum::<f64>()
                / batch_size as f64;
            bm_var += (bm - mean) * (bm - mean);
        }
        bm_var /= (ESS_BATCHES - 1) as f64;
        // Var(chain mean) ~ bm_var / batches.
        var_of_mean += bm_var / ESS_BATCHES as f64;
    }
    (var_of_mean / (n_chains * n_chains) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify;
    use crate::grid1d::{normalize, Grid};
    use crate::mfsolver::{cavi_solve, Init, SolveOptions};
    use crate::models::QuadraticModel;
    use crate::oracle;

    fn identity_model(n: usize) -> Model {
        Model::Quadratic(QuadraticModel::new(SymMatrix::identity(n)).unwrap())
    }

    #[test]
    fn mala_matches_standard_gaussian_moments() {
        let model = identity_model(2);
        let opts =
            ChainOptions { steps: 60_000, burnin: 10_000, ..ChainOptions::default() };
        let s = sample_p(&model, &opts).unwrap();
        assert_eq!(s.n_draws, 200_000);
        for i in 0..2 {
            assert!(s.column_mean(i).abs() < 0.02, "mean {}", s.column_mean(i));
            assert!((s.column_variance(i) - 1.0).abs() < 0.05, "var {}", s.column_variance(i));
        }
        assert!(s.acceptance_rate > 0.4 && s.acceptance_rate < 0.75);
    }

    #[test]
    fn tuned_step_respects_stability_bound() {
        let a = SymMatrix::from_rows(&[vec![1.5, -0.5], vec![-0.5, 1.5]]).unwrap();
        let model = Model::Quadratic(QuadraticModel::new(a.clone()).unwrap());
        let opts = ChainOptions { steps: 6_000, burnin: 3_000, ..ChainOptions::default() };
        let s = sample_p(&model, &opts).unwrap();
        let lmax = a.lambda_max().unwrap();
        for h in &s.step_sizes {
            assert!(*h > 0.0 && *h < 2.0 / lmax, "h = {h}");
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let model = identity_model(2);
        let opts = ChainOptions { steps: 2_000, burnin: 500, ..ChainOptions::default() };
        let a = sample_p(&model, &opts).unwrap();
        let b = sample_p(&model, &opts).unwrap();
        assert_eq!(a.draws, b.draws);
        let c = sample_p(&model, &ChainOptions { seed: 1, ..opts }).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn product_sampler_moments_and_determinism() {
        let grid = Grid::new(-12.0, 12.0, 1025).unwrap();
        let logw: Vec<f64> = grid.points().map(|x| -x * x / 2.0).collect();
        let q = ProductMeasure::new(vec![normalize(logw, grid).unwrap()]).unwrap();
        let s = sample_q(&q, 100_000, 3).unwrap();
        let mean = s.column_mean(0);
        let var = s.column_variance(0);
        assert!(mean.abs() <= 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
        let s2 = sample_q(&q, 100_000, 3).unwrap();
        assert_eq!(s.draws, s2.draws);
    }

    #[test]
    fn uniform_draws_pass_kolmogorov_smirnov() {
        let grid = Grid::new(0.0, 1.0, 257).unwrap();
        let q = ProductMeasure::new(vec![normalize(vec![0.0; 257], grid).unwrap()]).unwrap();
        let n_draws = 100_000;
        let s = sample_q(&q, n_draws, 9).unwrap();
        let mut col = s.column(0);
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (r, &x) in col.iter().enumerate() {
            let ecdf_hi = (r + 1) as f64 / n_draws as f64;
            let ecdf_lo = r as f64 / n_draws as f64;
            ks = ks.max((ecdf_hi - x).abs()).max((x - ecdf_lo).abs());
        }
        // 1% asymptotic critical value 1.63 / sqrt(n).
        assert!(ks <= 1.63 / (n_draws as f64).sqrt(), "ks = {ks}");
    }

    #[test]
    fn empirical_w2_closed_cases() {
        assert_eq!(empirical_w2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((empirical_w2(&[0.0, 1.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(empirical_w2(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch(1, 2))));

        let rng = CounterRng::new(4);
        let a: Vec<f64> = (0..100_000).map(|i| rng.std_normal(0, i, 0, 0)).collect();
        let b: Vec<f64> = (0..100_000).map(|i| rng.std_normal(1, i, 0, 0) + 1.0).collect();
        let d = empirical_w2(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 0.02, "w2 = {d}");
    }

    #[test]
    fn gaussian_exact_sampler_covariance() {
        let a = SymMatrix::from_rows(&[vec![1.5, -0.5], vec![-0.5, 1.5]]).unwrap();
        let truth = oracle::gaussian_truth(&a).unwrap();
        let s = sample_gaussian_exact(&a, None, 200_000, 5).unwrap();
        for i in 0..2 {
            assert!(s.column_mean(i).abs() < 0.01);
            assert!((s.column_variance(i) - truth.marginal_vars[i]).abs() < 0.02);
        }
    }

    #[test]
    fn lln_check_identity_product_case() {
        let model = identity_model(10);
        let solved = cavi_solve(&model, Init::Default, &SolveOptions::default()).unwrap();
        let cert = certify::certify(&model, &solved.qstar).unwrap();
        let opts = ChainOptions { steps: 30_000, burnin: 5_000, ..ChainOptions::default() };
        let rep = lln_check(&model, &solved.qstar, LipschitzFn::Identity, &cert, &opts).unwrap();
        // Product case: rhs = 1/(kappa n) exactly and lhs concentrates at 1/n.
        assert!((rep.rhs - 0.1).abs() < 1e-9);
        assert!(
            (rep.lhs_estimate - 0.1).abs() <= 3.0 * rep.stderr.max(1e-4),
            "lhs {} se {}",
            rep.lhs_estimate,
            rep.stderr
        );
        assert!(rep.lhs_estimate <= rep.rhs + 3.0 * rep.stderr);
    }

    #[test]
    fn lln_check_tanh_on_gaussian_pair() {
        let model = Model::Pairwise(
            crate::models::PairwiseGibbs::new(
                crate::models::ScalarPotential::gaussian_well(1.0),
                crate::models::InteractionKernel::neg_quadratic(),
                crate::models::CouplingMatrix::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]])
                    .unwrap(),
            )
            .unwrap(),
        );
        let solved = cavi_solve(&model, Init::Default, &SolveOptions::default()).unwrap();
        let cert = certify::certify(&model, &solved.qstar).unwrap();
        let opts = ChainOptions { steps: 30_000, burnin: 5_000, ..ChainOptions::default() };
        let rep = lln_check(&model, &solved.qstar, LipschitzFn::Tanh, &cert, &opts).unwrap();
        assert!(
            rep.lhs_estimate <= rep.rhs + 3.0 * rep.stderr,
            "lhs {} rhs {} se {}",
            rep.lhs_estimate,
            rep.rhs,
            rep.stderr
        );
    }

    #[test]
    fn w2_subadditivity_on_quartic_chain_samples() {
        // Empirical per-marginal W2^2 sum against Q* stays within the
        // certified transport budget 2 R / kappa plus the sampling floor.
        let model = Model::Pairwise(
            crate::models::PairwiseGibbs::new(
                crate::models::ScalarPotential::quartic_well(1.0, 1.0),
                crate::models::InteractionKernel::neg_quadratic(),
                crate::models::CouplingMatrix::from_rows(&[
                    vec![0.0, 0.5, 0.0],
                    vec![0.5, 0.0, 0.5],
                    vec![0.0, 0.5, 0.0],
                ])
                .unwrap(),
            )
            .unwrap(),
        );
        let solved = cavi_solve(&model, Init::Default, &SolveOptions::default()).unwrap();
        let cert = certify::certify(&model, &solved.qstar).unwrap();
        let kappa = model.kappa().unwrap();
        let budget = 2.0 * (cert.logz_hi - cert.logz_lo) / kappa;

        let opts = ChainOptions { steps: 30_000, burnin: 5_000, ..ChainOptions::default() };
        let p_draws = sample_p(&model, &opts).unwrap();
        let q_draws = sample_q(&solved.qstar, p_draws.n_draws, 21).unwrap();
        let q_draws2 = sample_q(&solved.qstar, p_draws.n_draws, 22).unwrap();
        let mut lhs = 0.0;
        let mut floor = 0.0;
        for i in 0..3 {
            lhs += empirical_w2(&p_draws.column(i), &q_draws.column(i)).unwrap().powi(2);
            floor += empirical_w2(&q_draws.column(i), &q_draws2.column(i)).unwrap().powi(2);
        }
        assert!(
            lhs <= budget + 3.0 * floor.max(1e-4),
            "lhs {lhs} budget {budget} floor {floor}"
        );
    }

    #[test]
    fn divergent_chain_is_reported() {
        // A huge fixed step on a narrow target blows the chain up (ULA, so
        // moves are never rejected).
        let model = identity_model(1);
        let opts = ChainOptions {
            steps: 2_000,
            burnin: 100,
            step_size: StepSize::Fixed(1.0e3),
            n_chains: 1,
            mala: false,
            seed: 0,
        };
        assert!(matches!(sample_p(&model, &opts), Err(Error::DivergentChain { .. })));
    }
}
