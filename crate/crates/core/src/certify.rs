//! Certified two-sided intervals for the log partition function.
//!
//! The ELBO of the converged product measure is always a lower bound on
//! log Z. Three upper bounds on the gap are available: the conditional
//! variance of partial derivatives, the cross-derivative second moment, and
//! (for pairwise models with symmetric marginal means) the closed-form
//! Tr(J^2) bound. The certificate interval uses the sharpest of them.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid1d::{kernel_table, GridDensity, ProductMeasure};
use crate::models::Model;
use crate::rng::CounterRng;

/// Symmetry-gate tolerance on marginal means for the Tr(J^2) bound.
pub const SYMMETRY_GATE_TOL: f64 = 1e-6;
/// Monte Carlo certificates inflate the estimate by this many sigmas.
const MC_INFLATION_SIGMAS: f64 = 3.0;
const MC_DEFAULT_SAMPLES: usize = 20_000;
const MC_DEFAULT_SEED: u64 = 0x0C_E117;

/// Which bound set the upper end of a certificate interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    VarBound,
    CrossBound,
    TrJ2Bound,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub elbo: f64,
    pub var_bound: f64,
    pub cross_bound: f64,
    pub trj2_bound: Option<f64>,
    /// Set when the Tr(J^2) symmetry gate tripped (bound not certified).
    pub trj2_gate_failure: Option<String>,
    pub logz_lo: f64,
    pub logz_hi: f64,
    pub kappa: f64,
    pub n: usize,
    pub winner: BoundKind,
    /// Standard errors behind Monte Carlo certificates (black-box models).
    pub mc_stderr: Option<McStderr>,
}

#[derive(Debug, Clone, Serialize)]
pub struct McStderr {
    pub elbo: f64,
    pub var_bound: f64,
    pub cross_bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationReport {
    /// (1 + sqrt(2 R))^2 / (kappa n): empirical-measure concentration budget.
    pub lln_rhs: f64,
    /// 2 R / (kappa floor(n/k)): averaged k-marginal W2^2 budget.
    pub w2_budget: f64,
    pub k: usize,
    pub rbar: f64,
    /// Bayes-specific law-of-large-numbers constant, when applicable.
    pub bayes_lln_rhs: Option<f64>,
}

/// Mean-field objective ∫ f dQ - H(Q).
pub fn elbo(model: &Model, q: &ProductMeasure) -> Result<f64> {
    Ok(elbo_with_stderr(model, q)?.0)
}

fn entropy_sum(q: &ProductMeasure) -> f64 {
    q.marginals.iter().map(|m| m.entropy()).sum()
}

fn means_and_seconds(q: &ProductMeasure) -> (Vec<f64>, Vec<f64>) {
    let means: Vec<f64> = q.marginals.iter().map(|m| m.mean()).collect();
    let seconds: Vec<f64> = q.marginals.iter().map(|m| m.moment(2)).collect();
    (means, seconds)
}

fn elbo_with_stderr(model: &Model, q: &ProductMeasure) -> Result<(f64, Option<f64>)> {
    if q.dim() != model.dim() {
        return Err(Error::LengthMismatch(q.dim(), model.dim()));
    }
    let value = match model {
        Model::Pairwise(m) => {
            let n = q.dim();
            let mut acc = 0.0;
            for marg in &q.marginals {
                acc += marg.expect(|x| m.v().eval(x)) - marg.entropy();
            }
            // Pair terms sum_{i<j} J_ij ∬ K(x-y) q_i(x) q_j(y).
            for i in 0..n {
                for j in (i + 1)..n {
                    let jij = m.j().get(i, j);
                    if jij != 0.0 {
                        acc += jij * pair_expectation(&q.marginals[i], &q.marginals[j], |u| m.k().eval(u))?;
                    }
                }
            }
            acc
        }
        Model::Quadratic(m) => {
            let (means, seconds) = means_and_seconds(q);
            let mut mam = m.a().quad_form(&means);
            for i in 0..q.dim() {
                let aii = m.a().get(i, i);
                mam += aii * (seconds[i] - means[i] * means[i]);
            }
            let linear: f64 = m.b().iter().zip(&means).map(|(b, mu)| b * mu).sum();
            -0.5 * mam + linear + m.c() - entropy_sum(q)
        }
        Model::Bayes(m) => {
            let (means, seconds) = means_and_seconds(q);
            let mut acc = 0.0;
            for marg in &q.marginals {
                acc += marg.expect(|x| m.prior().eval(x));
            }
            let y2: f64 = m.y().iter().map(|v| v * v).sum();
            let cross: f64 = m.xty().iter().zip(&means).map(|(a, b)| a * b).sum();
            let mut mjm = m.gram().quad_form(&means);
            for i in 0..q.dim() {
                mjm += m.gram().get(i, i) * (seconds[i] - means[i] * means[i]);
            }
            acc - (y2 - 2.0 * cross + mjm) / (2.0 * m.sigma2()) - entropy_sum(q)
        }
        Model::BlackBox(_) => {
            let (mean_f, se) = mc_mean_f(model, q, MC_DEFAULT_SAMPLES, MC_DEFAULT_SEED)?;
            return Ok((mean_f - entropy_sum(q), Some(se)));
        }
    };
    Ok((value, None))
}

/// Reference-mode objective ∫ g dQ - sum_i H(q_i | rho_i).
pub fn elbo_ref(model_g: &Model, rho: &ProductMeasure, q: &ProductMeasure) -> Result<f64> {
    let plain = elbo(model_g, q)?;
    // H(q|rho) = H(q) - E_q[log rho]; elbo already subtracted H(q).
    let mut cross_entropy = 0.0;
    for (qi, ri) in q.marginals.iter().zip(&rho.marginals) {
        let grid = qi.grid();
        if ri.grid() != grid {
            return Err(Error::InvalidSpec("reference marginals must share the grid".into()));
        }
        for k in 0..grid.len() {
            let dens = qi.density(k);
            if dens > 0.0 {
                cross_entropy += grid.weight(k) * dens * ri.log_density(k);
            }
        }
    }
    Ok(plain + cross_entropy)
}

/// ∬ K(x - y) q_a(x) q_b(y) dx dy on the shared grid (tensor trapezoid).
fn pair_expectation(
    qa: &GridDensity,
    qb: &GridDensity,
    kernel: impl Fn(f64) -> f64,
) -> Result<f64> {
    let ga = qa.grid();
    if ga == qb.grid() {
        let table = kernel_table(&ga, kernel)?;
        let smooth = qb.kernel_smooth_tabled(&table);
        let mut acc = 0.0;
        for k in 0..ga.len() {
            acc += ga.weight(k) * qa.density(k) * smooth[k];
        }
        Ok(acc)
    } else {
        let gb = qb.grid();
        let mut acc = 0.0;
        for ka in 0..ga.len() {
            let wa = ga.weight(ka) * qa.density(ka);
            if wa <= 0.0 {
                continue;
            }
            let xa = ga.point(ka);
            let mut inner = 0.0;
            for kb in 0..gb.len() {
                let wb = gb.weight(kb) * qb.density(kb);
                if wb > 0.0 {
                    let v = kernel(xa - gb.point(kb));
                    if !v.is_finite() {
                        return Err(Error::NonFiniteKernel);
                    }
                    inner += v * wb;
                }
            }
            acc += wa * inner;
        }
        Ok(acc)
    }
}

/// (1/2 kappa) sum_i E_{Q}[ Var(d_i f | X_i) ].
pub fn var_bound(model: &Model, q: &ProductMeasure) -> Result<f64> {
    Ok(var_bound_with_stderr(model, q)?.0)
}

fn var_bound_with_stderr(model: &Model, q: &ProductMeasure) -> Result<(f64, Option<f64>)> {
    let kappa = model.kappa()?;
    let (raw, se) = raw_conditional_variance_sum(model, q)?;
    match se {
        Some(se) => {
            let scaled = raw / (2.0 * kappa);
            let scaled_se = se / (2.0 * kappa);
            Ok((scaled + MC_INFLATION_SIGMAS * scaled_se, Some(scaled_se)))
        }
        None => Ok(((raw / (2.0 * kappa)).max(0.0), None)),
    }
}

/// sum_i E_Q[ Var(d_i f | X_i) ] without the 1/(2 kappa) factor. Separable
/// additions to f do not change it, so reference-mode certificates reuse it
/// with their own effective kappa.
pub fn raw_conditional_variance_sum(
    model: &Model,
    q: &ProductMeasure,
) -> Result<(f64, Option<f64>)> {
    let n = q.dim();
    let value = match model {
        Model::Pairwise(m) => {
            // Var(sum_j J_ij K'(x_i - X_j) | X_i = x) splits over independent
            // coordinates: sum_j J_ij^2 [ (K'^2 * q_j)(x) - ((K' * q_j)(x))^2 ].
            let grid = q.marginals[0].grid();
            let shared = q.marginals.iter().all(|mq| mq.grid() == grid);
            let mut smooth1: Vec<Vec<f64>> = Vec::with_capacity(n);
            let mut smooth2: Vec<Vec<f64>> = Vec::with_capacity(n);
            if shared {
                let t1 = kernel_table(&grid, |u| m.k().d1(u))?;
                let t2 = kernel_table(&grid, |u| m.k().d1(u).powi(2))?;
                for marg in &q.marginals {
                    smooth1.push(marg.kernel_smooth_tabled(&t1));
                    smooth2.push(marg.kernel_smooth_tabled(&t2));
                }
            } else {
                for marg in &q.marginals {
                    smooth1.push(marg.kernel_smooth(|u| m.k().d1(u))?);
                    smooth2.push(marg.kernel_smooth(|u| m.k().d1(u).powi(2))?);
                }
            }
            if !shared {
                return Err(Error::InvalidSpec(
                    "var_bound requires marginals on a shared grid".into(),
                ));
            }
            let mut acc = 0.0;
            for i in 0..n {
                let gi = q.marginals[i].grid();
                for k in 0..gi.len() {
                    let w = gi.weight(k) * q.marginals[i].density(k);
                    if w <= 0.0 {
                        continue;
                    }
                    let mut var_term = 0.0;
                    for j in 0..n {
                        if j != i {
                            let jij = m.j().get(i, j);
                            if jij != 0.0 {
                                let v = (smooth2[j][k] - smooth1[j][k] * smooth1[j][k]).max(0.0);
                                var_term += jij * jij * v;
                            }
                        }
                    }
                    acc += w * var_term;
                }
            }
            acc
        }
        Model::Quadratic(m) => {
            let vars: Vec<f64> = q.marginals.iter().map(|mq| mq.variance()).collect();
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if j != i {
                        let aij = m.a().get(i, j);
                        acc += aij * aij * vars[j];
                    }
                }
            }
            acc
        }
        Model::Bayes(m) => {
            let vars: Vec<f64> = q.marginals.iter().map(|mq| mq.variance()).collect();
            let s4 = m.sigma2() * m.sigma2();
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if j != i {
                        let jij = m.gram().get(i, j);
                        acc += jij * jij * vars[j] / s4;
                    }
                }
            }
            acc
        }
        Model::BlackBox(_) => {
            return mc_raw_conditional_variance(model, q).map(|(v, se)| (v, Some(se)));
        }
    };
    Ok((value.max(0.0), None))
}

/// (1/kappa^2) sum_{i<j} E_Q |d_ij f|^2.
pub fn cross_bound(model: &Model, q: &ProductMeasure) -> Result<f64> {
    Ok(cross_bound_with_stderr(model, q)?.0)
}

fn cross_bound_with_stderr(model: &Model, q: &ProductMeasure) -> Result<(f64, Option<f64>)> {
    let kappa = model.kappa()?;
    let (raw, se) = raw_cross_square_sum(model, q)?;
    match se {
        Some(se) => {
            let scaled = raw / (kappa * kappa);
            let scaled_se = se / (kappa * kappa);
            Ok((scaled + MC_INFLATION_SIGMAS * scaled_se, Some(scaled_se)))
        }
        None => Ok(((raw / (kappa * kappa)).max(0.0), None)),
    }
}

/// sum_{i<j} E_Q |d_ij f|^2 without the kappa^{-2} factor; also the core of
/// the control-gap bounds.
pub fn raw_cross_square_sum(model: &Model, q: &ProductMeasure) -> Result<(f64, Option<f64>)> {
    let n = q.dim();
    let value = match model {
        Model::Pairwise(m) => {
            let mut acc = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    let jij = m.j().get(i, j);
                    if jij != 0.0 {
                        let e = pair_expectation(&q.marginals[i], &q.marginals[j], |u| {
                            m.k().d2(u).powi(2)
                        })?;
                        acc += jij * jij * e;
                    }
                }
            }
            acc
        }
        Model::Quadratic(m) => {
            let mut acc = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    acc += m.a().get(i, j).powi(2);
                }
            }
            acc
        }
        Model::Bayes(m) => {
            // (1/kappa^2) sum J_ij^2 / sigma^4 = sum J_ij^2 / (k1 s2 + k2)^2.
            let mut acc = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    acc += m.gram().get(i, j).powi(2);
                }
            }
            acc / (m.sigma2() * m.sigma2())
        }
        Model::BlackBox(_) => {
            return mc_raw_cross_square(model, q).map(|(v, se)| (v, Some(se)));
        }
    };
    Ok((value.max(0.0), None))
}

/// Closed-form pairwise bound Tr(J^2) a kappa^{-2} e^{b^2/kappa}, valid under
/// the symmetric-means hypothesis (checked within 1e-6).
pub fn trj2_bound(model: &Model, q: &ProductMeasure) -> Result<f64> {
    let m = match model {
        Model::Pairwise(m) => m,
        _ => {
            return Err(Error::InvalidSpec(
                "the Tr(J^2) bound applies to pairwise models only".into(),
            ))
        }
    };
    let means: Vec<f64> = q.marginals.iter().map(|mq| mq.mean()).collect();
    let mut spread: f64 = 0.0;
    for i in 0..means.len() {
        for j in (i + 1)..means.len() {
            spread = spread.max((means[i] - means[j]).abs());
        }
    }
    if spread > SYMMETRY_GATE_TOL {
        return Err(Error::SymmetryGateFailed(spread));
    }
    let kappa = model.kappa()?;
    let (a, b) = m.k().growth();
    Ok(m.j().trace_j2() * a * (b * b / kappa).exp() / (kappa * kappa))
}

/// Assemble the certificate: logZ ∈ [elbo, elbo + min(valid bounds)].
pub fn certify(model: &Model, q: &ProductMeasure) -> Result<Certificate> {
    let kappa = model.kappa()?;
    let (elbo_raw, elbo_se) = elbo_with_stderr(model, q)?;
    let (var_b, var_se) = var_bound_with_stderr(model, q)?;
    let (cross_b, cross_se) = cross_bound_with_stderr(model, q)?;
    // Monte Carlo lower bounds are deflated to stay certified.
    let elbo_cert = match elbo_se {
        Some(se) => elbo_raw - MC_INFLATION_SIGMAS * se,
        None => elbo_raw,
    };
    let (trj2, gate_failure) = if matches!(model, Model::Pairwise(_)) {
        match trj2_bound(model, q) {
            Ok(v) => (Some(v), None),
            Err(e @ Error::SymmetryGateFailed(_)) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        }
    } else {
        (None, None)
    };
    let mut best = (BoundKind::VarBound, var_b);
    if cross_b < best.1 {
        best = (BoundKind::CrossBound, cross_b);
    }
    if let Some(t) = trj2 {
        if t < best.1 {
            best = (BoundKind::TrJ2Bound, t);
        }
    }
    let mc_stderr = match (elbo_se, var_se, cross_se) {
        (None, None, None) => None,
        (e, v, c) => Some(McStderr {
            elbo: e.unwrap_or(0.0),
            var_bound: v.unwrap_or(0.0),
            cross_bound: c.unwrap_or(0.0),
        }),
    };
    Ok(Certificate {
        elbo: elbo_cert,
        var_bound: var_b,
        cross_bound: cross_b,
        trj2_bound: trj2,
        trj2_gate_failure: gate_failure,
        logz_lo: elbo_cert,
        logz_hi: elbo_cert + best.1,
        kappa,
        n: q.dim(),
        winner: best.0,
        mc_stderr,
    })
}

/// Certificate for the reference-measure problem log ∫ e^g d rho: the bound
/// chain only sees g's cross derivatives (separable terms cancel), scaled by
/// the effective concavity of g + log rho.
pub fn certify_ref(
    model_g: &Model,
    rho: &ProductMeasure,
    q: &ProductMeasure,
    kappa_eff: f64,
) -> Result<Certificate> {
    if kappa_eff <= 0.0 {
        return Err(Error::NotStronglyConcave(kappa_eff));
    }
    let elbo_value = elbo_ref(model_g, rho, q)?;
    let (raw_var, var_se) = raw_conditional_variance_sum(model_g, q)?;
    let (raw_cross, cross_se) = raw_cross_square_sum(model_g, q)?;
    let var_b = match var_se {
        Some(se) => (raw_var + MC_INFLATION_SIGMAS * se) / (2.0 * kappa_eff),
        None => (raw_var / (2.0 * kappa_eff)).max(0.0),
    };
    let cross_b = match cross_se {
        Some(se) => (raw_cross + MC_INFLATION_SIGMAS * se) / (kappa_eff * kappa_eff),
        None => (raw_cross / (kappa_eff * kappa_eff)).max(0.0),
    };
    let best = if var_b <= cross_b {
        (BoundKind::VarBound, var_b)
    } else {
        (BoundKind::CrossBound, cross_b)
    };
    Ok(Certificate {
        elbo: elbo_value,
        var_bound: var_b,
        cross_bound: cross_b,
        trj2_bound: None,
        trj2_gate_failure: None,
        logz_lo: elbo_value,
        logz_hi: elbo_value + best.1,
        kappa: kappa_eff,
        n: q.dim(),
        winner: best.0,
        mc_stderr: None,
    })
}

/// Concentration constants derived from a certificate.
pub fn concentration(model: &Model, cert: &Certificate, k: usize) -> Result<ConcentrationReport> {
    let n = cert.n;
    if k == 0 || k > n {
        return Err(Error::OutOfRange(format!("k = {k} outside 1..={n}")));
    }
    let rbar = (cert.logz_hi - cert.logz_lo).max(0.0);
    let lln_rhs = (1.0 + (2.0 * rbar).sqrt()).powi(2) / (cert.kappa * n as f64);
    let w2_budget = 2.0 * rbar / (cert.kappa * (n / k) as f64);
    let bayes_lln_rhs = match model {
        Model::Bayes(m) => {
            let p = m.p();
            let denom = m.prior().kappa() * m.sigma2() + m.kappa2();
            let mut sum_j2 = 0.0;
            for i in 0..p {
                for j in (i + 1)..p {
                    sum_j2 += m.gram().get(i, j).powi(2);
                }
            }
            Some(
                m.sigma2() * (denom + (2.0 * sum_j2).sqrt()).powi(2)
                    / (p as f64 * denom.powi(3)),
            )
        }
        _ => None,
    };
    Ok(ConcentrationReport { lln_rhs, w2_budget, k, rbar, bayes_lln_rhs })
}

/// Monte Carlo mean of f under a product measure (black-box path), with the
/// standard error of the mean.
fn mc_mean_f(model: &Model, q: &ProductMeasure, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let n = q.dim();
    let rng = CounterRng::new(seed);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut x = vec![0.0; n];
    for s in 0..samples {
        for (j, marg) in q.marginals.iter().enumerate() {
            x[j] = marg.quantile(rng.uniform(1, s as u64, j as u64, 0xE1B0))?;
        }
        let v = model.eval_f(&x)?;
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / samples as f64;
    let var = (sumsq / samples as f64 - mean * mean).max(0.0);
    Ok((mean, (var / samples as f64).sqrt()))
}

fn mc_raw_conditional_variance(model: &Model, q: &ProductMeasure) -> Result<(f64, f64)> {
    let n = q.dim();
    let rng = CounterRng::new(MC_DEFAULT_SEED);
    let outer = 256;
    let inner = 128;
    let mut terms: Vec<f64> = Vec::with_capacity(outer);
    let mut x = vec![0.0; n];
    for o in 0..outer {
        let mut total = 0.0;
        for i in 0..n {
            // x_i ~ q_i fixed, inner draws over the others.
            let xi = q.marginals[i].quantile(rng.uniform(2, o as u64, i as u64, 1))?;
            let mut s = 0.0;
            let mut s2 = 0.0;
            for t in 0..inner {
                for (j, marg) in q.marginals.iter().enumerate() {
                    x[j] = marg.quantile(rng.uniform(
                        3,
                        (o * inner + t) as u64,
                        j as u64,
                        2,
                    ))?;
                }
                x[i] = xi;
                let g = model.partial_i(&x, i)?;
                s += g;
                s2 += g * g;
            }
            let mean = s / inner as f64;
            // Unbiased conditional variance estimate.
            let var = ((s2 - inner as f64 * mean * mean) / (inner as f64 - 1.0)).max(0.0);
            total += var;
        }
        terms.push(total);
    }
    Ok(mean_and_se(&terms))
}

fn mc_raw_cross_square(model: &Model, q: &ProductMeasure) -> Result<(f64, f64)> {
    let n = q.dim();
    let rng = CounterRng::new(MC_DEFAULT_SEED ^ 0xABCD);
    let samples = 2048;
    let mut terms: Vec<f64> = Vec::with_capacity(samples);
    let mut x = vec![0.0; n];
    for s in 0..samples {
        for (j, marg) in q.marginals.iter().enumerate() {
            x[j] = marg.quantile(rng.uniform(4, s as u64, j as u64, 3))?;
        }
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += model.cross_ij(&x, i, j)?.powi(2);
            }
        }
        terms.push(acc);
    }
    Ok(mean_and_se(&terms))
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
