//! Model families exposing f, its partial and cross derivatives, and the
//! strong-concavity constant kappa.
//!
//! Four families are supported: pairwise Gibbs potentials
//! f(x) = sum_i V(x_i) + sum_{i<j} J_ij K(x_i - x_j), quadratic forms
//! f(x) = -x'Ax/2 + b'x + c, Bayesian linear-regression posteriors, and
//! caller-supplied black boxes with a declared kappa. Validation probes run
//! at construction time; growth constants are declared, never inferred.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::rng::CounterRng;

/// 1001 nodes, per the probe-grid convention for 1D validation checks.
const PROBE_POINTS: usize = 1001;

type Fn1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type FnN = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type FnGrad = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;
type FnCross = Arc<dyn Fn(&[f64], usize, usize) -> f64 + Send + Sync>;

/// Named single-site potentials admissible in model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name")]
pub enum PotentialSpec {
    /// V(x) = -kappa x^2 / 2
    #[serde(rename = "gaussian_well")]
    GaussianWell { kappa: f64 },
    /// V(x) = -kappa x^2 / 2 - lambda x^4 / 4
    #[serde(rename = "quartic_well")]
    QuarticWell { kappa: f64, lambda: f64 },
}

/// Named even concave interaction kernels admissible in model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name")]
pub enum KernelSpec {
    /// K(u) = -u^2/2
    #[serde(rename = "neg_quadratic_kernel")]
    NegQuadratic,
    /// K(u) = -sqrt(1 + u^2)
    #[serde(rename = "neg_sqrt_kernel")]
    NegSqrt,
    /// K(u) = -log cosh u
    #[serde(rename = "neg_logcosh")]
    NegLogCosh,
}

/// A kappa-concave single-site potential V with derivatives and a declared
/// growth envelope |V(x)| <= c1 e^{c2 x^2}, c2 < kappa/2.
#[derive(Clone)]
pub struct ScalarPotential {
    eval: Fn1,
    d1: Fn1,
    d2: Fn1,
    kappa: f64,
    growth: (f64, f64),
    spec: Option<PotentialSpec>,
}

impl ScalarPotential {
    pub fn gaussian_well(kappa: f64) -> Self {
        let k = kappa;
        ScalarPotential {
            eval: Arc::new(move |x| -k * x * x / 2.0),
            d1: Arc::new(move |x| -k * x),
            d2: Arc::new(move |_| -k),
            kappa,
            // sup (k x^2/2) e^{-k x^2/4} = 2/e, attained at x^2 = 4/k.
            growth: (2.0 / std::f64::consts::E + 1e-9, kappa / 4.0),
            spec: Some(PotentialSpec::GaussianWell { kappa }),
        }
    }

    pub fn quartic_well(kappa: f64, lambda: f64) -> Self {
        let (k, l) = (kappa, lambda);
        let eval: Fn1 = Arc::new(move |x| -k * x * x / 2.0 - l * x.powi(4) / 4.0);
        let c2 = kappa / 4.0;
        // Declared envelope: numerically maximize |V| e^{-c2 x^2} and pad.
        let mut c1: f64 = 0.0;
        for i in 0..=4000 {
            let x = -60.0 + i as f64 * (120.0 / 4000.0);
            c1 = c1.max(eval(x).abs() * (-c2 * x * x).exp());
        }
        ScalarPotential {
            eval,
            d1: Arc::new(move |x| -k * x - l * x.powi(3)),
            d2: Arc::new(move |x| -k - 3.0 * l * x * x),
            kappa,
            growth: (c1 * 1.01 + 1.0, c2),
            spec: Some(PotentialSpec::QuarticWell { kappa, lambda }),
        }
    }

    /// Caller-supplied potential. Growth constants are declared by the caller
    /// and probe-checked, not inferred.
    pub fn custom(eval: Fn1, d1: Fn1, d2: Fn1, kappa: f64, growth: (f64, f64)) -> Self {
        ScalarPotential { eval, d1, d2, kappa, growth, spec: None }
    }

    pub fn from_spec(spec: &PotentialSpec) -> Result<Self> {
        let v = match *spec {
            PotentialSpec::GaussianWell { kappa } => Self::gaussian_well(kappa),
            PotentialSpec::QuarticWell { kappa, lambda } => {
                if lambda < 0.0 {
                    return Err(Error::InvalidSpec("quartic_well needs lambda >= 0".into()));
                }
                Self::quartic_well(kappa, lambda)
            }
        };
        if v.kappa <= 0.0 {
            return Err(Error::NotStronglyConcave(v.kappa));
        }
        Ok(v)
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    pub fn d1(&self, x: f64) -> f64 {
        (self.d1)(x)
    }

    pub fn d2(&self, x: f64) -> f64 {
        (self.d2)(x)
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn growth(&self) -> (f64, f64) {
        self.growth
    }

    pub fn spec(&self) -> Option<&PotentialSpec> {
        self.spec.as_ref()
    }

    /// Probe the concavity and growth invariants on [-half_width, half_width].
    pub fn probe_check(&self, half_width: f64, enforce_growth: bool) -> Result<()> {
        let (c1, c2) = self.growth;
        if enforce_growth && !(c2 < self.kappa / 2.0) {
            return Err(Error::InvariantViolated(format!(
                "growth exponent c2 = {c2} must be < kappa/2 = {}",
                self.kappa / 2.0
            )));
        }
        for i in 0..PROBE_POINTS {
            let x = -half_width + 2.0 * half_width * i as f64 / (PROBE_POINTS - 1) as f64;
            let d2 = self.d2(x);
            if !(d2 <= -self.kappa + 1e-9) {
                return Err(Error::InvariantViolated(format!(
                    "V''({x}) = {d2} violates kappa-concavity (kappa = {})",
                    self.kappa
                )));
            }
            if enforce_growth && self.eval(x).abs() > c1 * (c2 * x * x).exp() + 1e-9 {
                return Err(Error::InvariantViolated(format!(
                    "|V({x})| exceeds declared growth envelope"
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for ScalarPotential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarPotential")
            .field("kappa", &self.kappa)
            .field("growth", &self.growth)
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

/// An even, concave interaction kernel K with |K''(u)|^2 <= a e^{b|u|}.
#[derive(Clone)]
pub struct InteractionKernel {
    eval: Fn1,
    d1: Fn1,
    d2: Fn1,
    growth: (f64, f64),
    spec: Option<KernelSpec>,
}

impl InteractionKernel {
    pub fn neg_quadratic() -> Self {
        InteractionKernel {
            eval: Arc::new(|u| -u * u / 2.0),
            d1: Arc::new(|u| -u),
            d2: Arc::new(|_| -1.0),
            growth: (1.0, 0.0),
            spec: Some(KernelSpec::NegQuadratic),
        }
    }

    pub fn neg_sqrt() -> Self {
        InteractionKernel {
            eval: Arc::new(|u| -(1.0 + u * u).sqrt()),
            d1: Arc::new(|u| -u / (1.0 + u * u).sqrt()),
            d2: Arc::new(|u| -1.0 / (1.0 + u * u).powf(1.5)),
            growth: (1.0, 0.0),
            spec: Some(KernelSpec::NegSqrt),
        }
    }

    pub fn neg_logcosh() -> Self {
        InteractionKernel {
            eval: Arc::new(|u| {
                // log cosh u = |u| + log(1 + e^{-2|u|}) - log 2, overflow-safe.
                let a = u.abs();
                -(a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2)
            }),
            d1: Arc::new(|u| -u.tanh()),
            d2: Arc::new(|u| {
                let c = u.cosh();
                if c.is_finite() { -1.0 / (c * c) } else { 0.0 }
            }),
            growth: (1.0, 0.0),
            spec: Some(KernelSpec::NegLogCosh),
        }
    }

    pub fn custom(eval: Fn1, d1: Fn1, d2: Fn1, growth: (f64, f64)) -> Self {
        InteractionKernel { eval, d1, d2, growth, spec: None }
    }

    pub fn from_spec(spec: &KernelSpec) -> Self {
        match spec {
            KernelSpec::NegQuadratic => Self::neg_quadratic(),
            KernelSpec::NegSqrt => Self::neg_sqrt(),
            KernelSpec::NegLogCosh => Self::neg_logcosh(),
        }
    }

    pub fn eval(&self, u: f64) -> f64 {
        (self.eval)(u)
    }

    pub fn d1(&self, u: f64) -> f64 {
        (self.d1)(u)
    }

    pub fn d2(&self, u: f64) -> f64 {
        (self.d2)(u)
    }

    /// Declared (a, b) with |K''(u)|^2 <= a e^{b|u|}.
    pub fn growth(&self) -> (f64, f64) {
        self.growth
    }

    pub fn spec(&self) -> Option<&KernelSpec> {
        self.spec.as_ref()
    }

    pub fn probe_check(&self, half_width: f64) -> Result<()> {
        let (a, b) = self.growth;
        for i in 0..PROBE_POINTS {
            let u = -half_width + 2.0 * half_width * i as f64 / (PROBE_POINTS - 1) as f64;
            if (self.eval(u) - self.eval(-u)).abs() > 1e-12 {
                return Err(Error::InvariantViolated(format!("kernel not even at u = {u}")));
            }
            let d2 = self.d2(u);
            if d2 > 1e-12 {
                return Err(Error::InvariantViolated(format!("K''({u}) = {d2} > 0")));
            }
            if d2 * d2 > a * (b * u.abs()).exp() + 1e-9 {
                return Err(Error::InvariantViolated(format!(
                    "|K''({u})|^2 exceeds declared growth a e^(b|u|)"
                )));
            }
        }
        Ok(())
    }

    /// True if K <= 0 everywhere on the probed range.
    pub fn check_nonpositive(&self, half_width: f64) -> Result<()> {
        for i in 0..PROBE_POINTS {
            let u = -half_width + 2.0 * half_width * i as f64 / (PROBE_POINTS - 1) as f64;
            if self.eval(u) > 1e-12 {
                return Err(Error::NotNonpositiveKernel(u, self.eval(u)));
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for InteractionKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InteractionKernel")
            .field("growth", &self.growth)
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

/// Symmetric nonnegative coupling matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CouplingMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidSpec("coupling matrix must be square".into()));
        }
        let mut entries = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteInput("coupling entry".into()));
                }
                if v < 0.0 {
                    return Err(Error::InvalidSpec(format!("J[{i}][{j}] = {v} < 0")));
                }
                if i == j && v != 0.0 {
                    return Err(Error::InvalidSpec(format!("J[{i}][{i}] must be 0")));
                }
                entries.push(v);
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (entries[i * n + j] - entries[j * n + i]).abs() > 1e-12 {
                    return Err(Error::InvalidSpec(format!("J not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(CouplingMatrix { n, entries })
    }

    pub fn zeros(n: usize) -> Self {
        CouplingMatrix { n, entries: vec![0.0; n * n] }
    }

    /// Adjacency of the n-cycle.
    pub fn cycle(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidSpec("cycle needs n >= 3".into()));
        }
        let mut j = Self::zeros(n);
        for i in 0..n {
            j.set(i, (i + 1) % n, 1.0);
            j.set((i + 1) % n, i, 1.0);
        }
        Ok(j)
    }

    /// Adjacency of the complete graph.
    pub fn complete(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidSpec("complete graph needs n >= 2".into()));
        }
        let mut j = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                if i != k {
                    j.set(i, k, 1.0);
                }
            }
        }
        Ok(j)
    }

    /// Seeded random simple d-regular graph: start from a circulant and
    /// randomize by double-edge swaps. Deterministic in (n, d, seed) and
    /// valid for any degree, dense ones included.
    pub fn d_regular(n: usize, d: usize, seed: u64) -> Result<Self> {
        if d == 0 || d >= n || !(n * d).is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!(
                "d-regular needs 0 < d < n and n*d even, got n={n}, d={d}"
            )));
        }
        // Circulant seed graph: offsets 1..=d/2, plus the antipode when d is
        // odd (n must be even then, by the parity check above).
        let mut adj = Self::zeros(n);
        for i in 0..n {
            for off in 1..=(d / 2) {
                let j = (i + off) % n;
                adj.set(i, j, 1.0);
                adj.set(j, i, 1.0);
            }
            if d % 2 == 1 {
                let j = (i + n / 2) % n;
                adj.set(i, j, 1.0);
                adj.set(j, i, 1.0);
            }
        }
        // Double-edge swaps keyed by (seed, attempt): (a,b),(c,e) -> (a,e),(c,b).
        let rng = CounterRng::new(seed);
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if adj.get(i, j) > 0.0 {
                    edges.push((i, j));
                }
            }
        }
        let target_swaps = 10 * edges.len();
        let mut done = 0usize;
        let mut attempt = 0u64;
        while done < target_swaps && attempt < (200 * target_swaps) as u64 {
            attempt += 1;
            let e1 = (rng.raw(seed, attempt, 0, 1) % edges.len() as u64) as usize;
            let e2 = (rng.raw(seed, attempt, 1, 2) % edges.len() as u64) as usize;
            if e1 == e2 {
                continue;
            }
            let (mut a, mut b) = edges[e1];
            let (c, e) = edges[e2];
            // Randomize the orientation of the first edge.
            if rng.raw(seed, attempt, 2, 3) & 1 == 1 {
                std::mem::swap(&mut a, &mut b);
            }
            if a == c || a == e || b == c || b == e {
                continue;
            }
            if adj.get(a, e) > 0.0 || adj.get(c, b) > 0.0 {
                continue;
            }
            adj.set(a, b, 0.0);
            adj.set(b, a, 0.0);
            adj.set(c, e, 0.0);
            adj.set(e, c, 0.0);
            adj.set(a, e, 1.0);
            adj.set(e, a, 1.0);
            adj.set(c, b, 1.0);
            adj.set(b, c, 1.0);
            edges[e1] = (a.min(e), a.max(e));
            edges[e2] = (c.min(b), c.max(b));
            done += 1;
        }
        Ok(adj)
    }

    /// Block-constant coupling: entry (i, j) is weights[block(i)][block(j)],
    /// diagonal zeroed.
    pub fn block(sizes: &[usize], weights: &[Vec<f64>]) -> Result<Self> {
        let m = sizes.len();
        if m == 0 || weights.len() != m || weights.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidSpec("block sizes/weights shape mismatch".into()));
        }
        let n: usize = sizes.iter().sum();
        let mut owner = Vec::with_capacity(n);
        for (a, &s) in sizes.iter().enumerate() {
            owner.extend(std::iter::repeat_n(a, s));
        }
        let mut j = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                if i != k {
                    j.set(i, k, weights[owner[i]][owner[k]]);
                }
            }
        }
        // Re-validate symmetry/nonnegativity through the front door.
        Self::from_rows(&j.rows())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::InvalidSpec(format!("scale {c} must be finite and >= 0")));
        }
        Ok(CouplingMatrix {
            n: self.n,
            entries: self.entries.iter().map(|v| v * c).collect(),
        })
    }

    /// Divide each row by its sum. Only valid when the result stays symmetric
    /// (regular structures); errors otherwise.
    pub fn row_normalized(&self) -> Result<Self> {
        let mut entries = self.entries.clone();
        for i in 0..self.n {
            let s: f64 = self.row(i).iter().sum();
            if s <= 0.0 {
                return Err(Error::InvalidSpec(format!("row {i} of J sums to {s}")));
            }
            for j in 0..self.n {
                entries[i * self.n + j] /= s;
            }
        }
        let out = CouplingMatrix { n: self.n, entries };
        for i in 0..out.n {
            for j in (i + 1)..out.n {
                if (out.get(i, j) - out.get(j, i)).abs() > 1e-12 {
                    return Err(Error::InvalidSpec(
                        "row normalization broke symmetry (graph not regular)".into(),
                    ));
                }
            }
        }
        Ok(out)
    }

    pub fn trace_j2(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    pub fn max_row_sum_deviation(&self) -> f64 {
        (0..self.n)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Pairwise Gibbs potential f(x) = sum V(x_i) + sum_{i<j} J_ij K(x_i - x_j).
#[derive(Debug, Clone)]
pub struct PairwiseGibbs {
    v: ScalarPotential,
    k: InteractionKernel,
    j: CouplingMatrix,
}

impl PairwiseGibbs {
    pub fn new(v: ScalarPotential, k: InteractionKernel, j: CouplingMatrix) -> Result<Self> {
        Self::with_growth_gate(v, k, j, true)
    }

    /// `enforce_growth: false` skips the |V| growth-envelope gate (override
    /// flag for callers who know the envelope is a proof artifact).
    pub fn with_growth_gate(
        v: ScalarPotential,
        k: InteractionKernel,
        j: CouplingMatrix,
        enforce_growth: bool,
    ) -> Result<Self> {
        if v.kappa() <= 0.0 {
            return Err(Error::NotStronglyConcave(v.kappa()));
        }
        let hw = 24.0 / v.kappa().sqrt();
        v.probe_check(hw, enforce_growth)?;
        k.probe_check(2.0 * hw)?;
        Ok(PairwiseGibbs { v, k, j })
    }

    pub fn v(&self) -> &ScalarPotential {
        &self.v
    }

    pub fn k(&self) -> &InteractionKernel {
        &self.k
    }

    pub fn j(&self) -> &CouplingMatrix {
        &self.j
    }
}

/// Quadratic model f(x) = -x'Ax/2 + b'x + c with A symmetric positive
/// (semi-)definite; kappa = lambda_min(A).
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    a: SymMatrix,
    b: Vec<f64>,
    c: f64,
    lambda_min: f64,
}

impl QuadraticModel {
    /// Strictly positive definite A (the Gibbs-measure case).
    pub fn new(a: SymMatrix) -> Result<Self> {
        let n = a.n();
        Self::with_linear(a, vec![0.0; n], 0.0)
    }

    pub fn with_linear(a: SymMatrix, b: Vec<f64>, c: f64) -> Result<Self> {
        let m = Self::psd(a, b, c)?;
        // lambda_min is iterative; below this threshold the matrix is
        // numerically singular and useless as a Gibbs precision.
        if m.lambda_min <= 1e-9 {
            return Err(Error::NotStronglyConcave(m.lambda_min));
        }
        Ok(m)
    }

    /// Positive semidefinite A; admissible as a control objective, where only
    /// concavity (not strong concavity) is required.
    pub fn psd(a: SymMatrix, b: Vec<f64>, c: f64) -> Result<Self> {
        if b.len() != a.n() {
            return Err(Error::LengthMismatch(b.len(), a.n()));
        }
        let mut lambda_min = a.lambda_min()?;
        if lambda_min < -1e-9 {
            return Err(Error::InvalidSpec(format!(
                "A has negative eigenvalue {lambda_min:.3e}; not concave"
            )));
        }
        // Within the eigensolver tolerance of zero means semidefinite.
        if lambda_min.abs() <= 1e-9 {
            lambda_min = 0.0;
        }
        Ok(QuadraticModel { a, b, c, lambda_min })
    }

    pub fn a(&self) -> &SymMatrix {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }
}

/// Bayesian linear-regression posterior over coefficients beta in R^p:
/// f(beta) = sum_i V(beta_i) - |y - X beta|^2 / (2 sigma^2).
#[derive(Debug, Clone)]
pub struct BayesLinReg {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    sigma2: f64,
    prior: ScalarPotential,
    j: SymMatrix,
    xty: Vec<f64>,
    kappa2: f64,
}

impl BayesLinReg {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>, sigma2: f64, prior: ScalarPotential) -> Result<Self> {
        let n = x.len();
        if n == 0 || y.len() != n {
            return Err(Error::LengthMismatch(y.len(), n));
        }
        let p = x[0].len();
        if p == 0 || x.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidSpec("design matrix rows must share length p >= 1".into()));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::OutOfRange(format!("sigma2 = {sigma2} must be positive")));
        }
        // J = X'X and X'y.
        let mut j = SymMatrix::zeros(p);
        let mut xty = vec![0.0; p];
        for a in 0..p {
            for b in a..p {
                let mut s = 0.0;
                for row in &x {
                    s += row[a] * row[b];
                }
                j.set(a, b, s);
                j.set(b, a, s);
            }
            for (row, &yi) in x.iter().zip(&y) {
                xty[a] += row[a] * yi;
            }
        }
        let kappa2 = j.lambda_min()?.max(0.0);
        let kappa = prior.kappa() + kappa2 / sigma2;
        if kappa <= 0.0 {
            return Err(Error::NotStronglyConcave(kappa));
        }
        prior.probe_check(24.0 / kappa.sqrt().max(1e-6), true)?;
        Ok(BayesLinReg { x, y, sigma2, prior, j, xty, kappa2 })
    }

    pub fn p(&self) -> usize {
        self.j.n()
    }

    pub fn design(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn prior(&self) -> &ScalarPotential {
        &self.prior
    }

    pub fn gram(&self) -> &SymMatrix {
        &self.j
    }

    pub fn xty(&self) -> &[f64] {
        &self.xty
    }

    pub fn kappa2(&self) -> f64 {
        self.kappa2
    }
}

/// Opaque model: caller supplies f, its partials, cross-partials, and kappa.
#[derive(Clone)]
pub struct BlackBoxModel {
    dim: usize,
    f: FnN,
    grad: FnGrad,
    cross: FnCross,
    kappa: f64,
}

impl BlackBoxModel {
    pub fn new(dim: usize, f: FnN, grad: FnGrad, cross: FnCross, kappa: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSpec("black box needs dim >= 1".into()));
        }
        if kappa <= 0.0 {
            return Err(Error::NotStronglyConcave(kappa));
        }
        let model = BlackBoxModel { dim, f, grad, cross, kappa };
        model.probe_consistency()?;
        Ok(model)
    }

    /// 100 seeded random probes: cross symmetry within 1e-8 and gradient
    /// agreement with central differences within 1e-5 relative.
    fn probe_consistency(&self) -> Result<()> {
        let rng = CounterRng::new(0xB1AC_B0C5);
        let scale = 1.0 / self.kappa.sqrt();
        for probe in 0..100u64 {
            let x: Vec<f64> = (0..self.dim)
                .map(|i| scale * (2.0 * rng.uniform(probe, i as u64, 0, 1) - 1.0))
                .collect();
            if self.dim >= 2 {
                let i = (rng.raw(probe, 0, 0, 2) % self.dim as u64) as usize;
                let mut j = (rng.raw(probe, 0, 0, 3) % self.dim as u64) as usize;
                if j == i {
                    j = (j + 1) % self.dim;
                }
                let cij = (self.cross)(&x, i, j);
                let cji = (self.cross)(&x, j, i);
                if (cij - cji).abs() > 1e-8 {
                    return Err(Error::InvariantViolated(format!(
                        "cross-partial asymmetry {:.3e} at probe {probe}",
                        (cij - cji).abs()
                    )));
                }
            }
            let i = (rng.raw(probe, 0, 0, 4) % self.dim as u64) as usize;
            let g = (self.grad)(&x, i);
            let h = 1e-5 * scale;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = ((self.f)(&xp) - (self.f)(&xm)) / (2.0 * h);
            let denom = g.abs().max(fd.abs()).max(1e-3);
            if (g - fd).abs() / denom > 1e-5 * denom.max(1.0).powi(0) + 1e-4 {
                // Central differences themselves carry O(h^2 f''' ) error, so
                // this check is a consistency probe, not a tight bound.
                return Err(Error::InvariantViolated(format!(
                    "gradient/finite-difference mismatch at probe {probe}: {g} vs {fd}"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

impl std::fmt::Debug for BlackBoxModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlackBoxModel")
            .field("dim", &self.dim)
            .field("kappa", &self.kappa)
            .finish_non_exhaustive()
    }
}

/// Any supported model family.
#[derive(Debug, Clone)]
pub enum Model {
    Pairwise(PairwiseGibbs),
    Quadratic(QuadraticModel),
    Bayes(BayesLinReg),
    BlackBox(BlackBoxModel),
}

impl Model {
    pub fn dim(&self) -> usize {
        match self {
            Model::Pairwise(m) => m.j().n(),
            Model::Quadratic(m) => m.a().n(),
            Model::Bayes(m) => m.p(),
            Model::BlackBox(m) => m.dim(),
        }
    }

    pub fn eval_f(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::LengthMismatch(x.len(), self.dim()));
        }
        let value = match self {
            Model::Pairwise(m) => {
                let n = x.len();
                let mut acc = 0.0;
                for &xi in x {
                    acc += m.v().eval(xi);
                }
                for i in 0..n {
                    for j in (i + 1)..n {
                        let jij = m.j().get(i, j);
                        if jij != 0.0 {
                            acc += jij * m.k().eval(x[i] - x[j]);
                        }
                    }
                }
                acc
            }
            Model::Quadratic(m) => {
                -0.5 * m.a().quad_form(x)
                    + m.b().iter().zip(x).map(|(b, xi)| b * xi).sum::<f64>()
                    + m.c()
            }
            Model::Bayes(m) => {
                let mut acc = 0.0;
                for &bi in x {
                    acc += m.prior().eval(bi);
                }
                for (row, &yi) in m.design().iter().zip(m.y()) {
                    let pred: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                    acc -= (yi - pred) * (yi - pred) / (2.0 * m.sigma2());
                }
                acc
            }
            Model::BlackBox(m) => (m.f)(x),
        };
        if !value.is_finite() {
            return Err(Error::NonFinite("f(x)".into()));
        }
        Ok(value)
    }

    /// Partial derivative of f in coordinate i (0-based).
    pub fn partial_i(&self, x: &[f64], i: usize) -> Result<f64> {
        if i >= self.dim() || x.len() != self.dim() {
            return Err(Error::OutOfRange(format!("coordinate {i} of {}", self.dim())));
        }
        let value = match self {
            Model::Pairwise(m) => {
                let mut acc = m.v().d1(x[i]);
                for (j, &xj) in x.iter().enumerate() {
                    if j != i {
                        let jij = m.j().get(i, j);
                        if jij != 0.0 {
                            acc += jij * m.k().d1(x[i] - xj);
                        }
                    }
                }
                acc
            }
            Model::Quadratic(m) => m.b()[i] - m.a().matvec(x)[i],
            Model::Bayes(m) => {
                let mut resid = m.xty()[i];
                for (j, &xj) in x.iter().enumerate() {
                    resid -= m.gram().get(i, j) * xj;
                }
                m.prior().d1(x[i]) + resid / m.sigma2()
            }
            Model::BlackBox(m) => (m.grad)(x, i),
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("d_{i} f(x)")));
        }
        Ok(value)
    }

    /// Cross derivative of f in coordinates i != j (0-based).
    pub fn cross_ij(&self, x: &[f64], i: usize, j: usize) -> Result<f64> {
        let n = self.dim();
        if i >= n || j >= n || i == j || x.len() != n {
            return Err(Error::OutOfRange(format!("cross-partial indices ({i},{j})")));
        }
        let value = match self {
            Model::Pairwise(m) => -m.j().get(i, j) * m.k().d2(x[i] - x[j]),
            Model::Quadratic(m) => -m.a().get(i, j),
            Model::Bayes(m) => -m.gram().get(i, j) / m.sigma2(),
            Model::BlackBox(m) => (m.cross)(x, i, j),
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("d_({i},{j}) f(x)")));
        }
        Ok(value)
    }

    /// Strong-concavity constant of the family.
    pub fn kappa(&self) -> Result<f64> {
        let kappa = match self {
            Model::Pairwise(m) => m.v().kappa(),
            Model::Quadratic(m) => m.lambda_min(),
            Model::Bayes(m) => m.prior().kappa() + m.kappa2() / m.sigma2(),
            Model::BlackBox(m) => m.kappa(),
        };
        if kappa <= 0.0 {
            return Err(Error::NotStronglyConcave(kappa));
        }
        Ok(kappa)
    }

    /// Concavity constant allowing zero (control objectives need only
    /// concavity, not strong concavity).
    pub fn kappa_or_zero(&self) -> f64 {
        match self {
            Model::Pairwise(m) => m.v().kappa(),
            Model::Quadratic(m) => m.lambda_min(),
            Model::Bayes(m) => m.prior().kappa() + m.kappa2() / m.sigma2(),
            Model::BlackBox(m) => m.kappa(),
        }
    }

    /// Center of the default solve window, one entry per coordinate.
    pub fn default_center(&self) -> Result<Vec<f64>> {
        match self {
            Model::Pairwise(_) | Model::BlackBox(_) => Ok(vec![0.0; self.dim()]),
            Model::Quadratic(m) => {
                if m.b().iter().all(|&b| b == 0.0) {
                    return Ok(vec![0.0; self.dim()]);
                }
                let chol = m.a().cholesky()?;
                Ok(chol.solve(m.b()))
            }
            Model::Bayes(m) => {
                // Ridge surrogate for the posterior mode:
                // (J/sigma2 + kappa1 I) center = X'y / sigma2.
                let p = m.p();
                let mut prec = SymMatrix::zeros(p);
                for i in 0..p {
                    for j in 0..p {
                        prec.set(i, j, m.gram().get(i, j) / m.sigma2());
                    }
                    prec.set(i, i, prec.get(i, i) + m.prior().kappa());
                }
                let rhs: Vec<f64> = m.xty().iter().map(|v| v / m.sigma2()).collect();
                Ok(prec.cholesky()?.solve(&rhs))
            }
        }
    }
}
