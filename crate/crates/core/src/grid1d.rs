//! One-dimensional densities on uniform grids.
//!
//! A [`GridDensity`] stores log-weights at the nodes of a uniform [`Grid`]
//! together with the log-normalizer that makes the trapezoid integral of the
//! density equal one. All downstream quantities (entropy, moments, quantiles,
//! Wasserstein-2, kernel convolutions) are composite-trapezoid quadratures on
//! the same grid. For smooth densities whose tails are resolved inside the
//! window the trapezoid rule is spectrally accurate, which is what lets the
//! tight tolerances in the test suites hold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Endpoint mass above this fraction of the peak flags the window as too small.
pub const BOUNDARY_MASS_RATIO: f64 = 1e-8;

/// Number of midpoint nodes used for the quantile-coupling W2 integral.
pub const W2_QUADRATURE_POINTS: usize = 4096;

/// A uniform grid on [lo, hi] with m nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lo: f64,
    hi: f64,
    m: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::NonFiniteInput("grid endpoints".into()));
        }
        if hi <= lo {
            return Err(Error::OutOfRange(format!("grid needs hi > lo, got [{lo}, {hi}]")));
        }
        if m < 16 {
            return Err(Error::OutOfRange(format!("grid needs m >= 16, got {m}")));
        }
        Ok(Grid { lo, hi, m })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node spacing h = (hi - lo)/(m - 1).
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.m - 1) as f64
    }

    pub fn point(&self, k: usize) -> f64 {
        debug_assert!(k < self.m);
        self.lo + k as f64 * self.spacing()
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.m).map(move |k| self.point(k))
    }

    /// Trapezoid weight of node k (h at interior nodes, h/2 at endpoints).
    pub fn weight(&self, k: usize) -> f64 {
        let h = self.spacing();
        if k == 0 || k == self.m - 1 {
            0.5 * h
        } else {
            h
        }
    }

    /// Trapezoid quadrature of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.m);
        let mut acc = 0.5 * (values[0] + values[self.m - 1]);
        for v in &values[1..self.m - 1] {
            acc += v;
        }
        acc * self.spacing()
    }
}

/// A probability density q(x) = exp(logw(x) - logz1) on a uniform grid.
#[derive(Debug, Clone)]
pub struct GridDensity {
    grid: Grid,
    logw: Vec<f64>,
    logz1: f64,
    truncated: bool,
}

/// Wire format: {"lo", "hi", "m", "logw", "logZ1"} with logw in grid order.
#[derive(Serialize, Deserialize)]
struct GridDensityWire {
    lo: f64,
    hi: f64,
    m: usize,
    logw: Vec<f64>,
    #[serde(rename = "logZ1")]
    logz1: f64,
}

impl Serialize for GridDensity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GridDensityWire {
            lo: self.grid.lo,
            hi: self.grid.hi,
            m: self.grid.m,
            logw: self.logw.clone(),
            logz1: self.logz1,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GridDensity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = GridDensityWire::deserialize(d)?;
        let grid = Grid::new(w.lo, w.hi, w.m).map_err(serde::de::Error::custom)?;
        if w.logw.len() != w.m {
            return Err(serde::de::Error::custom("logw length does not match m"));
        }
        let mut q = GridDensity {
            grid,
            logw: w.logw,
            logz1: w.logz1,
            truncated: false,
        };
        q.truncated = q.boundary_mass_excessive();
        Ok(q)
    }
}

/// Normalize log-weights into a density via log-sum-exp trapezoid quadrature.
pub fn normalize(logw: Vec<f64>, grid: Grid) -> Result<GridDensity> {
    if logw.len() != grid.len() {
        return Err(Error::LengthMismatch(logw.len(), grid.len()));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in &logw {
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::NonFiniteInput(format!("logw contains {v}")));
        }
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::AllNegInfinite);
    }
    // logZ1 = max + log( sum_k w_k exp(logw_k - max) ), w_k trapezoid weights.
    let mut acc = 0.0;
    for (k, &v) in logw.iter().enumerate() {
        if v > f64::NEG_INFINITY {
            acc += grid.weight(k) * (v - max).exp();
        }
    }
    let logz1 = max + acc.ln();
    if !logz1.is_finite() {
        return Err(Error::NonFinite("log-normalizer".into()));
    }
    let mut q = GridDensity {
        grid,
        logw,
        logz1,
        truncated: false,
    };
    q.truncated = q.boundary_mass_excessive();
    Ok(q)
}

impl GridDensity {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn logw(&self) -> &[f64] {
        &self.logw
    }

    pub fn logz1(&self) -> f64 {
        self.logz1
    }

    /// True when the window failed the boundary-mass invariant at build time.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    /// log q at node k.
    pub fn log_density(&self, k: usize) -> f64 {
        self.logw[k] - self.logz1
    }

    /// q at node k.
    pub fn density(&self, k: usize) -> f64 {
        (self.logw[k] - self.logz1).exp()
    }

    pub fn log_density_vec(&self) -> Vec<f64> {
        self.logw.iter().map(|v| v - self.logz1).collect()
    }

    pub fn density_vec(&self) -> Vec<f64> {
        self.logw.iter().map(|v| (v - self.logz1).exp()).collect()
    }

    /// log q at an arbitrary point by linear interpolation of the nodal
    /// log-density; -inf outside the window.
    pub fn log_density_at(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x < g.lo() || x > g.hi() {
            return f64::NEG_INFINITY;
        }
        let pos = (x - g.lo()) / g.spacing();
        let k = (pos.floor() as usize).min(g.len() - 2);
        let frac = pos - k as f64;
        let a = self.log_density(k);
        let b = self.log_density(k + 1);
        if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        a + frac * (b - a)
    }

    fn boundary_mass_excessive(&self) -> bool {
        let max = self.logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let thresh = max + BOUNDARY_MASS_RATIO.ln();
        self.logw[0] > thresh || self.logw[self.grid.len() - 1] > thresh
    }

    /// Paper-sign entropy H(q) = ∫ q log q (negative differential entropy).
    pub fn entropy(&self) -> f64 {
        let m = self.grid.len();
        let mut acc = 0.0;
        for k in 0..m {
            let lq = self.log_density(k);
            if lq > f64::NEG_INFINITY {
                acc += self.grid.weight(k) * lq.exp() * lq;
            }
        }
        acc
    }

    /// Raw moment ∫ x^k q(x) dx.
    pub fn moment(&self, k: u32) -> f64 {
        let m = self.grid.len();
        let mut acc = 0.0;
        for i in 0..m {
            let q = self.density(i);
            if q > 0.0 {
                acc += self.grid.weight(i) * self.grid.point(i).powi(k as i32) * q;
            }
        }
        acc
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        (self.moment(2) - m * m).max(0.0)
    }

    /// Expectation of an arbitrary function by trapezoid quadrature.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        let m = self.grid.len();
        let mut acc = 0.0;
        for i in 0..m {
            let q = self.density(i);
            if q > 0.0 {
                acc += self.grid.weight(i) * f(self.grid.point(i)) * q;
            }
        }
        acc
    }

    /// Cumulative trapezoid CDF at the grid nodes; starts at 0.
    pub fn cdf_nodes(&self) -> Vec<f64> {
        let m = self.grid.len();
        let h = self.grid.spacing();
        let mut cdf = Vec::with_capacity(m);
        cdf.push(0.0);
        let mut prev_q = self.density(0);
        let mut acc = 0.0;
        for k in 1..m {
            let q = self.density(k);
            acc += 0.5 * h * (prev_q + q);
            cdf.push(acc);
            prev_q = q;
        }
        cdf
    }

    /// Inverse CDF at level u in (0,1), linear interpolation between nodes.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::OutOfRange(format!("quantile level {u} outside (0,1)")));
        }
        let cdf = self.cdf_nodes();
        Ok(invert_cdf(&self.grid, &cdf, u))
    }

    /// Quadratic Wasserstein distance by the 1D quantile-coupling formula,
    /// midpoint rule with `W2_QUADRATURE_POINTS` nodes in u.
    pub fn w2(&self, other: &GridDensity) -> f64 {
        let cdf_a = self.cdf_nodes();
        let cdf_b = other.cdf_nodes();
        let kq = W2_QUADRATURE_POINTS;
        let mut acc = 0.0;
        let mut ia = 0usize;
        let mut ib = 0usize;
        for j in 0..kq {
            let u = (j as f64 + 0.5) / kq as f64;
            let xa = invert_cdf_from(&self.grid, &cdf_a, u, &mut ia);
            let xb = invert_cdf_from(&other.grid, &cdf_b, u, &mut ib);
            let d = xa - xb;
            acc += d * d;
        }
        (acc / kq as f64).sqrt()
    }

    /// c[x] = ∫ K(x - y) q(y) dy on this density's own grid, O(m^2) trapezoid.
    ///
    /// The kernel is evaluated only at lattice differences (i - j)h, so the
    /// table is built once and shared by all targets.
    pub fn kernel_smooth(&self, kernel: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        let table = kernel_table(&self.grid, kernel)?;
        Ok(self.kernel_smooth_tabled(&table))
    }

    /// Same as [`GridDensity::kernel_smooth`] with a precomputed lattice table.
    pub fn kernel_smooth_tabled(&self, table: &[f64]) -> Vec<f64> {
        let m = self.grid.len();
        debug_assert_eq!(table.len(), 2 * m - 1);
        let q: Vec<f64> = (0..m).map(|k| self.grid.weight(k) * self.density(k)).collect();
        let mut out = vec![0.0; m];
        for (i, o) in out.iter_mut().enumerate() {
            // x_i - y_j = (i - j) h  ->  table index (i - j) + (m - 1)
            let base = i + m - 1;
            let mut acc = 0.0;
            for (j, &qj) in q.iter().enumerate() {
                acc += table[base - j] * qj;
            }
            *o = acc;
        }
        out
    }
}

/// Kernel values at lattice differences (i)h for i in [-(m-1), m-1].
pub fn kernel_table(grid: &Grid, kernel: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let m = grid.len();
    let h = grid.spacing();
    let mut table = Vec::with_capacity(2 * m - 1);
    for i in -(m as isize - 1)..=(m as isize - 1) {
        let v = kernel(i as f64 * h);
        if !v.is_finite() {
            return Err(Error::NonFiniteKernel);
        }
        table.push(v);
    }
    Ok(table)
}

fn invert_cdf(grid: &Grid, cdf: &[f64], u: f64) -> f64 {
    let mut cursor = 0usize;
    invert_cdf_from(grid, cdf, u, &mut cursor)
}

/// Invert a nondecreasing nodal CDF, resuming the scan from `cursor` so that
/// a monotone sequence of levels costs O(m + levels) in total.
fn invert_cdf_from(grid: &Grid, cdf: &[f64], u: f64, cursor: &mut usize) -> f64 {
    let m = cdf.len();
    let total = cdf[m - 1];
    let target = u * total;
    if *cursor >= m - 1 {
        *cursor = m - 2;
    }
    while *cursor > 0 && cdf[*cursor] > target {
        *cursor -= 1;
    }
    while *cursor < m - 2 && cdf[*cursor + 1] < target {
        *cursor += 1;
    }
    let k = *cursor;
    let c0 = cdf[k];
    let c1 = cdf[k + 1];
    if c1 <= c0 {
        return grid.point(k + 1);
    }
    let frac = ((target - c0) / (c1 - c0)).clamp(0.0, 1.0);
    grid.point(k) + frac * grid.spacing()
}

/// An ordered product of 1D marginals; the home of Q* and of CAVI iterates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProductMeasure {
    pub marginals: Vec<GridDensity>,
}

impl ProductMeasure {
    pub fn new(marginals: Vec<GridDensity>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::OutOfRange("product measure needs n >= 1".into()));
        }
        Ok(ProductMeasure { marginals })
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }
}
