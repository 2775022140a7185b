//! Small dense symmetric linear algebra: Cholesky factorization, solves,
//! log-determinants, and extreme eigenvalues by power iterations.
//!
//! Problem sizes here are tens of coordinates, so simple O(n^3) routines are
//! deterministic, dependency-free, and fast enough.

use crate::error::{Error, Result};

/// Row-major dense symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidSpec("matrix must be square and non-empty".into()));
        }
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            for &v in r {
                if !v.is_finite() {
                    return Err(Error::NonFiniteInput("matrix entry".into()));
                }
                data.push(v);
            }
        }
        let m = SymMatrix { n, data };
        let asym = m.max_asymmetry();
        if asym > 1e-12 {
            return Err(Error::InvalidSpec(format!(
                "matrix asymmetry {asym:.3e} exceeds 1e-12"
            )));
        }
        Ok(m)
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        out
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| self.data[i * self.n..(i + 1) * self.n].to_vec())
            .collect()
    }

    /// Cholesky factor L with A = L L^T; fails if A is not SPD.
    pub fn cholesky(&self) -> Result<Cholesky> {
        let n = self.n;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::NotSpd);
                    }
                    l[i * n + j] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Cholesky { n, l })
    }

    /// Smallest eigenvalue by inverse-power iteration on (A - shift I),
    /// tolerance 1e-10. Falls back to a Gershgorin shift to make the shifted
    /// matrix SPD. Clustered spectra converge slowly, hence the large cap.
    pub fn lambda_min(&self) -> Result<f64> {
        let n = self.n;
        // Gershgorin lower bound gives a safe positive shift.
        let mut lower = f64::INFINITY;
        for i in 0..n {
            let mut radius = 0.0;
            for j in 0..n {
                if j != i {
                    radius += self.get(i, j).abs();
                }
            }
            lower = lower.min(self.get(i, i) - radius);
        }
        let shift = if lower > 0.0 { 0.0 } else { -lower + 1.0 };
        let mut shifted = self.clone();
        for i in 0..n {
            shifted.set(i, i, shifted.get(i, i) + shift);
        }
        let chol = shifted.cholesky()?;
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 + 1.0).sin()).collect();
        normalize_vec(&mut v);
        let mut eig = 0.0;
        for iter in 0..200_000 {
            let mut w = chol.solve(&v);
            normalize_vec(&mut w);
            let aw = shifted.matvec(&w);
            let new_eig: f64 = aw.iter().zip(&w).map(|(a, b)| a * b).sum();
            let delta = (new_eig - eig).abs();
            v = w;
            eig = new_eig;
            if iter > 2 && delta < 1e-10 {
                return Ok(eig - shift);
            }
        }
        Err(Error::NoConvergence { iterations: 200_000, residual: f64::NAN })
    }

    /// Largest eigenvalue by power iteration (same tolerances).
    pub fn lambda_max(&self) -> Result<f64> {
        let n = self.n;
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 + 1.0).cos()).collect();
        normalize_vec(&mut v);
        // Shift just enough that the dominant eigenvalue of A + cI is the
        // largest of A; oversized shifts flatten the spectrum and stall.
        let mut lower = f64::INFINITY;
        for i in 0..n {
            let radius: f64 =
                (0..n).filter(|&j| j != i).map(|j| self.get(i, j).abs()).sum();
            lower = lower.min(self.get(i, i) - radius);
        }
        let shift = if lower >= 0.0 { 0.0 } else { -lower + 1.0 };
        let mut eig = 0.0;
        for iter in 0..200_000 {
            let mut w = self.matvec(&v);
            for (wi, vi) in w.iter_mut().zip(&v) {
                *wi += shift * vi;
            }
            normalize_vec(&mut w);
            let aw = self.matvec(&w);
            let new_eig: f64 = aw.iter().zip(&w).map(|(a, b)| a * b).sum();
            let delta = (new_eig - eig).abs();
            v = w;
            eig = new_eig;
            if iter > 2 && delta < 1e-10 {
                return Ok(eig);
            }
        }
        Err(Error::NoConvergence { iterations: 200_000, residual: f64::NAN })
    }
}

/// Cholesky factor of an SPD matrix.
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Solve A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[i * n + k] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= self.l[k * n + i] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        y
    }

    /// Solve L^T x = b; maps N(0, I) draws to N(0, A^{-1}).
    pub fn solve_lt(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                x[i] -= self.l[k * n + i] * x[k];
            }
            x[i] /= self.l[i * n + i];
        }
        x
    }

    pub fn log_det(&self) -> f64 {
        let n = self.n;
        2.0 * (0..n).map(|i| self.l[i * n + i].ln()).sum::<f64>()
    }

    /// Diagonal of A^{-1} via n solves against unit vectors.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                self.solve(&e)[i]
            })
            .collect()
    }
}

fn normalize_vec(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> SymMatrix {
        SymMatrix::from_rows(&[vec![1.5, -0.5], vec![-0.5, 1.5]]).unwrap()
    }

    #[test]
    fn cholesky_solves_and_log_det() {
        let a = fixture();
        let chol = a.cholesky().unwrap();
        assert!((chol.log_det() - 2.0f64.ln()).abs() < 1e-12);
        let x = chol.solve(&[1.0, 0.0]);
        let back = a.matvec(&x);
        assert!((back[0] - 1.0).abs() < 1e-12 && back[1].abs() < 1e-12);
    }

    #[test]
    fn eigen_extremes_of_fixture() {
        let a = fixture();
        assert!((a.lambda_min().unwrap() - 1.0).abs() < 1e-9);
        assert!((a.lambda_max().unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn lambda_min_of_tridiagonal() {
        let n = 50;
        let mut rows = vec![vec![0.0; n]; n];
        for i in 0..n {
            rows[i][i] = 2.0;
            if i + 1 < n {
                rows[i][i + 1] = -0.5;
                rows[i + 1][i] = -0.5;
            }
        }
        let a = SymMatrix::from_rows(&rows).unwrap();
        // Closed form: 2 - cos(pi k/(n+1)) over k=1..n, smallest at k=1.
        let expected = 2.0 - (std::f64::consts::PI / (n as f64 + 1.0)).cos();
        assert!((a.lambda_min().unwrap() - expected).abs() < 1e-8);
    }

    #[test]
    fn non_spd_is_rejected() {
        let a = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(a.cholesky(), Err(Error::NotSpd)));
    }

    #[test]
    fn asymmetric_is_rejected() {
        assert!(SymMatrix::from_rows(&[vec![1.0, 0.1], vec![0.2, 1.0]]).is_err());
    }
}
