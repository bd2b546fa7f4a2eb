use nalgebra::{DMatrix, DVector};

use super::CholFactor;
use crate::error::{Error, Result};

/// Linear equality constraints `A x = e` with sparse rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Constraints {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

impl Constraints {
    pub fn none(n: usize) -> Self {
        Self { n, rows: Vec::new(), rhs: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        debug_assert!(row.iter().all(|&(i, _)| i < self.n));
        self.rows.push(row);
        self.rhs.push(rhs);
    }

    /// Adds `Σ_{i ∈ idx} x_i = 0`.
    pub fn push_sum_to_zero(&mut self, idx: impl IntoIterator<Item = usize>) {
        self.push(idx.into_iter().map(|i| (i, 1.0)).collect(), 0.0);
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// `A x - e`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(row, e)| row.iter().map(|&(i, a)| a * x[i]).sum::<f64>() - e)
            .collect()
    }

    fn row_dense(&self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        for &(i, a) in &self.rows[k] {
            v[i] += a;
        }
        v
    }
}

/// Conditioning-by-kriging correction for a Gaussian with precision `Q`
/// (given by its factor) under `A x = e`.
///
/// With `W = Q⁻¹Aᵀ` and `M = A W`, the conditional mean is
/// `x - W M⁻¹ (A x - e)` and the conditional covariance is
/// `Q⁻¹ - W M⁻¹ Wᵀ`.
#[derive(Debug, Clone)]
pub struct Kriging {
    constraints: Constraints,
    // columns of W, one per constraint
    w: Vec<Vec<f64>>,
    m_inv: DMatrix<f64>,
    log_det_m: f64,
}

impl Kriging {
    pub fn new(factor: &CholFactor, constraints: &Constraints) -> Result<Self> {
        if constraints.dim() != factor.dim() {
            return Err(Error::DimensionMismatch { expected: factor.dim(), got: constraints.dim() });
        }
        let k = constraints.len();
        let w = (0..k)
            .map(|c| factor.solve(&constraints.row_dense(c)))
            .collect::<Result<Vec<_>>>()?;
        let mut m = DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                m[(a, b)] = constraints.rows[a].iter().map(|&(i, v)| v * w[b][i]).sum::<f64>();
            }
        }
        let (m_inv, log_det_m) = if k == 0 {
            (m, 0.0)
        } else {
            let scale = (0..k).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
            let chol = m.clone().cholesky().ok_or(Error::RankDeficientConstraints)?;
            let l = chol.l();
            let min_pivot = (0..k).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
            if !(min_pivot > 1e-12 * scale) {
                return Err(Error::RankDeficientConstraints);
            }
            let log_det = (0..k).map(|i| 2.0 * l[(i, i)].ln()).sum();
            (chol.inverse(), log_det)
        };
        Ok(Self { constraints: constraints.clone(), w, m_inv, log_det_m })
    }

    pub fn constraints(&self) -> &Constraints {
        &self.constraints
    }

    /// `log |A Q⁻¹ Aᵀ|`.
    pub fn log_det_aqa(&self) -> f64 {
        self.log_det_m
    }

    /// Projects `x` onto `A x = e`.
    pub fn correct_mean(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        if self.w.is_empty() {
            return out;
        }
        let r = DVector::from_vec(self.constraints.residual(x));
        let coef = &self.m_inv * r;
        for (c, wc) in self.w.iter().enumerate() {
            for (o, wi) in out.iter_mut().zip(wc) {
                *o -= wi * coef[c];
            }
        }
        out
    }

    /// `(W M⁻¹ Wᵀ)_ij`, the amount subtracted from `Cov(x_i, x_j)`.
    pub fn covariance_correction(&self, i: usize, j: usize) -> f64 {
        let k = self.w.len();
        let mut s = 0.0;
        for a in 0..k {
            let wia = self.w[a][i];
            if wia == 0.0 {
                continue;
            }
            for b in 0..k {
                s += wia * self.m_inv[(a, b)] * self.w[b][j];
            }
        }
        s
    }

    /// `Σ_ij a_i b_j (W M⁻¹ Wᵀ)_ij` for dense vectors `a`, `b`.
    pub fn bilinear_correction(&self, a: &[f64], b: &[f64]) -> f64 {
        let k = self.w.len();
        if k == 0 {
            return 0.0;
        }
        let wa: Vec<f64> = self.w.iter().map(|w| dot(w, a)).collect();
        let wb: Vec<f64> = self.w.iter().map(|w| dot(w, b)).collect();
        let mut s = 0.0;
        for p in 0..k {
            for q in 0..k {
                s += wa[p] * self.m_inv[(p, q)] * wb[q];
            }
        }
        s
    }

    /// Sparse version of [`Self::bilinear_correction`] for `a = b`.
    pub fn sparse_quadratic_correction(&self, a: &[(usize, f64)]) -> f64 {
        let k = self.w.len();
        if k == 0 {
            return 0.0;
        }
        let wa: Vec<f64> = self.w.iter().map(|w| a.iter().map(|&(i, v)| v * w[i]).sum()).collect();
        let mut s = 0.0;
        for p in 0..k {
            for q in 0..k {
                s += wa[p] * self.m_inv[(p, q)] * wa[q];
            }
        }
        s
    }

    /// Corrected marginal variances given the unconstrained diagonal.
    pub fn correct_variances(&self, diag: &[f64]) -> Vec<f64> {
        diag.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.covariance_correction(i, i)).max(0.0))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsela::SparseSym;
    use approx::assert_relative_eq;

    #[test]
    fn sum_to_zero_centers_under_identity() {
        let f = CholFactor::new(&SparseSym::identity(2)).unwrap();
        let mut c = Constraints::none(2);
        c.push_sum_to_zero([0, 1]);
        let k = Kriging::new(&f, &c).unwrap();
        let x = k.correct_mean(&[1.0, 3.0]);
        assert_relative_eq!(x[0], -1.0, epsilon = 1e-14);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-14);
        let v = k.correct_variances(&[1.0, 1.0]);
        assert_relative_eq!(v[0], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn empty_constraints_leave_mean_unchanged() {
        let f = CholFactor::new(&SparseSym::identity(3)).unwrap();
        let k = Kriging::new(&f, &Constraints::none(3)).unwrap();
        assert_eq!(k.correct_mean(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
        assert_eq!(k.log_det_aqa(), 0.0);
    }

    #[test]
    fn constraining_every_coordinate_gives_zero() {
        let f = CholFactor::new(&SparseSym::diagonal(&[1.0, 2.0, 5.0])).unwrap();
        let mut c = Constraints::none(3);
        for i in 0..3 {
            c.push(vec![(i, 1.0)], 0.0);
        }
        let k = Kriging::new(&f, &c).unwrap();
        for v in k.correct_mean(&[4.0, -2.0, 7.0]) {
            assert!(v.abs() < 1e-14);
        }
    }

    #[test]
    fn duplicate_rows_are_rank_deficient() {
        let f = CholFactor::new(&SparseSym::identity(3)).unwrap();
        let mut c = Constraints::none(3);
        c.push_sum_to_zero([0, 1, 2]);
        c.push_sum_to_zero([0, 1, 2]);
        assert!(matches!(Kriging::new(&f, &c), Err(Error::RankDeficientConstraints)));
    }
}
