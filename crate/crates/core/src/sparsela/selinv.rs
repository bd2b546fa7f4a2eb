use super::CholFactor;

/// Entries of `Q⁻¹` on the pattern of the Cholesky factor, by the
/// Takahashi recursions.
///
/// The filled pattern of `L + Lᵀ` contains the pattern of `Q`, so every
/// covariance needed for a linear predictor built from `Q`'s neighbourhood
/// structure is available here.
#[derive(Debug, Clone)]
pub struct SelectedInverse<'a> {
    factor: &'a CholFactor,
    off: Vec<f64>,
    diag: Vec<f64>,
}

impl<'a> SelectedInverse<'a> {
    pub fn compute(factor: &'a CholFactor) -> Self {
        let n = factor.dim();
        let d = factor.d();
        let nnz = factor.symbolic().factor_nnz();
        let mut off = vec![0.0; nnz];
        let mut diag = vec![0.0; n];
        let mut acc = Vec::new();

        let lookup = |off: &[f64], diag: &[f64], i: usize, k: usize| -> f64 {
            if i == k {
                return diag[i];
            }
            let (r, c) = if i > k { (i, k) } else { (k, i) };
            let (rows, _) = factor.l_col(c);
            let base = factor.symbolic().l_ptr_at(c);
            match rows.binary_search(&r) {
                Ok(pos) => off[base + pos],
                Err(_) => unreachable!("entry ({r},{c}) outside the filled pattern"),
            }
        };

        for j in (0..n).rev() {
            let (rows, vals) = factor.l_col(j);
            let base = factor.symbolic().l_ptr_at(j);
            acc.clear();
            for &i in rows {
                let mut s = 0.0;
                for (&k, &lkj) in rows.iter().zip(vals) {
                    s += lkj * lookup(&off, &diag, i, k);
                }
                acc.push(-s);
            }
            let mut dj = 1.0 / d[j];
            for (a, &v) in acc.iter().enumerate() {
                off[base + a] = v;
                dj -= vals[a] * v;
            }
            diag[j] = dj;
        }
        Self { factor, off, diag }
    }

    /// `diag(Q⁻¹)` in original ordering.
    pub fn diag(&self) -> Vec<f64> {
        let pinv = self.factor.symbolic().pinv();
        (0..self.diag.len()).map(|i| self.diag[pinv[i]]).collect()
    }

    /// `(Q⁻¹)_ij` if `(i, j)` lies on the filled pattern.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let pinv = self.factor.symbolic().pinv();
        let (a, b) = (pinv[i], pinv[j]);
        if a == b {
            return Some(self.diag[a]);
        }
        let (r, c) = if a > b { (a, b) } else { (b, a) };
        let (rows, _) = self.factor.l_col(c);
        rows.binary_search(&r)
            .ok()
            .map(|pos| self.off[self.factor.symbolic().l_ptr_at(c) + pos])
    }
}
