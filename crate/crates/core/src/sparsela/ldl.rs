use std::sync::Arc;

use super::{minimum_degree, SparseSym};
use crate::error::{Error, Result};

/// Symbolic analysis of a sparsity pattern: fill-reducing permutation,
/// elimination tree and column counts of `L`.
///
/// Independent of numeric values, so one analysis serves every matrix
/// sharing the pattern (e.g. `Q(θ)` across a hyperparameter grid).
#[derive(Debug)]
pub struct Symbolic {
    n: usize,
    perm: Vec<usize>,
    pinv: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    // upper triangle of P Q Pᵀ in CSC, filled through `value_map`
    up_ptr: Vec<usize>,
    up_idx: Vec<usize>,
    value_map: Vec<usize>,
    parent: Vec<Option<usize>>,
    l_ptr: Vec<usize>,
}

impl Symbolic {
    /// Analyzes `q` with a minimum-degree ordering.
    pub fn analyze(q: &SparseSym) -> Arc<Self> {
        Self::with_permutation(q, minimum_degree(q))
    }

    /// Analyzes `q` under the natural (identity) ordering.
    pub fn natural(q: &SparseSym) -> Arc<Self> {
        Self::with_permutation(q, (0..q.dim()).collect())
    }

    pub fn with_permutation(q: &SparseSym, perm: Vec<usize>) -> Arc<Self> {
        let n = q.dim();
        assert_eq!(perm.len(), n, "permutation length");
        let mut pinv = vec![0usize; n];
        for (k, &i) in perm.iter().enumerate() {
            pinv[i] = k;
        }

        // permuted upper triangle
        let mut count = vec![0usize; n + 1];
        for (r, c, _) in q.iter() {
            let (a, b) = (pinv[r], pinv[c]);
            count[a.max(b) + 1] += 1;
        }
        for j in 0..n {
            count[j + 1] += count[j];
        }
        let up_ptr = count.clone();
        let mut next = count;
        let mut up_idx = vec![0usize; q.nnz()];
        let mut value_map = vec![0usize; q.nnz()];
        for (p, (r, c, _)) in q.iter().enumerate() {
            let (a, b) = (pinv[r], pinv[c]);
            let col = a.max(b);
            let slot = next[col];
            next[col] += 1;
            up_idx[slot] = a.min(b);
            value_map[p] = slot;
        }

        // elimination tree and column counts
        let mut parent = vec![None; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for p in up_ptr[k]..up_ptr[k + 1] {
                let mut i = up_idx[p];
                if i < k {
                    while flag[i] != k {
                        if parent[i].is_none() {
                            parent[i] = Some(k);
                        }
                        lnz[i] += 1;
                        flag[i] = k;
                        i = parent[i].expect("parent set above");
                    }
                }
            }
        }
        let mut l_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_ptr[k + 1] = l_ptr[k] + lnz[k];
        }

        Arc::new(Self {
            n,
            perm,
            pinv,
            col_ptr: q.col_ptr().to_vec(),
            row_idx: q.row_idx().to_vec(),
            up_ptr,
            up_idx,
            value_map,
            parent,
            l_ptr,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn pinv(&self) -> &[usize] {
        &self.pinv
    }

    pub(crate) fn l_ptr_at(&self, j: usize) -> usize {
        self.l_ptr[j]
    }

    pub fn factor_nnz(&self) -> usize {
        self.l_ptr[self.n]
    }

    pub fn matches(&self, q: &SparseSym) -> bool {
        q.dim() == self.n && q.col_ptr() == self.col_ptr && q.row_idx() == self.row_idx
    }

    /// Numeric LDLᵀ factorization of `q`, which must share the analyzed
    /// pattern.
    pub fn factorize(self: &Arc<Self>, q: &SparseSym) -> Result<CholFactor> {
        if !self.matches(q) {
            return Err(Error::PatternMismatch);
        }
        let n = self.n;
        let mut ax = vec![0.0; q.nnz()];
        for (p, &v) in q.values().iter().enumerate() {
            ax[self.value_map[p]] = v;
        }

        let nnz = self.factor_nnz();
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut d = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];

        for k in 0..n {
            y[k] = 0.0;
            let mut top = n;
            flag[k] = k;
            for p in self.up_ptr[k]..self.up_ptr[k + 1] {
                let mut i = self.up_idx[p];
                y[i] += ax[p];
                let mut len = 0;
                while flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = match self.parent[i] {
                        Some(pi) => pi,
                        None => break,
                    };
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    pattern[top] = pattern[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            while top < n {
                let i = pattern[top];
                top += 1;
                let yi = y[i];
                y[i] = 0.0;
                let start = self.l_ptr[i];
                let end = start + lnz[i];
                for p in start..end {
                    y[li[p]] -= lx[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                li[end] = k;
                lx[end] = l_ki;
                lnz[i] += 1;
            }
            if !(d[k] > 0.0) || !d[k].is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: self.perm[k], value: d[k] });
            }
        }
        let log_det = d.iter().map(|v| v.ln()).sum();
        Ok(CholFactor { symbolic: Arc::clone(self), li, lx, d, log_det })
    }
}

/// Numeric factor `P Q Pᵀ = L D Lᵀ` with unit lower-triangular `L`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    symbolic: Arc<Symbolic>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    log_det: f64,
}

impl CholFactor {
    /// Convenience: analyze and factorize in one call.
    pub fn new(q: &SparseSym) -> Result<Self> {
        Symbolic::analyze(q).factorize(q)
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn symbolic(&self) -> &Arc<Symbolic> {
        &self.symbolic
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Column `j` of `L` (permuted coordinates) as `(rows, values)`, rows
    /// strictly below the diagonal and sorted ascending.
    pub(crate) fn l_col(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.symbolic.l_ptr[j]..self.symbolic.l_ptr[j + 1];
        (&self.li[r.clone()], &self.lx[r])
    }

    /// Solves `Q x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: b.len() });
        }
        let pinv = &self.symbolic.pinv;
        let mut w = vec![0.0; n];
        for i in 0..n {
            w[pinv[i]] = b[i];
        }
        self.lsolve(&mut w);
        for (wi, di) in w.iter_mut().zip(&self.d) {
            *wi /= di;
        }
        self.ltsolve(&mut w);
        Ok((0..n).map(|i| w[pinv[i]]).collect())
    }

    /// Maps a standard-normal vector `z` to a draw from `N(0, Q⁻¹)`.
    pub fn sample_from_standard(&self, z: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if z.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: z.len() });
        }
        let mut w: Vec<f64> = z.iter().zip(&self.d).map(|(zi, di)| zi / di.sqrt()).collect();
        self.ltsolve(&mut w);
        let pinv = &self.symbolic.pinv;
        Ok((0..n).map(|i| w[pinv[i]]).collect())
    }

    fn lsolve(&self, x: &mut [f64]) {
        for j in 0..self.dim() {
            let xj = x[j];
            if xj != 0.0 {
                let (rows, vals) = self.l_col(j);
                for (&r, &v) in rows.iter().zip(vals) {
                    x[r] -= v * xj;
                }
            }
        }
    }

    fn ltsolve(&self, x: &mut [f64]) {
        for j in (0..self.dim()).rev() {
            let (rows, vals) = self.l_col(j);
            let mut acc = x[j];
            for (&r, &v) in rows.iter().zip(vals) {
                acc -= v * x[r];
            }
            x[j] = acc;
        }
    }

    /// Reassembles `Pᵀ L D Lᵀ P` densely. Test and diagnostics helper.
    pub fn reconstruct_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut l = vec![vec![0.0; n]; n];
        for j in 0..n {
            l[j][j] = 1.0;
            let (rows, vals) = self.l_col(j);
            for (&r, &v) in rows.iter().zip(vals) {
                l[r][j] = v;
            }
        }
        let perm = &self.symbolic.perm;
        let mut out = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in 0..=a {
                let s: f64 = (0..=b).map(|k| l[a][k] * self.d[k] * l[b][k]).sum();
                out[perm[a]][perm[b]] = s;
                out[perm[b]][perm[a]] = s;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsela::TripletBuilder;
    use approx::assert_relative_eq;

    fn tridiag(n: usize) -> SparseSym {
        let mut b = TripletBuilder::new(n);
        for i in 0..n {
            b.add(i, i, 2.0);
            if i + 1 < n {
                b.add(i + 1, i, -1.0);
            }
        }
        b.build()
    }

    fn rw1_structure(n: usize) -> SparseSym {
        let mut b = TripletBuilder::new(n);
        for i in 0..n - 1 {
            b.add(i, i, 1.0);
            b.add(i + 1, i + 1, 1.0);
            b.add(i + 1, i, -1.0);
        }
        b.build()
    }

    #[test]
    fn identity_factor_is_trivial() {
        let f = CholFactor::new(&SparseSym::identity(5)).unwrap();
        assert_eq!(f.d(), &[1.0; 5]);
        assert!(f.lx.is_empty());
        assert_eq!(f.log_det(), 0.0);
    }

    #[test]
    fn tridiagonal_log_det_is_log_four() {
        let f = CholFactor::new(&tridiag(3)).unwrap();
        assert_relative_eq!(f.log_det(), 4f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn tridiagonal_hand_solve() {
        let f = CholFactor::new(&tridiag(3)).unwrap();
        let x = f.solve(&[1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(x[0], 0.75, epsilon = 1e-14);
        assert_relative_eq!(x[1], 0.5, epsilon = 1e-14);
        assert_relative_eq!(x[2], 0.25, epsilon = 1e-14);
        assert_eq!(f.solve(&[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let f = CholFactor::new(&SparseSym::identity(4)).unwrap();
        let b = [1.5, -2.0, 0.25, 9.0];
        assert_eq!(f.solve(&b).unwrap(), b.to_vec());
    }

    #[test]
    fn singular_rw1_reports_pivot() {
        let err = CholFactor::new(&rw1_structure(4)).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }), "{err}");
    }

    #[test]
    fn solve_rejects_wrong_length() {
        let f = CholFactor::new(&SparseSym::identity(3)).unwrap();
        assert!(matches!(f.solve(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn pattern_mismatch_is_reported() {
        let sym = Symbolic::analyze(&tridiag(3));
        assert!(matches!(sym.factorize(&SparseSym::identity(3)), Err(Error::PatternMismatch)));
    }
}
