//! Sparse symmetric linear algebra for GMRF precision matrices.
//!
//! Matrices are stored as the lower triangle (diagonal included) in
//! compressed-column form. Factorization is an up-looking LDLᵀ over a
//! fill-reducing permutation computed once per sparsity pattern; the
//! symbolic analysis is shared and every numeric factorization that uses
//! the same pattern reuses it.

mod constraint;
mod ldl;
mod ordering;
mod selinv;

pub use constraint::{Constraints, Kriging};
pub use ldl::{CholFactor, Symbolic};
pub use ordering::minimum_degree;
pub use selinv::SelectedInverse;

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Symmetric sparse matrix, lower triangle in CSC form.
///
/// Row indices are sorted within each column and every column is
/// non-empty only where entries were assembled. Explicit zeros produced by
/// cancellation during assembly are dropped by [`TripletBuilder::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    pub fn from_csc(
        n: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if col_ptr.len() != n + 1 {
            return Err(Error::DimensionMismatch { expected: n + 1, got: col_ptr.len() });
        }
        if row_idx.len() != values.len() || col_ptr[n] != row_idx.len() {
            return Err(Error::InvalidArgument("CSC arrays have inconsistent lengths".into()));
        }
        for j in 0..n {
            if col_ptr[j] > col_ptr[j + 1] {
                return Err(Error::InvalidArgument(format!("column pointer decreases at {j}")));
            }
            let rows = &row_idx[col_ptr[j]..col_ptr[j + 1]];
            for (k, &r) in rows.iter().enumerate() {
                if r < j || r >= n {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({r},{j}) is outside the lower triangle"
                    )));
                }
                if k > 0 && rows[k - 1] >= r {
                    return Err(Error::InvalidArgument(format!("rows unsorted in column {j}")));
                }
            }
        }
        Ok(Self { n, col_ptr, row_idx, values })
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        Self {
            n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: d.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterates stored lower-triangle entries as `(row, col, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |j| {
            (self.col_ptr[j]..self.col_ptr[j + 1]).map(move |p| (self.row_idx[p], j, self.values[p]))
        })
    }

    /// Position of entry `(i, j)` (either triangle) in the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let lo = self.col_ptr[c];
        let rows = &self.row_idx[lo..self.col_ptr[c + 1]];
        rows.binary_search(&r).ok().map(|k| lo + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.get(j, j)).collect()
    }

    pub fn same_pattern(&self, other: &SparseSym) -> bool {
        self.n == other.n && self.col_ptr == other.col_ptr && self.row_idx == other.row_idx
    }

    /// `y = Q x` using the implied symmetric expansion.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "mul_vec dimension");
        let mut y = vec![0.0; self.n];
        for (r, c, v) in self.iter() {
            y[r] += v * x[c];
            if r != c {
                y[c] += v * x[r];
            }
        }
        y
    }

    /// `xᵀ Q x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (r, c, v) in self.iter() {
            let t = v * x[r] * x[c];
            acc += if r == c { t } else { 2.0 * t };
        }
        acc
    }

    /// Dense row-major copy, both triangles filled.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for (r, c, v) in self.iter() {
            m[r][c] = v;
            m[c][r] = v;
        }
        m
    }

    /// Coordinate text dump (`row col value` per line, lower triangle,
    /// 0-based) for cross-checking against external tools.
    pub fn to_coordinate_text(&self) -> String {
        let mut s = format!("% symmetric lower {} {} {}\n", self.n, self.n, self.nnz());
        for (r, c, v) in self.iter() {
            let _ = writeln!(s, "{r} {c} {v:.17e}");
        }
        s
    }
}

/// Accumulates `(row, col, value)` triplets; duplicates are summed.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        Self { n, entries: Vec::new() }
    }

    /// Adds `v` at `(i, j)`; the entry is mirrored into the lower triangle.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        self.entries.push((r, c, v));
    }

    /// Adds a scaled block `scale * B` with `B` given as lower-triangle
    /// entries, placed at diagonal offset `at`.
    pub fn add_block(&mut self, at: usize, block: &SparseSym, scale: f64) {
        for (r, c, v) in block.iter() {
            self.add(at + r, at + c, scale * v);
        }
    }

    pub fn build(mut self) -> SparseSym {
        self.entries.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut col_ptr = vec![0usize; self.n + 1];
        let mut row_idx = Vec::with_capacity(self.entries.len());
        let mut values = Vec::with_capacity(self.entries.len());
        let mut k = 0;
        while k < self.entries.len() {
            let (r, c, mut v) = self.entries[k];
            k += 1;
            while k < self.entries.len() && self.entries[k].0 == r && self.entries[k].1 == c {
                v += self.entries[k].2;
                k += 1;
            }
            if v != 0.0 {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
            }
        }
        for j in 0..self.n {
            col_ptr[j + 1] += col_ptr[j];
        }
        SparseSym { n: self.n, col_ptr, row_idx, values }
    }
}

/// Union of the patterns in `parts`, with all values zero. Entries are
/// kept even if numerically zero; the result is meant as a fixed pattern
/// that later gets filled by position.
pub fn pattern_union(n: usize, parts: &[&[(usize, usize)]]) -> SparseSym {
    let mut all: Vec<(usize, usize)> = parts
        .iter()
        .flat_map(|p| p.iter().map(|&(i, j)| if i >= j { (j, i) } else { (i, j) }))
        .collect();
    // stored as (col, row)
    all.sort_unstable();
    all.dedup();
    let mut col_ptr = vec![0usize; n + 1];
    let mut row_idx = Vec::with_capacity(all.len());
    for &(c, r) in &all {
        row_idx.push(r);
        col_ptr[c + 1] += 1;
    }
    for j in 0..n {
        col_ptr[j + 1] += col_ptr[j];
    }
    let values = vec![0.0; row_idx.len()];
    SparseSym { n, col_ptr, row_idx, values }
}
