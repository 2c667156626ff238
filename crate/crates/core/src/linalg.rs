//! Sparse symmetric matrices and a profile (envelope) Cholesky factorization.
//!
//! Matrices store both triangles in compressed rows so products and lookups
//! need no symmetry bookkeeping. Factorizations reorder with reverse
//! Cuthill-McKee before building the envelope, which keeps fill bounded for
//! surface meshes.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Symmetric sparse matrix in compressed-row form with full (upper and lower)
/// storage. Column indices within a row are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Accumulates `(row, col, value)` triplets; duplicates are summed in
/// insertion order so assembly is deterministic.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, cap: usize) -> Self {
        Self {
            dim,
            entries: Vec::with_capacity(cap),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.dim && col < self.dim);
        self.entries.push((row, col, value));
    }

    /// Adds `value` at (row, col) and (col, row); diagonal entries once.
    #[inline]
    pub fn add_sym(&mut self, row: usize, col: usize, value: f64) {
        self.add(row, col, value);
        if row != col {
            self.add(col, row, value);
        }
    }

    /// Builds the matrix, checking symmetry to 1e-12 absolute.
    pub fn build(self) -> Result<SparseSymMatrix> {
        let m = self.build_unchecked();
        m.check_symmetric(1e-12)?;
        Ok(m)
    }

    pub(crate) fn build_unchecked(mut self) -> SparseSymMatrix {
        self.entries.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; self.dim + 1];
        let mut cols = Vec::with_capacity(self.entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseSymMatrix {
            dim: self.dim,
            row_ptr,
            cols,
            vals,
        }
    }
}

impl SparseSymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            row_ptr: vec![0; dim + 1],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut b = TripletBuilder::with_capacity(dim, dim);
        for i in 0..dim {
            b.add(i, i, 1.0);
        }
        b.build_unchecked()
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        let mut b = TripletBuilder::new(m.nrows());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    b.add(i, j, m[(i, j)]);
                }
            }
        }
        b.build()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .copied()
            .zip(self.vals[r].iter().copied())
    }

    /// All stored `(row, col, value)` entries, both triangles.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        (0..self.dim)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// x^T M x
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        (0..self.dim)
            .map(|i| x[i] * self.row(i).map(|(j, v)| v * x[j]).sum::<f64>())
            .sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Max absolute row sum (the induced infinity norm).
    pub fn norm_inf(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `a * self + b * other`
    pub fn linear_combination(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut t = TripletBuilder::with_capacity(self.dim, self.nnz() + other.nnz());
        for (i, j, v) in self.entries() {
            t.add(i, j, a * v);
        }
        for (i, j, v) in other.entries() {
            t.add(i, j, b * v);
        }
        Ok(t.build_unchecked())
    }

    /// Returns `self + shift * I`.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut t = TripletBuilder::with_capacity(self.dim, self.nnz() + self.dim);
        for (i, j, v) in self.entries() {
            t.add(i, j, v);
        }
        for i in 0..self.dim {
            t.add(i, i, shift);
        }
        t.build_unchecked()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (i, j, v) in self.entries() {
            m[(i, j)] = v;
        }
        m
    }

    pub fn check_symmetric(&self, tol: f64) -> Result<()> {
        for (i, j, v) in self.entries() {
            let w = self.get(j, i);
            if (v - w).abs() > tol {
                return Err(Error::Numerical(format!(
                    "matrix not symmetric at ({i}, {j}): {v} vs {w}"
                )));
            }
        }
        Ok(())
    }

    /// Writes the lower triangle in Matrix Market `coordinate real symmetric`
    /// format (1-based indices).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let lower: Vec<(usize, usize, f64)> = self.entries().filter(|&(i, j, _)| j <= i).collect();
        writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
        writeln!(w, "{} {} {}", self.dim, self.dim, lower.len())?;
        for (i, j, v) in lower {
            writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
        }
        Ok(())
    }

    /// Adjacency lists of the sparsity pattern without the diagonal.
    fn pattern(&self) -> Vec<Vec<usize>> {
        (0..self.dim)
            .map(|i| self.row(i).map(|(j, _)| j).filter(|&j| j != i).collect())
            .collect()
    }
}

/// Reverse Cuthill-McKee ordering. Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |start: usize, mark: &mut Vec<usize>, stamp: usize| -> (usize, usize) {
        // returns (last node of last level with min degree, eccentricity)
        let mut queue = VecDeque::new();
        let mut level = vec![0usize; 0];
        queue.push_back((start, 0usize));
        mark[start] = stamp;
        let mut last_level = 0;
        let mut far = start;
        level.push(start);
        while let Some((u, l)) = queue.pop_front() {
            if l > last_level || (l == last_level && degree[u] < degree[far]) {
                last_level = l;
                far = u;
            }
            for &v in &adj[u] {
                if mark[v] != stamp {
                    mark[v] = stamp;
                    queue.push_back((v, l + 1));
                }
            }
        }
        (far, last_level)
    };

    let mut mark = vec![usize::MAX; n];
    let mut stamp = 0usize;
    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        // Pseudo-peripheral start: repeat BFS from the farthest node while
        // the eccentricity grows.
        let mut start = seed;
        let (mut far, mut ecc) = bfs_levels(start, &mut mark, stamp);
        stamp += 1;
        for _ in 0..4 {
            let (f2, e2) = bfs_levels(far, &mut mark, stamp);
            stamp += 1;
            if e2 > ecc {
                start = far;
                far = f2;
                ecc = e2;
            } else {
                start = far;
                break;
            }
        }

        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> = adj[u].iter().copied().filter(|&v| !visited[v]).collect();
            nbrs.sort_by_key(|&v| (degree[v], v));
            for v in nbrs {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

const PIVOT_RTOL: f64 = 1e-12;

/// Envelope (skyline) Cholesky factorization `P A P^T = L L^T` of a
/// symmetric positive definite sparse matrix.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    perm: Vec<usize>,
    first: Vec<usize>,
    row_start: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCholesky {
    pub fn factor(a: &SparseSymMatrix) -> Result<Self> {
        let n = a.dim();
        let perm = reverse_cuthill_mckee(&a.pattern());
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }

        let mut first: Vec<usize> = (0..n).collect();
        for (old_i, &new_i) in inv.iter().enumerate() {
            for (old_j, _) in a.row(old_i) {
                let new_j = inv[old_j];
                if new_j < new_i {
                    first[new_i] = first[new_i].min(new_j);
                }
            }
        }
        let mut row_start = vec![0usize; n + 1];
        for i in 0..n {
            row_start[i + 1] = row_start[i] + (i - first[i] + 1);
        }
        let mut values = vec![0.0; row_start[n]];
        for (old_i, &new_i) in inv.iter().enumerate() {
            for (old_j, v) in a.row(old_i) {
                let new_j = inv[old_j];
                if new_j <= new_i {
                    values[row_start[new_i] + new_j - first[new_i]] = v;
                }
            }
        }

        for i in 0..n {
            let fi = first[i];
            let ri = row_start[i];
            for j in fi..i {
                let fj = first[j];
                let rj = row_start[j];
                let k0 = fi.max(fj);
                let mut s = values[ri + j - fi];
                let a_row = &values[ri + k0 - fi..ri + j - fi];
                let b_row = &values[rj + k0 - fj..rj + j - fj];
                s -= dot(a_row, b_row);
                let ljj = values[rj + j - fj];
                values[ri + j - fi] = s / ljj;
            }
            let row = &values[ri..ri + i - fi];
            let diag = values[ri + i - fi];
            let d = diag - dot(row, row);
            // pivots lost to cancellation signal a numerically singular matrix
            if !(d > PIVOT_RTOL * diag) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: perm[i],
                    value: d,
                });
            }
            values[ri + i - fi] = d.sqrt();
        }

        Ok(Self {
            n,
            perm,
            first,
            row_start,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        // forward: L y = b
        for i in 0..n {
            let fi = self.first[i];
            let ri = self.row_start[i];
            let s = dot(&self.values[ri..ri + i - fi], &y[fi..i]);
            y[i] = (y[i] - s) / self.values[ri + i - fi];
        }
        // backward: L^T x = y (column sweep over rows of L)
        for i in (0..n).rev() {
            let fi = self.first[i];
            let ri = self.row_start[i];
            y[i] /= self.values[ri + i - fi];
            let yi = y[i];
            for (k, l) in self.values[ri..ri + i - fi].iter().enumerate() {
                y[fi + k] -= l * yi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Number of stored factor entries.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimum-norm solution of a symmetric (possibly singular) system through an
/// eigendecomposition; eigenvalues below `rel_tol * max|eig|` are dropped.
pub fn symmetric_pinv_solve(a: &DMatrix<f64>, b: &[f64], rel_tol: f64) -> Vec<f64> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cut = rel_tol * max;
    let n = a.nrows();
    let bv = nalgebra::DVector::from_column_slice(b);
    let proj = eig.eigenvectors.transpose() * bv;
    let mut coef = nalgebra::DVector::zeros(n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam.abs() > cut {
            coef[k] = proj[k] / lam;
        }
    }
    (eig.eigenvectors * coef).iter().copied().collect()
}

/// Moore-Penrose pseudoinverse of a symmetric matrix.
pub fn symmetric_pinv(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cut = rel_tol * max;
    let inv: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| if l.abs() > cut { 1.0 / l } else { 0.0 })
        .collect();
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(inv));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}
