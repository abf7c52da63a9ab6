//! Compressed sparse row matrices and a reusable SPD factorization that
//! serves a whole block of right-hand sides.
//!
//! The direct backend is an envelope (profile) Cholesky factorization on a
//! reverse Cuthill-McKee ordering. A Jacobi-preconditioned conjugate
//! gradient solver implements the same [`BlockSolver`] interface for
//! problems where a factorization is not wanted.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{dot, Real};

static FACTORIZATIONS: AtomicUsize = AtomicUsize::new(0);
static RHS_SOLVES: AtomicUsize = AtomicUsize::new(0);

/// Process-wide solver instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolveCounters {
    pub factorizations: usize,
    pub rhs_solves: usize,
}

/// Snapshot of the global counters. Differences between two snapshots are
/// only meaningful when no other thread solves in between.
pub fn counters() -> SolveCounters {
    SolveCounters {
        factorizations: FACTORIZATIONS.load(Ordering::Relaxed),
        rhs_solves: RHS_SOLVES.load(Ordering::Relaxed),
    }
}

/// Row/column structure shared between matrices assembled on the same space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl Pattern {
    /// Builds a pattern from per-row column lists (duplicates allowed).
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut cols in rows {
            cols.sort_unstable();
            cols.dedup();
            debug_assert!(cols.last().map_or(true, |&c| c < n));
            col_idx.extend(cols);
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Position of `(i, j)` in the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_ptr[i];
        self.row(i).binary_search(&j).ok().map(|k| start + k)
    }

    fn union(&self, other: &Pattern) -> Pattern {
        let rows = (0..self.n)
            .map(|i| self.row(i).iter().chain(other.row(i)).copied().collect())
            .collect();
        Pattern::from_rows(rows)
    }
}

/// Square sparse matrix in CSR format with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    pattern: Arc<Pattern>,
    values: Vec<T>,
}

impl<T: Real> CsrMatrix<T> {
    pub fn new(pattern: Arc<Pattern>, values: Vec<T>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::DimensionMismatch {
                expected: pattern.nnz(),
                found: values.len(),
            });
        }
        Ok(Self { pattern, values })
    }

    pub fn zeros(pattern: Arc<Pattern>) -> Self {
        let values = vec![T::zero(); pattern.nnz()];
        Self { pattern, values }
    }

    /// Sums duplicate entries.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, T)]) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for &(i, j, _) in triplets {
            if i >= n || j >= n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: i.max(j) + 1,
                });
            }
            rows[i].push(j);
        }
        let mut m = Self::zeros(Arc::new(Pattern::from_rows(rows)));
        for &(i, j, v) in triplets {
            m.add_at(i, j, v);
        }
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        let pattern = Pattern::from_rows((0..n).map(|i| vec![i]).collect());
        Self {
            pattern: Arc::new(pattern),
            values: vec![T::one(); n],
        }
    }

    pub fn from_dense(rows: &[Vec<T>]) -> Self {
        let n = rows.len();
        let triplets: Vec<_> = rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                r.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != T::zero())
                    .map(move |(j, &v)| (i, j, v))
            })
            .collect();
        Self::from_triplets(n, &triplets).expect("square dense input")
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Iterates `(column, value)` of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let range = self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1];
        self.pattern.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.pattern
            .position(i, j)
            .map_or(T::zero(), |k| self.values[k])
    }

    /// Adds `v` to an entry that must exist in the pattern.
    pub fn add_at(&mut self, i: usize, j: usize, v: T) {
        let k = self
            .pattern
            .position(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside sparsity pattern"));
        self.values[k] += v;
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let n = self.dim();
        let mut d = vec![vec![T::zero(); n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        let mut y = vec![T::zero(); self.dim()];
        self.matvec_into(x, &mut y)?;
        Ok(y)
    }

    pub fn matvec_into(&self, x: &[T], y: &mut [T]) -> Result<()> {
        let n = self.dim();
        for len in [x.len(), y.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, found: len });
            }
        }
        let p = &self.pattern;
        for (i, yi) in y.iter_mut().enumerate() {
            let range = p.row_ptr[i]..p.row_ptr[i + 1];
            *yi = p.col_idx[range.clone()]
                .iter()
                .zip(&self.values[range])
                .fold(T::zero(), |acc, (&j, &a)| acc + a * x[j]);
        }
        Ok(())
    }

    /// `alpha * self + beta * other`. Matrices on the same pattern combine
    /// entrywise; otherwise the patterns are merged.
    pub fn add_scaled(&self, alpha: T, other: &CsrMatrix<T>, beta: T) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        if Arc::ptr_eq(&self.pattern, &other.pattern) || self.pattern == other.pattern {
            let values = self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| alpha * a + beta * b)
                .collect();
            return Ok(Self {
                pattern: self.pattern.clone(),
                values,
            });
        }
        let mut out = Self::zeros(Arc::new(self.pattern.union(&other.pattern)));
        for i in 0..self.dim() {
            for (j, v) in self.row(i) {
                out.add_at(i, j, alpha * v);
            }
            for (j, v) in other.row(i) {
                out.add_at(i, j, beta * v);
            }
        }
        Ok(out)
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        (0..self.dim()).all(|i| self.row(i).all(|(j, v)| (v - self.get(j, i)).abs() <= tol))
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.dim()).map(|i| self.get(i, i)).collect()
    }
}

/// Dense column-major `n x J` block of vectors, one column per ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    nrows: usize,
    ncols: usize,
    data: Vec<T>,
}

pub type RhsBlock<T> = Block<T>;

impl<T: Real> Block<T> {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            data: vec![T::zero(); nrows * ncols],
        }
    }

    pub fn from_columns(columns: Vec<Vec<T>>) -> Result<Self> {
        let ncols = columns.len();
        let nrows = columns.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(nrows * ncols);
        for c in columns {
            if c.len() != nrows {
                return Err(Error::DimensionMismatch { expected: nrows, found: c.len() });
            }
            data.extend(c);
        }
        Ok(Self { nrows, ncols, data })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn col(&self, j: usize) -> &[T] {
        &self.data[j * self.nrows..(j + 1) * self.nrows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [T] {
        &mut self.data[j * self.nrows..(j + 1) * self.nrows]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.nrows.max(1)).take(self.ncols)
    }

    pub fn columns_mut(&mut self) -> std::slice::ChunksExactMut<'_, T> {
        self.data.chunks_exact_mut(self.nrows.max(1))
    }

    pub fn par_columns_mut(&mut self) -> rayon::slice::ChunksExactMut<'_, T> {
        self.data.par_chunks_exact_mut(self.nrows.max(1))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Row-wise mean over columns.
    pub fn column_mean(&self) -> Vec<T> {
        let mut mean = vec![T::zero(); self.nrows];
        for c in self.columns() {
            for (m, &v) in mean.iter_mut().zip(c) {
                *m += v;
            }
        }
        let j = T::count(self.ncols.max(1));
        mean.iter_mut().for_each(|m| *m /= j);
        mean
    }
}

/// Anything that can solve `A X = B` for a block `B`.
pub trait BlockSolver<T>: Send + Sync {
    fn dim(&self) -> usize;

    /// Solves one column in place.
    fn solve_in_place(&self, b: &mut [T]) -> Result<()>;

    fn solve_block(&self, b: &Block<T>) -> Result<Block<T>>
    where
        T: Real,
    {
        if b.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: b.nrows(),
            });
        }
        let mut x = b.clone();
        if x.ncols() > 0 && x.nrows() > 0 {
            x.par_columns_mut().try_for_each(|c| self.solve_in_place(c))?;
        }
        RHS_SOLVES.fetch_add(b.ncols(), Ordering::Relaxed);
        Ok(x)
    }
}

/// Reverse Cuthill-McKee ordering of the matrix graph. Returns `perm` with
/// `perm[new] = old`. Disconnected components are ordered one after another.
pub fn reverse_cuthill_mckee<T: Real>(a: &CsrMatrix<T>) -> Vec<usize> {
    let n = a.dim();
    let p = &a.pattern;
    let degree: Vec<usize> = (0..n).map(|i| p.row(i).iter().filter(|&&j| j != i).count()).collect();
    let mut level = vec![usize::MAX; n];
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        // Pseudo-peripheral start: move to a minimum-degree node of the last
        // BFS level while the eccentricity keeps growing.
        let mut root = seed;
        let mut nodes = bfs_levels(p, root, &mut level);
        loop {
            let depth = level[*nodes.last().unwrap()];
            let candidate = *nodes
                .iter()
                .filter(|&&v| level[v] == depth)
                .min_by_key(|&&v| (degree[v], v))
                .unwrap();
            nodes.iter().for_each(|&v| level[v] = usize::MAX);
            let next = bfs_levels(p, candidate, &mut level);
            let grew = level[*next.last().unwrap()] > depth;
            next.iter().for_each(|&v| level[v] = usize::MAX);
            if !grew {
                break;
            }
            root = candidate;
            nodes = bfs_levels(p, root, &mut level);
        }
        nodes.iter().for_each(|&v| level[v] = usize::MAX);

        let mut head = order.len();
        visited[root] = true;
        order.push(root);
        while head < order.len() {
            let u = order[head];
            head += 1;
            let mut next: Vec<usize> = p.row(u).iter().copied().filter(|&v| !visited[v]).collect();
            next.sort_by_key(|&v| (degree[v], v));
            for v in next {
                visited[v] = true;
                order.push(v);
            }
        }
    }
    order.reverse();
    order
}

/// Breadth-first traversal from `root`, writing distances into `level`.
/// Returns the reached nodes in visiting order.
fn bfs_levels(p: &Pattern, root: usize, level: &mut [usize]) -> Vec<usize> {
    level[root] = 0;
    let mut nodes = vec![root];
    let mut head = 0;
    while head < nodes.len() {
        let u = nodes[head];
        head += 1;
        for &v in p.row(u) {
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                nodes.push(v);
            }
        }
    }
    nodes
}

/// Envelope Cholesky factorization `P A P^T = L L^T`, immutable after construction.
#[derive(Debug, Clone)]
pub struct SpdFactorization<T> {
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    /// First stored column of each row of `L` (permuted numbering).
    first: Vec<usize>,
    /// Offset of row `i` in `values`; row `i` holds columns `first[i]..=i`.
    offset: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> SpdFactorization<T> {
    pub fn new(a: &CsrMatrix<T>) -> Result<Self> {
        Self::with_ordering(a, reverse_cuthill_mckee(a))
    }

    /// Factorization with the identity ordering.
    pub fn natural(a: &CsrMatrix<T>) -> Result<Self> {
        Self::with_ordering(a, (0..a.dim()).collect())
    }

    /// `perm[new] = old`.
    pub fn with_ordering(a: &CsrMatrix<T>, perm: Vec<usize>) -> Result<Self> {
        let n = a.dim();
        if perm.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: perm.len() });
        }
        let mut inv_perm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (new, &old) in perm.iter().enumerate() {
            for (j, _) in a.row(old) {
                let jn = inv_perm[j];
                if jn < new {
                    first[new] = first[new].min(jn);
                } else if jn > new {
                    first[jn] = first[jn].min(new);
                }
            }
        }
        let mut offset = Vec::with_capacity(n + 1);
        offset.push(0);
        for i in 0..n {
            offset.push(offset[i] + (i - first[i] + 1));
        }
        let mut values = vec![T::zero(); offset[n]];
        for (new, &old) in perm.iter().enumerate() {
            for (j, v) in a.row(old) {
                let jn = inv_perm[j];
                if jn <= new {
                    values[offset[new] + jn - first[new]] += v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            let (done, rest) = values.split_at_mut(offset[i]);
            let row = &mut rest[..i - fi + 1];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let lj = &done[offset[j]..offset[j + 1]];
                let s = row[j - fi] - dot(&row[k0 - fi..j - fi], &lj[k0 - fj..j - fj]);
                row[j - fi] = s / lj[j - fj];
            }
            let d = row[i - fi] - dot(&row[..i - fi], &row[..i - fi]);
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::NotSpd { index: perm[i] });
            }
            row[i - fi] = d.sqrt();
        }
        FACTORIZATIONS.fetch_add(1, Ordering::Relaxed);
        Ok(Self {
            perm,
            inv_perm,
            first,
            offset,
            values,
        })
    }

    /// Number of stored entries of `L`.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    pub fn ordering(&self) -> &[usize] {
        &self.perm
    }

    pub fn solve(&self, b: &[T]) -> Result<Vec<T>> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x)?;
        RHS_SOLVES.fetch_add(1, Ordering::Relaxed);
        Ok(x)
    }

    fn row(&self, i: usize) -> &[T] {
        &self.values[self.offset[i]..self.offset[i + 1]]
    }
}

impl<T: Real> BlockSolver<T> for SpdFactorization<T> {
    fn dim(&self) -> usize {
        self.perm.len()
    }

    fn solve_in_place(&self, b: &mut [T]) -> Result<()> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: b.len() });
        }
        let mut z: Vec<T> = self.perm.iter().map(|&old| b[old]).collect();
        // L z = P b
        for i in 0..n {
            let fi = self.first[i];
            let row = self.row(i);
            let s = z[i] - dot(&row[..i - fi], &z[fi..i]);
            z[i] = s / row[i - fi];
        }
        // L^T x = z
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = self.row(i);
            let xi = z[i] / row[i - fi];
            z[i] = xi;
            for (zk, &l) in z[fi..i].iter_mut().zip(&row[..i - fi]) {
                *zk -= l * xi;
            }
        }
        for (i, bi) in b.iter_mut().enumerate() {
            *bi = z[self.inv_perm[i]];
        }
        Ok(())
    }
}

/// Factorizes `a` once for repeated block solves.
pub fn spd_factorize<T: Real>(a: &CsrMatrix<T>) -> Result<SpdFactorization<T>> {
    SpdFactorization::new(a)
}

/// Solves every column of `b` against the same factorization.
pub fn solve_block<T: Real, S: BlockSolver<T> + ?Sized>(solver: &S, b: &Block<T>) -> Result<Block<T>> {
    solver.solve_block(b)
}

/// Jacobi-preconditioned conjugate gradients, one independent iteration per column.
#[derive(Debug, Clone)]
pub struct PcgSolver<T> {
    matrix: CsrMatrix<T>,
    inv_diag: Vec<T>,
    pub rel_tol: T,
    pub max_iter: usize,
}

impl<T: Real> PcgSolver<T> {
    pub fn new(matrix: CsrMatrix<T>) -> Result<Self> {
        let mut inv_diag = Vec::with_capacity(matrix.dim());
        for (i, d) in matrix.diagonal().into_iter().enumerate() {
            if !(d > T::zero()) {
                return Err(Error::NotSpd { index: i });
            }
            inv_diag.push(d.recip());
        }
        let max_iter = 10 * matrix.dim() + 10;
        Ok(Self {
            matrix,
            inv_diag,
            rel_tol: T::lit(1e-10),
            max_iter,
        })
    }
}

impl<T: Real> BlockSolver<T> for PcgSolver<T> {
    fn dim(&self) -> usize {
        self.matrix.dim()
    }

    fn solve_in_place(&self, b: &mut [T]) -> Result<()> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: b.len() });
        }
        let bnorm = dot(b, b).sqrt();
        if bnorm == T::zero() {
            return Ok(());
        }
        let mut x = vec![T::zero(); n];
        let mut r = b.to_vec();
        let mut z: Vec<T> = r.iter().zip(&self.inv_diag).map(|(&r, &d)| r * d).collect();
        let mut p = z.clone();
        let mut ap = vec![T::zero(); n];
        let mut rz = dot(&r, &z);
        for _ in 0..self.max_iter {
            self.matrix.matvec_into(&p, &mut ap)?;
            let pap = dot(&p, &ap);
            if !(pap > T::zero()) {
                return Err(Error::NotSpd { index: 0 });
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            if dot(&r, &r).sqrt() <= self.rel_tol * bnorm {
                break;
            }
            for i in 0..n {
                z[i] = r[i] * self.inv_diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        b.copy_from_slice(&x);
        Ok(())
    }
}
