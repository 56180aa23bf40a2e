//! CSR storage, assembly helpers and direct sparse solves.
//!
//! Factorisations are delegated to faer's sparse LU (with its fill-reducing
//! column ordering). A CSR matrix `A` is handed to faer as the CSC matrix `Aᵀ`
//! without copying the index arrays, and systems with `A` are solved with the
//! transposed solve.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::ColMut;

use crate::error::{bail, Error, Result};

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMatrix { nrows, ncols, row_ptr: vec![0; nrows + 1], col_idx: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix { nrows: n, ncols: n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect(), values: vec![1.0; n] }
    }

    /// Builds a matrix from `(row, col, value)` entries; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; nrows + 1];
        for &(i, j, _) in triplets {
            if i >= nrows || j >= ncols {
                bail!(Argument, "entry ({i}, {j}) outside a {nrows}x{ncols} matrix");
            }
            counts[i + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(i, j, v) in triplets {
            cols[next[i]] = j;
            vals[next[i]] = v;
            next[i] += 1;
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut perm: Vec<usize> = Vec::new();
        for i in 0..nrows {
            let (a, b) = (counts[i], counts[i + 1]);
            perm.clear();
            perm.extend(a..b);
            perm.sort_by_key(|&k| cols[k]);
            for &k in &perm {
                if col_idx.len() > row_ptr[i] && *col_idx.last().unwrap() == cols[k] {
                    *values.last_mut().unwrap() += vals[k];
                } else {
                    col_idx.push(cols[k]);
                    values.push(vals[k]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseMatrix { nrows, ncols, row_ptr, col_idx, values })
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut trip = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != ncols {
                bail!(Argument, "ragged dense matrix");
            }
            for (j, &v) in r.iter().enumerate() {
                if v != 0.0 {
                    trip.push((i, j, v));
                }
            }
        }
        Self::from_triplets(rows.len(), ncols, &trip)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn same_pattern(&self, other: &SparseMatrix) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
    }

    /// `y = A x`
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    /// `y += alpha A x`
    pub fn matvec_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi += alpha * s;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec(x, &mut y);
        y
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut trip = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                trip.push((j, i, v));
            }
        }
        SparseMatrix::from_triplets(self.ncols, self.nrows, &trip).expect("transpose indices are in range")
    }

    /// `alpha A + beta B` over the union of both patterns.
    pub fn linear_combination(alpha: f64, a: &SparseMatrix, beta: f64, b: &SparseMatrix) -> Result<SparseMatrix> {
        if a.nrows != b.nrows || a.ncols != b.ncols {
            bail!(Argument, "shape mismatch {}x{} vs {}x{}", a.nrows, a.ncols, b.nrows, b.ncols);
        }
        if a.same_pattern(b) {
            let mut out = a.clone();
            for (o, v) in out.values.iter_mut().zip(&b.values) {
                *o = alpha * *o + beta * v;
            }
            return Ok(out);
        }
        let mut trip = Vec::with_capacity(a.nnz() + b.nnz());
        for i in 0..a.nrows {
            trip.extend(a.row(i).map(|(j, v)| (i, j, alpha * v)));
            trip.extend(b.row(i).map(|(j, v)| (i, j, beta * v)));
        }
        SparseMatrix::from_triplets(a.nrows, a.ncols, &trip)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows).map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        out
    }

    /// Symmetric elimination of fixed dofs: rows and columns are zeroed and a
    /// unit diagonal is placed on each fixed dof.
    pub fn eliminate(&self, fixed: &[bool]) -> SparseMatrix {
        let mut trip = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            if fixed[i] {
                trip.push((i, i, 1.0));
                continue;
            }
            for (j, v) in self.row(i) {
                if !fixed[j] {
                    trip.push((i, j, v));
                }
            }
        }
        SparseMatrix::from_triplets(self.nrows, self.ncols, &trip).expect("indices are in range")
    }
}

/// Load correction matching [`SparseMatrix::eliminate`]: subtracts `K g` from
/// the free rows and writes the prescribed values into the fixed rows.
/// `full` is the matrix before elimination; `g` is zero off the fixed set.
pub fn dirichlet_rhs(full: &SparseMatrix, fixed: &[bool], g: &[f64], rhs: &mut [f64]) {
    for i in 0..full.nrows() {
        if fixed[i] {
            rhs[i] = g[i];
            continue;
        }
        let mut s = 0.0;
        for (j, v) in full.row(i) {
            if fixed[j] {
                s += v * g[j];
            }
        }
        rhs[i] -= s;
    }
}

/// Sparse LU factorisation of a square CSR matrix.
#[derive(Clone)]
pub struct LuFactor {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    symbolic: SymbolicLu<usize>,
    lu: Lu<usize, f64>,
}

impl std::fmt::Debug for LuFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LuFactor").field("n", &self.n).field("nnz", &self.col_idx.len()).finish()
    }
}

fn factor_err(e: impl std::fmt::Debug) -> Error {
    Error::Factorization(format!("{e:?}"))
}

impl LuFactor {
    pub fn new(a: &SparseMatrix) -> Result<Self> {
        if a.nrows != a.ncols {
            bail!(Argument, "cannot factor a {}x{} matrix", a.nrows, a.ncols);
        }
        if a.values.iter().any(|v| !v.is_finite()) {
            bail!(Factorization, "matrix has non-finite entries");
        }
        let sym = SymbolicSparseColMatRef::new_checked(a.nrows, a.ncols, &a.row_ptr, None, &a.col_idx);
        let symbolic = SymbolicLu::try_new(sym).map_err(factor_err)?;
        Self::numeric(a, symbolic)
    }

    fn numeric(a: &SparseMatrix, symbolic: SymbolicLu<usize>) -> Result<Self> {
        let sym = SymbolicSparseColMatRef::new_checked(a.nrows, a.ncols, &a.row_ptr, None, &a.col_idx);
        let mat = SparseColMatRef::new(sym, &a.values);
        let lu = Lu::try_new_with_symbolic(symbolic.clone(), mat).map_err(factor_err)?;
        let f = LuFactor { n: a.nrows, row_ptr: a.row_ptr.clone(), col_idx: a.col_idx.clone(), symbolic, lu };
        // a zero pivot shows up as a non-finite solve
        let mut probe = vec![1.0; f.n];
        f.solve_in_place(&mut probe)?;
        Ok(f)
    }

    /// Refactors a matrix, reusing the symbolic analysis when the pattern is unchanged.
    pub fn refactor(&mut self, a: &SparseMatrix) -> Result<()> {
        if a.values.iter().any(|v| !v.is_finite()) {
            bail!(Factorization, "matrix has non-finite entries");
        }
        *self = if a.nrows == self.n && a.row_ptr == self.row_ptr && a.col_idx == self.col_idx {
            Self::numeric(a, self.symbolic.clone())?
        } else {
            Self::new(a)?
        };
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<()> {
        if b.len() != self.n {
            bail!(Argument, "right side has length {}, expected {}", b.len(), self.n);
        }
        let col = ColMut::from_slice_mut(b);
        self.lu.solve_transpose_in_place(col.as_mat_mut());
        if b.iter().any(|v| !v.is_finite()) {
            bail!(Factorization, "singular matrix (non-finite solution)");
        }
        Ok(())
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }
}

/// Solves `A x = b` with a fresh factorisation.
pub fn lu_solve(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    LuFactor::new(a)?.solve(b)
}

/// Blocks of `[[A, Bᵀ], [B, -C]]`.
#[derive(Clone, Debug)]
pub struct SaddleSystem {
    pub a: SparseMatrix,
    pub b: SparseMatrix,
    pub c: SparseMatrix,
}

impl SaddleSystem {
    pub fn new(a: SparseMatrix, b: SparseMatrix, c: SparseMatrix) -> Result<Self> {
        let (n, m) = (a.nrows(), c.nrows());
        if a.ncols() != n || c.ncols() != m || b.nrows() != m || b.ncols() != n {
            bail!(
                Argument,
                "inconsistent saddle blocks: A {}x{}, B {}x{}, C {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            );
        }
        Ok(SaddleSystem { a, b, c })
    }

    pub fn num_primal(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_dual(&self) -> usize {
        self.c.nrows()
    }

    /// The assembled square matrix.
    pub fn matrix(&self) -> SparseMatrix {
        let n = self.num_primal();
        let mut trip = Vec::with_capacity(self.a.nnz() + 2 * self.b.nnz() + self.c.nnz());
        for i in 0..n {
            trip.extend(self.a.row(i).map(|(j, v)| (i, j, v)));
        }
        for i in 0..self.num_dual() {
            for (j, v) in self.b.row(i) {
                trip.push((n + i, j, v));
                trip.push((j, n + i, v));
            }
            trip.extend(self.c.row(i).map(|(j, v)| (n + i, n + j, -v)));
        }
        let dim = n + self.num_dual();
        SparseMatrix::from_triplets(dim, dim, &trip).expect("indices are in range")
    }
}

/// Reusable factorisation of a saddle system.
#[derive(Clone, Debug)]
pub struct SaddleSolver {
    n: usize,
    lu: LuFactor,
}

impl SaddleSolver {
    pub fn new(s: &SaddleSystem) -> Result<Self> {
        Ok(SaddleSolver { n: s.num_primal(), lu: LuFactor::new(&s.matrix())? })
    }

    pub fn solve(&self, f: &[f64], g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rhs = f.to_vec();
        rhs.extend_from_slice(g);
        self.lu.solve_in_place(&mut rhs)?;
        let p = rhs.split_off(self.n);
        Ok((rhs, p))
    }
}

/// One-shot solve of `[[A, Bᵀ], [B, -C]] (u, p) = (f, g)`.
pub fn saddle_solve(s: &SaddleSystem, f: &[f64], g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    SaddleSolver::new(s)?.solve(f, g)
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}
