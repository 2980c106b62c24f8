//! Sparse matrices in compressed-row form and a direct LU solver backed by faer.

use std::io::{self, Write};
use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::LuError;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use nalgebra::DMatrix;
use thiserror::Error;

/// Entries with magnitude at or below this are dropped on compression.
pub const PRUNE_BELOW: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("matrix is {nrows}x{ncols}, expected square")]
    NotSquare { nrows: usize, ncols: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("structurally singular matrix at pivot {index}")]
    StructurallySingular { index: usize },
    #[error("numerically singular matrix near pivot {index}")]
    NumericallySingular { index: usize },
    #[error("sparse backend failure: {0}")]
    Backend(String),
}

/// Compressed sparse row matrix without duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

/// Accumulates `(row, col, value)` triplets; duplicates are summed on build.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self { nrows, ncols, entries: Vec::with_capacity(cap) }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols, "({i}, {j}) out of {}x{}", self.nrows, self.ncols);
        self.entries.push((i, j, v));
    }

    /// Appends every entry of `m` shifted by `(r0, c0)`.
    pub fn push_block(&mut self, r0: usize, c0: usize, m: &SparseMatrix) {
        for (i, j, v) in m.iter() {
            self.push(r0 + i, c0 + j, v);
        }
    }

    pub fn build(mut self) -> SparseMatrix {
        self.entries.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut vals = Vec::with_capacity(self.entries.len());
        let mut k = 0;
        while k < self.entries.len() {
            let (i, j, mut v) = self.entries[k];
            k += 1;
            while k < self.entries.len() && self.entries[k].0 == i && self.entries[k].1 == j {
                v += self.entries[k].2;
                k += 1;
            }
            if v.abs() > PRUNE_BELOW {
                col_idx.push(j);
                vals.push(v);
                row_ptr[i + 1] += 1;
            }
        }
        for i in 0..self.nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMatrix { nrows: self.nrows, ncols: self.ncols, row_ptr, col_idx, vals }
    }
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        TripletBuilder::new(nrows, ncols).build()
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut b = TripletBuilder::new(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            b.push(i, i, v);
        }
        b.build()
    }

    pub fn from_triplets(nrows: usize, ncols: usize, t: &[(usize, usize, f64)]) -> Self {
        let mut b = TripletBuilder::with_capacity(nrows, ncols, t.len());
        for &(i, j, v) in t {
            b.push(i, j, v);
        }
        b.build()
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut b = TripletBuilder::new(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                b.push(i, j, m[(i, j)]);
            }
        }
        b.build()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `y = A x`
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// `y += a A x`
    pub fn mul_vec_add(&self, a: f64, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += a * self.row(i).map(|(j, v)| v * x[j]).sum::<f64>();
        }
    }

    /// `y += a A^T x`
    pub fn mul_transpose_add(&self, a: f64, x: &[f64], y: &mut [f64]) {
        for (i, &xi) in x.iter().enumerate() {
            for (j, v) in self.row(i) {
                y[j] += a * v * xi;
            }
        }
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &j in &self.col_idx {
            counts[j + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut col_idx = vec![0; self.nnz()];
        let mut vals = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                let k = next[j];
                col_idx[k] = i;
                vals[k] = v;
                next[j] += 1;
            }
        }
        SparseMatrix { nrows: self.ncols, ncols: self.nrows, row_ptr: counts, col_idx, vals }
    }

    pub fn scaled(&self, a: f64) -> SparseMatrix {
        let mut m = self.clone();
        m.vals.iter_mut().for_each(|v| *v *= a);
        m
    }

    /// `a A + b B` for matrices of equal shape.
    pub fn lin_comb(a: f64, m1: &SparseMatrix, b: f64, m2: &SparseMatrix) -> SparseMatrix {
        assert_eq!((m1.nrows, m1.ncols), (m2.nrows, m2.ncols));
        let mut t = TripletBuilder::with_capacity(m1.nrows, m1.ncols, m1.nnz() + m2.nnz());
        m1.iter().for_each(|(i, j, v)| t.push(i, j, a * v));
        m2.iter().for_each(|(i, j, v)| t.push(i, j, b * v));
        t.build()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.iter() {
            m[(i, j)] = v;
        }
        m
    }

    /// Largest `|A_ij - A_ji|` relative to `max |A|`.
    pub fn symmetry_defect(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let t = self.transpose();
        let diff = SparseMatrix::lin_comb(1.0, self, -1.0, &t);
        diff.max_abs() / scale
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.symmetry_defect() <= tol
    }

    /// MatrixMarket coordinate export (1-based indices).
    pub fn write_matrix_market(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for (i, j, v) in self.iter() {
            writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
        }
        Ok(())
    }

    fn to_csc(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        // The CSR arrays of A^T are the CSC arrays of A.
        let t = self.transpose();
        (t.row_ptr, t.col_idx, t.vals)
    }
}

/// Sparse LU factorization with partial pivoting and a fill-reducing
/// column ordering.
#[derive(Debug)]
pub struct Factorization {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    n: usize,
    nnz: usize,
    seconds: f64,
}

pub fn factorize(a: &SparseMatrix) -> Result<Factorization, SolveError> {
    if a.nrows != a.ncols {
        return Err(SolveError::NotSquare { nrows: a.nrows, ncols: a.ncols });
    }
    faer::set_global_parallelism(faer::Par::Seq);
    let start = Instant::now();
    let n = a.nrows;
    let (col_ptr, row_idx, vals) = a.to_csc();
    let sym = SymbolicSparseColMatRef::new_checked(n, n, &col_ptr, None, &row_idx);
    let mat = SparseColMatRef::new(sym, &vals);
    let lu = mat.sp_lu().map_err(|e| match e {
        LuError::SymbolicSingular { index } => SolveError::StructurallySingular { index },
        LuError::Generic(g) => SolveError::Backend(format!("{g:?}")),
    })?;
    let f = Factorization { lu, n, nnz: a.nnz(), seconds: start.elapsed().as_secs_f64() };
    f.probe(a)?;
    Ok(f)
}

impl Factorization {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn factor_seconds(&self) -> f64 {
        self.seconds
    }

    // Recovers x = 1 from b = A 1; a zero or tiny pivot shows up as a
    // non-finite or wildly wrong component.
    fn probe(&self, a: &SparseMatrix) -> Result<(), SolveError> {
        if self.n == 0 {
            return Ok(());
        }
        let ones = vec![1.0; self.n];
        let b = a.mul_vec(&ones);
        let x = self.solve_unchecked(&b);
        let mut worst = (0usize, 0.0f64);
        for (i, xi) in x.iter().enumerate() {
            let err = (xi - 1.0).abs();
            if !err.is_finite() {
                return Err(SolveError::NumericallySingular { index: i });
            }
            if err > worst.1 {
                worst = (i, err);
            }
        }
        if worst.1 > 1e6 {
            return Err(SolveError::NumericallySingular { index: worst.0 });
        }
        Ok(())
    }

    fn solve_unchecked(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = faer::Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_in_place(rhs.as_mut());
        (0..self.n).map(|i| rhs[(i, 0)]).collect()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SolveError> {
        if b.len() != self.n {
            return Err(SolveError::Dimension { expected: self.n, got: b.len() });
        }
        let x = self.solve_unchecked(b);
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(SolveError::NumericallySingular { index: i });
        }
        Ok(x)
    }
}

/// Expected pivot sign of each unknown in a symmetric indefinite matrix
/// with a known block structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inertia {
    Positive,
    Negative,
}

/// Symmetric indefinite factorization. The matrix is first equilibrated
/// symmetrically (`S A S` with unit row maxima); a diagonal shift of size
/// `shift` with the prescribed signs then makes it quasi-definite, which
/// admits `LDL^T` under any symmetric ordering. The shift is removed again
/// by iterative refinement against the exact matrix.
pub struct SymmetricFactorization {
    a: SparseMatrix,
    scale: Vec<f64>,
    symbolic: faer::sparse::linalg::cholesky::SymbolicCholesky<usize>,
    values: Vec<f64>,
    n: usize,
    seconds: f64,
    factor_nnz: usize,
    max_refinements: usize,
}

impl std::fmt::Debug for SymmetricFactorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SymmetricFactorization")
            .field("n", &self.n)
            .field("factor_nnz", &self.factor_nnz)
            .field("seconds", &self.seconds)
            .finish()
    }
}

/// Diagonal shift used by [`factorize_symmetric`] on the equilibrated matrix.
pub const QUASI_DEFINITE_SHIFT: f64 = 1e-10;

/// Symmetric Ruiz scaling: `s` such that every row of `S A S` has maximum
/// magnitude close to one. Empty rows keep unit scale.
pub fn symmetric_equilibration(a: &SparseMatrix, sweeps: usize) -> Vec<f64> {
    let mut s = vec![1.0; a.nrows];
    for _ in 0..sweeps {
        let r: Vec<f64> = (0..a.nrows)
            .map(|i| a.row(i).fold(0.0f64, |m, (j, v)| m.max((s[i] * v * s[j]).abs())))
            .collect();
        let mut done = true;
        for (si, ri) in s.iter_mut().zip(&r) {
            if *ri > 0.0 {
                *si /= ri.sqrt();
                done &= (ri - 1.0).abs() < 1e-2;
            }
        }
        if done {
            break;
        }
    }
    s
}

/// Relative residual targeted by the refinement loop.
pub const REFINE_TOL: f64 = 1e-13;

pub fn factorize_symmetric(a: &SparseMatrix, signs: &[Inertia]) -> Result<SymmetricFactorization, SolveError> {
    if a.nrows != a.ncols {
        return Err(SolveError::NotSquare { nrows: a.nrows, ncols: a.ncols });
    }
    let n = a.nrows;
    if signs.len() != n {
        return Err(SolveError::Dimension { expected: n, got: signs.len() });
    }
    faer::set_global_parallelism(faer::Par::Seq);
    let start = Instant::now();
    let scale = symmetric_equilibration(a, 20);
    let sign_i8: Vec<i8> = signs.iter().map(|s| if *s == Inertia::Positive { 1 } else { -1 }).collect();
    let mut attempt = 0;
    let (symbolic, values) = loop {
        let shift = QUASI_DEFINITE_SHIFT * 100f64.powi(attempt);
        match ldlt_shifted(a, &scale, &sign_i8, shift) {
            Ok(f) => break f,
            // Pivot growth under the chosen ordering; a larger shift damps it
            // at the price of a few more refinement steps.
            Err(e) if attempt < 2 => {
                log::debug!("LDL^T with shift {shift:e} failed ({e}); retrying");
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    };
    let factor_nnz = values.len();
    let f = SymmetricFactorization {
        a: a.clone(),
        scale,
        symbolic,
        values,
        n,
        seconds: start.elapsed().as_secs_f64(),
        factor_nnz,
        max_refinements: 30,
    };
    log::debug!("LDL^T: n = {n}, nnz(A) = {}, nnz(L) = {factor_nnz}, {:.2}s", a.nnz(), f.seconds);
    Ok(f)
}

type LdltParts = (faer::sparse::linalg::cholesky::SymbolicCholesky<usize>, Vec<f64>);

fn ldlt_shifted(a: &SparseMatrix, scale: &[f64], sign_i8: &[i8], shift: f64) -> Result<LdltParts, SolveError> {
    use faer::dyn_stack::{MemBuffer, MemStack};
    use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
    use faer::sparse::linalg::cholesky::{factorize_symbolic_cholesky, SymmetricOrdering};

    let n = a.nrows;
    // Upper triangle of each CSR row = lower triangle of each CSC column.
    let mut col_ptr = Vec::with_capacity(n + 1);
    let mut row_idx = Vec::new();
    let mut vals = Vec::new();
    col_ptr.push(0);
    for i in 0..n {
        let mut diag = false;
        for (j, v) in a.row(i) {
            if j < i {
                continue;
            }
            let mut v = scale[i] * v * scale[j];
            if j == i {
                diag = true;
                v += f64::from(sign_i8[i]) * shift;
            } else if j > i && !diag {
                row_idx.push(i);
                vals.push(f64::from(sign_i8[i]) * shift);
                diag = true;
            }
            row_idx.push(j);
            vals.push(v);
        }
        if !diag {
            row_idx.push(i);
            vals.push(f64::from(sign_i8[i]) * shift);
        }
        col_ptr.push(row_idx.len());
    }
    let sym = SymbolicSparseColMatRef::new_checked(n, n, &col_ptr, None, &row_idx);
    let mat = SparseColMatRef::new(sym, &vals);
    let symbolic = factorize_symbolic_cholesky(sym, faer::Side::Lower, SymmetricOrdering::Amd, Default::default())
        .map_err(|e| SolveError::Backend(format!("{e:?}")))?;
    let mut values = vec![0.0; symbolic.len_val()];
    let par = faer::Par::Seq;
    let mut mem = MemBuffer::try_new(symbolic.factorize_numeric_ldlt_scratch::<f64>(par, Default::default()))
        .map_err(|e| SolveError::Backend(format!("{e:?}")))?;
    let reg = LdltRegularization {
        dynamic_regularization_signs: Some(sign_i8),
        dynamic_regularization_delta: shift.max(f64::MIN_POSITIVE),
        dynamic_regularization_epsilon: 1e-3 * shift,
    };
    symbolic
        .factorize_numeric_ldlt(&mut values, mat, faer::Side::Lower, reg, par, MemStack::new(&mut mem), Default::default())
        .map_err(|e| SolveError::Backend(format!("{e:?}")))?;
    Ok((symbolic, values))
}

impl SymmetricFactorization {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of the triangular factor.
    pub fn factor_nnz(&self) -> usize {
        self.factor_nnz
    }

    pub fn factor_seconds(&self) -> f64 {
        self.seconds
    }

    fn apply_inverse(&self, b: &mut [f64]) {
        use faer::dyn_stack::{MemBuffer, MemStack};
        use faer::sparse::linalg::cholesky::LdltRef;
        let par = faer::Par::Seq;
        let ldlt = LdltRef::new(&self.symbolic, &self.values);
        let mut mem = MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(1, par));
        b.iter_mut().zip(&self.scale).for_each(|(v, s)| *v *= s);
        let rhs = faer::MatMut::from_column_major_slice_mut(&mut *b, self.n, 1);
        ldlt.solve_in_place_with_conj(faer::Conj::No, rhs, par, MemStack::new(&mut mem));
        b.iter_mut().zip(&self.scale).for_each(|(v, s)| *v *= s);
    }

    /// Solves `A x = b` with refinement; returns the solution and the number
    /// of refinement steps taken.
    pub fn solve_counted(&self, b: &[f64]) -> Result<(Vec<f64>, usize), SolveError> {
        if b.len() != self.n {
            return Err(SolveError::Dimension { expected: self.n, got: b.len() });
        }
        let nb = norm2(b);
        if nb == 0.0 {
            return Ok((vec![0.0; self.n], 0));
        }
        let mut x = b.to_vec();
        self.apply_inverse(&mut x);
        let mut r = b.to_vec();
        self.a.mul_vec_add(-1.0, &x, &mut r);
        let mut res = norm2(&r) / nb;
        let mut steps = 0;
        while res > REFINE_TOL && steps < self.max_refinements {
            self.apply_inverse(&mut r);
            x.iter_mut().zip(&r).for_each(|(xi, di)| *xi += di);
            r.copy_from_slice(b);
            self.a.mul_vec_add(-1.0, &x, &mut r);
            let next = norm2(&r) / nb;
            steps += 1;
            if !next.is_finite() || next > 0.9 * res {
                res = next;
                break;
            }
            res = next;
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(SolveError::NumericallySingular { index: i });
        }
        if res > 1e-8 {
            return Err(SolveError::Backend(format!("refinement stalled at relative residual {res:.2e}")));
        }
        Ok((x, steps))
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SolveError> {
        self.solve_counted(b).map(|(x, _)| x)
    }
}

/// Outcome of [`gmres`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresInfo {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Restarted GMRES with right preconditioning for `A x = b`, starting from
/// `x`. `apply` computes `A v` and `precond` computes `M^{-1} v`; errors
/// from either abort the iteration.
pub fn gmres<E>(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
    mut precond: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    restart: usize,
    max_iter: usize,
) -> Result<GmresInfo, E> {
    let n = b.len();
    let nb = norm2(b);
    if nb == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(GmresInfo { iterations: 0, relative_residual: 0.0, converged: true });
    }
    let m = restart.max(1);
    let mut total = 0;
    loop {
        let ax = apply(x)?;
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm2(&r);
        if beta <= tol * nb || total >= max_iter {
            return Ok(GmresInfo { iterations: total, relative_residual: beta / nb, converged: beta <= tol * nb });
        }
        let mut v = vec![r.iter().map(|ri| ri / beta).collect::<Vec<f64>>()];
        let mut z: Vec<Vec<f64>> = Vec::new();
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k = 0;
        while k < m && total < max_iter {
            let zk = precond(&v[k])?;
            let mut w = apply(&zk)?;
            z.push(zk);
            // modified Gram-Schmidt
            for (i, vi) in v.iter().enumerate() {
                let hik: f64 = w.iter().zip(vi).map(|(a, b)| a * b).sum();
                h[i][k] = hik;
                w.iter_mut().zip(vi).for_each(|(wj, vj)| *wj -= hik * vj);
            }
            let hn = norm2(&w);
            h[k + 1][k] = hn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let d = h[k][k].hypot(h[k + 1][k]);
            (cs[k], sn[k]) = if d == 0.0 { (1.0, 0.0) } else { (h[k][k] / d, h[k + 1][k] / d) };
            h[k][k] = d;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            total += 1;
            k += 1;
            if g[k].abs() <= tol * nb || hn == 0.0 {
                break;
            }
            v.push(w.iter().map(|wi| wi / hn).collect());
        }
        // back substitution for the Krylov coefficients
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for (yi, zi) in y.iter().zip(&z) {
            x.iter_mut().zip(zi).for_each(|(xj, zj)| *xj += yi * zj);
        }
        debug_assert_eq!(x.len(), n);
    }
}

/// Factorizes and solves in one call.
pub fn solve(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, SolveError> {
    factorize(a)?.solve(b)
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|A x - b| / |b|` (absolute when `b = 0`).
pub fn relative_residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let mut r = a.mul_vec(x);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri -= bi);
    let nb = norm2(b);
    if nb > 0.0 {
        norm2(&r) / nb
    } else {
        norm2(&r)
    }
}
