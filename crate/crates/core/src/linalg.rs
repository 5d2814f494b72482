//! Small numerical building blocks: rank-3 tensors, a compressed sparse row
//! matrix and a preconditioned conjugate gradient solver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};

/// Dense rank-3 tensor stored with the last index fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Self { dims: [d0, d1, d2], data: vec![0.0; d0 * d1 * d2] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(RomError::DimensionMismatch(format!(
                "tensor {:?} needs {} entries, got {}",
                dims,
                dims[0] * dims[1] * dims[2],
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    /// Contraction `out_i = sum_jk T_ijk x_j y_k`.
    pub fn contract(&self, x: &[f64], y: &[f64]) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.dims[1]);
        debug_assert_eq!(y.len(), self.dims[2]);
        let [d0, d1, d2] = self.dims;
        let mut out = DVector::zeros(d0);
        for i in 0..d0 {
            let mut acc = 0.0;
            for j in 0..d1 {
                let row = &self.data[self.offset(i, j, 0)..self.offset(i, j, 0) + d2];
                let inner: f64 = row.iter().zip(y).map(|(t, b)| t * b).sum();
                acc += x[j] * inner;
            }
            out[i] = acc;
        }
        out
    }

    /// Matrix `A_ik = sum_j T_ijk x_j` (the first argument contracted).
    pub fn contract_first(&self, x: &[f64]) -> DMatrix<f64> {
        let [d0, d1, d2] = self.dims;
        let mut out = DMatrix::zeros(d0, d2);
        for i in 0..d0 {
            for j in 0..d1 {
                if x[j] == 0.0 {
                    continue;
                }
                for k in 0..d2 {
                    out[(i, k)] += self.get(i, j, k) * x[j];
                }
            }
        }
        out
    }

    /// Matrix `A_ij = sum_k T_ijk y_k` (the second argument contracted).
    pub fn contract_second(&self, y: &[f64]) -> DMatrix<f64> {
        let [d0, d1, _] = self.dims;
        let mut out = DMatrix::zeros(d0, d1);
        for i in 0..d0 {
            for j in 0..d1 {
                let o = self.offset(i, j, 0);
                out[(i, j)] = self.data[o..o + self.dims[2]].iter().zip(y).map(|(t, b)| t * b).sum();
            }
        }
        out
    }

    /// Leading sub-block `[..n0, ..n1, ..n2]`.
    pub fn leading(&self, n0: usize, n1: usize, n2: usize) -> Tensor3 {
        let mut out = Tensor3::zeros(n0, n1, n2);
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    out.set(i, j, k, self.get(i, j, k));
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor3) -> Tensor3 {
        assert_eq!(self.dims, other.dims);
        Tensor3 { dims: self.dims, data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds the matrix from (row, col, value) triplets, summing duplicates.
    /// Column order inside a row follows first appearance, so the result is
    /// deterministic for a deterministic triplet sequence.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for &(r, c, v) in triplets {
            debug_assert!(r < nrows && c < ncols);
            let row = &mut rows[r];
            if let Some(e) = row.iter_mut().find(|e| e.0 == c) {
                e.1 += v;
            } else {
                row.push((c, v));
            }
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (c, v) in row {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self { nrows, ncols, indptr, indices, values }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        self.indices[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        (0..self.nrows).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn transpose_matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                out[c] += v * yr;
            }
        }
        out
    }

    /// `Aᵀ diag(w) A`, restricted to the first `ncols_out` columns on the left
    /// factor: rows of the result index columns `< ncols_out` of `self`, columns
    /// of the result index all columns of `self`.
    pub fn gram(&self, weights: &[f64], ncols_out: usize) -> Csr {
        let mut trip = Vec::new();
        for r in 0..self.nrows {
            let w = weights[r];
            for (ca, va) in self.row(r) {
                if ca >= ncols_out {
                    continue;
                }
                for (cb, vb) in self.row(r) {
                    trip.push((ca, cb, w * va * vb));
                }
            }
        }
        Csr::from_triplets(ncols_out, self.ncols, &trip)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows).map(|r| self.row(r).find(|e| e.0 == r).map_or(0.0, |e| e.1)).collect()
    }
}

/// Jacobi-preconditioned conjugate gradients on the rows/columns where
/// `active` is true; inactive entries of the solution are held at zero.
pub fn conjugate_gradient(
    a: &Csr,
    rhs: &[f64],
    x0: Option<&[f64]>,
    active: &[bool],
    rel_tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = a.nrows;
    let diag = a.diagonal();
    let mask = |v: &mut [f64]| {
        for (x, &on) in v.iter_mut().zip(active) {
            if !on {
                *x = 0.0;
            }
        }
    };
    let mut b: Vec<f64> = rhs.to_vec();
    mask(&mut b);
    let bnorm = norm2(&b);
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = match x0 {
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    mask(&mut x);
    let ax = a.matvec(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
    mask(&mut r);
    if norm2(&r) <= rel_tol * bnorm {
        return Ok(x);
    }
    let precond = |r: &[f64]| -> Vec<f64> {
        r.iter().zip(&diag).map(|(ri, di)| if *di != 0.0 { ri / di } else { *ri }).collect()
    };
    let mut z = precond(&r);
    mask(&mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        let mut ap = a.matvec(&p);
        mask(&mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(RomError::LinearSolver { iterations: it, residual: norm2(&r) / bnorm });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm2(&r) <= rel_tol * bnorm {
            return Ok(x);
        }
        z = precond(&r);
        mask(&mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(RomError::LinearSolver { iterations: max_iter, residual: norm2(&r) / bnorm })
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Weighted inner product `sum_i w_i a_i b_i`.
#[inline]
pub fn wdot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, x), y)| w * x * y).sum()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
