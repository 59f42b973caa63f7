//! Small dense linear-algebra kernels: dot products, row-major matrices and
//! a cyclic Jacobi symmetric eigensolver.
//!
//! Everything accumulates in `f64` and uses a fixed summation order, so the
//! same input always produces the same output bits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dot product with four interleaved accumulators, combined in a fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix payload length");
        Matrix { rows, cols, data }
    }

    /// Interprets a rank-2 tensor as a matrix.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [r, c] => Ok(Matrix::from_vec(*r, *c, t.to_f64())),
            s => Err(Error::contract(format!("expected a rank-2 tensor, got shape {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.rows, self.cols], &self.data).expect("consistent shape")
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `self · v` written into `out`.
    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), v);
        }
    }
}

/// Eigenvalues of a real symmetric matrix, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricSpectrum {
    pub eigenvalues: Vec<f64>,
    pub source_dim: usize,
}

/// Eigenvalues and (optionally) eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub spectrum: SymmetricSpectrum,
    /// Row-major `n x n`; column `j` is the eigenvector of `eigenvalues[j]`.
    pub vectors: Option<Matrix>,
}

/// Ascending eigenvalues of a square, symmetric rank-2 tensor.
pub fn sym_eig(s: &Tensor) -> Result<SymmetricSpectrum> {
    let m = Matrix::from_tensor(s)?;
    Ok(sym_eig_matrix(&m, false)?.spectrum)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input must be square and symmetric up to `1e-6 * max|S|`; it is
/// symmetrized as `(S + Sᵀ)/2` before solving.
pub fn sym_eig_matrix(s: &Matrix, want_vectors: bool) -> Result<EigenDecomposition> {
    if s.rows != s.cols {
        return Err(Error::contract(format!(
            "eigensolver needs a square matrix, got {}x{}",
            s.rows, s.cols
        )));
    }
    let n = s.rows;
    let scale = s.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut a = s.data.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let (x, y) = (a[i * n + j], a[j * n + i]);
            if (x - y).abs() > 1e-6 * scale {
                return Err(Error::contract(format!(
                    "matrix not symmetric at ({i},{j}): {x} vs {y}"
                )));
            }
            let m = 0.5 * (x + y);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }

    let mut v = if want_vectors {
        let mut id = vec![0.0; n * n];
        for i in 0..n {
            id[i * n + i] = 1.0;
        }
        Some(id)
    } else {
        None
    };

    let frob2: f64 = a.iter().map(|x| x * x).sum();
    let target = (f64::EPSILON * f64::EPSILON) * frob2;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        if off <= target || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - sn * vkq;
                        v[k * n + q] = sn * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = v.map(|v| {
        let mut out = Matrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            for k in 0..n {
                out.data[k * n + dst] = v[k * n + src];
            }
        }
        out
    });
    Ok(EigenDecomposition {
        spectrum: SymmetricSpectrum {
            eigenvalues,
            source_dim: n,
        },
        vectors,
    })
}
