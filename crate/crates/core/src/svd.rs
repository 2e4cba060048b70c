//! Truncated SVD through a Jacobi eigendecomposition of the smaller Gram matrix.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Matrix};

const MAX_SWEEPS: usize = 100;

/// Top-`k` singular triplets. Vectors are stored as columns.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub left_vectors: Matrix,
    pub singular_values: Vec<f64>,
    pub right_vectors: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `Σ σᵢ uᵢ vᵢᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let rows = self.left_vectors.rows();
        let cols = self.right_vectors.rows();
        let k = self.rank();
        let mut scaled = self.left_vectors.clone();
        for i in 0..rows {
            for (j, s) in self.singular_values.iter().enumerate() {
                let v = scaled.get(i, j) * s;
                scaled.set(i, j, v);
            }
        }
        let mut out = vec![0.0; rows * cols];
        gemm(
            rows,
            k,
            cols,
            1.0,
            scaled.data(),
            false,
            self.right_vectors.data(),
            true,
            0.0,
            &mut out,
        );
        Matrix::from_raw(rows, cols, out)
    }
}

/// Eigenvalues (descending) and eigenvectors (columns) of a symmetric matrix
/// by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape(format!("eigensolver needs a square matrix, got {}x{}", n, a.cols())));
    }
    let mut m = a.data().to_vec();
    let mut v = Matrix::identity(n).into_data();
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut converged = n == 1 || total == 0.0;
    let mut sweep = 0;
    while !converged {
        if sweep == MAX_SWEEPS {
            return Err(Error::NotConverged {
                what: "jacobi eigensolver",
                iterations: sweep,
            });
        }
        sweep += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        converged = off <= 1e-15 * total;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        // sign convention: largest-magnitude component positive
        let mut pivot = 0.0f64;
        for k in 0..n {
            let x = v[k * n + src];
            if x.abs() > pivot.abs() {
                pivot = x;
            }
        }
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors.set(k, dst, sign * v[k * n + src]);
        }
    }
    Ok((values, vectors))
}

/// Best rank-`k` approximation factors of `m`.
pub fn truncated_svd(m: &Matrix, k: usize) -> Result<SvdResult> {
    let (rows, cols) = (m.rows(), m.cols());
    let full = rows.min(cols);
    if k == 0 || k > full {
        return Err(Error::arg(format!("target rank {k} outside 1..={full}")));
    }
    let tall = rows >= cols;
    // Gram matrix of the short side
    let n = full;
    let mut gram = vec![0.0; n * n];
    if tall {
        gemm(n, rows, n, 1.0, m.data(), true, m.data(), false, 0.0, &mut gram);
    } else {
        gemm(n, cols, n, 1.0, m.data(), false, m.data(), true, 0.0, &mut gram);
    }
    let (values, vectors) = symmetric_eigen(&Matrix::from_raw(n, n, gram))?;
    let sigma: Vec<f64> = values[..k].iter().map(|&l| l.max(0.0).sqrt()).collect();
    let short = vectors.leading_columns(k);

    // project onto the long side: A v / σ (tall) or Aᵀ u / σ (wide)
    let long_dim = if tall { rows } else { cols };
    let mut long = vec![0.0; long_dim * k];
    if tall {
        gemm(rows, cols, k, 1.0, m.data(), false, short.data(), false, 0.0, &mut long);
    } else {
        gemm(cols, rows, k, 1.0, m.data(), true, short.data(), false, 0.0, &mut long);
    }
    let floor = sigma.first().copied().unwrap_or(0.0) * 1e-13;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut col: Vec<f64> = (0..long_dim).map(|i| long[i * k + j]).collect();
        if sigma[j] > floor && sigma[j] > 0.0 {
            col.iter_mut().for_each(|x| *x /= sigma[j]);
            if orthonormalize(&mut col, &basis) {
                basis.push(col);
                continue;
            }
        }
        basis.push(complete_basis(long_dim, &basis));
    }
    let mut long_m = Matrix::zeros(long_dim, k);
    for (j, col) in basis.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            long_m.set(i, j, x);
        }
    }
    let (left_vectors, right_vectors) = if tall { (long_m, short) } else { (short, long_m) };
    Ok(SvdResult {
        left_vectors,
        singular_values: sigma,
        right_vectors,
    })
}

/// All `min(rows, cols)` singular values, nonincreasing.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(truncated_svd(m, m.rows().min(m.cols()))?.singular_values)
}

/// Two passes of modified Gram-Schmidt against `basis`, then normalize.
/// Returns false when the vector collapses.
fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let start: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..2 {
        for b in basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    }
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-10 * start.max(f64::MIN_POSITIVE) || norm == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

/// First identity column that survives orthogonalization against `basis`.
fn complete_basis(dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    for e in 0..dim {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        if orthonormalize(&mut v, basis) {
            return v;
        }
    }
    unreachable!("basis of size {} cannot span dimension {dim}", basis.len())
}
