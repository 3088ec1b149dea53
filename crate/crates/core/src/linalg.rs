//! Dense linear-algebra kernel: row-major matrices, thin SVD via one-sided
//! Jacobi, and a symmetric eigensolver (cyclic Jacobi, with shifted power
//! iteration above the Jacobi size cutoff).
//!
//! All operations are pure functions on immutable inputs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dimension above which `sym_eig_max` switches from cyclic Jacobi to
/// shifted power iteration.
const JACOBI_DIM_LIMIT: usize = 512;

const POWER_ITERATION_CAP: usize = 50_000;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    entries: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, entries: Vec<T>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "DenseMatrix::new",
                expected: rows * cols,
                got: entries.len(),
            });
        }
        Ok(DenseMatrix {
            rows,
            cols,
            entries,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            entries: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut entries = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch {
                    context: "DenseMatrix::from_rows",
                    expected: c,
                    got: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        Self::new(r, c, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.entries[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                context: "matmul",
                expected: self.cols,
                got: rhs.rows,
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                for j in 0..rhs.cols {
                    let v = out.get(i, j) + aik * rhs.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "matvec",
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `A^T x` without materializing the transpose.
    pub fn tr_matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.rows {
            return Err(Error::DimensionMismatch {
                context: "tr_matvec",
                expected: self.rows,
                got: x.len(),
            });
        }
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.get(i, j) * xi;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> T {
        self.entries
            .iter()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.entries
            .iter()
            .fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, c: T) -> Self {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|&v| v * c).collect(),
        }
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::DimensionMismatch {
                context: "matrix sub",
                expected: self.rows * self.cols,
                got: rhs.rows * rhs.cols,
            });
        }
        let entries = self
            .entries
            .iter()
            .zip(&rhs.entries)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            entries,
        })
    }

    pub fn map_f64(&self) -> DenseMatrix<f64> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn from_f64_matrix(src: &DenseMatrix<f64>) -> Self {
        DenseMatrix {
            rows: src.rows,
            cols: src.cols,
            entries: src.entries.iter().map(|&v| T::from_f64(v)).collect(),
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

/// Thin SVD factors `X = sum_i sigma_i e_i w_i^T` with
/// `sigma_1 >= ... >= sigma_r > rank_tol * sigma_1`.
#[derive(Clone, Debug)]
pub struct ThinSvd<T> {
    /// Nonincreasing positive singular values, length `rank`.
    pub singular_values: Vec<T>,
    /// `N x r`, orthonormal columns `e_i`.
    pub left_vectors: DenseMatrix<T>,
    /// `d x r`, orthonormal columns `w_i`.
    pub right_vectors: DenseMatrix<T>,
    pub rank: usize,
}

impl<T: Scalar> ThinSvd<T> {
    /// `sum_i sigma_i e_i w_i^T`.
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        let n = self.left_vectors.rows();
        let d = self.right_vectors.rows();
        let mut out = DenseMatrix::zeros(n, d);
        for k in 0..self.rank {
            let s = self.singular_values[k];
            for i in 0..n {
                let c = s * self.left_vectors.get(i, k);
                for j in 0..d {
                    let v = out.get(i, j) + c * self.right_vectors.get(j, k);
                    out.set(i, j, v);
                }
            }
        }
        out
    }
}

/// One-sided Jacobi SVD on the thinner orientation. The sign convention is
/// fixed for reproducibility: the first entry of each right vector with
/// magnitude above 1e-12 is positive.
pub fn thin_svd<T: Scalar>(a: &DenseMatrix<T>, rank_tol: T) -> Result<ThinSvd<T>> {
    if !a.is_finite() {
        return Err(Error::NonFiniteInput { context: "thin_svd" });
    }
    if !(rank_tol > T::zero()) {
        return Err(Error::InvalidArgument("rank_tol must be positive".into()));
    }
    let transposed = a.rows() < a.cols();
    let work = if transposed { a.transpose() } else { a.clone() };
    let m = work.rows();
    let n = work.cols();

    // Columns of g converge to u_j * sigma_j; v accumulates the rotations.
    let mut g: Vec<Vec<T>> = (0..n).map(|j| work.column(j)).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut col = vec![T::zero(); n];
            col[j] = T::one();
            col
        })
        .collect();

    let eps = T::epsilon() * T::from_f64(8.0);
    // Columns below roundoff scale are numerically zero; rotating against
    // them only churns noise and stalls convergence.
    let fro = work.frobenius_norm();
    let col_floor = (T::epsilon() * fro) * (T::epsilon() * fro);
    let mut converged = false;
    for _sweep in 0..64 {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let app = dot(&g[p], &g[p]);
                let aqq = dot(&g[q], &g[q]);
                let apq = dot(&g[p], &g[q]);
                if app <= col_floor || aqq <= col_floor {
                    continue;
                }
                if apq.abs() <= eps * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (T::from_f64(2.0) * apq);
                let t = {
                    let denom = tau.abs() + (T::one() + tau * tau).sqrt();
                    let mag = T::one() / denom;
                    if tau < T::zero() {
                        -mag
                    } else {
                        mag
                    }
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let gp = g[p][i];
                    let gq = g[q][i];
                    g[p][i] = c * gp - s * gq;
                    g[q][i] = s * gp + c * gq;
                }
                for i in 0..n {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged && n > 1 {
        // One-sided Jacobi converges quadratically; hitting the sweep cap
        // means pathologically scaled input.
        return Err(Error::EigNoConvergence {
            iterations: 64,
            best: 0.0,
            residual: f64::NAN,
        });
    }

    let mut sig: Vec<(T, usize)> = (0..n).map(|j| (norm(&g[j]), j)).collect();
    sig.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let sigma1 = sig.first().map_or(T::zero(), |s| s.0);
    if sigma1 == T::zero() {
        return Ok(ThinSvd {
            singular_values: vec![],
            left_vectors: DenseMatrix::zeros(a.rows(), 0),
            right_vectors: DenseMatrix::zeros(a.cols(), 0),
            rank: 0,
        });
    }
    let kept: Vec<(T, usize)> = sig
        .into_iter()
        .filter(|&(s, _)| s > rank_tol * sigma1)
        .collect();
    let r = kept.len();

    // In the working orientation: work = U Sigma V^T.
    let mut u_mat = DenseMatrix::zeros(m, r);
    let mut v_mat = DenseMatrix::zeros(n, r);
    let mut singular_values = Vec::with_capacity(r);
    for (k, &(s, j)) in kept.iter().enumerate() {
        singular_values.push(s);
        for i in 0..m {
            u_mat.set(i, k, g[j][i] / s);
        }
        for i in 0..n {
            v_mat.set(i, k, v[j][i]);
        }
    }

    let (mut left, mut right) = if transposed {
        (v_mat, u_mat)
    } else {
        (u_mat, v_mat)
    };

    let sign_floor = T::from_f64(1e-12);
    for k in 0..r {
        let mut flip = false;
        for i in 0..right.rows() {
            let w = right.get(i, k);
            if w.abs() > sign_floor {
                flip = w < T::zero();
                break;
            }
        }
        if flip {
            for i in 0..right.rows() {
                let v = right.get(i, k);
                right.set(i, k, -v);
            }
            for i in 0..left.rows() {
                let v = left.get(i, k);
                left.set(i, k, -v);
            }
        }
    }

    Ok(ThinSvd {
        singular_values,
        left_vectors: left,
        right_vectors: right,
        rank: r,
    })
}

/// Largest eigenvalue and a unit eigenvector of a symmetric matrix.
///
/// Cyclic Jacobi up to dimension 512, shifted power iteration on
/// `M + ||M||_F I` beyond that.
pub fn sym_eig_max<T: Scalar>(m: &DenseMatrix<T>) -> Result<(T, Vec<T>)> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::DimensionMismatch {
            context: "sym_eig_max",
            expected: n,
            got: m.cols(),
        });
    }
    if !m.is_finite() {
        return Err(Error::NonFiniteInput {
            context: "sym_eig_max",
        });
    }
    let scale = m.max_abs();
    let mut asym = T::zero();
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((m.get(i, j) - m.get(j, i)).abs());
        }
    }
    let sym_tol = T::from_f64(1e-10).max(T::epsilon() * T::from_f64(16.0));
    if asym > sym_tol * T::one().max(scale) {
        return Err(Error::NotSymmetric {
            max_asym: asym.to_f64(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    if n <= JACOBI_DIM_LIMIT {
        jacobi_eig_max(m)
    } else {
        power_iteration_max(m)
    }
}

fn jacobi_eig_max<T: Scalar>(m: &DenseMatrix<T>) -> Result<(T, Vec<T>)> {
    let n = m.rows();
    let mut a = m.clone();
    // Symmetrize so rotations see an exactly symmetric matrix.
    for i in 0..n {
        for j in i + 1..n {
            let v = (a.get(i, j) + a.get(j, i)) * T::from_f64(0.5);
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut v = DenseMatrix::<T>::identity(n);
    let fro = a.frobenius_norm();
    let stop = T::epsilon() * T::from_f64(4.0) * fro.max(T::epsilon());
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += a.get(i, j) * a.get(i, j);
            }
        }
        if off.sqrt() <= stop {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() <= stop * T::from_f64(1e-3) {
                    continue;
                }
                let tau = (a.get(q, q) - a.get(p, p)) / (T::from_f64(2.0) * apq);
                let t = {
                    let denom = tau.abs() + (T::one() + tau * tau).sqrt();
                    let mag = T::one() / denom;
                    if tau < T::zero() {
                        -mag
                    } else {
                        mag
                    }
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut best = 0usize;
    for i in 1..n {
        if a.get(i, i) > a.get(best, best) {
            best = i;
        }
    }
    let lambda = a.get(best, best);
    let mut x = v.column(best);
    let nx = norm(&x);
    if nx > T::zero() {
        for xi in &mut x {
            *xi /= nx;
        }
    }
    Ok((lambda, x))
}

fn power_iteration_max<T: Scalar>(m: &DenseMatrix<T>) -> Result<(T, Vec<T>)> {
    let n = m.rows();
    let mu = m.frobenius_norm();
    // B = M + mu*I is positive semidefinite with lambda_max(B) = lambda_max(M) + mu.
    let bx = |x: &[T]| -> Vec<T> {
        let mut y = m.matvec(x).expect("dims checked");
        for (yi, &xi) in y.iter_mut().zip(x.iter()) {
            *yi += mu * xi;
        }
        y
    };
    let mut rng = crate::rng::SplitMix64::new(0x0EE1_75EE_D001);
    let mut x: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.next_f64() - 0.5))
        .collect();
    let nx = norm(&x);
    for xi in &mut x {
        *xi /= nx;
    }
    let tol = T::from_f64(1e-12).max(T::epsilon() * T::from_f64(32.0));
    let mut theta = T::zero();
    for it in 0..POWER_ITERATION_CAP {
        let y = bx(&x);
        theta = dot(&x, &y);
        let mut resid = T::zero();
        for i in 0..n {
            let d = y[i] - theta * x[i];
            resid += d * d;
        }
        let resid = resid.sqrt();
        if resid <= tol * theta.abs().max(T::one()) && it > 0 {
            return Ok((theta - mu, x));
        }
        let ny = norm(&y);
        if ny == T::zero() {
            // M = -mu*I direction degenerate; x is already an eigenvector of B with 0.
            return Ok((-mu, x));
        }
        x = y.into_iter().map(|v| v / ny).collect();
    }
    Err(Error::EigNoConvergence {
        iterations: POWER_ITERATION_CAP,
        best: (theta - mu).to_f64(),
        residual: f64::NAN,
    })
}

/// Spectral norm `sigma_1(A) = sqrt(lambda_max(A^T A))`, computed on the
/// smaller Gram matrix.
pub fn spectral_norm<T: Scalar>(a: &DenseMatrix<T>) -> Result<T> {
    if !a.is_finite() {
        return Err(Error::NonFiniteInput {
            context: "spectral_norm",
        });
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Ok(T::zero());
    }
    let gram = if a.rows() <= a.cols() {
        a.matmul(&a.transpose())?
    } else {
        a.transpose().matmul(a)?
    };
    let (lambda, _) = sym_eig_max(&gram)?;
    Ok(lambda.max(T::zero()).sqrt())
}
