//! Dense complex matrices and the spectral toolkit built on a cyclic Jacobi
//! eigensolver: PSD square roots, pseudo-inverse square roots, partial traces,
//! isometry completion and polar factors.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, MulAssign, Neg, Sub, SubAssign};

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Real scalar the numeric core is generic over.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + NumAssign
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Relative eigenvalue cutoff below which an eigenvalue counts as zero.
pub const RANK_THRESHOLD: f64 = 1e-9;
/// Jacobi stopping criterion, relative to the Frobenius norm.
pub const JACOBI_TOL: f64 = 1e-13;
pub const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not Hermitian (deviation {0:e})")]
    NotHermitian(f64),
    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("columns are not orthonormal (deviation {0:e})")]
    NotIsometry(f64),
    #[error("Jacobi iteration did not converge in {0} sweeps")]
    NoConvergence(usize),
}

/// Dense row-major complex matrix.
#[derive(Clone, PartialEq)]
pub struct CMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> Debug for CMatrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "CMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                let z = self[(r, c)];
                write!(f, "{:+.4}{:+.4}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl<T: Real> CMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix { rows, cols, data: vec![Complex::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex::new(T::one(), T::zero());
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        CMatrix { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(CMatrix { rows, cols, data })
    }

    pub fn from_real_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = Complex::new(d, T::zero());
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[Complex<T>] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<Complex<T>> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, v: &[Complex<T>]) {
        assert_eq!(v.len(), self.rows);
        for (r, &z) in v.iter().enumerate() {
            self[(r, c)] = z;
        }
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn scale(&self, s: Complex<T>) -> Self {
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&z| z * s).collect() }
    }

    pub fn scale_real(&self, s: T) -> Self {
        self.scale(Complex::new(s, T::zero()))
    }

    pub fn trace(&self) -> Complex<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).fold(Complex::<T>::zero(), |a, b| a + b)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> T {
        self.data.iter().map(|z| z.norm()).fold(T::zero(), T::max)
    }

    /// `‖self - other‖_max`, or infinity on shape mismatch.
    pub fn max_diff(&self, other: &Self) -> T {
        if self.shape() != other.shape() {
            return T::infinity();
        }
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(T::zero(), T::max)
    }

    pub fn hermitian_deviation(&self) -> T {
        if !self.is_square() {
            return T::infinity();
        }
        let mut dev = T::zero();
        for r in 0..self.rows {
            for c in r..self.cols {
                dev = dev.max((self[(r, c)] - self[(c, r)].conj()).norm());
            }
        }
        dev
    }

    /// `self† · self` deviation from the identity.
    pub fn isometry_deviation(&self) -> T {
        self.adjoint().matmul(self).max_diff(&Self::identity(self.cols))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Self::zeros(self.rows, other.cols);
        let n = other.cols;
        for r in 0..self.rows {
            let out_row = &mut out.data[r * n..(r + 1) * n];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a.is_zero() {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self† · other` without materializing the adjoint.
    pub fn adjoint_mul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "adjoint_mul shape mismatch");
        let mut out = Self::zeros(self.cols, other.cols);
        let n = other.cols;
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (r, a) in a_row.iter().enumerate() {
                let a = a.conj();
                if a.is_zero() {
                    continue;
                }
                let out_row = &mut out.data[r * n..(r + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · other†` without materializing the adjoint.
    pub fn mul_adjoint(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "mul_adjoint shape mismatch");
        Self::from_fn(self.rows, other.rows, |r, c| {
            self.row(r)
                .iter()
                .zip(other.row(c))
                .fold(Complex::<T>::zero(), |acc, (&a, &b)| acc + a * b.conj())
        })
    }

    pub fn mul_vec(&self, v: &[Complex<T>]) -> Vec<Complex<T>> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).fold(Complex::<T>::zero(), |acc, (&a, &b)| acc + a * b))
            .collect()
    }

    /// Rows `rows` of `self`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        CMatrix { rows: rows.len(), cols: self.cols, data }
    }

    pub fn select_cols(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |r, c| self[(r, cols[c])])
    }

    /// Vertical concatenation.
    pub fn vstack(blocks: &[&Self]) -> Result<Self, LinalgError> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(LinalgError::Dimension(format!("vstack: {} vs {} columns", b.cols, cols)));
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(CMatrix { rows, cols, data })
    }

    /// Horizontal concatenation.
    pub fn hstack(blocks: &[&Self]) -> Result<Self, LinalgError> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(LinalgError::Dimension(format!("hstack: {} vs {} rows", b.rows, rows)));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Self::zeros(rows, cols);
        let mut off = 0;
        for b in blocks {
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + b.cols].copy_from_slice(b.row(r));
            }
            off += b.cols;
        }
        Ok(out)
    }

    pub fn map_scalar<U: Real>(&self, f: impl Fn(T) -> U) -> CMatrix<U> {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| Complex::new(f(z.re), f(z.im))).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for CMatrix<T> {
    type Output = Complex<T>;
    fn index(&self, (r, c): (usize, usize)) -> &Complex<T> {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for CMatrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex<T> {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl<T: Real> Add for &CMatrix<T> {
    type Output = CMatrix<T>;
    fn add(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl<T: Real> Sub for &CMatrix<T> {
    type Output = CMatrix<T>;
    fn sub(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl<T: Real> AddAssign<&CMatrix<T>> for CMatrix<T> {
    fn add_assign(&mut self, rhs: &CMatrix<T>) {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

impl<T: Real> SubAssign<&CMatrix<T>> for CMatrix<T> {
    fn sub_assign(&mut self, rhs: &CMatrix<T>) {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a -= b;
        }
    }
}

impl<T: Real> MulAssign<T> for CMatrix<T> {
    fn mul_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }
}

impl<T: Real> Mul for &CMatrix<T> {
    type Output = CMatrix<T>;
    fn mul(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        self.matmul(rhs)
    }
}

impl<T: Real> Neg for &CMatrix<T> {
    type Output = CMatrix<T>;
    fn neg(self) -> CMatrix<T> {
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| -z).collect() }
    }
}

impl<T: Real + Serialize> Serialize for CMatrix<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<[T; 2]>> = (0..self.rows)
            .map(|r| self.row(r).iter().map(|z| [z.re, z.im]).collect())
            .collect();
        rows.serialize(serializer)
    }
}

impl<'de, T: Real + Deserialize<'de>> Deserialize<'de> for CMatrix<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows: Vec<Vec<[T; 2]>> = Vec::deserialize(deserializer)?;
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        let n = rows.len();
        let data = rows.into_iter().flatten().map(|[re, im]| Complex::new(re, im)).collect();
        Ok(CMatrix { rows: n, cols, data })
    }
}

/// Spectral decomposition of a Hermitian matrix.
#[derive(Clone)]
pub struct HermitianEig<T> {
    /// Ascending.
    pub eigenvalues: Vec<T>,
    /// Eigenvectors as columns, in eigenvalue order.
    pub vectors: CMatrix<T>,
}

impl<T: Real> Debug for HermitianEig<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HermitianEig")
            .field("eigenvalues", &self.eigenvalues)
            .field("vectors", &self.vectors)
            .finish()
    }
}

impl<T: Real> HermitianEig<T> {
    pub fn lambda_max_abs(&self) -> T {
        self.eigenvalues.iter().map(|l| l.abs()).fold(T::zero(), T::max)
    }

    /// `V f(Λ) V†`.
    pub fn apply(&self, f: impl Fn(T) -> T) -> CMatrix<T> {
        let n = self.eigenvalues.len();
        let fl: Vec<T> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut scaled = self.vectors.clone();
        for r in 0..n {
            for c in 0..n {
                scaled[(r, c)] *= fl[c];
            }
        }
        scaled.mul_adjoint(&self.vectors)
    }

    /// Indices of eigenvalues above the global rank threshold.
    pub fn support(&self) -> Vec<usize> {
        let cut = T::lit(RANK_THRESHOLD) * self.lambda_max_abs();
        (0..self.eigenvalues.len()).filter(|&i| self.eigenvalues[i] > cut).collect()
    }

    pub fn rank(&self) -> usize {
        self.support().len()
    }
}

/// Cyclic Jacobi diagonalization of a Hermitian matrix.
pub fn hermitian_eig<T: Real>(h: &CMatrix<T>, tol: T) -> Result<HermitianEig<T>, LinalgError> {
    if !h.is_square() {
        return Err(LinalgError::Dimension(format!("eig of {}x{} matrix", h.rows, h.cols)));
    }
    let n = h.rows;
    let dev = h.hermitian_deviation();
    if dev > tol * T::one().max(h.max_abs()) {
        return Err(LinalgError::NotHermitian(dev.to_f64().unwrap_or(f64::NAN)));
    }
    let mut a = h.clone();
    for i in 0..n {
        a[(i, i)] = Complex::new(a[(i, i)].re, T::zero());
    }
    let mut v = CMatrix::<T>::identity(n);
    let fro = h.frobenius_norm();
    let stop = T::lit(JACOBI_TOL) * fro;
    let off_norm = |a: &CMatrix<T>| {
        let mut s = T::zero();
        for r in 0..n {
            for c in 0..n {
                if r != c {
                    s += a[(r, c)].norm_sqr();
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off_norm(&a) > stop {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence(JACOBI_MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let z = a[(p, q)];
                let mag = z.norm();
                if mag <= T::min_positive_value() {
                    continue;
                }
                let phase = z / mag;
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let theta = (aqq - app) / (T::lit(2.0) * mag);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                // G = [[c, s], [-s e^{-iφ}, c e^{-iφ}]] with e^{iφ} = phase.
                let pc = phase.conj();
                let g = [
                    [Complex::new(c, T::zero()), Complex::new(s, T::zero())],
                    [pc * (-s), pc * c],
                ];
                rotate(&mut a, &mut v, p, q, &g);
            }
        }
    }
    let mut pairs: Vec<(T, usize)> = (0..n).map(|i| (a[(i, i)].re, i)).collect();
    pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(std::cmp::Ordering::Equal).then(x.1.cmp(&y.1)));
    let eigenvalues = pairs.iter().map(|p| p.0).collect();
    let order: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    Ok(HermitianEig { eigenvalues, vectors: v.select_cols(&order) })
}

/// Applies `A ← G† A G`, `V ← V G` in the (p, q) plane.
fn rotate<T: Real>(a: &mut CMatrix<T>, v: &mut CMatrix<T>, p: usize, q: usize, g: &[[Complex<T>; 2]; 2]) {
    let n = a.rows;
    for k in 0..n {
        let hp = a[(k, p)];
        let hq = a[(k, q)];
        a[(k, p)] = hp * g[0][0] + hq * g[1][0];
        a[(k, q)] = hp * g[0][1] + hq * g[1][1];
    }
    for k in 0..n {
        let hp = a[(p, k)];
        let hq = a[(q, k)];
        a[(p, k)] = g[0][0].conj() * hp + g[1][0].conj() * hq;
        a[(q, k)] = g[0][1].conj() * hp + g[1][1].conj() * hq;
    }
    a[(p, q)] = Complex::zero();
    a[(q, p)] = Complex::zero();
    a[(p, p)] = Complex::new(a[(p, p)].re, T::zero());
    a[(q, q)] = Complex::new(a[(q, q)].re, T::zero());
    for k in 0..n {
        let vp = v[(k, p)];
        let vq = v[(k, q)];
        v[(k, p)] = vp * g[0][0] + vq * g[1][0];
        v[(k, q)] = vp * g[0][1] + vq * g[1][1];
    }
}

fn eig_psd<T: Real>(e: &CMatrix<T>) -> Result<HermitianEig<T>, LinalgError> {
    let eig = hermitian_eig(e, T::lit(1e-8))?;
    let lmax = eig.lambda_max_abs();
    if let Some(&lmin) = eig.eigenvalues.first() {
        if lmin < -T::lit(RANK_THRESHOLD) * lmax {
            return Err(LinalgError::NotPsd(lmin.to_f64().unwrap_or(f64::NAN)));
        }
    }
    Ok(eig)
}

/// Square root of a PSD matrix. Eigenvalues under the rank threshold are
/// treated as zero; their roots would otherwise turn rounding noise of order
/// `ε` into errors of order `√ε`.
pub fn sqrt_psd<T: Real>(e: &CMatrix<T>) -> Result<CMatrix<T>, LinalgError> {
    let eig = eig_psd(e)?;
    let cut = T::lit(RANK_THRESHOLD) * eig.lambda_max_abs();
    Ok(eig.apply(|l| if l > cut { l.sqrt() } else { T::zero() }))
}

/// Moore-Penrose pseudo-inverse of the square root of a PSD matrix.
pub fn pinv_sqrt_psd<T: Real>(e: &CMatrix<T>) -> Result<CMatrix<T>, LinalgError> {
    let eig = eig_psd(e)?;
    let cut = T::lit(RANK_THRESHOLD) * eig.lambda_max_abs();
    Ok(eig.apply(|l| if l > cut { T::one() / l.sqrt() } else { T::zero() }))
}

/// Rank under the global threshold, for a Hermitian matrix.
pub fn rank_psd<T: Real>(e: &CMatrix<T>) -> Result<usize, LinalgError> {
    Ok(hermitian_eig(e, T::lit(1e-8))?.rank())
}

pub fn kron<T: Real>(a: &CMatrix<T>, b: &CMatrix<T>) -> CMatrix<T> {
    let (br, bc) = b.shape();
    CMatrix::from_fn(a.rows * br, a.cols * bc, |r, c| a[(r / br, c / bc)] * b[(r % br, c % bc)])
}

/// Splits a flat index into per-factor digits (factor 0 most significant).
fn digits(mut idx: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for (i, &d) in dims.iter().enumerate().rev() {
        out[i] = idx % d;
        idx /= d;
    }
    out
}

fn flat(digits: &[usize], dims: &[usize], which: &[usize]) -> usize {
    which.iter().fold(0, |acc, &i| acc * dims[i] + digits[i])
}

/// Traces out every tensor factor not listed in `keep`. Factor 0 is the most
/// significant; kept factors retain their relative order.
pub fn partial_trace<T: Real>(
    m: &CMatrix<T>,
    dims: &[usize],
    keep: &[usize],
) -> Result<CMatrix<T>, LinalgError> {
    let total: usize = dims.iter().product();
    if !m.is_square() || m.rows != total {
        return Err(LinalgError::Dimension(format!(
            "partial_trace: {}x{} matrix with dims {dims:?}",
            m.rows, m.cols
        )));
    }
    if let Some(&bad) = keep.iter().find(|&&k| k >= dims.len()) {
        return Err(LinalgError::Dimension(format!("partial_trace: keep index {bad} out of range")));
    }
    let mut keep_sorted = keep.to_vec();
    keep_sorted.sort_unstable();
    keep_sorted.dedup();
    let traced: Vec<usize> = (0..dims.len()).filter(|i| !keep_sorted.contains(i)).collect();
    let dk: usize = keep_sorted.iter().map(|&i| dims[i]).product();
    let dt: usize = traced.iter().map(|&i| dims[i]).product();
    // groups[t] lists (kept index, full index) for each traced index t.
    let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::with_capacity(dk); dt];
    for idx in 0..total {
        let d = digits(idx, dims);
        groups[flat(&d, dims, &traced)].push((flat(&d, dims, &keep_sorted), idx));
    }
    let mut out = CMatrix::zeros(dk, dk);
    for g in &groups {
        for &(ka, a) in g {
            for &(kb, b) in g {
                out[(ka, kb)] += m[(a, b)];
            }
        }
    }
    Ok(out)
}

/// Permutation matrix `P` with `P (⊗_i x_i) = ⊗_i x_{order[i]}`: output factor
/// `i` is input factor `order[i]`.
pub fn permutation_matrix<T: Real>(dims: &[usize], order: &[usize]) -> CMatrix<T> {
    let total: usize = dims.iter().product();
    let out_dims: Vec<usize> = order.iter().map(|&i| dims[i]).collect();
    let mut p = CMatrix::zeros(total, total);
    for idx in 0..total {
        let d = digits(idx, dims);
        let od: Vec<usize> = order.iter().map(|&i| d[i]).collect();
        let out = od.iter().zip(&out_dims).fold(0, |acc, (&x, &n)| acc * n + x);
        p[(out, idx)] = Complex::new(T::one(), T::zero());
    }
    p
}

/// Completes an isometry to a unitary whose leading columns equal `v`.
///
/// Standard basis vectors are orthogonalized (twice) against the current
/// columns; at each step the candidate with the largest residual is taken,
/// ties broken by the lowest index.
pub fn extend_isometry<T: Real>(v: &CMatrix<T>) -> Result<CMatrix<T>, LinalgError> {
    let (d, r) = v.shape();
    if r > d {
        return Err(LinalgError::Dimension(format!("extend_isometry: {d}x{r} is wide")));
    }
    let dev = v.isometry_deviation();
    if dev > T::lit(1e-8) {
        return Err(LinalgError::NotIsometry(dev.to_f64().unwrap_or(f64::NAN)));
    }
    let mut cols: Vec<Vec<Complex<T>>> = (0..r).map(|c| v.column(c)).collect();
    // residual[j] = ‖(I - QQ†) e_j‖².
    let mut residual: Vec<T> = (0..d).map(|j| T::one() - (0..r).map(|c| v[(j, c)].norm_sqr()).sum::<T>()).collect();
    let mut used = vec![false; d];
    while cols.len() < d {
        let mut best = None;
        for j in 0..d {
            if used[j] {
                continue;
            }
            if best.is_none_or(|b: usize| residual[j] > residual[b]) {
                best = Some(j);
            }
        }
        let j = best.expect("fewer columns than dimension leaves a candidate");
        used[j] = true;
        let mut w = vec![Complex::zero(); d];
        w[j] = Complex::new(T::one(), T::zero());
        for _ in 0..2 {
            for q in &cols {
                let proj = q.iter().zip(&w).fold(Complex::<T>::zero(), |acc, (a, b)| acc + a.conj() * b);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= proj * qi;
                }
            }
        }
        let norm = w.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
        if norm < T::lit(1e-6) {
            continue;
        }
        for wi in &mut w {
            *wi /= norm;
        }
        for (k, res) in residual.iter_mut().enumerate() {
            *res -= w[k].norm_sqr();
        }
        cols.push(w);
    }
    let mut out = CMatrix::zeros(d, d);
    for (c, col) in cols.iter().enumerate() {
        out.set_column(c, col);
    }
    Ok(out)
}

/// Partial isometry `V` of the polar decomposition `L = V √(L†L)`, computed
/// from whichever Gram matrix is smaller.
pub fn polar_partial_isometry<T: Real>(l: &CMatrix<T>) -> Result<CMatrix<T>, LinalgError> {
    if l.rows <= l.cols {
        let g = l.mul_adjoint(l);
        Ok(pinv_sqrt_psd(&g)?.matmul(l))
    } else {
        let g = l.adjoint_mul(l);
        Ok(l.matmul(&pinv_sqrt_psd(&g)?))
    }
}

/// Orthonormal basis (as columns) of the column space of `m`, by pivoted
/// Gram-Schmidt with reorthogonalization. Columns whose residual falls below
/// `RANK_THRESHOLD`-scaled norm are treated as dependent.
pub fn column_space<T: Real>(m: &CMatrix<T>) -> CMatrix<T> {
    let (d, n) = m.shape();
    let mut cand: Vec<Vec<Complex<T>>> = (0..n).map(|c| m.column(c)).collect();
    let scale = cand
        .iter()
        .map(|c| c.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt())
        .fold(T::zero(), T::max);
    let cut = T::lit(1e-7) * scale;
    let mut basis: Vec<Vec<Complex<T>>> = Vec::new();
    let mut done = vec![false; n];
    loop {
        let mut best: Option<(usize, T)> = None;
        for (j, c) in cand.iter().enumerate() {
            if done[j] {
                continue;
            }
            let nrm = c.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
            if best.is_none_or(|(_, b)| nrm > b) {
                best = Some((j, nrm));
            }
        }
        let Some((j, nrm)) = best else { break };
        if nrm <= cut || basis.len() == d {
            break;
        }
        done[j] = true;
        let mut w = cand[j].clone();
        for q in &basis {
            let proj = q.iter().zip(&w).fold(Complex::<T>::zero(), |acc, (a, b)| acc + a.conj() * b);
            for (wi, qi) in w.iter_mut().zip(q) {
                *wi -= proj * qi;
            }
        }
        let nw = w.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
        for wi in &mut w {
            *wi /= nw;
        }
        for (k, c) in cand.iter_mut().enumerate() {
            if done[k] {
                continue;
            }
            let proj = w.iter().zip(c.iter()).fold(Complex::<T>::zero(), |acc, (a, b)| acc + a.conj() * b);
            for (ci, wi) in c.iter_mut().zip(&w) {
                *ci -= proj * wi;
            }
        }
        basis.push(w);
    }
    let mut out = CMatrix::zeros(d, basis.len());
    for (c, col) in basis.iter().enumerate() {
        out.set_column(c, col);
    }
    out
}

/// Unitary `U` with `b = U a`, given `a†a = b†b`. Both must have the same
/// shape. The map `a x ↦ b x` is fixed on Ran(a) and completed on the
/// orthogonal complements with [`extend_isometry`]. Only the smaller Gram
/// matrix is diagonalized.
pub fn unitary_relating<T: Real>(a: &CMatrix<T>, b: &CMatrix<T>) -> Result<CMatrix<T>, LinalgError> {
    if a.shape() != b.shape() {
        return Err(LinalgError::Dimension(format!(
            "unitary_relating: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let scale = T::one().max(a.max_abs() * a.max_abs());
    let (qa, qb) = if a.rows <= a.cols {
        // a = U Σ W†: Ran(a) has basis U, and b W Σ^{-1} = b a† U Σ^{-2}.
        let eig = hermitian_eig(&a.mul_adjoint(a), T::lit(1e-8))?;
        let support = eig.support();
        let u = eig.vectors.select_cols(&support);
        let inv: Vec<T> = support.iter().map(|&i| T::one() / eig.eigenvalues[i]).collect();
        let qb = scale_columns(b.mul_adjoint(a).matmul(&u), &inv);
        (u, qb)
    } else {
        let eig = hermitian_eig(&a.adjoint_mul(a), T::lit(1e-8))?;
        let support = eig.support();
        let w = eig.vectors.select_cols(&support);
        let inv: Vec<T> = support.iter().map(|&i| T::one() / eig.eigenvalues[i].sqrt()).collect();
        (scale_columns(a.matmul(&w), &inv), scale_columns(b.matmul(&w), &inv))
    };
    let dev = qb.isometry_deviation();
    if dev > T::lit(1e-8) * scale {
        return Err(LinalgError::NotIsometry(dev.to_f64().unwrap_or(f64::NAN)));
    }
    let ua = extend_isometry(&orthonormalize(&qa))?;
    let ub = extend_isometry(&orthonormalize(&qb))?;
    Ok(ub.mul_adjoint(&ua))
}

fn scale_columns<T: Real>(mut m: CMatrix<T>, s: &[T]) -> CMatrix<T> {
    for r in 0..m.rows {
        for (c, &x) in s.iter().enumerate() {
            m[(r, c)] *= x;
        }
    }
    m
}

/// One round of modified Gram-Schmidt on nearly orthonormal columns, to
/// bring rounding error down before [`extend_isometry`] checks them.
fn orthonormalize<T: Real>(q: &CMatrix<T>) -> CMatrix<T> {
    let mut out = q.clone();
    for c in 0..q.cols {
        let mut w = out.column(c);
        for p in 0..c {
            let qp = out.column(p);
            let proj = qp.iter().zip(&w).fold(Complex::<T>::zero(), |acc, (a, b)| acc + a.conj() * b);
            for (wi, qi) in w.iter_mut().zip(&qp) {
                *wi -= proj * qi;
            }
        }
        let n = w.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
        for wi in &mut w {
            *wi /= n;
        }
        out.set_column(c, &w);
    }
    out
}

/// Haar-random unitary from a seeded complex Gaussian matrix: QR by
/// Gram-Schmidt with the phases of R's diagonal absorbed.
pub fn haar_unitary<T: Real>(dim: usize, seed: u64) -> CMatrix<T> {
    let g = gaussian_matrix::<T>(dim, dim, seed);
    let mut q: Vec<Vec<Complex<T>>> = Vec::with_capacity(dim);
    for c in 0..dim {
        let mut w = g.column(c);
        for _ in 0..2 {
            for p in &q {
                let proj = p.iter().zip(&w).fold(Complex::<T>::zero(), |acc, (a, b)| acc + a.conj() * b);
                for (wi, pi) in w.iter_mut().zip(p) {
                    *wi -= proj * pi;
                }
            }
        }
        let n = w.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
        for wi in &mut w {
            *wi /= n;
        }
        q.push(w);
    }
    let mut out = CMatrix::zeros(dim, dim);
    for (c, col) in q.iter().enumerate() {
        out.set_column(c, col);
    }
    out
}

/// Matrix of independent standard complex Gaussians (unit variance per part).
pub fn gaussian_matrix<T: Real>(rows: usize, cols: usize, seed: u64) -> CMatrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        Complex::new(T::lit(re), T::lit(im))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = CMatrix<f64>;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn eig_diag_and_pauli_x() {
        let d = M::from_real_diag(&[1.0, 2.0]);
        let e = hermitian_eig(&d, 1e-12).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 2.0]);
        assert!(e.vectors.max_diff(&M::identity(2)) < 1e-15);

        let x = M::from_vec(2, 2, vec![c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)]).unwrap();
        let e = hermitian_eig(&x, 1e-12).unwrap();
        assert!((e.eigenvalues[0] + 1.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eig_rejects_non_hermitian() {
        let m = M::from_vec(2, 2, vec![c(0., 0.), c(1., 0.), c(0., 0.), c(0., 0.)]).unwrap();
        assert!(matches!(hermitian_eig(&m, 1e-10), Err(LinalgError::NotHermitian(_))));
    }

    #[test]
    fn sqrt_and_pinv_small() {
        let s = sqrt_psd(&M::from_real_diag(&[4.0, 1.0])).unwrap();
        assert!(s.max_diff(&M::from_real_diag(&[2.0, 1.0])) < 1e-14);
        let p = pinv_sqrt_psd(&M::from_real_diag(&[4.0, 0.0])).unwrap();
        assert!(p.max_diff(&M::from_real_diag(&[0.5, 0.0])) < 1e-14);
        assert!(pinv_sqrt_psd(&M::identity(3)).unwrap().max_diff(&M::identity(3)) < 1e-14);
        assert!(matches!(sqrt_psd(&M::from_real_diag(&[1.0, -0.5])), Err(LinalgError::NotPsd(_))));
    }

    #[test]
    fn partial_trace_simple() {
        let x = M::from_vec(2, 2, vec![c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)]).unwrap();
        let xi = kron(&x, &M::identity(2));
        let pt = partial_trace(&xi, &[2, 2], &[0]).unwrap();
        assert!(pt.max_diff(&x.scale_real(2.0)) < 1e-15);
        let all = partial_trace(&xi, &[2, 2], &[]).unwrap();
        assert_eq!(all.shape(), (1, 1));
        assert!(all[(0, 0)].norm() < 1e-15);
        assert!(partial_trace(&xi, &[2, 3], &[0]).is_err());
    }

    #[test]
    fn extend_trivial() {
        assert!(extend_isometry(&M::identity(3)).unwrap().max_diff(&M::identity(3)) < 1e-15);
        let e1 = M::from_vec(2, 1, vec![c(1., 0.), c(0., 0.)]).unwrap();
        let u = extend_isometry(&e1).unwrap();
        assert!(u.isometry_deviation() < 1e-15);
        assert_eq!(u[(0, 0)], c(1., 0.));
        let bad = M::from_vec(2, 1, vec![c(2., 0.), c(0., 0.)]).unwrap();
        assert!(extend_isometry(&bad).is_err());
    }

    #[test]
    fn polar_trivial() {
        let u = haar_unitary::<f64>(3, 7);
        assert!(polar_partial_isometry(&u).unwrap().max_diff(&u) < 1e-12);
        let v = polar_partial_isometry(&M::from_real_diag(&[2.0, 0.0])).unwrap();
        assert!(v.max_diff(&M::from_real_diag(&[1.0, 0.0])) < 1e-14);
    }

    #[test]
    fn haar_seeded() {
        let a = haar_unitary::<f64>(4, 1);
        let b = haar_unitary::<f64>(4, 1);
        let d = haar_unitary::<f64>(4, 2);
        assert_eq!(a, b);
        assert!(a.max_diff(&d) > 1e-3);
        assert!(a.isometry_deviation() < 1e-12);
        assert!((haar_unitary::<f64>(1, 3)[(0, 0)].norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn permutation_swaps_factors() {
        let a = haar_unitary::<f64>(2, 1);
        let b = haar_unitary::<f64>(3, 2);
        let p = permutation_matrix::<f64>(&[2, 3], &[1, 0]);
        let lhs = p.matmul(&kron(&a, &b)).matmul(&p.adjoint());
        assert!(lhs.max_diff(&kron(&b, &a)) < 1e-14);
    }

    #[test]
    fn unitary_relating_recovers_map() {
        let u = haar_unitary::<f64>(4, 11);
        let a = gaussian_matrix::<f64>(4, 2, 5);
        let b = u.matmul(&a);
        let w = unitary_relating(&a, &b).unwrap();
        assert!(w.matmul(&a).max_diff(&b) < 1e-10);
        assert!(w.isometry_deviation() < 1e-10);
    }

    #[test]
    fn unitary_relating_wide() {
        let u = haar_unitary::<f64>(3, 4);
        let a = gaussian_matrix::<f64>(3, 6, 8);
        let b = u.matmul(&a);
        let w = unitary_relating(&a, &b).unwrap();
        assert!(w.matmul(&a).max_diff(&b) < 1e-10);
    }

    #[test]
    fn generic_over_f32() {
        let e = hermitian_eig(&CMatrix::<f32>::from_real_diag(&[3.0, 1.0]), 1e-5).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0f32, 3.0]);
    }
}
