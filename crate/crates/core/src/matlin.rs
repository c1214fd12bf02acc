//! Small dense matrices: spectral radius, real Schur form, block inversion and
//! the admissible structure built on top of them.

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix; serialized as a list of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<T>>", into = "Vec<Vec<T>>", bound = "T: Scalar + Serialize + DeserializeOwned")]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> TryFrom<Vec<Vec<T>>> for Mat<T> {
    type Error = Error;

    fn try_from(rows: Vec<Vec<T>>) -> Result<Self> {
        let c = rows.first().map_or(0, |row| row.len());
        if rows.is_empty() || c == 0 || rows.iter().any(|row| row.len() != c) {
            return invalid("matrix rows must be nonempty and of equal length");
        }
        Self::new(rows.len(), c, rows.into_iter().flatten().collect())
    }
}

impl<T: Scalar> From<Mat<T>> for Vec<Vec<T>> {
    fn from(m: Mat<T>) -> Self {
        m.data.chunks(m.cols.max(1)).map(|r| r.to_vec()).collect()
    }
}

impl<T: Scalar> Mat<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return invalid(format!(
                "matrix shape {rows}x{cols} does not match {} entries",
                data.len()
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return invalid("matrix entries must be finite");
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &x) in diag.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    /// Builds a matrix from rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self { rows: r, cols: c, data: rows.iter().flatten().copied().collect() }
    }

    pub fn scalar(x: T) -> Self {
        Self { rows: 1, cols: 1, data: vec![x] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x * s).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> T {
        (0..self.rows)
            .map(|i| (0..self.cols).fold(T::zero(), |s, j| s + self[(i, j)].abs()))
            .fold(T::zero(), T::max)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).fold(T::zero(), |s, i| s + self[(i, i)])
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&x| x >= T::zero())
    }

    pub fn is_diagonal(&self, tol: T) -> bool {
        (0..self.rows).all(|i| (0..self.cols).all(|j| i == j || self[(i, j)].abs() <= tol))
    }

    /// Copy of rows `r0..r1` and columns `c0..c1`.
    pub fn block(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Self {
        let mut b = Self::zeros(r1 - r0, c1 - c0);
        for i in r0..r1 {
            for j in c0..c1 {
                b[(i - r0, j - c0)] = self[(i, j)];
            }
        }
        b
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, b: &Self) {
        for i in 0..b.rows {
            for j in 0..b.cols {
                self[(r0 + i, c0 + j)] = b[(i, j)];
            }
        }
    }

    pub fn mat_vec(&self, v: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|i| (0..self.cols).fold(T::zero(), |s, j| s + self[(i, j)] * v[j]))
            .collect()
    }

    /// LU factorization with partial pivoting: returns (lu, perm, sign) or
    /// `None` when a pivot vanishes relative to the matrix scale.
    fn lu(&self) -> Option<(Self, Vec<usize>, T)> {
        let n = self.rows;
        let mut a = self.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        let scale = self.max_abs().max(T::min_positive_value());
        let floor = T::epsilon() * T::lit(n as f64) * scale;
        for k in 0..n {
            let mut p = k;
            for i in k + 1..n {
                if a[(i, k)].abs() > a[(p, k)].abs() {
                    p = i;
                }
            }
            if a[(p, k)].abs() <= floor {
                return None;
            }
            if p != k {
                for j in 0..n {
                    a.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            for i in k + 1..n {
                let f = a[(i, k)] / a[(k, k)];
                a[(i, k)] = f;
                for j in k + 1..n {
                    let akj = a[(k, j)];
                    a[(i, j)] -= f * akj;
                }
            }
        }
        Some((a, perm, sign))
    }

    pub fn det(&self) -> T {
        assert!(self.is_square());
        match self.lu() {
            None => T::zero(),
            Some((lu, _, sign)) => (0..self.rows).fold(sign, |d, i| d * lu[(i, i)]),
        }
    }

    /// Inverse by LU; errors on a numerically singular matrix.
    pub fn inverse(&self) -> Result<Self> {
        if !self.is_square() {
            return invalid("inverse of a non-square matrix");
        }
        let n = self.rows;
        let (lu, perm, _) =
            self.lu().ok_or_else(|| Error::Numerical("singular matrix".into()))?;
        let mut inv = Self::zeros(n, n);
        for col in 0..n {
            let mut x: Vec<T> = (0..n).map(|i| if perm[i] == col { T::one() } else { T::zero() }).collect();
            for i in 0..n {
                for k in 0..i {
                    let l = lu[(i, k)];
                    let xk = x[k];
                    x[i] -= l * xk;
                }
            }
            for i in (0..n).rev() {
                for k in i + 1..n {
                    let u = lu[(i, k)];
                    let xk = x[k];
                    x[i] -= u * xk;
                }
                x[i] /= lu[(i, i)];
            }
            for i in 0..n {
                inv[(i, col)] = x[i];
            }
        }
        Ok(inv)
    }

    /// Inverse that also rejects condition numbers above `cap`.
    pub fn inverse_capped(&self, cap: T) -> Result<Self> {
        let inv = self.inverse()?;
        let cond = self.norm_inf() * inv.norm_inf();
        if !(cond <= cap) {
            return Err(Error::Numerical(format!("condition number {cond:?} above cap")));
        }
        Ok(inv)
    }

    /// Matrix exponential by scaling and squaring of a Taylor polynomial.
    pub fn expm(&self) -> Self {
        assert!(self.is_square());
        let n = self.rows;
        let norm = self.norm_inf();
        let mut s = 0;
        let mut scaled = self.clone();
        if norm > T::lit(0.5) {
            s = (norm / T::lit(0.5)).log2().ceil().to_i32().unwrap_or(0).max(0);
            scaled = self.scale(T::lit(0.5f64.powi(s)));
        }
        let mut term = Self::identity(n);
        let mut sum = Self::identity(n);
        for k in 1..=24 {
            term = (&term * &scaled).scale(T::one() / T::lit(k as f64));
            sum = &sum + &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Scalar> Mul for &Mat<T> {
    type Output = Mat<T>;
    fn mul(self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, rhs.rows, "matrix product shape mismatch");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs[(k, j)];
                }
            }
        }
        out
    }
}

impl<T: Scalar> Add for &Mat<T> {
    type Output = Mat<T>;
    fn add(self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }
}

impl<T: Scalar> Sub for &Mat<T> {
    type Output = Mat<T>;
    fn sub(self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }
}

fn check_square<T: Scalar>(a: &Mat<T>) -> Result<()> {
    if !a.is_square() || a.rows == 0 {
        return invalid(format!("expected a non-empty square matrix, got {}x{}", a.rows, a.cols));
    }
    Ok(())
}

/// Spectral radius of a nonnegative square matrix.
///
/// Uses the Gelfand limit `||A^m||^(1/m)` along `m = 2^k` with renormalized
/// repeated squaring, which is the same as running the power iteration from
/// every basis vector at once and keeping the fastest growth.
pub fn spectral_radius<T: Scalar>(a: &Mat<T>, tol: T) -> Result<T> {
    check_square(a)?;
    if !(tol > T::zero()) {
        return invalid("tol must be positive");
    }
    if !a.is_nonnegative() {
        return invalid("spectral_radius expects nonnegative entries");
    }
    Ok(gelfand_radius(a))
}

/// Spectral radius of an arbitrary real square matrix.
pub fn spectral_radius_general<T: Scalar>(a: &Mat<T>) -> Result<T> {
    check_square(a)?;
    Ok(gelfand_radius(a))
}

fn gelfand_radius<T: Scalar>(a: &Mat<T>) -> T {
    let n0 = a.norm_inf();
    if n0 == T::zero() {
        return T::zero();
    }
    let mut b = a.scale(T::one() / n0);
    let mut log_rho = n0.ln();
    let mut weight = T::one();
    for _ in 0..64 {
        let b2 = &b * &b;
        let s = b2.norm_inf();
        if s == T::zero() {
            return T::zero();
        }
        weight = weight * T::lit(0.5);
        log_rho += s.ln() * weight;
        b = b2.scale(T::one() / s);
    }
    log_rho.exp()
}

fn householder<T: Scalar>(x: &[T]) -> Option<Vec<T>> {
    let norm = x.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
    if norm == T::zero() {
        return None;
    }
    let alpha = if x[0] >= T::zero() { -norm } else { norm };
    let mut v = x.to_vec();
    v[0] -= alpha;
    let vn = v.iter().fold(T::zero(), |s, &e| s + e * e).sqrt();
    if vn == T::zero() {
        return None;
    }
    for e in &mut v {
        *e /= vn;
    }
    Some(v)
}

/// Applies `I - 2 v v^T` on rows `r0..r0+len(v)` from the left.
fn reflect_rows<T: Scalar>(m: &mut Mat<T>, r0: usize, v: &[T]) {
    let two = T::lit(2.0);
    for j in 0..m.cols {
        let s = v.iter().enumerate().fold(T::zero(), |s, (k, &vk)| s + vk * m[(r0 + k, j)]);
        for (k, &vk) in v.iter().enumerate() {
            m[(r0 + k, j)] -= two * vk * s;
        }
    }
}

/// Applies `I - 2 v v^T` on columns `c0..c0+len(v)` from the right.
fn reflect_cols<T: Scalar>(m: &mut Mat<T>, c0: usize, v: &[T]) {
    let two = T::lit(2.0);
    for i in 0..m.rows {
        let s = v.iter().enumerate().fold(T::zero(), |s, (k, &vk)| s + vk * m[(i, c0 + k)]);
        for (k, &vk) in v.iter().enumerate() {
            m[(i, c0 + k)] -= two * vk * s;
        }
    }
}

fn similarity_reflect<T: Scalar>(t: &mut Mat<T>, q: &mut Mat<T>, r0: usize, v: &[T]) {
    reflect_rows(t, r0, v);
    reflect_cols(t, r0, v);
    reflect_cols(q, r0, v);
}

/// Applies the orthogonal `z` to the window `i..i+z.rows()` as `t <- z^T t z`.
fn similarity_window<T: Scalar>(t: &mut Mat<T>, q: &mut Mat<T>, i: usize, z: &Mat<T>) {
    let m = z.rows;
    let n = t.rows;
    let mut rows = Mat::zeros(m, n);
    for a in 0..m {
        for j in 0..n {
            rows[(a, j)] = (0..m).fold(T::zero(), |s, b| s + z[(b, a)] * t[(i + b, j)]);
        }
    }
    t.set_block(i, 0, &rows);
    for mat in [t, q] {
        let nr = mat.rows;
        let mut cols = Mat::zeros(nr, m);
        for r in 0..nr {
            for a in 0..m {
                cols[(r, a)] = (0..m).fold(T::zero(), |s, b| s + mat[(r, i + b)] * z[(b, a)]);
            }
        }
        mat.set_block(0, i, &cols);
    }
}

fn hessenberg<T: Scalar>(t: &mut Mat<T>, q: &mut Mat<T>) {
    let n = t.rows;
    for k in 0..n.saturating_sub(2) {
        let x: Vec<T> = (k + 1..n).map(|i| t[(i, k)]).collect();
        if x[1..].iter().all(|&e| e == T::zero()) {
            continue;
        }
        if let Some(v) = householder(&x) {
            similarity_reflect(t, q, k + 1, &v);
        }
        for i in k + 2..n {
            t[(i, k)] = T::zero();
        }
    }
}

/// Francis double-shift iteration on an upper Hessenberg matrix.
fn francis<T: Scalar>(t: &mut Mat<T>, q: &mut Mat<T>) -> Result<()> {
    let n = t.rows;
    if n < 2 {
        return Ok(());
    }
    let cap = 200 * n * n;
    let eps = T::epsilon();
    let mut total = 0usize;
    let mut since = 0usize;
    let mut hi = n as isize - 1;
    while hi > 0 {
        let h = hi as usize;
        let mut l = h;
        while l > 0 {
            let s = t[(l - 1, l - 1)].abs() + t[(l, l)].abs();
            let s = if s == T::zero() { t.norm_inf() } else { s };
            if t[(l, l - 1)].abs() <= eps * s {
                t[(l, l - 1)] = T::zero();
                break;
            }
            l -= 1;
        }
        if l == h {
            hi -= 1;
            since = 0;
            continue;
        }
        if l + 1 == h {
            hi -= 2;
            since = 0;
            continue;
        }
        total += 1;
        since += 1;
        if total > cap {
            return Err(Error::NoConvergence(format!("real Schur QR exceeded {cap} iterations")));
        }
        let (s, p) = if since % 11 == 10 {
            let w = t[(h, h - 1)].abs() + t[(h - 1, h - 2)].abs();
            let x = T::lit(0.75) * w + t[(h, h)];
            (x + x, x * x - T::lit(0.4375) * w * w)
        } else {
            let a = t[(h - 1, h - 1)];
            let b = t[(h - 1, h)];
            let c = t[(h, h - 1)];
            let d = t[(h, h)];
            (a + d, a * d - b * c)
        };
        let mut x = t[(l, l)] * t[(l, l)] + t[(l, l + 1)] * t[(l + 1, l)] - s * t[(l, l)] + p;
        let mut y = t[(l + 1, l)] * (t[(l, l)] + t[(l + 1, l + 1)] - s);
        let mut z = t[(l + 1, l)] * t[(l + 2, l + 1)];
        for k in l..=h - 2 {
            if let Some(v) = householder(&[x, y, z]) {
                similarity_reflect(t, q, k, &v);
            }
            if k > l {
                t[(k + 1, k - 1)] = T::zero();
                t[(k + 2, k - 1)] = T::zero();
            }
            x = t[(k + 1, k)];
            y = t[(k + 2, k)];
            if k + 3 <= h {
                z = t[(k + 3, k)];
            }
        }
        if let Some(v) = householder(&[x, y]) {
            similarity_reflect(t, q, h - 1, &v);
        }
        if h >= 2 {
            t[(h, h - 2)] = T::zero();
        }
    }
    Ok(())
}

/// Block sizes of a quasi-triangular matrix, front to back.
fn blocks<T: Scalar>(t: &Mat<T>) -> Vec<(usize, usize)> {
    let n = t.rows;
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != T::zero() {
            out.push((i, 2));
            i += 2;
        } else {
            out.push((i, 1));
            i += 1;
        }
    }
    out
}

/// Triangularizes 2x2 diagonal blocks whose eigenvalues are real.
fn split_real_pairs<T: Scalar>(t: &mut Mat<T>, q: &mut Mat<T>) {
    for (i, size) in blocks(t) {
        if size != 2 {
            continue;
        }
        let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
        let half = (a - d) * T::lit(0.5);
        let disc = half * half + b * c;
        if disc < T::zero() {
            continue;
        }
        let lam = (a + d) * T::lit(0.5) + if half >= T::zero() { disc.sqrt() } else { -disc.sqrt() };
        let (v1, v2) = {
            let (p1, p2) = (b, lam - a);
            let (r1, r2) = (lam - d, c);
            if p1.hypot(p2) >= r1.hypot(r2) { (p1, p2) } else { (r1, r2) }
        };
        let nv = v1.hypot(v2);
        if nv == T::zero() {
            t[(i + 1, i)] = T::zero();
            continue;
        }
        let (cs, sn) = (v1 / nv, v2 / nv);
        let g = Mat::from_rows(&[vec![cs, -sn], vec![sn, cs]]);
        similarity_window(t, q, i, &g);
        t[(i + 1, i)] = T::zero();
    }
}

fn block_eigs<T: Scalar>(t: &Mat<T>, i: usize, size: usize) -> Vec<(T, T)> {
    if size == 1 {
        return vec![(t[(i, i)], T::zero())];
    }
    let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
    let half = (a - d) * T::lit(0.5);
    let disc = half * half + b * c;
    let mid = (a + d) * T::lit(0.5);
    if disc >= T::zero() {
        vec![(mid + disc.sqrt(), T::zero()), (mid - disc.sqrt(), T::zero())]
    } else {
        vec![(mid, (-disc).sqrt()), (mid, -(-disc).sqrt())]
    }
}

/// Solves the small dense system `m x = rhs` by Gaussian elimination.
fn solve_small<T: Scalar>(m: &Mat<T>, rhs: &[T]) -> Result<Vec<T>> {
    let inv = m.inverse()?;
    Ok(inv.mat_vec(rhs))
}

/// Swaps the adjacent diagonal blocks starting at `i` (size `p1`) and
/// `i + p1` (size `p2`).
fn swap_blocks<T: Scalar>(t: &mut Mat<T>, q: &mut Mat<T>, i: usize, p1: usize, p2: usize) -> Result<()> {
    let j = i + p1;
    let a11 = t.block(i, j, i, j);
    let a22 = t.block(j, j + p2, j, j + p2);
    let a12 = t.block(i, j, j, j + p2);
    // vec(A11 X - X A22) = (I (x) A11 - A22^T (x) I) vec(X), column-major vec.
    let nv = p1 * p2;
    let mut kron = Mat::zeros(nv, nv);
    for c in 0..p2 {
        for r in 0..p1 {
            let row = c * p1 + r;
            for k in 0..p1 {
                kron[(row, c * p1 + k)] += a11[(r, k)];
            }
            for k in 0..p2 {
                kron[(row, k * p1 + r)] -= a22[(k, c)];
            }
        }
    }
    let rhs: Vec<T> = (0..p2).flat_map(|c| (0..p1).map(move |r| (r, c))).map(|(r, c)| a12[(r, c)]).collect();
    let x = solve_small(&kron, &rhs)
        .map_err(|_| Error::Numerical("Schur block swap with clustered eigenvalues".into()))?;
    let m = p1 + p2;
    let mut basis = Mat::zeros(m, p2);
    for c in 0..p2 {
        for r in 0..p1 {
            basis[(r, c)] = -x[c * p1 + r];
        }
        basis[(p1 + c, c)] = T::one();
    }
    // Householder QR of `basis`; the accumulated reflectors form Z.
    let mut z = Mat::identity(m);
    let mut work = basis;
    for c in 0..p2 {
        let col: Vec<T> = (c..m).map(|r| work[(r, c)]).collect();
        if let Some(v) = householder(&col) {
            reflect_rows(&mut work, c, &v);
            reflect_cols(&mut z, c, &v);
        }
    }
    similarity_window(t, q, i, &z);
    for r in i + p2..i + m {
        for c in i..i + p2 {
            t[(r, c)] = T::zero();
        }
    }
    Ok(())
}

/// Real Schur decomposition `A = Q U Q^T` for `d <= 8`.
///
/// Real eigenvalues equal to the largest eigenvalue modulus (within a small
/// cluster tolerance) are moved to the leading diagonal positions, keeping
/// their original relative order. Columns of `Q` are sign-normalized so the
/// result is deterministic and `det Q = 1`.
pub fn real_schur<T: Scalar>(a: &Mat<T>, tol: T) -> Result<(Mat<T>, Mat<T>)> {
    check_square(a)?;
    if a.rows > 8 {
        return invalid("real_schur supports d <= 8");
    }
    if !(tol > T::zero()) {
        return invalid("tol must be positive");
    }
    let n = a.rows;
    let mut t = a.clone();
    let mut q = Mat::identity(n);
    hessenberg(&mut t, &mut q);
    francis(&mut t, &mut q)?;
    split_real_pairs(&mut t, &mut q);

    let eigs: Vec<(T, T)> = blocks(&t).into_iter().flat_map(|(i, s)| block_eigs(&t, i, s)).collect();
    let rho = eigs.iter().fold(T::zero(), |m, &(re, im)| m.max(re.hypot(im)));
    let cluster = T::lit(1e-6) * rho.max(T::one());
    let selected = |t: &Mat<T>, i: usize, size: usize| size == 1 && t[(i, i)] >= rho - cluster;
    let mut placed = 0usize;
    loop {
        let bl = blocks(&t);
        let Some(pos) = bl.iter().enumerate().position(|(k, &(i, s))| k >= placed && selected(&t, i, s)) else {
            break;
        };
        let mut k = pos;
        while k > placed {
            let bl = blocks(&t);
            let (i0, s0) = bl[k - 1];
            let (_, s1) = bl[k];
            swap_blocks(&mut t, &mut q, i0, s0, s1)?;
            k -= 1;
        }
        placed += 1;
    }

    for j in 0..n {
        let mut best = 0;
        for i in 1..n {
            if q[(i, j)].abs() > q[(best, j)].abs() {
                best = i;
            }
        }
        if q[(best, j)] < T::zero() {
            flip(&mut t, &mut q, j);
        }
    }
    if q.det() < T::zero() {
        flip(&mut t, &mut q, n - 1);
    }
    let bl = blocks(&t);
    for i in 0..n {
        for j in 0..i {
            let in_pair = bl.iter().any(|&(b, s)| s == 2 && i == b + 1 && j == b);
            if !in_pair {
                t[(i, j)] = T::zero();
            }
        }
    }
    let recon = &(&q * &t) * &q.transpose();
    let err = (&recon - a).norm_inf();
    if err > tol * a.norm_inf().max(T::one()) {
        return Err(Error::NoConvergence(format!("Schur reconstruction error {err:?} above tolerance")));
    }
    Ok((q, t))
}

fn flip<T: Scalar>(t: &mut Mat<T>, q: &mut Mat<T>, j: usize) {
    let n = t.rows;
    for i in 0..n {
        q[(i, j)] = -q[(i, j)];
        t[(i, j)] = -t[(i, j)];
        t[(j, i)] = -t[(j, i)];
    }
}

/// Inverse of `[[A11, A12], [A21, A22]]` through the Schur complement
/// `S = A22 - A21 A11^-1 A12`.
pub fn block_inverse_2x2<T: Scalar>(a11: &Mat<T>, a12: &Mat<T>, a21: &Mat<T>, a22: &Mat<T>) -> Result<Mat<T>> {
    let (p, q) = (a11.rows, a22.rows);
    if !a11.is_square() || !a22.is_square() || a12.rows != p || a12.cols != q || a21.rows != q || a21.cols != p {
        return invalid("inconsistent block shapes");
    }
    let cap = T::lit(1e13);
    let i11 = a11.inverse_capped(cap).map_err(|e| Error::Numerical(format!("A11: {e}")))?;
    let s = a22 - &(&(a21 * &i11) * a12);
    let is = s.inverse_capped(cap).map_err(|e| Error::Numerical(format!("Schur complement: {e}")))?;
    let i11_a12 = &i11 * a12;
    let a21_i11 = a21 * &i11;
    let top_right = (&i11_a12 * &is).scale(-T::one());
    let bottom_left = (&is * &a21_i11).scale(-T::one());
    let top_left = &i11 + &(&(&i11_a12 * &is) * &a21_i11);
    let mut out = Mat::zeros(p + q, p + q);
    out.set_block(0, 0, &top_left);
    out.set_block(0, p, &top_right);
    out.set_block(p, 0, &bottom_left);
    out.set_block(p, p, &is);
    Ok(out)
}

/// Verified `(K, ell, Q, U, lambda_plus)` with `K = Q U Q^T`, `U_II = Id`,
/// `U_JI = 0` and `rho(U_JJ) < 1`.
#[derive(Clone, Debug)]
pub struct Admissible<T> {
    pub k: Mat<T>,
    pub ell: usize,
    pub q: Mat<T>,
    pub u: Mat<T>,
    pub lambda_plus: T,
}

impl<T: Scalar> Admissible<T> {
    pub fn d(&self) -> usize {
        self.k.rows
    }

    pub fn u_ij(&self) -> Mat<T> {
        self.u.block(0, self.ell, self.ell, self.d())
    }

    pub fn u_jj(&self) -> Mat<T> {
        self.u.block(self.ell, self.d(), self.ell, self.d())
    }

    /// `(Id - U_JJ)^-1`, empty when `ell = d`.
    pub fn resolvent_jj(&self) -> Result<Mat<T>> {
        let m = self.d() - self.ell;
        if m == 0 {
            return Ok(Mat::zeros(0, 0));
        }
        (&Mat::identity(m) - &self.u_jj()).inverse()
    }

    pub fn with_lambda_plus(mut self, lambda_plus: T) -> Self {
        self.lambda_plus = lambda_plus;
        self
    }

    /// Checks every structural invariant at tolerance `tol`.
    pub fn verify(&self, tol: T) -> Result<()> {
        let d = self.d();
        if !self.k.is_square() || self.q.rows != d || self.q.cols != d || self.u.rows != d || self.u.cols != d {
            return invalid("admissible structure has inconsistent shapes");
        }
        if self.ell == 0 || self.ell > d {
            return invalid("ell must lie in 1..=d");
        }
        if !(self.lambda_plus >= T::zero()) {
            return invalid("lambda_plus must be nonnegative");
        }
        let fail = |what: &str| Err(Error::InvalidInput(format!("admissible structure: {what}")));
        let qtq = &self.q.transpose() * &self.q;
        if (&qtq - &Mat::identity(d)).max_abs() > tol {
            return fail("Q is not orthogonal");
        }
        let recon = &(&self.q * &self.u) * &self.q.transpose();
        if (&self.k - &recon).max_abs() > tol {
            return fail("K differs from Q U Q^T");
        }
        let uii = self.u.block(0, self.ell, 0, self.ell);
        if (&uii - &Mat::identity(self.ell)).max_abs() > tol {
            return fail("U_II is not the identity");
        }
        if self.u.block(self.ell, d, 0, self.ell).max_abs() > tol {
            return fail("U_JI is not zero");
        }
        if self.ell < d && spectral_radius_general(&self.u_jj())? >= T::one() - tol {
            return fail("spectral radius of U_JJ is not below 1");
        }
        Ok(())
    }
}

/// Builds the admissible structure of a nonnegative `K` with `rho(K) = 1`
/// from its ordered real Schur form.
pub fn build_admissible<T: Scalar>(k: &Mat<T>, tol: T) -> Result<Admissible<T>> {
    let rho = spectral_radius(k, tol)?;
    if (rho - T::one()).abs() > tol {
        return invalid(format!("spectral radius {rho:?} is not 1 within tolerance"));
    }
    let (q, mut u) = real_schur(k, T::lit(1e-10))?;
    let d = k.rows;
    let cluster = T::lit(1e-6);
    let mut ell = 0;
    while ell < d && (u[(ell, ell)] - T::one()).abs() <= cluster && (ell + 1 == d || u[(ell + 1, ell)] == T::zero()) {
        ell += 1;
    }
    if ell == 0 {
        return Err(Error::Numerical("eigenvalue 1 not found in the Schur form".into()));
    }
    let uii = u.block(0, ell, 0, ell);
    if (&uii - &Mat::identity(ell)).max_abs() > cluster {
        return Err(Error::Numerical("eigenvalue 1 is defective; U_II cannot be the identity".into()));
    }
    u.set_block(0, 0, &Mat::identity(ell));
    u.set_block(ell, 0, &Mat::zeros(d - ell, ell));
    let s = Admissible { k: k.clone(), ell, q, u, lambda_plus: T::zero() };
    s.verify(tol.max(T::lit(1e-8)))?;
    Ok(s)
}

/// Verifies user-supplied factors and returns them as a structure.
pub fn verify_admissible<T: Scalar>(
    k: &Mat<T>,
    ell: usize,
    q: &Mat<T>,
    u: &Mat<T>,
    lambda_plus: T,
    tol: T,
) -> Result<Admissible<T>> {
    let s = Admissible { k: k.clone(), ell, q: q.clone(), u: u.clone(), lambda_plus };
    s.verify(tol)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = Mat<f64>;

    fn m(rows: &[&[f64]]) -> M {
        M::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn spectral_radius_examples() {
        assert!((spectral_radius(&m(&[&[0.5, 0.5], &[0.5, 0.5]]), 1e-10).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(spectral_radius(&m(&[&[0.0, 1.0], &[0.0, 0.0]]), 1e-10).unwrap(), 0.0);
        assert!((spectral_radius(&m(&[&[0.6, 0.3], &[0.2, 0.7]]), 1e-10).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn spectral_radius_rejects_bad_input() {
        assert!(spectral_radius(&m(&[&[1.0, 2.0]]), 1e-10).is_err());
        assert!(spectral_radius(&m(&[&[1.0, -0.1], &[0.0, 1.0]]), 1e-10).is_err());
    }

    #[test]
    fn spectral_radius_jordan_block() {
        let a = m(&[&[0.5, 1.0], &[0.0, 0.5]]);
        assert!((spectral_radius(&a, 1e-10).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spectral_radius_in_f32() {
        let a = Mat::<f32>::from_rows(&[vec![0.6, 0.3], vec![0.2, 0.7]]);
        assert!((spectral_radius(&a, 1e-6).unwrap() - 0.9).abs() < 1e-5);
    }

    #[test]
    fn schur_of_triangular_is_identity() {
        let a = m(&[&[1.0, 1.0], &[0.0, 0.5]]);
        let (q, u) = real_schur(&a, 1e-10).unwrap();
        assert!((&q - &M::identity(2)).max_abs() < 1e-14);
        assert!((&u - &a).max_abs() < 1e-14);
    }

    #[test]
    fn schur_of_averaging_matrix_is_rotation() {
        let a = m(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let (q, u) = real_schur(&a, 1e-10).unwrap();
        let s = 0.5f64.sqrt();
        assert!((&q - &m(&[&[s, -s], &[s, s]])).max_abs() < 1e-12, "{q:?}");
        assert!((&u - &m(&[&[1.0, 0.0], &[0.0, 0.0]])).max_abs() < 1e-12, "{u:?}");
    }

    #[test]
    fn schur_orders_perron_root_first() {
        let a = m(&[&[0.2, 0.0, 0.0], &[0.1, 0.3, 0.0], &[0.4, 0.2, 0.9]]);
        let (q, u) = real_schur(&a, 1e-10).unwrap();
        assert!((u[(0, 0)] - 0.9).abs() < 1e-12);
        let recon = &(&q * &u) * &q.transpose();
        assert!((&recon - &a).max_abs() < 1e-12);
    }

    #[test]
    fn schur_keeps_complex_pairs() {
        let a = m(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]);
        let (q, u) = real_schur(&a, 1e-10).unwrap();
        assert!((u[(0, 0)] - 1.0).abs() < 1e-10);
        assert!(u[(2, 1)].abs() > 0.1);
        let recon = &(&q * &u) * &q.transpose();
        assert!((&recon - &a).max_abs() < 1e-12);
    }

    #[test]
    fn block_inverse_examples() {
        let one = M::identity(1);
        let zero = M::zeros(1, 1);
        let inv = block_inverse_2x2(&one, &zero, &zero, &one).unwrap();
        assert!((&inv - &M::identity(2)).max_abs() < 1e-15);
        let inv = block_inverse_2x2(&M::scalar(2.0), &zero, &zero, &M::scalar(4.0)).unwrap();
        assert!((&inv - &M::from_diag(&[0.5, 0.25])).max_abs() < 1e-15);
    }

    #[test]
    fn block_inverse_singular_complement() {
        let one = M::identity(1);
        assert!(block_inverse_2x2(&one, &one, &one, &one).is_err());
        assert!(block_inverse_2x2(&M::zeros(1, 1), &one, &one, &one).is_err());
    }

    #[test]
    fn admissible_examples() {
        let s = build_admissible(&M::identity(2), 1e-8).unwrap();
        assert_eq!(s.ell, 2);
        assert!((&s.q - &M::identity(2)).max_abs() < 1e-14);
        assert!((&s.u - &M::identity(2)).max_abs() < 1e-14);

        let s = build_admissible(&m(&[&[0.5, 0.5], &[0.5, 0.5]]), 1e-8).unwrap();
        assert_eq!(s.ell, 1);
        let r = 0.5f64.sqrt();
        assert!((&s.q - &m(&[&[r, -r], &[r, r]])).max_abs() < 1e-12);
        assert!((&s.u - &M::from_diag(&[1.0, 0.0])).max_abs() < 1e-12);

        let k = m(&[&[1.0, 1.0], &[0.0, 0.5]]);
        let s = build_admissible(&k, 1e-8).unwrap();
        assert_eq!(s.ell, 1);
        assert!((&s.q - &M::identity(2)).max_abs() < 1e-14);
        assert!((&s.u - &k).max_abs() < 1e-14);
    }

    #[test]
    fn admissible_rejects() {
        assert!(build_admissible(&M::from_diag(&[0.5, 0.5]), 1e-8).is_err());
        let jordan = m(&[&[1.0, 1.0], &[0.0, 1.0]]);
        assert!(build_admissible(&jordan, 1e-8).is_err());
        let periodic = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(build_admissible(&periodic, 1e-8).is_err());
        let bad_q = M::from_diag(&[1.0, 2.0]);
        assert!(verify_admissible(&M::identity(2), 2, &bad_q, &M::identity(2), 0.0, 1e-8).is_err());
    }

    #[test]
    fn expm_of_diagonal() {
        let e = M::from_diag(&[1.0, -2.0]).expm();
        assert!((e[(0, 0)] - 1f64.exp()).abs() < 1e-13);
        assert!((e[(1, 1)] - (-2f64).exp()).abs() < 1e-14);
        let n = m(&[&[0.0, 3.0], &[0.0, 0.0]]).expm();
        assert!((n[(0, 1)] - 3.0).abs() < 1e-14);
    }
}
