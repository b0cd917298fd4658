//! Banded LU with partial pivoting, a tridiagonal solver and Sturm counts.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::C64;

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn zero() -> Self;
    fn from_f64(x: f64) -> Self;
    fn modulus(self) -> f64;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl Scalar for C64 {
    fn zero() -> Self {
        C64::new(0.0, 0.0)
    }
    fn from_f64(x: f64) -> Self {
        C64::new(x, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
}

/// `n x n` band matrix with `kl` sub- and `ku` super-diagonals, stored column-major
/// with `kl` extra rows for pivoting fill-in.
#[derive(Clone, Debug)]
pub struct BandMatrix<T> {
    n: usize,
    kl: usize,
    ku: usize,
    ld: usize,
    data: Vec<T>,
}

impl<T: Scalar> BandMatrix<T> {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ld = 2 * kl + ku + 1;
        BandMatrix { n, kl, ku, ld, data: vec![T::zero(); ld * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        (self.kl + self.ku + i - j) + j * self.ld
    }

    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && i + self.ku >= j && j + self.kl >= i
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        if self.in_band(i, j) {
            self.data[self.idx(i, j)]
        } else {
            T::zero()
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(self.in_band(i, j));
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    pub fn add_to(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(self.in_band(i, j));
        let k = self.idx(i, j);
        self.data[k] = self.data[k] + v;
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        for (j, xj) in x.iter().enumerate() {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for (i, yi) in y.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *yi = *yi + self.data[self.idx(i, j)] * *xj;
            }
        }
        y
    }

    /// Factorizes in place. A zero pivot is recorded, not fatal; check [`BandLu::min_pivot`].
    pub fn factor(mut self) -> BandLu<T> {
        let n = self.n;
        let kl = self.kl;
        let kv = self.kl + self.ku;
        let mut ipiv = vec![0usize; n];
        let mut ju = 0usize;
        let mut min_pivot = f64::INFINITY;
        let mut max_entry = 0.0f64;
        for v in &self.data {
            max_entry = max_entry.max(v.modulus());
        }
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut jp = 0;
            let mut best = -1.0;
            for i in 0..=km {
                let m = self.data[self.idx(j + i, j)].modulus();
                if m > best {
                    best = m;
                    jp = i;
                }
            }
            ipiv[j] = j + jp;
            min_pivot = min_pivot.min(best);
            if best == 0.0 {
                continue;
            }
            ju = ju.max((j + self.ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let a = self.idx(j, c);
                    let b = self.idx(j + jp, c);
                    self.data.swap(a, b);
                }
            }
            let piv = self.data[self.idx(j, j)];
            for i in 1..=km {
                let k = self.idx(j + i, j);
                self.data[k] = self.data[k] / piv;
            }
            for c in (j + 1)..=ju {
                let t = self.data[self.idx(j, c)];
                if t.modulus() == 0.0 {
                    continue;
                }
                for i in 1..=km {
                    let l = self.data[self.idx(j + i, j)];
                    let k = self.idx(j + i, c);
                    self.data[k] = self.data[k] - l * t;
                }
            }
            debug_assert!(kv >= self.ku);
        }
        BandLu { m: self, ipiv, min_pivot, max_entry }
    }
}

#[derive(Clone, Debug)]
pub struct BandLu<T> {
    m: BandMatrix<T>,
    ipiv: Vec<usize>,
    min_pivot: f64,
    max_entry: f64,
}

impl<T: Scalar> BandLu<T> {
    /// Smallest pivot modulus relative to the largest matrix entry.
    pub fn relative_min_pivot(&self) -> f64 {
        self.min_pivot / self.max_entry.max(f64::MIN_POSITIVE)
    }

    pub fn is_singular(&self) -> bool {
        self.min_pivot == 0.0
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.m.n;
        let kl = self.m.kl;
        let kv = self.m.kl + self.m.ku;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let l = self.ipiv[j];
            if l != j {
                b.swap(l, j);
            }
            let bj = b[j];
            for i in 1..=km {
                b[j + i] = b[j + i] - self.m.data[self.m.idx(j + i, j)] * bj;
            }
        }
        for j in (0..n).rev() {
            b[j] = b[j] / self.m.data[self.m.idx(j, j)];
            let bj = b[j];
            let lo = j.saturating_sub(kv);
            for i in lo..j {
                b[i] = b[i] - self.m.data[self.m.idx(i, j)] * bj;
            }
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Tridiagonal factorization without pivoting (for diagonally dominant systems).
#[derive(Clone, Debug)]
pub struct Tridiagonal<T> {
    lower: Vec<T>,
    upper: Vec<T>,
    inv_diag: Vec<T>,
}

impl<T: Scalar> Tridiagonal<T> {
    /// `lower[i]` couples row `i+1` to `i`, `upper[i]` couples row `i` to `i+1`.
    pub fn new(lower: &[T], diag: &[T], upper: &[T]) -> Self {
        let n = diag.len();
        let mut inv = vec![T::zero(); n];
        let mut d = diag[0];
        inv[0] = T::from_f64(1.0) / d;
        for i in 1..n {
            d = diag[i] - lower[i - 1] * upper[i - 1] * inv[i - 1];
            inv[i] = T::from_f64(1.0) / d;
        }
        Tridiagonal { lower: lower.to_vec(), upper: upper.to_vec(), inv_diag: inv }
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = b.len();
        for i in 1..n {
            b[i] = b[i] - self.lower[i - 1] * self.inv_diag[i - 1] * b[i - 1];
        }
        b[n - 1] = b[n - 1] * self.inv_diag[n - 1];
        for i in (0..n - 1).rev() {
            b[i] = (b[i] - self.upper[i] * b[i + 1]) * self.inv_diag[i];
        }
    }
}

/// Number of eigenvalues below `x` of the symmetric tridiagonal matrix `(diag, off)`.
pub fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = diag[0] - x;
    if q < 0.0 {
        count += 1;
    }
    for i in 1..diag.len() {
        let qq = if q == 0.0 { f64::EPSILON * (off[i - 1].abs() + 1.0) } else { q };
        q = diag[i] - x - off[i - 1] * off[i - 1] / qq;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Gershgorin interval for a symmetric tridiagonal matrix.
pub fn gershgorin(diag: &[f64], off: &[f64]) -> (f64, f64) {
    let n = diag.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let mut rad = 0.0;
        if i > 0 {
            rad += off[i - 1].abs();
        }
        if i + 1 < n {
            rad += off[i].abs();
        }
        lo = lo.min(diag[i] - rad);
        hi = hi.max(diag[i] + rad);
    }
    (lo, hi)
}

/// The `k`-th smallest eigenvalue (zero based) by bisection on Sturm counts.
pub fn tridiagonal_eigenvalue(diag: &[f64], off: &[f64], k: usize, tol: f64) -> f64 {
    let (mut lo, mut hi) = gershgorin(diag, off);
    for _ in 0..200 {
        if hi - lo <= tol * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if sturm_count(diag, off, mid) > k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}
