//! Small dense LU with partial pivoting and a tridiagonal solver.

use crate::{Error, Real, Result};

const PIVOT_FLOOR: f64 = 1e-13;

#[derive(Clone, Debug)]
pub struct Lu<T> {
    n: usize,
    a: Vec<T>,
    perm: Vec<usize>,
    /// `min |pivot| / max |pivot|`.
    pub pivot_ratio: f64,
}

impl<T: Real> Lu<T> {
    /// Factor the row-major `n×n` matrix `a`.
    pub fn factor(n: usize, mut a: Vec<T>) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let mut perm: Vec<usize> = (0..n).collect();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for k in 0..n {
            let mut p = k;
            for i in k + 1..n {
                if a[i * n + k].abs() > a[p * n + k].abs() {
                    p = i;
                }
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let piv = a[k * n + k];
            lo = lo.min(piv.abs().f64());
            hi = hi.max(piv.abs().f64());
            if piv == T::zero() {
                return Err(Error::Singular { pivot_ratio: 0.0 });
            }
            for i in k + 1..n {
                let l = a[i * n + k] / piv;
                a[i * n + k] = l;
                if l != T::zero() {
                    for j in k + 1..n {
                        let v = a[k * n + j];
                        a[i * n + j] -= l * v;
                    }
                }
            }
        }
        let pivot_ratio = if hi > 0.0 { lo / hi } else { 0.0 };
        if pivot_ratio < PIVOT_FLOOR {
            return Err(Error::Singular { pivot_ratio });
        }
        Ok(Lu { n, a, perm, pivot_ratio })
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut x: Vec<T> = self.perm.iter().map(|p| b[*p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.a[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.a[i * n + j] * x[j];
            }
            x[i] = s / self.a[i * n + i];
        }
        x
    }
}

/// Thomas algorithm for `lower[i]·x[i−1] + diag[i]·x[i] + upper[i]·x[i+1] = rhs[i]`.
/// All bands have length `n`; `lower[0]` and `upper[n−1]` are ignored.
pub fn tridiagonal<T: Real>(lower: &[T], diag: &[T], upper: &[T], rhs: &[T]) -> Result<Vec<T>> {
    let n = diag.len();
    if lower.len() != n || upper.len() != n || rhs.len() != n {
        return Err(Error::Config("tridiagonal bands and right-hand side must all have length n".into()));
    }
    let mut c = vec![T::zero(); n];
    let mut d = vec![T::zero(); n];
    let scale = diag.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    for i in 0..n {
        let m = diag[i] - if i > 0 { lower[i] * c[i - 1] } else { T::zero() };
        if m.abs() <= T::of(PIVOT_FLOOR) * scale {
            return Err(Error::Singular {
                pivot_ratio: (m.abs() / scale).f64(),
            });
        }
        c[i] = if i + 1 < n { upper[i] / m } else { T::zero() };
        d[i] = (rhs[i] - if i > 0 { lower[i] * d[i - 1] } else { T::zero() }) / m;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        let v = d[i + 1];
        d[i] -= c[i] * v;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let lu = Lu::factor(3, vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0f64]).unwrap();
        let x = lu.solve(&[7.0, 3.0, 6.0]);
        for (a, b) in x.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(Lu::factor(2, vec![1.0, 2.0, 2.0, 4.0f64]).is_err());
    }

    #[test]
    fn thomas_matches() {
        let x = tridiagonal(&[0.0, 1.0, 1.0], &[4.0, 4.0, 4.0f64], &[1.0, 1.0, 0.0], &[6.0, 12.0, 14.0]).unwrap();
        for (a, b) in x.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
