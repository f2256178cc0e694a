//! Adaptive Simpson quadrature.

use crate::{Error, Real, Result};

/// Settings shared by nested integrations.
#[derive(Clone, Copy, Debug)]
pub struct Adaptive<T> {
    /// Absolute tolerance for the whole interval.
    pub tol: T,
    /// Maximum number of integrand evaluations before giving up.
    pub budget: usize,
}

impl<T: Real> Adaptive<T> {
    pub fn new(tol: T) -> Self {
        Adaptive {
            tol,
            budget: 4_000_000,
        }
    }

    /// Integrates `f` over `[a, b]`.
    pub fn integrate<F>(&self, a: T, b: T, mut f: F) -> Result<T>
    where
        F: FnMut(T) -> Result<T>,
    {
        if a == b {
            return Ok(T::zero());
        }
        let mut evals = 0usize;
        let min_width = (b - a).abs() * T::of(1e-13);
        let m = (a + b) * T::of(0.5);
        let fa = f(a)?;
        let fm = f(m)?;
        let fb = f(b)?;
        let whole = simpson(a, b, fa, fm, fb);
        let mut run = Run {
            f: &mut f,
            evals: &mut evals,
            budget: self.budget,
            min_width,
        };
        run.step(a, b, fa, fm, fb, whole, self.tol)
    }

    /// Integrates over `[a, b]` with the kink at `c` (if inside) as a breakpoint.
    pub fn integrate_split<F>(&self, a: T, b: T, c: T, mut f: F) -> Result<T>
    where
        F: FnMut(T) -> Result<T>,
    {
        if c > a && c < b {
            let half = Adaptive {
                tol: self.tol * T::of(0.5),
                budget: self.budget,
            };
            Ok(half.integrate(a, c, &mut f)? + half.integrate(c, b, &mut f)?)
        } else {
            self.integrate(a, b, f)
        }
    }
}

fn simpson<T: Real>(a: T, b: T, fa: T, fm: T, fb: T) -> T {
    (b - a) / T::of(6.0) * (fa + T::of(4.0) * fm + fb)
}

struct Run<'a, T, F> {
    f: &'a mut F,
    evals: &'a mut usize,
    budget: usize,
    min_width: T,
}

impl<T: Real, F: FnMut(T) -> Result<T>> Run<'_, T, F> {
    #[allow(clippy::too_many_arguments)]
    fn step(&mut self, a: T, b: T, fa: T, fm: T, fb: T, whole: T, tol: T) -> Result<T> {
        let half = T::of(0.5);
        let m = (a + b) * half;
        let lm = (a + m) * half;
        let rm = (m + b) * half;
        let flm = (self.f)(lm)?;
        let frm = (self.f)(rm)?;
        *self.evals += 2;
        let left = simpson(a, m, fa, flm, fm);
        let right = simpson(m, b, fm, frm, fb);
        let delta = left + right - whole;
        let floor = T::epsilon() * T::of(64.0) * (left.abs() + right.abs());
        if delta.abs() <= T::of(15.0) * tol || delta.abs() <= floor || (b - a).abs() <= self.min_width {
            return Ok(left + right + delta / T::of(15.0));
        }
        if *self.evals > self.budget {
            return Err(Error::Quadrature {
                previous: whole.f64(),
                last: (left + right).f64(),
            });
        }
        Ok(self.step(a, m, fa, flm, fm, left, tol * half)?
            + self.step(m, b, fm, frm, fb, right, tol * half)?)
    }
}

/// Composite trapezoid weights on `n` uniform nodes with spacing `h`.
pub fn trapezoid_weights<T: Real>(n: usize, h: T) -> Vec<T> {
    let mut w = vec![h; n];
    if n == 1 {
        w[0] = T::zero();
    } else if n > 1 {
        w[0] = h * T::of(0.5);
        w[n - 1] = h * T::of(0.5);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let q = Adaptive::<f64>::new(1e-12);
        let v = q.integrate(0.0, 2.0, |x| Ok(x * x * x)).unwrap();
        assert!((v - 4.0).abs() < 1e-13);
    }

    #[test]
    fn handles_jump() {
        let q = Adaptive::<f64>::new(1e-10);
        let v = q
            .integrate(0.0, 1.0, |x| Ok(if x < 0.3 { 1.0 } else { 2.0 }))
            .unwrap();
        assert!((v - 1.7).abs() < 1e-9, "{v}");
    }

    #[test]
    fn sqrt_endpoint() {
        let q = Adaptive::new(1e-11);
        let v = q.integrate(0.0, 1.0, |x: f64| Ok(x.sqrt())).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn budget_exhaustion_reports_refinements() {
        let q = Adaptive {
            tol: 1e-14,
            budget: 50,
        };
        let err = q.integrate(0.0, 1.0, |x: f64| Ok((40.0 * x).sin())).unwrap_err();
        match err {
            Error::Quadrature { previous, last } => assert!(previous.is_finite() && last.is_finite()),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn trapezoid() {
        let w = trapezoid_weights(5, 0.25);
        assert_eq!(w, vec![0.125, 0.25, 0.25, 0.25, 0.125]);
    }
}
