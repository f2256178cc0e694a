//! Homogenized limit problems: linear parabolic PDE, 1D degenerate
//! p-parabolic PDE, the fluctuation SPDE and a two-scale Crank–Nicolson FEM.

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

pub mod fem;
pub mod linear;
pub mod lu;
pub mod plap;
pub mod spde;

pub use fem::{two_scale_fem_step, FemState, TwoScaleFem};
pub use linear::solve_linear_local;
pub use plap::solve_p_local_1d;
pub use spde::{simulate_spde, solve_drift, SpdeCoefficients, SpdePath};

/// Vertex-centred box grid `x = lower + i·h`, `i = 0..n`, boundary nodes included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalGrid<T> {
    pub lower: Vec<T>,
    pub h: T,
    pub n: Vec<usize>,
    pub tau: T,
    pub steps: usize,
    /// Keep every `record_every`-th frame (the first and last are always kept).
    pub record_every: usize,
}

impl<T: Real> LocalGrid<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>, nodes: usize, tau: T, t_final: T) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() || nodes < 3 || !(tau > T::zero()) {
            return Err(Error::Config("local grid needs matching bounds, ≥ 3 nodes and τ > 0".into()));
        }
        let h = (upper[0] - lower[0]) / T::of_usize(nodes - 1);
        if !(h > T::zero()) {
            return Err(Error::Config("local grid needs upper > lower".into()));
        }
        let n = lower
            .iter()
            .zip(&upper)
            .map(|(l, u)| ((*u - *l) / h + T::of(1e-9)).floor().to_usize().unwrap_or(0) + 1)
            .collect();
        let steps = (t_final / tau - T::of(1e-9)).ceil().to_usize().unwrap_or(0);
        Ok(LocalGrid {
            lower,
            h,
            n,
            tau,
            steps,
            record_every: 1,
        })
    }

    pub fn dim(&self) -> usize {
        self.n.len()
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        let mut rem = flat;
        for c in (0..self.dim()).rev() {
            idx[c] = rem % self.n[c];
            rem /= self.n[c];
        }
        idx
    }

    pub fn stride(&self, c: usize) -> usize {
        self.n[c + 1..].iter().product()
    }

    pub fn point(&self, flat: usize) -> Vec<T> {
        self.index(flat)
            .iter()
            .zip(&self.lower)
            .map(|(i, l)| *l + T::of_usize(*i) * self.h)
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<T>> {
        (0..self.len()).map(|k| self.point(k)).collect()
    }

    pub fn on_boundary(&self, flat: usize) -> bool {
        self.index(flat).iter().zip(&self.n).any(|(i, n)| *i == 0 || *i + 1 == *n)
    }

    pub fn horizon(&self) -> T {
        T::of_usize(self.steps) * self.tau
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeInfo {
    pub name: String,
    pub h: f64,
    pub tau: f64,
    pub steps: usize,
    pub regularization: Option<f64>,
    /// Largest stable step for the scheme at the recorded coefficients.
    pub stable_tau: f64,
}

/// Solution of a local limit problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalSolution<T> {
    pub grid: LocalGrid<T>,
    /// Coefficients actually used, e.g. `{"alpha_hat": …, "theta": …}`.
    pub coefficients: Vec<(String, Vec<f64>)>,
    pub scheme: SchemeInfo,
    pub times: Vec<T>,
    pub frames: Vec<Vec<T>>,
}

impl<T: Real> LocalSolution<T> {
    pub fn final_frame(&self) -> &[T] {
        self.frames.last().map(|f| f.as_slice()).unwrap_or(&[])
    }

    /// Multilinear interpolation in space and linear in time; clamps outside the box.
    pub fn value(&self, x: &[T], t: T) -> T {
        let k = self.times.partition_point(|s| *s <= t);
        if k == 0 {
            return self.spatial(0, x);
        }
        if k >= self.times.len() {
            return self.spatial(self.times.len() - 1, x);
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        self.spatial(k - 1, x) * (T::one() - w) + self.spatial(k, x) * w
    }

    fn spatial(&self, frame: usize, x: &[T]) -> T {
        let g = &self.grid;
        let d = g.dim();
        let f = &self.frames[frame];
        let mut base = vec![0usize; d];
        let mut frac = vec![T::zero(); d];
        for c in 0..d {
            let s = ((x[c] - g.lower[c]) / g.h).max(T::zero());
            let top = g.n[c] - 1;
            let i = s.floor().to_usize().unwrap_or(0).min(top.saturating_sub(1));
            base[c] = i;
            frac[c] = (s - T::of_usize(i)).min(T::one());
        }
        let mut acc = T::zero();
        for corner in 0..(1usize << d) {
            let mut w = T::one();
            let mut flat = 0;
            for c in 0..d {
                let up = (corner >> c) & 1 == 1;
                w *= if up { frac[c] } else { T::one() - frac[c] };
                flat += (base[c] + up as usize) * g.stride(c);
            }
            if w != T::zero() {
                acc += w * f[flat];
            }
        }
        acc
    }
}

/// Slow-variable field with derivatives up to third order in `x` and `∂ₜ∇`.
pub trait MacroField<T>: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[T], t: T) -> T;
    fn gradient(&self, x: &[T], t: T) -> Vec<T>;
    /// Row-major `d×d`.
    fn hessian(&self, x: &[T], t: T) -> Vec<T>;
    /// Row-major `d×d×d`.
    fn third(&self, x: &[T], t: T) -> Vec<T>;
    fn dt_gradient(&self, x: &[T], t: T) -> Vec<T>;
}

/// Exact solution of `∂ₜu = D:∇∇u` from `u(x,0) = a·exp(−|x−c|²/(2σ²))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHeat<T> {
    pub amplitude: T,
    pub center: Vec<T>,
    pub sigma: T,
    /// Row-major symmetric `d×d` diffusivity `−Θ/α̂`.
    pub diffusivity: Vec<T>,
}

impl<T: Real> GaussianHeat<T> {
    pub fn new(amplitude: T, center: Vec<T>, sigma: T, diffusivity: Vec<T>) -> Result<Self> {
        let d = center.len();
        if diffusivity.len() != d * d || !(sigma > T::zero()) {
            return Err(Error::Config("Gaussian needs σ > 0 and a d×d diffusivity".into()));
        }
        Ok(GaussianHeat {
            amplitude,
            center,
            sigma,
            diffusivity,
        })
    }

    /// `(P = Σ_t⁻¹, y = P(x−c), u)` with `Σ_t = σ²I + 2Dt`.
    fn frame(&self, x: &[T], t: T) -> (Vec<f64>, Vec<f64>, f64) {
        let d = self.center.len();
        let s2 = self.sigma.f64().powi(2);
        let sig = nalgebra::DMatrix::from_fn(d, d, |i, j| {
            (if i == j { s2 } else { 0.0 }) + 2.0 * t.f64() * self.diffusivity[i * d + j].f64()
        });
        let det = sig.determinant();
        let p = sig.try_inverse().unwrap_or_else(|| nalgebra::DMatrix::zeros(d, d));
        let dx = nalgebra::DVector::from_fn(d, |i, _| (x[i] - self.center[i]).f64());
        let y = &p * &dx;
        let u = self.amplitude.f64() * (s2.powi(d as i32) / det).sqrt() * (-0.5 * dx.dot(&y)).exp();
        (p.as_slice().to_vec(), y.as_slice().to_vec(), u)
    }
}

impl<T: Real> MacroField<T> for GaussianHeat<T> {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[T], t: T) -> T {
        T::of(self.frame(x, t).2)
    }

    fn gradient(&self, x: &[T], t: T) -> Vec<T> {
        let (_, y, u) = self.frame(x, t);
        y.iter().map(|v| T::of(-v * u)).collect()
    }

    fn hessian(&self, x: &[T], t: T) -> Vec<T> {
        let d = self.dim();
        let (p, y, u) = self.frame(x, t);
        (0..d * d).map(|k| T::of((y[k / d] * y[k % d] - p[k]) * u)).collect()
    }

    fn third(&self, x: &[T], t: T) -> Vec<T> {
        let d = self.dim();
        let (p, y, u) = self.frame(x, t);
        let mut out = Vec::with_capacity(d * d * d);
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let v = -y[i] * y[j] * y[k] + p[i * d + j] * y[k] + p[i * d + k] * y[j] + p[j * d + k] * y[i];
                    out.push(T::of(v * u));
                }
            }
        }
        out
    }

    fn dt_gradient(&self, x: &[T], t: T) -> Vec<T> {
        let d = self.dim();
        let third = self.third(x, t);
        (0..d)
            .map(|k| {
                let mut s = T::zero();
                for i in 0..d {
                    for j in 0..d {
                        s += self.diffusivity[i * d + j] * third[(i * d + j) * d + k];
                    }
                }
                s
            })
            .collect()
    }
}

/// A field frozen at time `t0` (`∂ₜ ≡ 0`).
pub struct Frozen<'a, T> {
    pub inner: &'a dyn MacroField<T>,
    pub t0: T,
}

impl<T: Real> MacroField<T> for Frozen<'_, T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, x: &[T], _t: T) -> T {
        self.inner.value(x, self.t0)
    }
    fn gradient(&self, x: &[T], _t: T) -> Vec<T> {
        self.inner.gradient(x, self.t0)
    }
    fn hessian(&self, x: &[T], _t: T) -> Vec<T> {
        self.inner.hessian(x, self.t0)
    }
    fn third(&self, x: &[T], _t: T) -> Vec<T> {
        self.inner.third(x, self.t0)
    }
    fn dt_gradient(&self, _x: &[T], _t: T) -> Vec<T> {
        vec![T::zero(); self.inner.dim()]
    }
}

/// Central differences of the interpolated solution with step `h`.
impl<T: Real> MacroField<T> for LocalSolution<T> {
    fn dim(&self) -> usize {
        self.grid.dim()
    }

    fn value(&self, x: &[T], t: T) -> T {
        LocalSolution::value(self, x, t)
    }

    fn gradient(&self, x: &[T], t: T) -> Vec<T> {
        let h = self.grid.h;
        (0..self.dim())
            .map(|c| {
                let (mut a, mut b) = (x.to_vec(), x.to_vec());
                a[c] += h;
                b[c] -= h;
                (LocalSolution::value(self, &a, t) - LocalSolution::value(self, &b, t)) / (h + h)
            })
            .collect()
    }

    fn hessian(&self, x: &[T], t: T) -> Vec<T> {
        let d = self.dim();
        let h = self.grid.h;
        let mut out = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                let (mut a, mut b) = (x.to_vec(), x.to_vec());
                a[j] += h;
                b[j] -= h;
                let ga = self.gradient(&a, t)[i];
                let gb = self.gradient(&b, t)[i];
                out[i * d + j] = (ga - gb) / (h + h);
            }
        }
        out
    }

    fn third(&self, x: &[T], t: T) -> Vec<T> {
        let d = self.dim();
        let h = self.grid.h;
        let mut out = vec![T::zero(); d * d * d];
        for k in 0..d {
            let (mut a, mut b) = (x.to_vec(), x.to_vec());
            a[k] += h;
            b[k] -= h;
            let ha = self.hessian(&a, t);
            let hb = self.hessian(&b, t);
            for ij in 0..d * d {
                out[ij * d + k] = (ha[ij] - hb[ij]) / (h + h);
            }
        }
        out
    }

    fn dt_gradient(&self, x: &[T], t: T) -> Vec<T> {
        let dt = self.grid.tau * T::of_usize(self.grid.record_every.max(1));
        let lo = (t - dt).max(T::zero());
        let hi = t + dt;
        let a = self.gradient(x, hi);
        let b = self.gradient(x, lo);
        a.iter().zip(&b).map(|(u, v)| (*u - *v) / (hi - lo)).collect()
    }
}

/// `D:∇∇u` at interior node `flat` by central differences.
pub(crate) fn apply_second<T: Real>(grid: &LocalGrid<T>, d_mat: &[T], u: &[T], flat: usize) -> T {
    let d = grid.dim();
    let h2 = grid.h * grid.h;
    let mut s = T::zero();
    for i in 0..d {
        let si = grid.stride(i);
        let dii = d_mat[i * d + i];
        if dii != T::zero() {
            s += dii * (u[flat + si] - u[flat] - u[flat] + u[flat - si]) / h2;
        }
        for j in 0..d {
            if i != j {
                let dij = d_mat[i * d + j];
                if dij != T::zero() {
                    let sj = grid.stride(j);
                    let cross = (u[flat + si + sj] - u[flat + si - sj] - u[flat - si + sj] + u[flat - si - sj]) / (T::of(4.0) * h2);
                    s += dij * cross;
                }
            }
        }
    }
    s
}

pub(crate) fn record(every: usize, step: usize, last: usize) -> bool {
    step == last || step.is_multiple_of(every.max(1))
}
