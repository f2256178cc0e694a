//! Lattice stencils: the kernel integrated over the cells of a uniform
//! `(z, r)` lattice with spacing `(hz, hr)` in kernel units.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::kernel::{Kernel, KernelMoments};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum WeightPolicy {
    /// Cell integral by a `sub^(d+1)` midpoint rule.
    CellAverage { sub: usize },
    /// `J(z_j, r_k)·hz^d·hr`.
    PointSample,
}

impl Default for WeightPolicy {
    fn default() -> Self {
        WeightPolicy::CellAverage { sub: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct Stencil<T> {
    pub dim: usize,
    pub hz: T,
    pub hr: T,
    offsets: Vec<i64>,
    lags: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Real> Stencil<T> {
    pub fn from_kernel(k: &Kernel<T>, hz: T, hr: T, policy: WeightPolicy) -> Result<Self> {
        if !(hz > T::zero() && hr > T::zero()) {
            return Err(Error::Config("stencil spacings must be positive".into()));
        }
        let sup = k.support();
        if sup.r_lo < hr * T::of(0.5) {
            return Err(Error::Config(format!(
                "kernel time support starts at {} which is below half a lattice lag ({}); refine hr or clip the kernel",
                sup.r_lo,
                hr * T::of(0.5)
            )));
        }
        let d = k.dim;
        let jmax = (sup.half_width / hz + T::of(0.5)).ceil().to_i64().unwrap();
        let kmax = (sup.r_hi / hr + T::of(0.5)).ceil().to_usize().unwrap();
        let side = (2 * jmax + 1) as usize;
        let even = k.is_even();
        let mut cache: HashMap<(Vec<i64>, usize), T> = HashMap::new();
        let mut entries = Vec::new();
        let mut j = vec![0i64; d];
        for lag in 1..=kmax {
            for flat in 0..side.pow(d as u32) {
                let mut rem = flat;
                for c in (0..d).rev() {
                    j[c] = (rem % side) as i64 - jmax;
                    rem /= side;
                }
                let key: Vec<i64> = if even { j.iter().map(|x| x.abs()).collect() } else { j.clone() };
                let w = *cache
                    .entry((key.clone(), lag))
                    .or_insert_with(|| cell_weight(k, &key, lag, hz, hr, policy));
                if w.abs() >= T::of(1e-15) {
                    entries.push((j.clone(), lag, w));
                }
            }
        }
        Stencil::from_parts(d, hz, hr, entries)
    }

    /// Builds a stencil from explicit `(offset, lag, weight)` entries.
    pub fn from_parts(dim: usize, hz: T, hr: T, mut entries: Vec<(Vec<i64>, usize, T)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("empty stencil: kernel support unresolved by the grid".into()));
        }
        if entries.iter().any(|(j, l, w)| j.len() != dim || *l == 0 || *w < T::zero()) {
            return Err(Error::Config("stencil entries need lag ≥ 1, dimension d and nonnegative weight".into()));
        }
        entries.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let mut s = Stencil {
            dim,
            hz,
            hr,
            offsets: Vec::with_capacity(entries.len() * dim),
            lags: Vec::with_capacity(entries.len()),
            weights: Vec::with_capacity(entries.len()),
        };
        for (j, l, w) in entries {
            s.offsets.extend_from_slice(&j);
            s.lags.push(l);
            s.weights.push(w);
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn offset(&self, s: usize) -> &[i64] {
        &self.offsets[s * self.dim..(s + 1) * self.dim]
    }

    pub fn lag(&self, s: usize) -> usize {
        self.lags[s]
    }

    pub fn weight(&self, s: usize) -> T {
        self.weights[s]
    }

    /// Spatial offset in kernel units.
    pub fn z(&self, s: usize, c: usize) -> T {
        T::of_i64(self.offsets[s * self.dim + c]) * self.hz
    }

    /// Time lag in kernel units.
    pub fn r(&self, s: usize) -> T {
        T::of_usize(self.lags[s]) * self.hr
    }

    pub fn max_lag(&self) -> usize {
        self.lags.iter().copied().max().unwrap_or(0)
    }

    pub fn min_lag(&self) -> usize {
        self.lags.iter().copied().min().unwrap_or(0)
    }

    pub fn max_offset(&self) -> Vec<usize> {
        (0..self.dim)
            .map(|c| (0..self.len()).map(|s| self.offset(s)[c].unsigned_abs() as usize).max().unwrap_or(0))
            .collect()
    }

    pub fn mass(&self) -> T {
        self.weights.iter().copied().sum()
    }

    /// Entries with `|z|_∞ ≤ max_z` and `r ≤ max_r` (kernel units).
    pub fn restricted(&self, max_z: T, max_r: T) -> Result<Self> {
        let entries = (0..self.len())
            .filter(|&s| self.r(s) <= max_r && (0..self.dim).all(|c| self.z(s, c).abs() <= max_z))
            .map(|s| (self.offset(s).to_vec(), self.lag(s), self.weight(s)))
            .collect();
        Stencil::from_parts(self.dim, self.hz, self.hr, entries)
    }

    /// Discrete analogues of the kernel moments.
    pub fn moments(&self) -> KernelMoments<T> {
        let d = self.dim;
        let mut m = KernelMoments {
            mass: T::zero(),
            first_space: vec![T::zero(); d],
            time_moment: T::zero(),
            second_space: vec![T::zero(); d * d],
            third_space: vec![T::zero(); d * d * d],
            cross_moment: vec![T::zero(); d],
        };
        let half = T::of(0.5);
        let sixth = T::one() / T::of(6.0);
        for s in 0..self.len() {
            let w = self.weight(s);
            let r = self.r(s);
            m.mass += w;
            m.time_moment += w * r;
            for a in 0..d {
                let za = self.z(s, a);
                m.first_space[a] += w * za;
                m.cross_moment[a] += w * r * za;
                for b in 0..d {
                    let zb = self.z(s, b);
                    m.second_space[a * d + b] += half * w * za * zb;
                    for c in 0..d {
                        m.third_space[(a * d + b) * d + c] += sixth * w * za * zb * self.z(s, c);
                    }
                }
            }
        }
        m
    }
}

fn cell_weight<T: Real>(k: &Kernel<T>, j: &[i64], lag: usize, hz: T, hr: T, policy: WeightPolicy) -> T {
    let d = j.len();
    let volume = hz.powi(d as i32) * hr;
    let r0 = T::of_usize(lag) * hr;
    match policy {
        WeightPolicy::PointSample => {
            let z: Vec<T> = j.iter().map(|x| T::of_i64(*x) * hz).collect();
            k.eval(&z, r0) * volume
        }
        WeightPolicy::CellAverage { sub } => {
            let m = sub.max(1);
            let mut z = vec![T::zero(); d];
            let mut acc = T::zero();
            let points = m.pow(d as u32 + 1);
            let frac = |i: usize| (T::of_usize(i) + T::of(0.5)) / T::of_usize(m) - T::of(0.5);
            for flat in 0..points {
                let mut rem = flat;
                for c in 0..d {
                    z[c] = (T::of_i64(j[c]) + frac(rem % m)) * hz;
                    rem /= m;
                }
                let r = r0 + frac(rem % m) * hr;
                acc += k.eval(&z, r);
            }
            acc / T::of_usize(points) * volume
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_stencil_is_trapezoid_exact() {
        let k = Kernel::<f64>::boxed(1, 0.5, 1.0, 2.0).unwrap();
        let s = Stencil::from_kernel(&k, 1.0 / 16.0, 1.0 / 8.0, WeightPolicy::default()).unwrap();
        assert_eq!(s.len(), 17 * 9);
        let m = s.moments();
        assert!((m.mass - 1.0).abs() < 1e-14);
        assert!((m.time_moment - 1.5).abs() < 1e-14);
        // trapezoid over z²: 1/12 + h²/6
        let h: f64 = 1.0 / 16.0;
        assert!((m.second_space[0] - 0.5 * (1.0 / 12.0 + h * h / 6.0)).abs() < 1e-14);
        assert_eq!(m.first_space[0], 0.0);
    }

    #[test]
    fn unresolved_time_support() {
        let k = Kernel::<f64>::truncated_weierstrass(1).unwrap();
        assert!(Stencil::from_kernel(&k, 0.05, 0.01, WeightPolicy::default()).is_err());
    }
}
