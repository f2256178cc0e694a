use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_second, record, LocalGrid, MacroField};
use crate::effective::{psd_sqrt, EffectiveCoefficients};
use crate::{Error, Real, Result};

/// Inputs of `α̂ dω + Θ:∇∇ω dt = −(μ:∂³u₀ + μ₁·∂ₜ∇u₀) dt − Υ^{1/2} ∂²u₀ dW`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdeCoefficients<T> {
    pub dim: usize,
    pub alpha_hat: T,
    pub theta: Vec<T>,
    pub mu_tensor: Vec<T>,
    pub mu1: Vec<T>,
    /// `d²×d²`, symmetric PSD.
    pub upsilon: Vec<T>,
}

impl<T: Real> From<&EffectiveCoefficients<T>> for SpdeCoefficients<T> {
    fn from(c: &EffectiveCoefficients<T>) -> Self {
        SpdeCoefficients {
            dim: c.dim,
            alpha_hat: c.alpha_hat,
            theta: c.theta.clone(),
            mu_tensor: c.mu_tensor.clone(),
            mu1: c.mu1.clone(),
            upsilon: c.upsilon_psd.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdePath<T> {
    pub seed: u64,
    pub stream: u64,
    pub times: Vec<T>,
    pub frames: Vec<Vec<T>>,
    /// Brownian increments, `steps × d²`.
    pub increments: Vec<T>,
}

impl<T: Real> SpdePath<T> {
    pub fn final_frame(&self) -> &[T] {
        self.frames.last().map(|f| f.as_slice()).unwrap_or(&[])
    }
}

/// Precomputed Euler–Maruyama data shared by all paths.
pub struct SpdeDriver<T> {
    pub grid: LocalGrid<T>,
    pub coefficients: SpdeCoefficients<T>,
    diffusivity: Vec<T>,
    interior: Vec<bool>,
    /// `steps × nodes`: `−(μ:∂³u₀ + μ₁·∂ₜ∇u₀)/α̂` at `t_n`.
    drift: Vec<T>,
    /// `steps × nodes × d²`: `−α̂⁻¹ (Υ^{1/2})^{ij,kl} ∂ᵢ∂ⱼu₀` at `t_n`.
    loading: Vec<T>,
    noisy: bool,
}

impl<T: Real> SpdeDriver<T> {
    pub fn new(coefficients: &SpdeCoefficients<T>, u0: &dyn MacroField<T>, grid: &LocalGrid<T>) -> Result<Self> {
        let d = coefficients.dim;
        let m = d * d;
        let c = coefficients;
        if grid.dim() != d || u0.dim() != d {
            return Err(Error::Config("SPDE grid, macro field and coefficients disagree on dimension".into()));
        }
        if c.theta.len() != m || c.mu_tensor.len() != m * d || c.mu1.len() != d || c.upsilon.len() != m * m {
            return Err(Error::Config("SPDE coefficient shapes do not match the dimension".into()));
        }
        if c.alpha_hat == T::zero() {
            return Err(Error::Config("α̂ must be nonzero".into()));
        }
        let ups: Vec<f64> = c.upsilon.iter().map(|v| v.f64()).collect();
        let root = psd_sqrt(&ups, m)?;
        let diffusivity: Vec<T> = c.theta.iter().map(|t| -*t / c.alpha_hat).collect();
        let trace: T = (0..d).map(|i| c.theta[i * d + i]).sum();
        if trace != T::zero() {
            let stable = grid.h * grid.h * c.alpha_hat.abs() / (T::of(2.0) * trace.abs());
            if grid.tau > stable * (T::one() + T::of(1e-12)) {
                return Err(Error::Config(format!(
                    "time step {:e} exceeds the stability bound {:e}",
                    grid.tau.f64(),
                    stable.f64()
                )));
            }
        }
        let n = grid.len();
        let interior: Vec<bool> = (0..n).map(|k| !grid.on_boundary(k)).collect();
        let points = grid.points();
        let inv = T::one() / c.alpha_hat;
        let steps = grid.steps;
        let rows: Vec<(Vec<T>, Vec<T>)> = (0..steps)
            .into_par_iter()
            .map(|step| {
                let t = T::of_usize(step) * grid.tau;
                let mut drift = vec![T::zero(); n];
                let mut load = vec![T::zero(); n * m];
                for k in 0..n {
                    if !interior[k] {
                        continue;
                    }
                    let x = &points[k];
                    let third = u0.third(x, t);
                    let dtg = u0.dt_gradient(x, t);
                    let s: T = c.mu_tensor.iter().zip(&third).map(|(a, b)| *a * *b).sum::<T>()
                        + c.mu1.iter().zip(&dtg).map(|(a, b)| *a * *b).sum::<T>();
                    drift[k] = -s * inv;
                    let hess = u0.hessian(x, t);
                    for kl in 0..m {
                        let mut v = 0.0;
                        for ij in 0..m {
                            v += root[ij * m + kl] * hess[ij].f64();
                        }
                        load[k * m + kl] = -inv * T::of(v);
                    }
                }
                (drift, load)
            })
            .collect();
        let mut drift = Vec::with_capacity(steps * n);
        let mut loading = Vec::with_capacity(steps * n * m);
        for (a, b) in rows {
            drift.extend(a);
            loading.extend(b);
        }
        let noisy = root.iter().any(|v| *v != 0.0);
        Ok(SpdeDriver {
            grid: grid.clone(),
            coefficients: c.clone(),
            diffusivity,
            interior,
            drift,
            loading,
            noisy,
        })
    }

    fn march(&self, with_drift: bool, noise: Option<&[T]>, observer: &mut dyn FnMut(usize, &[T])) {
        let g = &self.grid;
        let n = g.len();
        let m = self.coefficients.dim * self.coefficients.dim;
        let mut w = vec![T::zero(); n];
        let mut next = w.clone();
        observer(0, &w);
        for step in 0..g.steps {
            let drift = &self.drift[step * n..(step + 1) * n];
            let load = &self.loading[step * n * m..(step + 1) * n * m];
            for k in 0..n {
                if !self.interior[k] {
                    next[k] = T::zero();
                    continue;
                }
                let mut v = w[k] + g.tau * apply_second(g, &self.diffusivity, &w, k);
                if with_drift {
                    v += g.tau * drift[k];
                }
                if let Some(dw) = noise {
                    for kl in 0..m {
                        v += load[k * m + kl] * dw[step * m + kl];
                    }
                }
                next[k] = v;
            }
            std::mem::swap(&mut w, &mut next);
            observer(step + 1, &w);
        }
    }

    fn increments(&self, seed: u64, stream: u64) -> Vec<T> {
        let m = self.coefficients.dim * self.coefficients.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let sd = self.grid.tau.f64().sqrt();
        (0..self.grid.steps * m)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z * sd)
            })
            .collect()
    }

    fn recorded(&self, with_drift: bool, noise: Option<&[T]>) -> (Vec<T>, Vec<Vec<T>>) {
        let g = &self.grid;
        let mut times = Vec::new();
        let mut frames = Vec::new();
        self.march(with_drift, noise, &mut |step, w| {
            if record(g.record_every, step, g.steps) {
                times.push(T::of_usize(step) * g.tau);
                frames.push(w.to_vec());
            }
        });
        (times, frames)
    }

    /// One Euler–Maruyama path; stream `stream` of the ChaCha8 generator seeded by `seed`.
    pub fn path(&self, seed: u64, stream: u64) -> SpdePath<T> {
        let dw = self.increments(seed, stream);
        let (times, frames) = self.recorded(true, Some(&dw));
        SpdePath {
            seed,
            stream,
            times,
            frames,
            increments: dw,
        }
    }

    /// The noise-free solve.
    pub fn drift_only(&self) -> SpdePath<T> {
        let (times, frames) = self.recorded(true, None);
        SpdePath {
            seed: 0,
            stream: 0,
            times,
            frames,
            increments: Vec::new(),
        }
    }

    /// The zero-drift solve driven by the same increments as `path(seed, stream)`.
    pub fn noise_only(&self, seed: u64, stream: u64) -> SpdePath<T> {
        let dw = self.increments(seed, stream);
        let (times, frames) = self.recorded(false, Some(&dw));
        SpdePath {
            seed,
            stream,
            times,
            frames,
            increments: dw,
        }
    }

    /// Ensemble mean/variance at `probes` (node indices) at the final time,
    /// over streams `streams` of `seed`. Accumulation follows stream order.
    pub fn ensemble(&self, seed: u64, streams: &[u64], probes: &[usize]) -> Result<Vec<ProbeStats>> {
        if streams.len() < 2 {
            return Err(Error::Statistics("an ensemble needs at least 2 paths".into()));
        }
        if probes.iter().any(|p| *p >= self.grid.len()) {
            return Err(Error::Config("probe index outside the grid".into()));
        }
        let samples: Vec<Vec<f64>> = streams
            .par_iter()
            .map(|s| {
                let w = if self.noisy {
                    let dw = self.increments(seed, *s);
                    let mut last = Vec::new();
                    self.march(true, Some(&dw), &mut |step, w| {
                        if step == self.grid.steps {
                            last = w.to_vec();
                        }
                    });
                    last
                } else {
                    self.drift_only().final_frame().to_vec()
                };
                probes.iter().map(|p| w[*p].f64()).collect()
            })
            .collect();
        Ok(probe_stats(&samples, probes.len()))
    }
}

/// Mean, variance and their standard errors at one probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub mean: f64,
    pub variance: f64,
    pub mean_se: f64,
    pub variance_se: f64,
    pub samples: usize,
}

/// Per-probe statistics of `samples[path][probe]`; the variance SE uses the
/// fourth central moment, `sqrt((m₄ − s⁴)/n)`.
pub fn probe_stats(samples: &[Vec<f64>], probes: usize) -> Vec<ProbeStats> {
    let n = samples.len() as f64;
    (0..probes)
        .map(|p| {
            let mean = samples.iter().map(|s| s[p]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[p] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let m4 = samples.iter().map(|s| (s[p] - mean).powi(4)).sum::<f64>() / n;
            ProbeStats {
                mean,
                variance: var,
                mean_se: (var / n).sqrt(),
                variance_se: ((m4 - var * var).max(0.0) / n).sqrt(),
                samples: samples.len(),
            }
        })
        .collect()
}

/// One path of the limit SPDE with zero initial and boundary values.
pub fn simulate_spde<T: Real>(
    coefficients: &SpdeCoefficients<T>,
    u0: &dyn MacroField<T>,
    grid: &LocalGrid<T>,
    seed: u64,
) -> Result<SpdePath<T>> {
    Ok(SpdeDriver::new(coefficients, u0, grid)?.path(seed, 0))
}

/// The deterministic drift equation (the SPDE without noise).
pub fn solve_drift<T: Real>(coefficients: &SpdeCoefficients<T>, u0: &dyn MacroField<T>, grid: &LocalGrid<T>) -> Result<SpdePath<T>> {
    let mut c = coefficients.clone();
    c.upsilon.iter_mut().for_each(|v| *v = T::zero());
    Ok(SpdeDriver::new(&c, u0, grid)?.drift_only())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limit::GaussianHeat;

    fn coeffs(ups: f64, mu: f64) -> SpdeCoefficients<f64> {
        SpdeCoefficients {
            dim: 1,
            alpha_hat: -1.0,
            theta: vec![0.5],
            mu_tensor: vec![mu],
            mu1: vec![0.3 * mu],
            upsilon: vec![ups],
        }
    }

    #[test]
    fn zero_inputs_zero_path() {
        let g = LocalGrid::new(vec![-3.0], vec![3.0], 31, 0.01, 0.2).unwrap();
        let u = GaussianHeat::new(1.0, vec![0.0], 0.7, vec![0.5]).unwrap();
        let p = simulate_spde(&coeffs(0.0, 0.0), &u, &g, 7).unwrap();
        assert!(p.frames.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn path_splits_into_drift_and_noise() {
        let g = LocalGrid::new(vec![-3.0], vec![3.0], 31, 0.01, 0.2).unwrap();
        let u = GaussianHeat::new(1.0, vec![0.0], 0.7, vec![0.5]).unwrap();
        let drv = SpdeDriver::new(&coeffs(0.4, 0.2), &u, &g).unwrap();
        let full = drv.path(3, 5);
        let a = drv.drift_only();
        let b = drv.noise_only(3, 5);
        for ((x, y), z) in full.final_frame().iter().zip(a.final_frame()).zip(b.final_frame()) {
            assert!((x - y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn non_psd_rejected() {
        let g = LocalGrid::new(vec![-3.0], vec![3.0], 31, 0.01, 0.2).unwrap();
        let u = GaussianHeat::new(1.0, vec![0.0], 0.7, vec![0.5]).unwrap();
        assert!(simulate_spde(&coeffs(-1.0, 0.0), &u, &g, 1).is_err());
    }
}
