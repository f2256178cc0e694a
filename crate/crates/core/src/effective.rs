//! Homogenized coefficients and fluctuation statistics.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{left_null_vector, solve_frozen, CellOptions, CorrectorField, Torus, Window};
use crate::kernel::Kernel;
use crate::lattice::Stencil;
use crate::media::MediumField;
use crate::stats::batch_means;
use crate::{Error, Real, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    pub alpha_hat: f64,
    pub theta: Vec<f64>,
    pub mu_tensor: Vec<f64>,
    pub mu1: Vec<f64>,
    pub upsilon: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveCoefficients<T> {
    pub dim: usize,
    pub alpha_hat: T,
    /// Row-major `d×d`, symmetrized.
    pub theta: Vec<T>,
    /// Row-major `d×d×d`.
    pub mu_tensor: Vec<T>,
    pub mu1: Vec<T>,
    /// `d²×d²`.
    pub upsilon_raw: Vec<T>,
    pub upsilon_psd: Vec<T>,
    pub standard_errors: StandardErrors,
}

impl<T: Real> EffectiveCoefficients<T> {
    pub fn new(dim: usize, alpha_hat: T, theta: Vec<T>) -> Self {
        let m = dim * dim;
        EffectiveCoefficients {
            dim,
            alpha_hat,
            theta,
            mu_tensor: vec![T::zero(); dim * dim * dim],
            mu1: vec![T::zero(); dim],
            upsilon_raw: vec![T::zero(); m * m],
            upsilon_psd: vec![T::zero(); m * m],
            standard_errors: StandardErrors::default(),
        }
    }

    /// `−Θ/α̂`.
    pub fn diffusivity(&self) -> Vec<T> {
        self.theta.iter().map(|t| -*t / self.alpha_hat).collect()
    }
}

/// Per-node integrands at one fast time level.
#[derive(Clone, Debug, PartialEq)]
pub struct Local<T> {
    /// `−μ Σ w μ' r`
    pub alpha: T,
    /// `μ Σ w μ' (−z⊗χ' + ½ z⊗z)`
    pub theta: Vec<T>,
    /// `μ Σ w μ' (−z⊗z⊗z/6 + ½ z⊗z⊗χ' − z⊗χ₂₂')`
    pub mu3: Vec<T>,
    /// `μ Σ w μ' r (z − χ')`
    pub mu1: Vec<T>,
}

pub type MuLookup<'a, T> = &'a (dyn Fn(i64, usize) -> T + Sync);
pub type FieldLookup<'a, T> = &'a (dyn Fn(i64, usize, usize) -> T + Sync);

/// Lattice sums of the effective integrands over one spatial torus slice.
pub struct SliceSums<'a, T> {
    pub stencil: &'a Stencil<T>,
    pub nz: usize,
    pred: Vec<usize>,
    pub mu: MuLookup<'a, T>,
    pub chi: Option<FieldLookup<'a, T>>,
    pub chi22: Option<FieldLookup<'a, T>>,
}

impl<'a, T: Real> SliceSums<'a, T> {
    pub fn new(stencil: &'a Stencil<T>, nz: usize, mu: MuLookup<'a, T>) -> Self {
        let d = stencil.dim;
        let space = nz.pow(d as u32);
        let s_len = stencil.len();
        let mut pred = vec![0usize; space * s_len];
        let mut idx = vec![0i64; d];
        for i in 0..space {
            let mut rem = i;
            for c in (0..d).rev() {
                idx[c] = (rem % nz) as i64;
                rem /= nz;
            }
            for s in 0..s_len {
                let j = stencil.offset(s);
                let mut flat = 0usize;
                for c in 0..d {
                    flat = flat * nz + (idx[c] - j[c]).rem_euclid(nz as i64) as usize;
                }
                pred[i * s_len + s] = flat;
            }
        }
        SliceSums {
            stencil,
            nz,
            pred,
            mu,
            chi: None,
            chi22: None,
        }
    }

    pub fn space(&self) -> usize {
        self.nz.pow(self.stencil.dim as u32)
    }

    pub fn local(&self, level: i64, i: usize) -> Local<T> {
        let st = self.stencil;
        let d = st.dim;
        let s_len = st.len();
        let half = T::of(0.5);
        let sixth = T::one() / T::of(6.0);
        let mux = (self.mu)(level, i);
        let mut out = Local {
            alpha: T::zero(),
            theta: vec![T::zero(); d * d],
            mu3: vec![T::zero(); d * d * d],
            mu1: vec![T::zero(); d],
        };
        let mut chi = vec![T::zero(); d];
        let mut chi22 = vec![T::zero(); d * d];
        for s in 0..s_len {
            let nb = self.pred[i * s_len + s];
            let m = level - st.lag(s) as i64;
            let c = st.weight(s) * mux * (self.mu)(m, nb);
            let r = st.r(s);
            if let Some(f) = self.chi {
                for (a, v) in chi.iter_mut().enumerate() {
                    *v = f(m, nb, a);
                }
            }
            if let Some(f) = self.chi22 {
                for (a, v) in chi22.iter_mut().enumerate() {
                    *v = f(m, nb, a);
                }
            }
            out.alpha -= c * r;
            for a in 0..d {
                let za = st.z(s, a);
                out.mu1[a] += c * r * (za - chi[a]);
                for b in 0..d {
                    let zb = st.z(s, b);
                    out.theta[a * d + b] += c * (-za * chi[b] + half * za * zb);
                    for k in 0..d {
                        let zk = st.z(s, k);
                        out.mu3[(a * d + b) * d + k] +=
                            c * (-za * zb * zk * sixth + half * za * zb * chi[k] - za * chi22[b * d + k]);
                    }
                }
            }
        }
        out
    }

    pub fn slice(&self, level: i64) -> Vec<Local<T>> {
        (0..self.space()).into_par_iter().map(|i| self.local(level, i)).collect()
    }
}

fn average<T: Real>(locals: &[Local<T>]) -> Local<T> {
    let n = T::of_usize(locals.len());
    let mut out = locals[0].clone();
    for l in &locals[1..] {
        out.alpha += l.alpha;
        add(&mut out.theta, &l.theta);
        add(&mut out.mu3, &l.mu3);
        add(&mut out.mu1, &l.mu1);
    }
    out.alpha /= n;
    out.theta.iter_mut().chain(out.mu3.iter_mut()).chain(out.mu1.iter_mut()).for_each(|v| *v /= n);
    out
}

fn add<T: Real>(a: &mut [T], b: &[T]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
}

fn symmetrize<T: Real>(m: &mut [T], d: usize) {
    for a in 0..d {
        for b in (a + 1)..d {
            let v = (m[a * d + b] + m[b * d + a]) * T::of(0.5);
            m[a * d + b] = v;
            m[b * d + a] = v;
        }
    }
}

fn torus_sums<'a, T: Real>(torus: &'a Torus<T>, mu: MuLookup<'a, T>) -> SliceSums<'a, T> {
    SliceSums::new(&torus.stencil, torus.nz, mu)
}

/// `(α̂, Θ)` as torus averages of the lattice sums.
pub fn alpha_theta_lattice<T: Real>(torus: &Torus<T>, chi: &CorrectorField<T>) -> Result<(T, Vec<T>)> {
    let c = effective_periodic(torus, chi, None)?;
    Ok((c.alpha_hat, c.theta))
}

/// Coefficients of a periodic medium; `Υ = 0`.
pub fn effective_periodic<T: Real>(
    torus: &Torus<T>,
    chi: &CorrectorField<T>,
    chi22: Option<&CorrectorField<T>>,
) -> Result<EffectiveCoefficients<T>> {
    let d = torus.dim;
    if chi.components != d || chi.space() != torus.space {
        return Err(Error::Config("corrector does not match the torus".into()));
    }
    let space = torus.space;
    let nt = torus.nt as i64;
    let mu = move |level: i64, i: usize| torus.mu[level.rem_euclid(nt) as usize * space + i];
    let chi_f = |level: i64, i: usize, a: usize| chi.get(i, level, a);
    let chi22_f = chi22.map(|f| move |level: i64, i: usize, a: usize| f.get(i, level, a));
    let mut sums = torus_sums(torus, &mu);
    sums.chi = Some(&chi_f);
    if let Some(f) = chi22_f.as_ref() {
        sums.chi22 = Some(f);
    }
    let mut all = Vec::with_capacity(torus.nodes);
    for n in 0..torus.nt {
        all.extend(sums.slice(n as i64));
    }
    let avg = average(&all);
    let mut theta = avg.theta;
    symmetrize(&mut theta, d);
    let mut c = EffectiveCoefficients::new(d, avg.alpha, theta);
    c.mu_tensor = avg.mu3;
    c.mu1 = avg.mu1;
    Ok(c)
}

/// `(α̂, Θ)` by kernel quadrature with exact `μ` and interpolated `χ`, averaged
/// over an `outer^d × outer` midpoint grid in `(ξ, q)`.
pub fn alpha_theta_quadrature<T: Real>(
    kernel: &Kernel<T>,
    medium: &MediumField<T>,
    chi: Option<&CorrectorField<T>>,
    tol: T,
    outer: usize,
) -> Result<(T, Vec<T>)> {
    let d = kernel.dim;
    let outer = if medium.is_constant() && chi.is_none() { 1 } else { outer.max(1) };
    let points = outer.pow(d as u32) * outer;
    let mut alpha = T::zero();
    let mut theta = vec![T::zero(); d * d];
    let mut xi = vec![T::zero(); d];
    let mut y = vec![T::zero(); d];
    for p in 0..points {
        let mut rem = p;
        let q = (T::of_usize(rem % outer) + T::of(0.5)) / T::of_usize(outer);
        rem /= outer;
        for c in (0..d).rev() {
            xi[c] = (T::of_usize(rem % outer) + T::of(0.5)) / T::of_usize(outer);
            rem /= outer;
        }
        let mux = medium.eval(&xi, q);
        let shifted = |z: &[T], r: T, y: &mut [T]| {
            for c in 0..d {
                y[c] = xi[c] - z[c];
            }
            medium.eval(y, q - r)
        };
        let mut yy = y.clone();
        alpha -= mux * kernel.integrate(|z, r| shifted(z, r, &mut yy.clone()) * r, tol)?;
        for a in 0..d {
            for b in a..d {
                let v = kernel.integrate(
                    |z, r| {
                        let mut yl = vec![T::zero(); d];
                        let m = shifted(z, r, &mut yl);
                        let chib = chi.map(|f| f.interpolate(&yl, q - r, b)).unwrap_or(T::zero());
                        let chia = chi.map(|f| f.interpolate(&yl, q - r, a)).unwrap_or(T::zero());
                        m * (-(z[a] * chib + z[b] * chia) * T::of(0.5) + T::of(0.5) * z[a] * z[b])
                    },
                    tol,
                )?;
                theta[a * d + b] += mux * v;
                if a != b {
                    theta[b * d + a] += mux * v;
                }
            }
        }
        yy.clear();
        y.copy_from_slice(&xi);
    }
    let n = T::of_usize(points);
    Ok((alpha / n, theta.iter().map(|t| *t / n).collect()))
}

/// Correctors tabulated per gradient direction (`p > 2`).
#[derive(Clone, Debug, Default)]
pub struct DirectionTable<T> {
    pub entries: Vec<(Vec<T>, CorrectorField<T>)>,
}

impl<T: Real> DirectionTable<T> {
    pub fn insert(&mut self, direction: Vec<T>, field: CorrectorField<T>) {
        self.entries.push((direction, field));
    }

    /// Corrector whose direction is parallel to `g` (within `1e-9`).
    pub fn get(&self, g: &[T]) -> Result<&CorrectorField<T>> {
        let norm = |v: &[T]| v.iter().map(|x| *x * *x).sum::<T>().sqrt();
        let ng = norm(g);
        for (dir, f) in &self.entries {
            let nd = norm(dir);
            let dot: T = dir.iter().zip(g).map(|(a, b)| *a * *b).sum();
            if ng > T::zero() && nd > T::zero() && (dot / (ng * nd) - T::one()).abs() < T::of(1e-9) {
                return Ok(f);
            }
        }
        Err(Error::MissingDirection {
            requested: g.iter().map(|v| v.f64()).collect(),
            available: self.entries.iter().map(|(d, _)| d.iter().map(|v| v.f64()).collect()).collect(),
        })
    }
}

/// `(𝔑, 𝔓)` at gradient `g` and Hessian `H` from lattice sums:
/// `𝔑 = (p−1)·avg Σ 𝔍₀ r`, `𝔓 = avg Σ 𝔍₀ [−z⊗χ₁' + ½ z⊗z] : H`.
pub fn evaluate_np<T: Real>(torus: &Torus<T>, table: &DirectionTable<T>, p: T, g: &[T], hessian: &[T]) -> Result<(T, T)> {
    let chi1 = table.get(g)?;
    let weights = crate::cell::frozen_weights(torus, chi1, p, g);
    let rem = crate::cell::remainder_field(torus, chi1, &weights, hessian);
    let st = &torus.stencil;
    let s_len = st.len();
    let mut n_acc = T::zero();
    for node in 0..torus.nodes {
        for s in 0..s_len {
            n_acc += weights[node * s_len + s] * st.r(s);
        }
    }
    let count = T::of_usize(torus.nodes);
    let p_val = rem.iter().copied().sum::<T>() / count;
    Ok(((p - T::one()) * n_acc / count, p_val))
}

/// `(𝔑, 𝔓)` by kernel quadrature with interpolated `χ₁`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_np_quadrature<T: Real>(
    kernel: &Kernel<T>,
    medium: &MediumField<T>,
    chi1: Option<&CorrectorField<T>>,
    p: T,
    g: &[T],
    hessian: &[T],
    tol: T,
    outer: usize,
) -> Result<(T, T)> {
    let d = kernel.dim;
    let outer = if medium.is_constant() && chi1.is_none() { 1 } else { outer.max(1) };
    let points = outer.pow(d as u32) * outer;
    let e = p - T::of(2.0);
    let mut n_acc = T::zero();
    let mut p_acc = T::zero();
    let mut xi = vec![T::zero(); d];
    for pt in 0..points {
        let mut rem = pt;
        let q = (T::of_usize(rem % outer) + T::of(0.5)) / T::of_usize(outer);
        rem /= outer;
        for c in (0..d).rev() {
            xi[c] = (T::of_usize(rem % outer) + T::of(0.5)) / T::of_usize(outer);
            rem /= outer;
        }
        let mux = medium.eval(&xi, q);
        let chix: Vec<T> = (0..d).map(|a| chi1.map(|f| f.interpolate(&xi, q, a)).unwrap_or(T::zero())).collect();
        let xi_ref = &xi;
        let frame = |z: &[T], r: T| -> (T, Vec<T>, T) {
            let y: Vec<T> = (0..d).map(|c| xi_ref[c] - z[c]).collect();
            let m = medium.eval(&y, q - r);
            let chiy: Vec<T> = (0..d).map(|a| chi1.map(|f| f.interpolate(&y, q - r, a)).unwrap_or(T::zero())).collect();
            let delta: T = (0..d).map(|a| g[a] * (-z[a] + chiy[a] - chix[a])).sum();
            (m, chiy, delta.abs_pow(e))
        };
        n_acc += mux
            * kernel.integrate(
                |z, r| {
                    let (m, _, w) = frame(z, r);
                    m * w * r
                },
                tol,
            )?;
        p_acc += mux
            * kernel.integrate(
                |z, r| {
                    let (m, chiy, w) = frame(z, r);
                    let mut v = T::zero();
                    for a in 0..d {
                        for b in 0..d {
                            v += hessian[a * d + b] * (-z[a] * chiy[b] + T::of(0.5) * z[a] * z[b]);
                        }
                    }
                    m * w * v
                },
                tol,
            )?;
    }
    let n = T::of_usize(points);
    Ok(((p - T::one()) * n_acc / n, p_acc / n))
}

/// `Π₁`–`Π₄`, `Λ` and `χ₂₁` on consecutive fast time levels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FluctuationProcess<T> {
    pub dim: usize,
    pub space: usize,
    pub first_level: i64,
    /// Fast time step `1/N_t`.
    pub dq: T,
    /// `levels × d²`
    pub pi1: Vec<T>,
    pub pi3: Vec<T>,
    /// `levels × space × d²`
    pub pi2: Vec<T>,
    /// `levels × space`
    pub pi4: Vec<T>,
    pub lambda: Vec<T>,
    pub chi21: Vec<T>,
    /// Slice series of `−μΣwμ'r` and of the `Θ` integrand (`levels × d²`).
    pub alpha_series: Vec<T>,
    pub theta_series: Vec<T>,
}

impl<T: Real> FluctuationProcess<T> {
    pub fn levels(&self) -> usize {
        self.pi3.len()
    }

    /// `Λ` rows as `f64` series (one vector of length `d²` per level).
    pub fn lambda_rows(&self) -> Vec<Vec<f64>> {
        let m = self.dim * self.dim;
        self.lambda.chunks(m).map(|c| c.iter().map(|v| v.f64()).collect()).collect()
    }
}

/// Slice integrands over `levels` starting at `first`, with `χ` (and `χ₂₂`) lookups.
fn slice_locals<T: Real>(sums: &SliceSums<T>, first: i64, levels: usize) -> Vec<Vec<Local<T>>> {
    (0..levels).map(|l| sums.slice(first + l as i64)).collect()
}

/// Ergodic `(α̂, Θ)` and `Π`, `Λ`, `χ₂₁` for a time-stationary medium.
///
/// `chi` is the window corrector (its first `max_lag` levels only provide history).
pub fn assemble_fluctuations<T: Real>(
    window: &Window<T>,
    chi: &CorrectorField<T>,
    alpha_theta: Option<(T, &[T])>,
) -> Result<FluctuationProcess<T>> {
    let st = window.stencil;
    let d = st.dim;
    let m2 = d * d;
    let lag = st.max_lag();
    if chi.slices <= lag + 1 || chi.periodic_time {
        return Err(Error::Config("window corrector too short for the stencil history".into()));
    }
    let first = chi.first_level + lag as i64;
    let levels = chi.slices - lag;
    let (mu_first, mu_tab) = window.mu_table();
    let space = window.space();
    let mu = move |level: i64, i: usize| mu_tab[(level - mu_first) as usize * space + i];
    let chi_f = |level: i64, i: usize, a: usize| chi.get(i, level, a);
    let mut sums = SliceSums::new(st, window.nz, &mu);
    sums.chi = Some(&chi_f);
    let locals = slice_locals(&sums, first, levels);
    let mut alpha_series = Vec::with_capacity(levels);
    let mut theta_series = Vec::with_capacity(levels * m2);
    for row in &locals {
        let avg = average(row);
        alpha_series.push(avg.alpha);
        theta_series.extend(avg.theta);
    }
    let (alpha_hat, theta): (T, Vec<T>) = match alpha_theta {
        Some((a, t)) => (a, t.to_vec()),
        None => {
            let a = alpha_series.iter().copied().sum::<T>() / T::of_usize(levels);
            let mut t = vec![T::zero(); m2];
            for row in theta_series.chunks(m2) {
                add(&mut t, row);
            }
            t.iter_mut().for_each(|v| *v /= T::of_usize(levels));
            symmetrize(&mut t, d);
            (a, t)
        }
    };
    let mut pi1 = Vec::with_capacity(levels * m2);
    let mut pi3 = Vec::with_capacity(levels);
    let mut pi2 = Vec::with_capacity(levels * space * m2);
    let mut pi4 = Vec::with_capacity(levels * space);
    let mut lambda = Vec::with_capacity(levels * m2);
    for (l, row) in locals.iter().enumerate() {
        let p1: Vec<T> = (0..m2).map(|k| theta_series[l * m2 + k] - theta[k]).collect();
        let p3 = alpha_series[l] - alpha_hat;
        for loc in row {
            for k in 0..m2 {
                pi2.push(loc.theta[k] - theta[k] - p1[k]);
            }
            pi4.push(loc.alpha - alpha_hat - p3);
        }
        for k in 0..m2 {
            lambda.push(p1[k] - p3 / alpha_hat * theta[k]);
        }
        pi1.extend(p1);
        pi3.push(p3);
    }
    let dq = T::one() / T::of_usize(window.nt);
    let mut chi21 = vec![T::zero(); levels * m2];
    for l in 1..levels {
        for k in 0..m2 {
            chi21[l * m2 + k] = chi21[(l - 1) * m2 + k] + T::of(0.5) * dq * (lambda[(l - 1) * m2 + k] + lambda[l * m2 + k]);
        }
    }
    Ok(FluctuationProcess {
        dim: d,
        space,
        first_level: first,
        dq,
        pi1,
        pi3,
        pi2,
        pi4,
        lambda,
        chi21,
        alpha_series,
        theta_series,
    })
}

/// Right-hand side `Π₂ − Π₄ α̂⁻¹ Θ` of the `χ₂₂` problem (`levels × space × d²`).
pub fn chi22_rhs<T: Real>(f: &FluctuationProcess<T>, alpha_hat: T, theta: &[T]) -> Vec<T> {
    let m2 = f.dim * f.dim;
    let mut out = Vec::with_capacity(f.pi2.len());
    for (node, p4) in f.pi4.iter().enumerate() {
        for k in 0..m2 {
            out.push(f.pi2[node * m2 + k] - *p4 / alpha_hat * theta[k]);
        }
    }
    out
}

/// `χ₂₂` on the torus (periodic media): `Σ w μ μ' (χ₂₂' − χ₂₂) = Π₂ − Π₄ α̂⁻¹ Θ`, projected
/// with the left null vector of the operator.
pub fn solve_chi22_torus<T: Real>(
    torus: &Torus<T>,
    chi: &CorrectorField<T>,
    coeffs: &EffectiveCoefficients<T>,
    opts: &CellOptions,
) -> Result<CorrectorField<T>> {
    let d = torus.dim;
    let m2 = d * d;
    let space = torus.space;
    let nt = torus.nt as i64;
    let mu = move |level: i64, i: usize| torus.mu[level.rem_euclid(nt) as usize * space + i];
    let chi_f = |level: i64, i: usize, a: usize| chi.get(i, level, a);
    let mut sums = torus_sums(torus, &mu);
    sums.chi = Some(&chi_f);
    let st = &torus.stencil;
    let s_len = st.len();
    let weights: Vec<T> = (0..torus.nodes * s_len)
        .map(|k| {
            let node = k / s_len;
            st.weight(k % s_len) * torus.mu[node] * torus.mu[torus.pred(node, k % s_len)]
        })
        .collect();
    let pi = left_null_vector(torus, &weights)?;
    let pi_sum: T = pi.iter().copied().sum();
    let mut out = crate::cell::CorrectorField::zeros(crate::cell::CorrectorKind::Chi22, d, torus.nz, torus.nt, m2);
    let mut rhs = vec![vec![T::zero(); torus.nodes]; m2];
    for n in 0..torus.nt {
        let row = sums.slice(n as i64);
        let avg = average(&row);
        let p3 = avg.alpha - coeffs.alpha_hat;
        for (i, loc) in row.iter().enumerate() {
            let p4 = loc.alpha - coeffs.alpha_hat - p3;
            for k in 0..m2 {
                let p2 = loc.theta[k] - avg.theta[k];
                rhs[k][n * space + i] = p2 - p4 / coeffs.alpha_hat * coeffs.theta[k];
            }
        }
    }
    let mut residual = T::zero();
    for (k, r) in rhs.iter_mut().enumerate() {
        let c: T = pi.iter().zip(r.iter()).map(|(a, b)| *a * *b).sum::<T>() / pi_sum;
        r.iter_mut().for_each(|v| *v -= c);
        let f = solve_frozen(torus, &weights, r, opts)?;
        residual = residual.max(f.residual);
        for node in 0..torus.nodes {
            out.values[node * m2 + k] = f.values[node];
        }
    }
    out.residual = residual;
    Ok(out)
}

/// Coefficients of a time-stationary medium by ergodic averaging over a window.
pub struct ErgodicOptions {
    pub batches: usize,
    /// Maximum standard error tolerated on `α̂` (relative to `|α̂|`).
    pub target_rel_se: Option<f64>,
    pub max_lag: usize,
    pub chi22_burn_in: usize,
}

pub struct ErgodicResult<T> {
    pub coefficients: EffectiveCoefficients<T>,
    pub fluctuations: FluctuationProcess<T>,
    pub chi22: CorrectorField<T>,
    pub upsilon: UpsilonEstimate,
}

pub fn effective_window<T: Real>(
    stencil: &Stencil<T>,
    medium: &MediumField<T>,
    window: &Window<T>,
    chi: &CorrectorField<T>,
    opts: &ErgodicOptions,
) -> Result<ErgodicResult<T>> {
    let d = stencil.dim;
    let m2 = d * d;
    let fl = assemble_fluctuations(window, chi, None)?;
    let levels = fl.levels();
    let alpha_f: Vec<f64> = fl.alpha_series.iter().map(|v| v.f64()).collect();
    let (alpha, alpha_se) = batch_means(&alpha_f, opts.batches)?;
    if let Some(target) = opts.target_rel_se {
        if alpha_se > target * alpha.abs() {
            return Err(Error::Precision {
                se: alpha_se,
                target: target * alpha.abs(),
            });
        }
    }
    let mut theta = vec![T::zero(); m2];
    let mut theta_se = vec![0.0; m2];
    for k in 0..m2 {
        let series: Vec<f64> = (0..levels).map(|l| fl.theta_series[l * m2 + k].f64()).collect();
        let (m, se) = batch_means(&series, opts.batches)?;
        theta[k] = T::of(m);
        theta_se[k] = se;
    }
    symmetrize(&mut theta, d);
    let alpha_hat = T::of(alpha);
    // Recentre Π and Λ on the ergodic means.
    let fl = assemble_fluctuations(window, chi, Some((alpha_hat, &theta)))?;
    let rhs = chi22_rhs(&fl, alpha_hat, &theta);
    let burn = opts.chi22_burn_in.min(levels / 2);
    let w2 = Window::new(stencil, medium, fl.first_level + burn as i64, levels - burn, burn)?;
    let chi22 = crate::cell::solve_chi22_window(&w2, &rhs, m2)?;
    let lag = stencil.max_lag();
    let (mu_first, mu_tab) = window.mu_table();
    let space = window.space();
    let mu = move |level: i64, i: usize| mu_tab[(level - mu_first) as usize * space + i];
    let chi_f = |level: i64, i: usize, a: usize| chi.get(i, level, a);
    let chi22_f = |level: i64, i: usize, a: usize| chi22.get(i, level, a);
    let mut sums = SliceSums::new(stencil, window.nz, &mu);
    sums.chi = Some(&chi_f);
    sums.chi22 = Some(&chi22_f);
    let start = chi22.first_level + lag as i64;
    let count = chi22.slices.saturating_sub(lag);
    if count < 2 * opts.batches {
        return Err(Error::Config("window too short for the μ-tensor average".into()));
    }
    let mut mu3_series = vec![Vec::with_capacity(count); d * d * d];
    let mut mu1_series = vec![Vec::with_capacity(count); d];
    for l in 0..count {
        let avg = average(&sums.slice(start + l as i64));
        for (k, v) in avg.mu3.iter().enumerate() {
            mu3_series[k].push(v.f64());
        }
        for (k, v) in avg.mu1.iter().enumerate() {
            mu1_series[k].push(v.f64());
        }
    }
    let mut coeffs = EffectiveCoefficients::new(d, alpha_hat, theta);
    let mut se = StandardErrors {
        alpha_hat: alpha_se,
        theta: theta_se,
        ..Default::default()
    };
    for (k, s) in mu3_series.iter().enumerate() {
        let (m, e) = batch_means(s, opts.batches)?;
        coeffs.mu_tensor[k] = T::of(m);
        se.mu_tensor.push(e);
    }
    for (k, s) in mu1_series.iter().enumerate() {
        let (m, e) = batch_means(s, opts.batches)?;
        coeffs.mu1[k] = T::of(m);
        se.mu1.push(e);
    }
    let ups = estimate_upsilon(&fl.lambda_rows(), fl.dq.f64(), opts.max_lag)?;
    coeffs.upsilon_raw = ups.raw.iter().map(|v| T::of(*v)).collect();
    coeffs.upsilon_psd = ups.psd.iter().map(|v| T::of(*v)).collect();
    se.upsilon = ups.standard_errors.clone();
    coeffs.standard_errors = se;
    Ok(ErgodicResult {
        coefficients: coeffs,
        fluctuations: fl,
        chi22,
        upsilon: ups,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpsilonEstimate {
    /// Row-major `m×m` with `m = d²`.
    pub raw: Vec<f64>,
    pub psd: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub samples: usize,
    pub max_lag: usize,
}

/// `Υ^{ab} = Δ [C_ab(0) + Σ_{l=1}^{L} (C_ab(l) + C_ba(l))]` with sample
/// autocovariances `C_ab(l) = n⁻¹ Σ_t Λ_a(t) Λ_b(t+l)` of the centred series,
/// then clipped to the PSD cone.
pub fn estimate_upsilon(series: &[Vec<f64>], step: f64, max_lag: usize) -> Result<UpsilonEstimate> {
    let n = series.len();
    if n < 10 * max_lag.max(1) {
        return Err(Error::Statistics(format!(
            "Λ series has {n} samples; need ≥ {} for max_lag {max_lag}",
            10 * max_lag.max(1)
        )));
    }
    let m = series[0].len();
    let mut mean = vec![0.0; m];
    for row in series {
        for (a, v) in row.iter().enumerate() {
            mean[a] += v / n as f64;
        }
    }
    let centred: Vec<Vec<f64>> = series.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let cov = |a: usize, b: usize, l: usize| -> f64 {
        (0..n - l).map(|t| centred[t][a] * centred[t + l][b]).sum::<f64>() / n as f64
    };
    let mut raw = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..m {
            let mut s = cov(a, b, 0);
            for l in 1..=max_lag {
                s += cov(a, b, l) + cov(b, a, l);
            }
            raw[a * m + b] = step * s;
        }
    }
    let sym = DMatrix::from_fn(m, m, |i, j| 0.5 * (raw[i * m + j] + raw[j * m + i]));
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let psd_m = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let psd: Vec<f64> = (0..m * m).map(|k| psd_m[(k / m, k % m)]).collect();
    let factor = (2 * max_lag + 1) as f64 / n as f64;
    let standard_errors = (0..m * m)
        .map(|k| {
            let (a, b) = (k / m, k % m);
            (factor * (raw[a * m + a] * raw[b * m + b] + raw[a * m + b] * raw[a * m + b])).max(0.0).sqrt()
        })
        .collect();
    Ok(UpsilonEstimate {
        raw,
        psd,
        standard_errors,
        samples: n,
        max_lag,
    })
}

/// Symmetric PSD square root (eigenvalues clipped at zero).
pub fn psd_sqrt(m: &[f64], dim: usize) -> Result<Vec<f64>> {
    if m.len() != dim * dim {
        return Err(Error::Config("matrix size mismatch".into()));
    }
    let a = DMatrix::from_fn(dim, dim, |i, j| m[i * dim + j]);
    if (0..dim).any(|i| (0..dim).any(|j| (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * (1.0 + a[(i, j)].abs()))) {
        return Err(Error::Config("matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(a);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
    if eig.eigenvalues.iter().any(|v| *v < -1e-10 * scale) {
        return Err(Error::Config("matrix is not positive semi-definite".into()));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
    Ok((0..dim * dim).map(|k| r[(k / dim, k % dim)]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{solve_chi, TorusSpec};
    use crate::lattice::WeightPolicy;

    #[test]
    fn constant_box_values() {
        let k = Kernel::<f64>::boxed(1, 0.5, 1.0, 2.0).unwrap();
        let m = MediumField::constant(1, 1.0).unwrap();
        let t = Torus::from_kernel(&k, &m, &TorusSpec { nz: 16, nt: 8, policy: WeightPolicy::default() }).unwrap();
        let chi = solve_chi(&t, &CellOptions::default()).unwrap();
        let (a, th) = alpha_theta_lattice(&t, &chi).unwrap();
        assert!((a + 1.5).abs() < 1e-12);
        assert!((th[0] - 0.5 * (1.0 / 12.0 + 1.0 / 16.0f64.powi(2) / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_series_zero_upsilon() {
        let s = vec![vec![0.0]; 200];
        let u = estimate_upsilon(&s, 0.1, 5).unwrap();
        assert_eq!(u.raw, vec![0.0]);
        assert!(estimate_upsilon(&s[..40], 0.1, 5).is_err());
    }
}
