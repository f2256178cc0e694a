//! Corrector cell problems on the discrete torus `𝕋^d_{N_z} × 𝕋_{N_t}` and on
//! forward time windows (time-stationary media).
//!
//! Torus nodes sit at `ξ = (i+½)/N_z`, `q = n/N_t`, the same fast coordinates
//! the marcher uses, so correctors are exact for the lattice problem.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernel::Kernel;
use crate::lattice::{Stencil, WeightPolicy};
use crate::media::{MediumCase, MediumField};
use crate::nonlocal::{decay_fit, node_root, DecayFit};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusSpec {
    pub nz: usize,
    pub nt: usize,
    #[serde(default)]
    pub policy: WeightPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Non-improving iterations tolerated before giving up.
    pub patience: usize,
}

impl Default for CellOptions {
    fn default() -> Self {
        CellOptions {
            damping: 0.5,
            tol: 1e-10,
            max_iter: 100_000,
            patience: 100,
        }
    }
}

/// Periodic lattice with precomputed neighbour tables.
#[derive(Clone, Debug)]
pub struct Torus<T> {
    pub dim: usize,
    pub nz: usize,
    pub nt: usize,
    pub stencil: Stencil<T>,
    pub space: usize,
    pub nodes: usize,
    /// `(i − j_s, n − k_s)` for node `(i, n)` and entry `s`.
    pred: Vec<usize>,
    /// `(i + j_s, n + k_s)`.
    succ: Vec<usize>,
    pub mu: Vec<T>,
}

impl<T: Real> Torus<T> {
    pub fn from_kernel(kernel: &Kernel<T>, medium: &MediumField<T>, spec: &TorusSpec) -> Result<Self> {
        let st = Stencil::from_kernel(kernel, T::one() / T::of_usize(spec.nz), T::one() / T::of_usize(spec.nt), spec.policy)?;
        Torus::new(st, medium)
    }

    pub fn new(stencil: Stencil<T>, medium: &MediumField<T>) -> Result<Self> {
        if medium.case != MediumCase::Periodic {
            return Err(Error::Config(
                "torus cell problems need a periodic medium; use the window solver for time-stationary media".into(),
            ));
        }
        let d = stencil.dim;
        if medium.dim != d {
            return Err(Error::Config("medium and kernel dimensions differ".into()));
        }
        let nz = (T::one() / stencil.hz).round().to_usize().unwrap_or(0);
        let nt = (T::one() / stencil.hr).round().to_usize().unwrap_or(0);
        if nz == 0 || nt == 0 {
            return Err(Error::Config("torus needs 1/hz and 1/hr to be positive integers".into()));
        }
        let space = nz.pow(d as u32);
        let nodes = space * nt;
        let s_len = stencil.len();
        let mut pred = vec![0usize; nodes * s_len];
        let mut succ = vec![0usize; nodes * s_len];
        let mut idx = vec![0i64; d];
        for node in 0..nodes {
            let n = (node / space) as i64;
            unflatten(node % space, nz, &mut idx);
            for s in 0..s_len {
                let j = stencil.offset(s);
                let k = stencil.lag(s) as i64;
                pred[node * s_len + s] = torus_index(&idx, j, -1, n - k, nz, nt, space);
                succ[node * s_len + s] = torus_index(&idx, j, 1, n + k, nz, nt, space);
            }
        }
        let mut mu = vec![T::zero(); nodes];
        let mut xi = vec![T::zero(); d];
        for (node, m) in mu.iter_mut().enumerate() {
            unflatten(node % space, nz, &mut idx);
            for c in 0..d {
                xi[c] = (T::of_i64(idx[c]) + T::of(0.5)) / T::of_usize(nz);
            }
            *m = medium.eval(&xi, T::of_usize(node / space) / T::of_usize(nt));
        }
        Ok(Torus {
            dim: d,
            nz,
            nt,
            stencil,
            space,
            nodes,
            pred,
            succ,
            mu,
        })
    }

    pub fn pred(&self, node: usize, s: usize) -> usize {
        self.pred[node * self.stencil.len() + s]
    }

    pub fn succ(&self, node: usize, s: usize) -> usize {
        self.succ[node * self.stencil.len() + s]
    }

    /// `max |Z − Z*| / mean Z` with `Z = Σ w μ(ξ−z,q−r)` and `Z* = Σ w μ(ξ+z,q+r)`.
    pub fn compatibility_defect(&self) -> T {
        let st = &self.stencil;
        let mut worst = T::zero();
        let mut total = T::zero();
        for node in 0..self.nodes {
            let mut z = T::zero();
            let mut zs = T::zero();
            for s in 0..st.len() {
                z += st.weight(s) * self.mu[self.pred(node, s)];
                zs += st.weight(s) * self.mu[self.succ(node, s)];
            }
            worst = worst.max((z - zs).abs());
            total += z;
        }
        worst / (total / T::of_usize(self.nodes))
    }
}

fn unflatten(mut flat: usize, nz: usize, out: &mut [i64]) {
    for c in (0..out.len()).rev() {
        out[c] = (flat % nz) as i64;
        flat /= nz;
    }
}

fn torus_index(idx: &[i64], j: &[i64], sign: i64, n: i64, nz: usize, nt: usize, space: usize) -> usize {
    let mut flat = 0usize;
    for c in 0..idx.len() {
        flat = flat * nz + (idx[c] + sign * j[c]).rem_euclid(nz as i64) as usize;
    }
    n.rem_euclid(nt as i64) as usize * space + flat
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorKind {
    Chi,
    Chi1,
    Chi2,
    Chi22,
    InitialLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Compatibility {
    /// Constant removed with the left null vector.
    pub projected_mean: f64,
    /// Plain torus average of `ℜ₀` (the functional `𝔓`).
    pub plain_mean: f64,
    pub relative_defect: f64,
    pub flagged: bool,
}

/// Corrector values on `N_z^d` spatial nodes × `slices` time levels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrectorField<T> {
    pub kind: CorrectorKind,
    pub dim: usize,
    pub nz: usize,
    pub nt: usize,
    pub slices: usize,
    /// Time level of the first stored slice.
    pub first_level: i64,
    /// Slices wrap in time (torus) or form a window.
    pub periodic_time: bool,
    pub components: usize,
    /// `values[(n·N_z^d + i)·components + c]`
    pub values: Vec<T>,
    pub residual: T,
    pub iterations: usize,
    pub p: T,
    pub direction: Option<Vec<T>>,
    pub compatibility: Option<Compatibility>,
    pub decay: Option<DecayFit>,
}

impl<T: Real> CorrectorField<T> {
    pub fn zeros(kind: CorrectorKind, dim: usize, nz: usize, nt: usize, components: usize) -> Self {
        let space = nz.pow(dim as u32);
        CorrectorField {
            kind,
            dim,
            nz,
            nt,
            slices: nt,
            first_level: 0,
            periodic_time: true,
            components,
            values: vec![T::zero(); space * nt * components],
            residual: T::zero(),
            iterations: 0,
            p: T::of(2.0),
            direction: None,
            compatibility: None,
            decay: None,
        }
    }

    pub fn space(&self) -> usize {
        self.nz.pow(self.dim as u32)
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Value at lattice coordinates (spatial indices wrap; time wraps on the torus).
    pub fn at(&self, idx: &[i64], level: i64, c: usize) -> T {
        let mut flat = 0usize;
        for a in idx {
            flat = flat * self.nz + a.rem_euclid(self.nz as i64) as usize;
        }
        let n = if self.periodic_time {
            (level - self.first_level).rem_euclid(self.slices as i64) as usize
        } else {
            (level - self.first_level).clamp(0, self.slices as i64 - 1) as usize
        };
        self.values[(n * self.space() + flat) * self.components + c]
    }

    /// Value at flat spatial index `flat` (already wrapped) and time level `level`.
    pub fn get(&self, flat: usize, level: i64, c: usize) -> T {
        let n = if self.periodic_time {
            (level - self.first_level).rem_euclid(self.slices as i64) as usize
        } else {
            (level - self.first_level).clamp(0, self.slices as i64 - 1) as usize
        };
        self.values[(n * self.space() + flat) * self.components + c]
    }

    /// Multilinear interpolation at fast coordinates `(ξ, q)`.
    pub fn interpolate(&self, xi: &[T], q: T, c: usize) -> T {
        let d = self.dim;
        let nz = T::of_usize(self.nz);
        let nt = T::of_usize(self.nt);
        let mut base = vec![0i64; d];
        let mut frac = vec![T::zero(); d];
        for a in 0..d {
            let s = xi[a] * nz - T::of(0.5);
            let f = s.floor();
            base[a] = f.to_i64().unwrap();
            frac[a] = s - f;
        }
        let sq = q * nt;
        let fq = sq.floor();
        let lq = fq.to_i64().unwrap();
        let tq = sq - fq;
        let mut out = T::zero();
        let mut idx = vec![0i64; d];
        for corner in 0..(1usize << (d + 1)) {
            let mut w = T::one();
            for a in 0..d {
                let bit = (corner >> a) & 1;
                idx[a] = base[a] + bit as i64;
                w *= if bit == 1 { frac[a] } else { T::one() - frac[a] };
            }
            let bt = (corner >> d) & 1;
            w *= if bt == 1 { tq } else { T::one() - tq };
            if w != T::zero() {
                out += w * self.at(&idx, lq + bt as i64, c);
            }
        }
        out
    }

    /// Spatial mean of component `c` on every stored slice.
    pub fn slice_means(&self, c: usize) -> Vec<T> {
        let space = self.space();
        (0..self.slices)
            .map(|n| {
                let s: T = (0..space).map(|i| self.values[(n * space + i) * self.components + c]).sum();
                s / T::of_usize(space)
            })
            .collect()
    }

    fn subtract_global_mean(&mut self) {
        let comps = self.components;
        let count = T::of_usize(self.values.len() / comps);
        for c in 0..comps {
            let m: T = self.values.iter().skip(c).step_by(comps).copied().sum::<T>() / count;
            for v in self.values.iter_mut().skip(c).step_by(comps) {
                *v -= m;
            }
        }
    }
}

struct Iteration<T> {
    best: T,
    stale: usize,
    history: Vec<f64>,
}

impl<T: Real> Iteration<T> {
    fn new() -> Self {
        Iteration {
            best: T::infinity(),
            stale: 0,
            history: Vec::new(),
        }
    }

    /// `Ok(true)` when converged.
    fn record(&mut self, residual: T, it: usize, opts: &CellOptions) -> Result<bool> {
        self.history.push(residual.f64());
        if self.history.len() > 200 {
            self.history.remove(0);
        }
        if !residual.is_finite() {
            return Err(Error::Numerical(format!("cell iteration diverged at iteration {it}")));
        }
        if residual <= T::of(opts.tol) {
            return Ok(true);
        }
        if residual < self.best * T::of(1.0 - 1e-9) {
            self.best = residual;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= opts.patience {
                return Err(Error::Stagnation {
                    residual: residual.f64(),
                    iterations: it,
                    history: self.history.clone(),
                });
            }
        }
        if it + 1 >= opts.max_iter {
            return Err(Error::Stagnation {
                residual: residual.f64(),
                iterations: it + 1,
                history: self.history.clone(),
            });
        }
        Ok(false)
    }
}

/// `χ` for `p = 2` (all `d` components), or `χ₁` for `p > 2` along `direction`.
pub fn solve_chi1<T: Real>(torus: &Torus<T>, p: T, direction: &[T], opts: &CellOptions) -> Result<CorrectorField<T>> {
    if !(p >= T::of(2.0)) {
        return Err(Error::Config("p must be ≥ 2".into()));
    }
    if direction.len() != torus.dim {
        return Err(Error::Config("gradient direction must have d components".into()));
    }
    if p == T::of(2.0) {
        let mut f = solve_chi(torus, opts)?;
        f.kind = CorrectorKind::Chi1;
        f.direction = Some(direction.to_vec());
        return Ok(f);
    }
    let g2: T = direction.iter().map(|g| *g * *g).sum();
    if !(g2 > T::zero()) {
        return Err(Error::Config("gradient direction must be non-zero".into()));
    }
    let st = &torus.stencil;
    let s_len = st.len();
    let gz: Vec<T> = (0..s_len)
        .map(|s| (0..torus.dim).map(|c| direction[c] * st.z(s, c)).sum())
        .collect();
    let coef: Vec<T> = (0..torus.nodes * s_len)
        .map(|k| st.weight(k % s_len) * torus.mu[torus.pred[k]])
        .collect();
    let theta = T::of(opts.damping);
    let mut psi = vec![T::zero(); torus.nodes];
    let mut it_state = Iteration::new();
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        let roots: Vec<T> = (0..torus.nodes)
            .into_par_iter()
            .map(|node| {
                let a: Vec<T> = (0..s_len).map(|s| psi[torus.pred(node, s)] - gz[s]).collect();
                node_root(&a, &coef[node * s_len..(node + 1) * s_len], p)
            })
            .collect::<Result<Vec<T>>>()?;
        let mut residual = T::zero();
        for (v, r) in psi.iter_mut().zip(&roots) {
            residual = residual.max((*r - *v).abs());
            *v = *v + theta * (*r - *v);
        }
        let m = psi.iter().copied().sum::<T>() / T::of_usize(torus.nodes);
        psi.iter_mut().for_each(|v| *v -= m);
        iterations = it + 1;
        if it_state.record(residual, it, opts)? {
            break;
        }
    }
    let mut f = CorrectorField::zeros(CorrectorKind::Chi1, torus.dim, torus.nz, torus.nt, torus.dim);
    for node in 0..torus.nodes {
        for c in 0..torus.dim {
            f.values[node * torus.dim + c] = psi[node] * direction[c] / g2;
        }
    }
    f.iterations = iterations;
    f.p = p;
    f.direction = Some(direction.to_vec());
    f.residual = chi1_residual(torus, &f, p, direction);
    Ok(f)
}

/// Linear corrector `Σ w μ(ξ−z,q−r)(−z + χ(ξ−z,q−r) − χ(ξ,q)) = 0`.
pub fn solve_chi<T: Real>(torus: &Torus<T>, opts: &CellOptions) -> Result<CorrectorField<T>> {
    let st = &torus.stencil;
    let s_len = st.len();
    let d = torus.dim;
    let mut coef = vec![T::zero(); torus.nodes * s_len];
    let mut drift = vec![T::zero(); torus.nodes * d];
    for node in 0..torus.nodes {
        let den: T = (0..s_len).map(|s| st.weight(s) * torus.mu[torus.pred(node, s)]).sum();
        for s in 0..s_len {
            let c = st.weight(s) * torus.mu[torus.pred(node, s)] / den;
            coef[node * s_len + s] = c;
            for a in 0..d {
                drift[node * d + a] += c * st.z(s, a);
            }
        }
    }
    let theta = T::of(opts.damping);
    let mut chi = vec![T::zero(); torus.nodes * d];
    let mut state = Iteration::new();
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        let update: Vec<T> = (0..torus.nodes)
            .into_par_iter()
            .flat_map_iter(|node| {
                let chi = &chi;
                let coef = &coef;
                let drift = &drift;
                (0..d).map(move |a| {
                    let mut acc = T::zero();
                    for s in 0..s_len {
                        acc += coef[node * s_len + s] * chi[torus.pred(node, s) * d + a];
                    }
                    acc - drift[node * d + a]
                })
            })
            .collect();
        let mut residual = T::zero();
        for (v, u) in chi.iter_mut().zip(&update) {
            residual = residual.max((*u - *v).abs());
            *v = *v + theta * (*u - *v);
        }
        for a in 0..d {
            let m = chi.iter().skip(a).step_by(d).copied().sum::<T>() / T::of_usize(torus.nodes);
            chi.iter_mut().skip(a).step_by(d).for_each(|v| *v -= m);
        }
        iterations = it + 1;
        if state.record(residual, it, opts)? {
            break;
        }
    }
    let mut f = CorrectorField::zeros(CorrectorKind::Chi, d, torus.nz, torus.nt, d);
    f.values = chi;
    f.iterations = iterations;
    let mut worst = T::zero();
    for a in 0..d {
        let mut e = vec![T::zero(); d];
        e[a] = T::one();
        worst = worst.max(chi1_residual(torus, &f, T::of(2.0), &e));
    }
    f.residual = worst;
    Ok(f)
}

/// `max_node |Σ c |Δ|^{p−2} Δ| / Σ c` with `Δ = g·(−z + χ(ξ−z,q−r) − χ(ξ,q))`,
/// summed in reverse stencil order.
pub fn chi1_residual<T: Real>(torus: &Torus<T>, f: &CorrectorField<T>, p: T, g: &[T]) -> T {
    let st = &torus.stencil;
    let d = torus.dim;
    let e = p - T::of(2.0);
    (0..torus.nodes)
        .into_par_iter()
        .map(|node| {
            let gx: T = (0..d).map(|c| g[c] * f.values[node * d + c]).sum();
            let mut acc = T::zero();
            let mut den = T::zero();
            for s in (0..st.len()).rev() {
                let nb = torus.pred(node, s);
                let gy: T = (0..d).map(|c| g[c] * (f.values[nb * d + c] - st.z(s, c))).sum();
                let delta = gy - gx;
                let c = st.weight(s) * torus.mu[nb];
                acc += c * delta.abs_pow(e) * delta;
                den += c;
            }
            (acc / den).abs()
        })
        .reduce(T::zero, |a, b| a.max(b))
}

/// Edge weights `𝔍₀ = w μ(ξ,q) μ(ξ−z,q−r) |g·(−z + χ₁(ξ−z,q−r) − χ₁(ξ,q))|^{p−2}`.
pub fn frozen_weights<T: Real>(torus: &Torus<T>, chi1: &CorrectorField<T>, p: T, g: &[T]) -> Vec<T> {
    let st = &torus.stencil;
    let s_len = st.len();
    let d = torus.dim;
    let e = p - T::of(2.0);
    let mut out = vec![T::zero(); torus.nodes * s_len];
    for node in 0..torus.nodes {
        for s in 0..s_len {
            let nb = torus.pred(node, s);
            let mut base = st.weight(s) * torus.mu[node] * torus.mu[nb];
            if e != T::zero() {
                let delta: T = (0..d)
                    .map(|c| g[c] * (-st.z(s, c) + chi1.values[nb * d + c] - chi1.values[node * d + c]))
                    .sum();
                base *= delta.abs_pow(e);
            }
            out[node * s_len + s] = base;
        }
    }
    out
}

/// `ℜ₀ = Σ 𝔍₀ [−z⊗χ₁(ξ−z,q−r) + ½ z⊗z] : H` at every node.
pub fn remainder_field<T: Real>(torus: &Torus<T>, chi1: &CorrectorField<T>, weights: &[T], hessian: &[T]) -> Vec<T> {
    let st = &torus.stencil;
    let s_len = st.len();
    let d = torus.dim;
    (0..torus.nodes)
        .map(|node| {
            let mut acc = T::zero();
            for s in 0..s_len {
                let nb = torus.pred(node, s);
                let mut v = T::zero();
                for a in 0..d {
                    for b in 0..d {
                        let h = hessian[a * d + b];
                        v += h * (-st.z(s, a) * chi1.values[nb * d + b] + T::of(0.5) * st.z(s, a) * st.z(s, b));
                    }
                }
                acc += weights[node * s_len + s] * v;
            }
            acc
        })
        .collect()
}

/// Stationary law `π` (left null vector of `𝒜`, scaled so `π·D` sums to one).
pub fn left_null_vector<T: Real>(torus: &Torus<T>, weights: &[T]) -> Result<Vec<T>> {
    let s_len = torus.stencil.len();
    let n = torus.nodes;
    let diag: Vec<T> = (0..n).map(|i| weights[i * s_len..(i + 1) * s_len].iter().copied().sum()).collect();
    if diag.iter().any(|d| !(*d > T::zero())) {
        return Err(Error::Numerical("degenerate frozen weights (zero row sum)".into()));
    }
    let mut nu = vec![T::one() / T::of_usize(n); n];
    let half = T::of(0.5);
    for _ in 0..200_000 {
        let mut next: Vec<T> = nu.iter().map(|v| half * *v).collect();
        for i in 0..n {
            let share = half * nu[i] / diag[i];
            for s in 0..s_len {
                next[torus.pred(i, s)] += share * weights[i * s_len + s];
            }
        }
        let total: T = next.iter().copied().sum();
        next.iter_mut().for_each(|v| *v /= total);
        let change = nu.iter().zip(&next).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
        nu = next;
        if change <= T::of(1e-15) {
            return Ok(nu.iter().zip(&diag).map(|(v, d)| *v / *d).collect());
        }
    }
    Err(Error::Numerical("stationary law of the corrector chain did not converge".into()))
}

/// Scalar `φ = χ₂ : ∇∇u` solving `𝒜φ = 𝔓 − ℜ₀` for gradient `g` and Hessian `H`.
pub fn solve_chi2<T: Real>(
    torus: &Torus<T>,
    p: T,
    chi1: &CorrectorField<T>,
    g: &[T],
    hessian: &[T],
    opts: &CellOptions,
) -> Result<CorrectorField<T>> {
    let d = torus.dim;
    if g.len() != d || hessian.len() != d * d {
        return Err(Error::Config("χ₂ probe needs ∇u with d entries and ∇∇u with d² entries".into()));
    }
    let weights = frozen_weights(torus, chi1, p, g);
    let rem = remainder_field(torus, chi1, &weights, hessian);
    let pi = left_null_vector(torus, &weights)?;
    let pi_sum: T = pi.iter().copied().sum();
    let projected: T = pi.iter().zip(&rem).map(|(a, b)| *a * *b).sum::<T>() / pi_sum;
    let plain: T = rem.iter().copied().sum::<T>() / T::of_usize(torus.nodes);
    let scale = projected.abs().max(plain.abs()).max(T::of(1e-300));
    let defect = ((projected - plain).abs() / scale).f64();
    let defect = if projected == plain { 0.0 } else { defect };
    let rhs: Vec<T> = rem.iter().map(|r| projected - *r).collect();
    let mut f = solve_frozen(torus, &weights, &rhs, opts)?;
    f.kind = CorrectorKind::Chi2;
    f.p = p;
    f.direction = Some(g.to_vec());
    f.compatibility = Some(Compatibility {
        projected_mean: projected.f64(),
        plain_mean: plain.f64(),
        relative_defect: defect,
        flagged: defect > 1e-6,
    });
    Ok(f)
}

/// Damped Jacobi for `Σ W (φ(ξ−z,q−r) − φ(ξ,q)) = rhs` on the torus.
pub fn solve_frozen<T: Real>(torus: &Torus<T>, weights: &[T], rhs: &[T], opts: &CellOptions) -> Result<CorrectorField<T>> {
    let s_len = torus.stencil.len();
    let n = torus.nodes;
    let diag: Vec<T> = (0..n).map(|i| weights[i * s_len..(i + 1) * s_len].iter().copied().sum()).collect();
    let theta = T::of(opts.damping);
    let mut phi = vec![T::zero(); n];
    let mut state = Iteration::new();
    let mut iterations = 0;
    if rhs.iter().all(|r| *r == T::zero()) {
        let mut f = CorrectorField::zeros(CorrectorKind::Chi2, torus.dim, torus.nz, torus.nt, 1);
        f.residual = T::zero();
        return Ok(f);
    }
    for it in 0..opts.max_iter {
        let update: Vec<T> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = T::zero();
                for s in 0..s_len {
                    acc += weights[i * s_len + s] * phi[torus.pred(i, s)];
                }
                (acc - rhs[i]) / diag[i]
            })
            .collect();
        let mut residual = T::zero();
        for (v, u) in phi.iter_mut().zip(&update) {
            residual = residual.max((*u - *v).abs());
            *v = *v + theta * (*u - *v);
        }
        let m = phi.iter().copied().sum::<T>() / T::of_usize(n);
        phi.iter_mut().for_each(|v| *v -= m);
        iterations = it + 1;
        if state.record(residual, it, opts)? {
            break;
        }
    }
    let mut f = CorrectorField::zeros(CorrectorKind::Chi2, torus.dim, torus.nz, torus.nt, 1);
    f.iterations = iterations;
    f.residual = (0..n)
        .map(|i| {
            let mut acc = T::zero();
            for s in (0..s_len).rev() {
                acc += weights[i * s_len + s] * (phi[torus.pred(i, s)] - phi[i]);
            }
            ((acc - rhs[i]) / diag[i]).abs()
        })
        .fold(T::zero(), |a, b| a.max(b));
    f.values = phi;
    Ok(f)
}

/// Forward window on `𝕋^d_{N_z} × {levels}` for media that are not periodic in time.
#[derive(Clone, Debug)]
pub struct Window<'a, T> {
    pub stencil: &'a Stencil<T>,
    pub medium: &'a MediumField<T>,
    pub nz: usize,
    pub nt: usize,
    /// First reported level.
    pub start: i64,
    /// Reported levels.
    pub len: usize,
    /// Levels marched before `start` and discarded.
    pub burn_in: usize,
}

/// Result of a window march: all levels from `start − burn_in`.
struct Marched<T> {
    space: usize,
    values: Vec<T>,
}

impl<'a, T: Real> Window<'a, T> {
    pub fn new(stencil: &'a Stencil<T>, medium: &'a MediumField<T>, start: i64, len: usize, burn_in: usize) -> Result<Self> {
        let nz = (T::one() / stencil.hz).round().to_usize().unwrap_or(0);
        let nt = (T::one() / stencil.hr).round().to_usize().unwrap_or(0);
        if nz == 0 || nt == 0 || len == 0 {
            return Err(Error::Config("window needs integer 1/hz, 1/hr and a non-empty range".into()));
        }
        if medium.dim != stencil.dim {
            return Err(Error::Config("medium and kernel dimensions differ".into()));
        }
        Ok(Window {
            stencil,
            medium,
            nz,
            nt,
            start,
            len,
            burn_in,
        })
    }

    pub fn space(&self) -> usize {
        self.nz.pow(self.stencil.dim as u32)
    }

    pub fn first_level(&self) -> i64 {
        self.start - self.burn_in as i64
    }

    pub fn levels(&self) -> usize {
        self.len + self.burn_in
    }

    pub fn xi(&self, flat: usize) -> Vec<T> {
        let d = self.stencil.dim;
        let mut idx = vec![0i64; d];
        unflatten(flat, self.nz, &mut idx);
        idx.iter().map(|i| (T::of_i64(*i) + T::of(0.5)) / T::of_usize(self.nz)).collect()
    }

    pub fn q(&self, level: i64) -> T {
        T::of_i64(level) / T::of_usize(self.nt)
    }

    /// μ on `levels()` plus the history needed by the stencil.
    pub fn mu_table(&self) -> (i64, Vec<T>) {
        let first = self.first_level() - self.stencil.max_lag() as i64;
        let total = self.levels() + self.stencil.max_lag();
        let space = self.space();
        let xis: Vec<Vec<T>> = (0..space).map(|i| self.xi(i)).collect();
        let mut out = vec![T::zero(); total * space];
        out.par_chunks_mut(space).enumerate().for_each(|(l, row)| {
            let q = self.q(first + l as i64);
            for (i, v) in row.iter_mut().enumerate() {
                *v = self.medium.eval(&xis[i], q);
            }
        });
        (first, out)
    }

    fn pred_index(&self, i: usize, s: usize) -> usize {
        let d = self.stencil.dim;
        let mut idx = vec![0i64; d];
        unflatten(i, self.nz, &mut idx);
        let j = self.stencil.offset(s);
        let mut flat = 0usize;
        for c in 0..d {
            flat = flat * self.nz + (idx[c] - j[c]).rem_euclid(self.nz as i64) as usize;
        }
        flat
    }

    /// Marches `v(i,n) = (Σ w μ(i−j,n−k) v(i−j,n−k) + b(i,n)) / Σ w μ(i−j,n−k)` for
    /// `components` fields, where `b` is returned by `source(i, n, weights, μ-history)`.
    fn march<P, B>(&self, components: usize, past: P, source: B) -> Marched<T>
    where
        P: Fn(usize, i64, usize) -> T + Sync,
        B: Fn(usize, i64, usize, &dyn Fn(usize) -> T) -> T + Sync,
    {
        let st = self.stencil;
        let space = self.space();
        let (mu_first, mu) = self.mu_table();
        let first = self.first_level();
        let levels = self.levels();
        let s_len = st.len();
        let pred: Vec<usize> = (0..space * s_len).map(|k| self.pred_index(k / s_len, k % s_len)).collect();
        let mut values = vec![T::zero(); levels * space * components];
        let mu_at = |level: i64, i: usize| mu[(level - mu_first) as usize * space + i];
        for l in 0..levels {
            let n = first + l as i64;
            let (done, rest) = values.split_at_mut(l * space * components);
            let row = &mut rest[..space * components];
            row.par_chunks_mut(components).enumerate().for_each(|(i, out)| {
                let mut den = T::zero();
                let mut acc = vec![T::zero(); components];
                for s in 0..s_len {
                    let k = st.lag(s) as i64;
                    let nb = pred[i * s_len + s];
                    let m = n - k;
                    let c = st.weight(s) * mu_at(m, nb);
                    den += c;
                    for (a, slot) in acc.iter_mut().enumerate() {
                        let v = if m < first {
                            past(nb, m, a)
                        } else {
                            done[((m - first) as usize * space + nb) * components + a]
                        };
                        *slot += c * v;
                    }
                }
                let coef = |s: usize| st.weight(s) * mu_at(n - st.lag(s) as i64, pred[i * s_len + s]);
                for a in 0..components {
                    out[a] = (acc[a] + source(i, n, a, &coef)) / den;
                }
            });
        }
        Marched { space, values }
    }

    fn to_field(&self, kind: CorrectorKind, components: usize, marched: Marched<T>) -> CorrectorField<T> {
        let skip = self.burn_in * marched.space * components;
        let mut f = CorrectorField::zeros(kind, self.stencil.dim, self.nz, self.nt, components);
        f.slices = self.len;
        f.first_level = self.start;
        f.periodic_time = false;
        f.values = marched.values[skip..].to_vec();
        f
    }
}

/// `χ` for a time-stationary medium: forward relaxation from zero data, burn-in
/// discarded, normalized to zero window mean.
pub fn solve_chi_window<T: Real>(window: &Window<T>) -> Result<CorrectorField<T>> {
    let st = window.stencil;
    let d = st.dim;
    let marched = window.march(d, |_, _, _| T::zero(), |_, _, a, coef| {
        let mut b = T::zero();
        for s in 0..st.len() {
            b -= coef(s) * st.z(s, a);
        }
        b
    });
    let mut f = window.to_field(CorrectorKind::Chi, d, marched);
    f.subtract_global_mean();
    f.residual = window_residual(window, &f);
    Ok(f)
}

/// `χ₂₂` from `μ 𝔏 χ₂₂ = R` with `R[(l·space + i)·components + c]` given on every
/// window level (burn-in included); zero spatial mean per slice.
pub fn solve_chi22_window<T: Real>(window: &Window<T>, rhs: &[T], components: usize) -> Result<CorrectorField<T>> {
    let space = window.space();
    let total = window.levels() * space * components;
    if rhs.len() != total {
        return Err(Error::Config(format!(
            "χ₂₂ right-hand side has {} values, window needs {total}",
            rhs.len()
        )));
    }
    let first = window.first_level();
    let (mu_first, mu) = window.mu_table();
    let marched = window.march(components, |_, _, _| T::zero(), |i, n, c, _| {
        let l = (n - first) as usize;
        let m = mu[(n - mu_first) as usize * space + i];
        -rhs[(l * space + i) * components + c] / m
    });
    let mut f = window.to_field(CorrectorKind::Chi22, components, marched);
    for n in 0..f.slices {
        let row = &mut f.values[n * space * components..(n + 1) * space * components];
        for c in 0..components {
            let m = row.iter().skip(c).step_by(components).copied().sum::<T>() / T::of_usize(space);
            row.iter_mut().skip(c).step_by(components).for_each(|v| *v -= m);
        }
    }
    Ok(f)
}

/// Initial layer `ℐ` on the torus: `Σ w μ'(ℐ' − ℐ) = 0` with `ℐ = −χ(·,0)` for `t ≤ 0`.
pub fn solve_initial_layer<T: Real>(
    stencil: &Stencil<T>,
    medium: &MediumField<T>,
    chi: &CorrectorField<T>,
    component: usize,
    levels: usize,
) -> Result<CorrectorField<T>> {
    let window = Window::new(stencil, medium, 1, levels, 0)?;
    let d = stencil.dim;
    let space = window.space();
    let chi0: Vec<T> = (0..space)
        .map(|i| {
            let mut idx = vec![0i64; d];
            unflatten(i, window.nz, &mut idx);
            chi.at(&idx, 0, component)
        })
        .collect();
    let marched = window.march(1, |i, _, _| -chi0[i], |_, _, _, _| T::zero());
    let mut f = window.to_field(CorrectorKind::InitialLayer, 1, marched);
    let h = T::one() / T::of_usize(window.nz);
    let hd = h.powi(d as i32).f64();
    let mut norms = vec![(chi0.iter().map(|v| v.f64() * v.f64()).sum::<f64>() * hd).sqrt()];
    let mut times = vec![0.0];
    for n in 0..f.slices {
        let row = &f.values[n * space..(n + 1) * space];
        norms.push((row.iter().map(|v| v.f64() * v.f64()).sum::<f64>() * hd).sqrt());
        times.push((T::of_usize(n + 1) / T::of_usize(window.nt)).f64());
    }
    f.decay = Some(decay_fit(&times, &norms, 0.2)?);
    Ok(f)
}

/// Max relative defect of `Σ w μ'(−z + χ' − χ) = 0` over the window (first
/// `max_lag` slices skipped since their history is the discarded burn-in).
fn window_residual<T: Real>(window: &Window<T>, f: &CorrectorField<T>) -> T {
    let st = window.stencil;
    let d = st.dim;
    let space = window.space();
    let mut worst = T::zero();
    let mut idx = vec![0i64; d];
    let mut y = vec![0i64; d];
    let skip = st.max_lag().min(f.slices);
    for n in skip..f.slices {
        let level = f.first_level + n as i64;
        for i in 0..space {
            unflatten(i, window.nz, &mut idx);
            for a in 0..d {
                let x = f.at(&idx, level, a);
                let mut acc = T::zero();
                let mut den = T::zero();
                for s in (0..st.len()).rev() {
                    let j = st.offset(s);
                    for c in 0..d {
                        y[c] = idx[c] - j[c];
                    }
                    let ys: Vec<T> = (0..d)
                        .map(|c| (T::of_i64(y[c].rem_euclid(window.nz as i64)) + T::of(0.5)) / T::of_usize(window.nz))
                        .collect();
                    let m = window.medium.eval(&ys, window.q(level - st.lag(s) as i64));
                    let c = st.weight(s) * m;
                    acc += c * (-st.z(s, a) + f.at(&y, level - st.lag(s) as i64, a) - x);
                    den += c;
                }
                worst = worst.max((acc / den).abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_torus(medium: &MediumField<f64>) -> Torus<f64> {
        let k = Kernel::<f64>::boxed(1, 0.5, 1.0, 2.0).unwrap();
        Torus::from_kernel(&k, medium, &TorusSpec { nz: 16, nt: 8, policy: WeightPolicy::default() }).unwrap()
    }

    #[test]
    fn constant_medium_has_zero_corrector() {
        let m = MediumField::constant(1, 1.0).unwrap();
        let t = box_torus(&m);
        let f = solve_chi(&t, &CellOptions::default()).unwrap();
        assert!(f.max_abs() < 1e-14);
    }

    #[test]
    fn stripes_are_compatible() {
        let m = MediumField::stripes(1, 0.5, 2.0).unwrap();
        let t = box_torus(&m);
        assert!(t.compatibility_defect() < 1e-12);
        let f = solve_chi(&t, &CellOptions::default()).unwrap();
        assert!(f.residual < 1e-9);
        assert!(f.max_abs() > 1e-3);
    }
}
