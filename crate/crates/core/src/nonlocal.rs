//! Explicit marching of the scaled nonlocal p-Laplacian evolution.
//!
//! With `h = ε/N_z` and `τ = ε²/N_t` the scaled kernel `J_ε` sampled on the
//! grid is the lattice stencil built with `hz = 1/N_z`, `hr = 1/N_t`, for every
//! `ε`. The factor `μ(x,t)` of `ν = μ(x,t)μ(y,s)` cancels from the update.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernel::Kernel;
use crate::lattice::Stencil;
use crate::media::MediumField;
use crate::{Error, Real, Result};

pub const ROOT_TOL: f64 = 1e-12;
pub const ROOT_MAX_STEPS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialExtension {
    /// Values outside the box are frozen to the datum.
    ConstantByDatum,
    Zero,
    /// The box is a torus.
    Periodic,
}

/// Self-similar space-time lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid<T> {
    pub eps: T,
    /// Spatial nodes per length `ε`.
    pub nz: usize,
    /// Time steps per fast time unit `ε²`.
    pub nt: usize,
    /// Lower corner of the box in units of `ε`.
    pub lower: Vec<i64>,
    /// Box extent in units of `ε`.
    pub cells: Vec<usize>,
    pub steps: usize,
}

impl<T: Real> SpaceTimeGrid<T> {
    pub fn new(eps: T, nz: usize, nt: usize, lower: Vec<i64>, cells: Vec<usize>, steps: usize) -> Result<Self> {
        if !(eps > T::zero()) || nz == 0 || nt == 0 || lower.len() != cells.len() || cells.is_empty() || cells.contains(&0) {
            return Err(Error::Config("grid needs ε > 0, N_z, N_t ≥ 1 and a non-empty box".into()));
        }
        Ok(SpaceTimeGrid { eps, nz, nt, lower, cells, steps })
    }

    /// Smallest grid whose box covers `[lo, hi]` and whose horizon reaches `t_final`.
    pub fn covering(eps: T, nz: usize, nt: usize, lo: &[T], hi: &[T], t_final: T) -> Result<Self> {
        let tol = T::of(1e-9);
        let lower: Vec<i64> = lo.iter().map(|x| (*x / eps + tol).floor().to_i64().unwrap()).collect();
        let upper: Vec<i64> = hi.iter().map(|x| (*x / eps - tol).ceil().to_i64().unwrap()).collect();
        let cells = lower.iter().zip(&upper).map(|(l, u)| (u - l).max(1) as usize).collect();
        let tau = eps * eps / T::of_usize(nt);
        let steps = (t_final / tau - tol).ceil().to_usize().unwrap_or(0);
        SpaceTimeGrid::new(eps, nz, nt, lower, cells, steps)
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn h(&self) -> T {
        self.eps / T::of_usize(self.nz)
    }

    pub fn tau(&self) -> T {
        self.eps * self.eps / T::of_usize(self.nt)
    }

    pub fn horizon(&self) -> T {
        T::of_usize(self.steps) * self.tau()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c * self.nz).collect()
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fast variable of node `i` along axis `c`.
    pub fn xi(&self, c: usize, i: i64) -> T {
        (T::of_i64(self.lower[c] * self.nz as i64 + i) + T::of(0.5)) / T::of_usize(self.nz)
    }

    pub fn x(&self, c: usize, i: i64) -> T {
        self.xi(c, i) * self.eps
    }

    pub fn q(&self, level: i64) -> T {
        T::of_i64(level) / T::of_usize(self.nt)
    }

    pub fn time(&self, level: i64) -> T {
        T::of_i64(level) * self.tau()
    }

    /// Coordinates of every node, row-major with the last axis fastest.
    pub fn points(&self) -> Vec<Vec<T>> {
        let shape = self.shape();
        let n = self.len();
        let d = self.dim();
        (0..n)
            .map(|flat| {
                let mut rem = flat;
                let mut x = vec![T::zero(); d];
                for c in (0..d).rev() {
                    x[c] = self.x(c, (rem % shape[c]) as i64);
                    rem /= shape[c];
                }
                x
            })
            .collect()
    }

    pub fn history_depth(&self, stencil: &Stencil<T>) -> usize {
        stencil.max_lag()
    }

    /// `h ≤ ε/16` and `τ ≤ ε²·r_lo/8`.
    pub fn check_resolution(&self, kernel: &Kernel<T>) -> Result<()> {
        let r_lo = kernel.support().r_lo;
        let nt_needed = if r_lo > T::zero() {
            (T::of(8.0) / r_lo).ceil().to_usize().unwrap_or(usize::MAX)
        } else {
            usize::MAX
        };
        let mut problems = Vec::new();
        if self.nz < 16 {
            problems.push(format!("N_z = {} < 16 (need h ≤ ε/16 = {})", self.nz, self.eps / T::of(16.0)));
        }
        if self.nt < nt_needed {
            if nt_needed == usize::MAX {
                problems.push("kernel time support reaches r = 0; clip the kernel before marching".to_string());
            } else {
                problems.push(format!(
                    "N_t = {} < {nt_needed} (need τ ≤ ε²·r_lo/8 = {})",
                    self.nt,
                    self.eps * self.eps * r_lo / T::of(8.0)
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Resolution(format!("ε = {}: {}", self.eps, problems.join("; "))))
        }
    }
}

/// Recorded solution frames.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub grid: SpaceTimeGrid<T>,
    pub p: T,
    pub extension: SpatialExtension,
    pub levels: Vec<usize>,
    pub frames: Vec<Vec<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn final_frame(&self) -> &[T] {
        self.frames.last().map(|f| f.as_slice()).unwrap_or(&[])
    }

    pub fn frame(&self, level: usize) -> Option<&[T]> {
        self.levels.iter().position(|l| *l == level).map(|i| self.frames[i].as_slice())
    }

    pub fn times(&self) -> Vec<T> {
        self.levels.iter().map(|l| self.grid.time(*l as i64)).collect()
    }

    pub fn sup_norm_range(&self) -> (T, T) {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for f in &self.frames {
            for v in f {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        (lo, hi)
    }
}

/// Problem data for the marcher.
#[derive(Clone, Copy)]
pub struct Problem<'a, T> {
    pub stencil: &'a Stencil<T>,
    pub medium: &'a MediumField<T>,
    pub p: T,
    pub grid: &'a SpaceTimeGrid<T>,
    pub extension: SpatialExtension,
}

pub type Datum<'a, T> = &'a (dyn Fn(&[T]) -> T + Sync);
/// Sees every level of a march.
pub type Observer<'o, T> = &'o mut dyn FnMut(usize, &[T]);
pub type PastDatum<'a, T> = &'a (dyn Fn(&[T], T) -> T + Sync);

/// Geometry of the padded array (box plus halo).
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub dims: Vec<usize>,
    pub pad: Vec<usize>,
    pub pdims: Vec<usize>,
    pub strides: Vec<usize>,
    pub len: usize,
    pub interior: Vec<usize>,
    pub halo: Vec<usize>,
    /// For every padded node, the padded index of its periodic image inside the box.
    pub wrap: Vec<usize>,
}

impl Layout {
    pub fn new(dims: &[usize], pad: &[usize]) -> Self {
        let d = dims.len();
        let pdims: Vec<usize> = dims.iter().zip(pad).map(|(n, p)| n + 2 * p).collect();
        let mut strides = vec![1usize; d];
        for c in (0..d.saturating_sub(1)).rev() {
            strides[c] = strides[c + 1] * pdims[c + 1];
        }
        let len: usize = pdims.iter().product();
        let mut interior = Vec::with_capacity(dims.iter().product());
        let mut halo = Vec::new();
        let mut wrap = vec![0usize; len];
        let mut ip = vec![0usize; d];
        for flat in 0..len {
            let mut rem = flat;
            for c in (0..d).rev() {
                ip[c] = rem % pdims[c];
                rem /= pdims[c];
            }
            let inside = (0..d).all(|c| ip[c] >= pad[c] && ip[c] < pad[c] + dims[c]);
            if inside {
                interior.push(flat);
            } else {
                halo.push(flat);
            }
            let mut w = 0;
            for c in 0..d {
                let i = (ip[c] as i64 - pad[c] as i64).rem_euclid(dims[c] as i64) as usize;
                w += (i + pad[c]) * strides[c];
            }
            wrap[flat] = w;
        }
        Layout {
            dims: dims.to_vec(),
            pad: pad.to_vec(),
            pdims,
            strides,
            len,
            interior,
            halo,
            wrap,
        }
    }

    /// Signed box index of padded node `flat` along each axis.
    pub fn index(&self, flat: usize) -> Vec<i64> {
        let d = self.dims.len();
        let mut out = vec![0i64; d];
        let mut rem = flat;
        for c in (0..d).rev() {
            out[c] = (rem % self.pdims[c]) as i64 - self.pad[c] as i64;
            rem /= self.pdims[c];
        }
        out
    }

    pub fn flat_offset(&self, j: &[i64]) -> isize {
        j.iter().zip(&self.strides).map(|(a, s)| *a as isize * *s as isize).sum()
    }

    pub fn span(&self) -> (usize, usize) {
        (self.interior[0], *self.interior.last().unwrap() + 1)
    }
}

/// Root of `F(v) = Σ c_i |a_i − v|^{p−2}(a_i − v)` by bisection on `[min a, max a]`.
pub fn node_root<T: Real>(a: &[T], c: &[T], p: T) -> Result<T> {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &x in a {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if a.is_empty() {
        return Err(Error::Config("empty stencil".into()));
    }
    if p == T::of(2.0) {
        let mut num = T::zero();
        let mut den = T::zero();
        for (x, w) in a.iter().zip(c) {
            num += *w * *x;
            den += *w;
        }
        return Ok((num / den).max(lo).min(hi));
    }
    let e = p - T::of(2.0);
    let pi = p.to_f64().unwrap_or(0.0);
    let phi = |d: T| -> T {
        if pi == 3.0 {
            d.abs() * d
        } else if pi == 4.0 {
            d * d * d
        } else {
            d.abs_pow(e) * d
        }
    };
    let f = |v: T| -> T { a.iter().zip(c).map(|(x, w)| *w * phi(*x - v)).sum() };
    let tol = T::of(ROOT_TOL);
    let two = T::of(2.0);
    let (mut l, mut h) = (lo, hi);
    for _ in 0..ROOT_MAX_STEPS {
        if h - l <= tol {
            return Ok((l + h) / two);
        }
        let m = (l + h) / two;
        if m <= l || m >= h {
            return Ok(m);
        }
        let fm = f(m);
        if fm > T::zero() {
            l = m;
        } else if fm < T::zero() {
            h = m;
        } else {
            return Ok(m);
        }
    }
    if h - l <= tol {
        Ok((l + h) / two)
    } else {
        Err(Error::RootFinding {
            lo: l.f64(),
            hi: h.f64(),
            steps: ROOT_MAX_STEPS,
        })
    }
}

/// Ring-buffered explicit marcher.
pub struct Marcher<'a, T> {
    problem: Problem<'a, T>,
    f: Datum<'a, T>,
    layout: Layout,
    /// Fast coordinates of every padded node (flattened, `dim` per node).
    xi: Vec<T>,
    /// Physical coordinates of every padded node.
    x: Vec<T>,
    offsets: Vec<isize>,
    depth: usize,
    mu: Vec<Vec<T>>,
    /// `μ·u` for p = 2, `u` otherwise.
    val: Vec<Vec<T>>,
    frozen: Vec<T>,
    level: usize,
    current: Vec<T>,
    mu_const: Option<Vec<T>>,
}

impl<'a, T: Real> Marcher<'a, T> {
    pub fn new(problem: Problem<'a, T>, f: Datum<'a, T>, past: Option<PastDatum<'a, T>>) -> Result<Self> {
        let st = problem.stencil;
        let grid = problem.grid;
        let d = grid.dim();
        if st.dim != d || problem.medium.dim != d {
            return Err(Error::Config("stencil, medium and grid dimensions differ".into()));
        }
        if st.is_empty() {
            return Err(Error::Config("empty stencil: kernel support unresolved by the grid".into()));
        }
        if !(problem.p >= T::of(2.0)) {
            return Err(Error::Config("p must be ≥ 2".into()));
        }
        let tol = T::of(1e-9);
        let nz = T::of_usize(grid.nz);
        let nt = T::of_usize(grid.nt);
        if ((st.hz * nz) - T::one()).abs() > tol || ((st.hr * nt) - T::one()).abs() > tol {
            return Err(Error::Config(format!(
                "stencil spacing ({}, {}) does not match the grid (1/{}, 1/{})",
                st.hz, st.hr, grid.nz, grid.nt
            )));
        }
        let shape = grid.shape();
        let pad = st.max_offset();
        if problem.extension == SpatialExtension::Periodic {
            for c in 0..d {
                if pad[c] > shape[c] {
                    return Err(Error::Config("periodic box smaller than the stencil".into()));
                }
            }
        }
        let layout = Layout::new(&shape, &pad);
        let mut xi = vec![T::zero(); layout.len * d];
        let mut x = vec![T::zero(); layout.len * d];
        for flat in 0..layout.len {
            let idx = layout.index(flat);
            for c in 0..d {
                xi[flat * d + c] = grid.xi(c, idx[c]);
                x[flat * d + c] = grid.x(c, idx[c]);
            }
        }
        let offsets = (0..st.len()).map(|s| layout.flat_offset(st.offset(s))).collect();
        let depth = st.max_lag();
        let frozen: Vec<T> = (0..layout.len)
            .map(|i| match problem.extension {
                SpatialExtension::Zero => T::zero(),
                _ => f(&x[i * d..(i + 1) * d]),
            })
            .collect();
        let mut m = Marcher {
            problem,
            f,
            layout,
            xi,
            x,
            offsets,
            depth,
            mu: Vec::new(),
            val: Vec::new(),
            frozen,
            level: 0,
            current: Vec::new(),
            mu_const: None,
        };
        if problem.medium.is_constant() {
            m.mu_const = Some(vec![problem.medium.eval(&m.xi[0..d], T::zero()); m.layout.len]);
        }
        let linear = m.linear();
        for slot_level in (1 - depth as i64)..=0 {
            let mu = m.mu_frame(slot_level);
            let t = grid.time(slot_level);
            let mut u = vec![T::zero(); m.layout.len];
            for i in 0..m.layout.len {
                let xs = &m.x[i * d..(i + 1) * d];
                u[i] = match past {
                    Some(g) => g(xs, t),
                    None => (m.f)(xs),
                };
            }
            match problem.extension {
                SpatialExtension::Zero => {
                    for &h in &m.layout.halo {
                        u[h] = T::zero();
                    }
                }
                SpatialExtension::Periodic => {
                    for &h in &m.layout.halo {
                        u[h] = u[m.layout.wrap[h]];
                    }
                }
                SpatialExtension::ConstantByDatum => {}
            }
            if slot_level == 0 {
                m.current = m.layout.interior.iter().map(|&i| u[i]).collect();
            }
            let v = if linear { mu.iter().zip(&u).map(|(a, b)| *a * *b).collect() } else { u };
            m.mu.push(mu);
            m.val.push(v);
        }
        Ok(m)
    }

    fn linear(&self) -> bool {
        self.problem.p == T::of(2.0)
    }

    fn slot(&self, level: i64) -> usize {
        (level + self.depth as i64 - 1).rem_euclid(self.depth as i64) as usize
    }

    fn mu_frame(&self, level: i64) -> Vec<T> {
        if let Some(c) = &self.mu_const {
            return c.clone();
        }
        let d = self.problem.grid.dim();
        let q = self.problem.grid.q(level);
        let mut mu: Vec<T> = (0..self.layout.len)
            .map(|i| self.problem.medium.eval(&self.xi[i * d..(i + 1) * d], q))
            .collect();
        if self.problem.extension == SpatialExtension::Periodic {
            for &h in &self.layout.halo {
                mu[h] = mu[self.layout.wrap[h]];
            }
        }
        mu
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn time(&self) -> T {
        self.problem.grid.time(self.level as i64)
    }

    /// Interior values at the current level.
    pub fn current(&self) -> &[T] {
        &self.current
    }

    /// Advances one time level and returns the new interior frame.
    pub fn step(&mut self) -> Result<&[T]> {
        let n = self.level as i64 + 1;
        let st = self.problem.stencil;
        let (lo, hi) = self.layout.span();
        let new_u: Vec<T> = if self.linear() {
            let width = hi - lo;
            let mut num = vec![T::zero(); width];
            let mut den = vec![T::zero(); width];
            let entries: Vec<(usize, T, isize)> = (0..st.len())
                .map(|s| (self.slot(n - st.lag(s) as i64), st.weight(s), self.offsets[s]))
                .collect();
            let mu = &self.mu;
            let val = &self.val;
            let chunk = 2048;
            num.par_chunks_mut(chunk)
                .zip(den.par_chunks_mut(chunk))
                .enumerate()
                .for_each(|(ci, (nc, dc))| {
                    let start = lo + ci * chunk;
                    for &(slot, w, off) in &entries {
                        let base = (start as isize - off) as usize;
                        let m = &mu[slot][base..base + nc.len()];
                        let v = &val[slot][base..base + nc.len()];
                        for k in 0..nc.len() {
                            nc[k] += w * v[k];
                            dc[k] += w * m[k];
                        }
                    }
                });
            self.layout.interior.iter().map(|&i| num[i - lo] / den[i - lo]).collect()
        } else {
            let p = self.problem.p;
            let entries: Vec<(usize, T, isize)> = (0..st.len())
                .map(|s| (self.slot(n - st.lag(s) as i64), st.weight(s), self.offsets[s]))
                .collect();
            let mu = &self.mu;
            let val = &self.val;
            self.layout
                .interior
                .par_iter()
                .map(|&i| {
                    let mut a = Vec::with_capacity(entries.len());
                    let mut c = Vec::with_capacity(entries.len());
                    for &(slot, w, off) in &entries {
                        let j = (i as isize - off) as usize;
                        a.push(val[slot][j]);
                        c.push(w * mu[slot][j]);
                    }
                    node_root(&a, &c, p)
                })
                .collect::<Result<Vec<T>>>()?
        };
        let mu = self.mu_frame(n);
        let mut u = self.frozen.clone();
        for (k, &i) in self.layout.interior.iter().enumerate() {
            u[i] = new_u[k];
        }
        if self.problem.extension == SpatialExtension::Periodic {
            for &h in &self.layout.halo {
                u[h] = u[self.layout.wrap[h]];
            }
        }
        let slot = self.slot(n);
        self.val[slot] = if self.linear() { mu.iter().zip(&u).map(|(a, b)| *a * *b).collect() } else { u };
        self.mu[slot] = mu;
        self.current = new_u;
        self.level += 1;
        Ok(&self.current)
    }

    /// Physical coordinates of the interior nodes.
    pub fn interior_points(&self) -> Vec<Vec<T>> {
        let d = self.problem.grid.dim();
        self.layout.interior.iter().map(|&i| self.x[i * d..(i + 1) * d].to_vec()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SolveOptions {
    /// Record every `record_every`-th level (0: only the first and last).
    pub record_every: usize,
}

/// Marches to the grid horizon; `observer(level, frame)` sees every level.
pub fn solve<T: Real>(
    problem: &Problem<T>,
    f: Datum<T>,
    past: Option<PastDatum<T>>,
    opts: &SolveOptions,
    mut observer: Option<Observer<T>>,
) -> Result<Trajectory<T>> {
    let mut m = Marcher::new(*problem, f, past)?;
    let steps = problem.grid.steps;
    let mut levels = vec![0];
    let mut frames = vec![m.current().to_vec()];
    if let Some(obs) = observer.as_mut() {
        obs(0, m.current());
    }
    for n in 1..=steps {
        let frame = m.step()?;
        if let Some(obs) = observer.as_mut() {
            obs(n, frame);
        }
        let keep = if opts.record_every == 0 { n == steps } else { n % opts.record_every == 0 || n == steps };
        if keep {
            levels.push(n);
            frames.push(frame.to_vec());
        }
    }
    Ok(Trajectory {
        grid: problem.grid.clone(),
        p: problem.p,
        extension: problem.extension,
        levels,
        frames,
    })
}

/// `e = (Σ (L̂V)² h^d τ)^{1/2}` with `L̂V(x,t) = ε^{-2} Σ_s w_s μ(x,t)μ(y,s)|V(y,s)−V(x,t)|^{p−2}(V(y,s)−V(x,t))`,
/// restricted to offsets with `|x−y|_∞ ≤ radius_x` and `t−s ≤ radius_t` (physical units).
#[allow(clippy::too_many_arguments)]
pub fn discrete_residual<T: Real>(
    traj: &Trajectory<T>,
    stencil: &Stencil<T>,
    medium: &MediumField<T>,
    f: Datum<T>,
    past: Option<PastDatum<T>>,
    radius_x: T,
    radius_t: T,
) -> Result<T> {
    let grid = &traj.grid;
    let d = grid.dim();
    if traj.levels.len() != grid.steps + 1 || traj.levels.iter().enumerate().any(|(i, l)| *l != i) {
        return Err(Error::Config("residual needs every time level recorded".into()));
    }
    if stencil.dim != d {
        return Err(Error::Config("stencil and grid dimensions differ".into()));
    }
    let eps = grid.eps;
    let st = stencil.restricted(radius_x / eps, radius_t / (eps * eps))?;
    let shape = grid.shape();
    let n = grid.len();
    let p = traj.p;
    let e = p - T::of(2.0);
    let value = |idx: &[i64], level: i64| -> T {
        let inside = (0..d).all(|c| idx[c] >= 0 && idx[c] < shape[c] as i64);
        let x: Vec<T> = (0..d).map(|c| grid.x(c, idx[c])).collect();
        if level <= 0 {
            if !inside && traj.extension == SpatialExtension::Zero {
                return T::zero();
            }
            let xw: Vec<T> = if traj.extension == SpatialExtension::Periodic {
                (0..d).map(|c| grid.x(c, idx[c].rem_euclid(shape[c] as i64))).collect()
            } else {
                x
            };
            return match past {
                Some(g) => g(&xw, grid.time(level)),
                None => f(&xw),
            };
        }
        let mut wrapped = idx.to_vec();
        if !inside {
            match traj.extension {
                SpatialExtension::Zero => return T::zero(),
                SpatialExtension::ConstantByDatum => return f(&x),
                SpatialExtension::Periodic => {
                    for c in 0..d {
                        wrapped[c] = idx[c].rem_euclid(shape[c] as i64);
                    }
                }
            }
        }
        let mut flat = 0usize;
        for c in 0..d {
            flat = flat * shape[c] + wrapped[c] as usize;
        }
        traj.frames[level as usize][flat]
    };
    let mu_at = |idx: &[i64], level: i64| -> T {
        let xi: Vec<T> = (0..d)
            .map(|c| {
                if traj.extension == SpatialExtension::Periodic {
                    grid.xi(c, idx[c].rem_euclid(shape[c] as i64))
                } else {
                    grid.xi(c, idx[c])
                }
            })
            .collect();
        medium.eval(&xi, grid.q(level))
    };
    let hd = grid.h().powi(d as i32);
    let scale = T::one() / (eps * eps);
    let mut total = T::zero();
    let mut idx = vec![0i64; d];
    let mut y = vec![0i64; d];
    for level in 1..=grid.steps as i64 {
        for flat in 0..n {
            let mut rem = flat;
            for c in (0..d).rev() {
                idx[c] = (rem % shape[c]) as i64;
                rem /= shape[c];
            }
            let vx = value(&idx, level);
            let mux = mu_at(&idx, level);
            let mut acc = T::zero();
            for s in 0..st.len() {
                let j = st.offset(s);
                for c in 0..d {
                    y[c] = idx[c] - j[c];
                }
                let ls = level - st.lag(s) as i64;
                let diff = value(&y, ls) - vx;
                acc += st.weight(s) * mux * mu_at(&y, ls) * diff.abs_pow(e) * diff;
            }
            let l = acc * scale;
            total += l * l * hd * grid.tau();
        }
    }
    Ok(total.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayStatus {
    Fitted,
    ZeroTrajectory,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecayFit {
    pub status: DecayStatus,
    /// `γ̂` with `‖u(t)‖ ≈ C e^{−γ̂ t}`.
    pub rate: f64,
    pub r2: f64,
    pub points: usize,
}

/// Least-squares fit of `log ‖u(·,t)‖_{L²}` against `t` after discarding the
/// first `burn_in` fraction of recorded frames.
pub fn decay_rate<T: Real>(traj: &Trajectory<T>, burn_in: f64) -> Result<DecayFit> {
    let hd = traj.grid.h().powi(traj.grid.dim() as i32).f64();
    let norms: Vec<f64> = traj
        .frames
        .iter()
        .map(|f| (f.iter().map(|v| v.f64() * v.f64()).sum::<f64>() * hd).sqrt())
        .collect();
    let times: Vec<f64> = traj.times().iter().map(|t| t.f64()).collect();
    decay_fit(&times, &norms, burn_in)
}

pub fn decay_fit(times: &[f64], norms: &[f64], burn_in: f64) -> Result<DecayFit> {
    if norms.iter().all(|n| *n == 0.0) {
        return Ok(DecayFit {
            status: DecayStatus::ZeroTrajectory,
            rate: 0.0,
            r2: 1.0,
            points: norms.len(),
        });
    }
    let start = ((norms.len() as f64) * burn_in.clamp(0.0, 0.95)).floor() as usize;
    let t = &times[start..];
    let y: Vec<f64> = norms[start..].iter().map(|n| n.ln()).collect();
    if t.len() < 3 || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("decay fit needs ≥ 3 positive norms after burn-in".into()));
    }
    for w in norms[start..].windows(2) {
        if w[1] > w[0] * (1.0 + 1e-6) {
            return Err(Error::Numerical(format!(
                "norm sequence not monotone on the fit window ({:e} → {:e})",
                w[0], w[1]
            )));
        }
    }
    let fit = crate::stats::linear_fit(t, &y);
    Ok(DecayFit {
        status: DecayStatus::Fitted,
        rate: -fit.slope,
        r2: fit.r2,
        points: t.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_power_root() {
        let v = node_root::<f64>(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0], 4.0).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layout_wrap() {
        let l = Layout::new(&[4], &[2]);
        assert_eq!(l.len, 8);
        assert_eq!(l.interior, vec![2, 3, 4, 5]);
        assert_eq!(l.wrap[0], 4);
        assert_eq!(l.wrap[7], 3);
    }
}
