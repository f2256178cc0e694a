//! Space-time jump kernels `J(z, r)` and their moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::quadrature::{trapezoid_weights, Adaptive};
use crate::{Error, Real, Result};

pub const DEFAULT_TOL: f64 = 1e-8;

/// `k₀ = 1/(36√3π)`, the common value of `∬Jr` and `½∬Jz²` for the
/// one-dimensional truncated Weierstrass kernel.
pub fn k0() -> f64 {
    1.0 / (36.0 * 3f64.sqrt() * std::f64::consts::PI)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    CompactAnalytic,
    TruncatedWeierstrass,
    Tabulated,
}

/// Serializable description of a kernel, used in configs and sidecars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    TruncatedWeierstrass {
        dim: usize,
        #[serde(default)]
        r_min: Option<f64>,
    },
    Box {
        dim: usize,
        half_width: f64,
        r_lo: f64,
        r_hi: f64,
    },
    Tabulated {
        path: String,
    },
}

impl KernelSpec {
    pub fn build<T: Real>(&self, tol: T) -> Result<Kernel<T>> {
        match self {
            KernelSpec::TruncatedWeierstrass { dim, r_min } => {
                let k = Kernel::truncated_weierstrass(*dim)?;
                match r_min {
                    Some(r) => k.clipped(T::of(*r), tol),
                    None => Ok(k),
                }
            }
            KernelSpec::Box {
                dim,
                half_width,
                r_lo,
                r_hi,
            } => Kernel::boxed(*dim, T::of(*half_width), T::of(*r_lo), T::of(*r_hi)),
            KernelSpec::Tabulated { path } => Kernel::load_csv(path),
        }
    }
}

/// Uniform lattice table: `z_c = -z_max + i·dz` for `i < z_nodes`, `r = r_lo + k·dr`.
#[derive(Clone, Debug)]
pub struct Table<T> {
    pub dim: usize,
    pub z_nodes: usize,
    pub z_max: T,
    pub r_nodes: usize,
    pub r_lo: T,
    pub r_hi: T,
    /// Row-major over `(z_1, …, z_d, r)` with `r` fastest.
    pub values: Vec<T>,
}

impl<T: Real> Table<T> {
    fn dz(&self) -> T {
        T::of(2.0) * self.z_max / T::of_usize(self.z_nodes - 1)
    }

    fn dr(&self) -> T {
        (self.r_hi - self.r_lo) / T::of_usize(self.r_nodes - 1)
    }

    fn index(&self, iz: &[usize], ir: usize) -> usize {
        let mut idx = 0;
        for &i in iz {
            idx = idx * self.z_nodes + i;
        }
        idx * self.r_nodes + ir
    }

    fn coordinate(&self, iz: usize) -> T {
        -self.z_max + T::of_usize(iz) * self.dz()
    }

    /// Multilinear interpolation, zero outside the lattice.
    fn interpolate(&self, z: &[T], r: T) -> T {
        if r < self.r_lo || r > self.r_hi {
            return T::zero();
        }
        let mut base = vec![0usize; self.dim];
        let mut frac = vec![T::zero(); self.dim];
        for c in 0..self.dim {
            if z[c].abs() > self.z_max {
                return T::zero();
            }
            let s = (z[c] + self.z_max) / self.dz();
            let i = s.floor().to_usize().unwrap().min(self.z_nodes - 2);
            base[c] = i;
            frac[c] = s - T::of_usize(i);
        }
        let sr = (r - self.r_lo) / self.dr();
        let ir = sr.floor().to_usize().unwrap().min(self.r_nodes - 2);
        let fr = sr - T::of_usize(ir);
        let mut acc = T::zero();
        let mut iz = vec![0usize; self.dim];
        for corner in 0..(1usize << (self.dim + 1)) {
            let mut w = T::one();
            for c in 0..self.dim {
                let bit = (corner >> c) & 1;
                iz[c] = base[c] + bit;
                w *= if bit == 1 { frac[c] } else { T::one() - frac[c] };
            }
            let bit = (corner >> self.dim) & 1;
            w *= if bit == 1 { fr } else { T::one() - fr };
            if w != T::zero() {
                acc += w * self.values[self.index(&iz, ir + bit)];
            }
        }
        acc
    }
}

#[derive(Clone, Debug)]
enum Shape<T> {
    Box { half_width: T, height: T },
    Weierstrass,
    Table(Table<T>),
}

/// Spatial cross-section of the support at a fixed time lag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Slice<T> {
    Empty,
    Ball(T),
    Cube(T),
}

/// Bounding box `[-S, S]^d × [r_lo, r_hi]` of the support.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportBox<T> {
    pub half_width: T,
    pub r_lo: T,
    pub r_hi: T,
}

#[derive(Clone, Debug)]
pub struct Kernel<T> {
    pub dim: usize,
    pub kind: KernelKind,
    shape: Shape<T>,
    r_lo: T,
    r_hi: T,
    half_width: T,
    /// Multiplicative factor applied after clipping (1 when unclipped).
    pub renormalization: T,
    /// Time lags below this value are cut off.
    pub r_clip: T,
    pub spec: KernelSpec,
}

impl<T: Real> Kernel<T> {
    /// `J = ¼|z|²/r²` on `{(4πr)^{-d/2} e^{-|z|²/4r} ≥ 1}`, exact (unclipped).
    pub fn truncated_weierstrass(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("kernel dimension must be positive".into()));
        }
        let four_pi = T::of(4.0) * T::PI();
        let r_star = (-T::one()).exp() / four_pi;
        let half_width = (T::of(2.0 * dim as f64) * r_star).sqrt();
        Ok(Kernel {
            dim,
            kind: KernelKind::TruncatedWeierstrass,
            shape: Shape::Weierstrass,
            r_lo: T::zero(),
            r_hi: T::one() / four_pi,
            half_width,
            renormalization: T::one(),
            r_clip: T::zero(),
            spec: KernelSpec::TruncatedWeierstrass { dim, r_min: None },
        })
    }

    /// Mass-one box kernel on `[-a, a]^d × [r_lo, r_hi]`.
    pub fn boxed(dim: usize, half_width: T, r_lo: T, r_hi: T) -> Result<Self> {
        if dim == 0 || !(half_width > T::zero()) || !(r_lo > T::zero()) || !(r_hi > r_lo) {
            return Err(Error::Config(
                "box kernel needs dim ≥ 1, half_width > 0 and 0 < r_lo < r_hi".into(),
            ));
        }
        let volume = (T::of(2.0) * half_width).powi(dim as i32) * (r_hi - r_lo);
        Ok(Kernel {
            dim,
            kind: KernelKind::CompactAnalytic,
            shape: Shape::Box {
                half_width,
                height: T::one() / volume,
            },
            r_lo,
            r_hi,
            half_width,
            renormalization: T::one(),
            r_clip: T::zero(),
            spec: KernelSpec::Box {
                dim,
                half_width: half_width.f64(),
                r_lo: r_lo.f64(),
                r_hi: r_hi.f64(),
            },
        })
    }

    pub fn tabulated(table: Table<T>, path: &str) -> Result<Self> {
        if table.z_nodes < 2 || table.r_nodes < 2 {
            return Err(Error::Config("tabulated kernel needs ≥ 2 nodes per axis".into()));
        }
        let expected = table.z_nodes.pow(table.dim as u32) * table.r_nodes;
        if table.values.len() != expected {
            return Err(Error::Config(format!(
                "tabulated kernel has {} values, expected {expected}",
                table.values.len()
            )));
        }
        if table.values.iter().any(|v| *v < T::zero() || !v.is_finite()) {
            return Err(Error::Config("tabulated kernel values must be finite and ≥ 0".into()));
        }
        Ok(Kernel {
            dim: table.dim,
            kind: KernelKind::Tabulated,
            r_lo: table.r_lo,
            r_hi: table.r_hi,
            half_width: table.z_max,
            shape: Shape::Table(table),
            renormalization: T::one(),
            r_clip: T::zero(),
            spec: KernelSpec::Tabulated { path: path.to_string() },
        })
    }

    /// Copy with time lags below `r_min` removed and mass renormalized to one.
    pub fn clipped(&self, r_min: T, tol: T) -> Result<Self> {
        if !(r_min > T::zero()) || r_min >= self.r_hi {
            return Err(Error::Config(format!(
                "clip r_min = {r_min} outside (0, {})",
                self.r_hi
            )));
        }
        let mut k = self.clone();
        k.r_clip = r_min.max(self.r_clip);
        k.renormalization = T::one();
        let mass = k.integrate(|_, _| T::one(), tol)?;
        k.renormalization = self.renormalization / mass;
        if let KernelSpec::TruncatedWeierstrass { r_min: ref mut rm, .. } = k.spec {
            *rm = Some(r_min.f64());
        }
        Ok(k)
    }

    pub fn support(&self) -> SupportBox<T> {
        SupportBox {
            half_width: self.half_width,
            r_lo: self.r_lo.max(self.r_clip),
            r_hi: self.r_hi,
        }
    }

    /// All shipped kernels are even in each spatial coordinate.
    pub fn is_even(&self) -> bool {
        match &self.shape {
            Shape::Table(t) => {
                let mut iz = vec![0usize; t.dim];
                let mut jz = vec![0usize; t.dim];
                let total = t.z_nodes.pow(t.dim as u32);
                for flat in 0..total {
                    let mut rem = flat;
                    for c in (0..t.dim).rev() {
                        iz[c] = rem % t.z_nodes;
                        jz[c] = t.z_nodes - 1 - iz[c];
                        rem /= t.z_nodes;
                    }
                    for ir in 0..t.r_nodes {
                        if t.values[t.index(&iz, ir)] != t.values[t.index(&jz, ir)] {
                            return false;
                        }
                    }
                }
                true
            }
            _ => true,
        }
    }

    pub fn eval(&self, z: &[T], r: T) -> T {
        if r < self.r_clip || r <= T::zero() {
            return T::zero();
        }
        let v = match &self.shape {
            Shape::Box { half_width, height } => {
                if r < self.r_lo || r > self.r_hi || z.iter().any(|x| x.abs() > *half_width) {
                    T::zero()
                } else {
                    *height
                }
            }
            Shape::Weierstrass => {
                if r > self.r_hi {
                    return T::zero();
                }
                let z2: T = z.iter().map(|x| *x * *x).sum();
                let bound = -T::of(2.0 * self.dim as f64) * r * (T::of(4.0) * T::PI() * r).ln();
                if z2 <= bound {
                    T::of(0.25) * z2 / (r * r)
                } else {
                    T::zero()
                }
            }
            Shape::Table(t) => t.interpolate(z, r),
        };
        v * self.renormalization
    }

    /// Spatial support at lag `r`.
    pub fn slice(&self, r: T) -> Slice<T> {
        if r < self.r_clip || r <= T::zero() || r > self.r_hi || r < self.r_lo {
            return Slice::Empty;
        }
        match &self.shape {
            Shape::Box { half_width, .. } => Slice::Cube(*half_width),
            Shape::Weierstrass => {
                let rho2 = -T::of(2.0 * self.dim as f64) * r * (T::of(4.0) * T::PI() * r).ln();
                if rho2 > T::zero() {
                    Slice::Ball(rho2.sqrt())
                } else {
                    Slice::Empty
                }
            }
            Shape::Table(t) => Slice::Cube(t.z_max),
        }
    }

    /// `∬ J(z,r) g(z,r) dz dr` to absolute accuracy `tol`.
    pub fn integrate<G>(&self, g: G, tol: T) -> Result<T>
    where
        G: Fn(&[T], T) -> T,
    {
        if let Shape::Table(t) = &self.shape {
            return Ok(self.table_sum(t, &g));
        }
        let sup = self.support();
        let q = Adaptive::new(tol);
        let mut z = vec![T::zero(); self.dim];
        if sup.r_lo > T::zero() {
            let inner_tol = tol / (sup.r_hi - sup.r_lo);
            q.integrate(sup.r_lo, sup.r_hi, |r| {
                self.spatial(r, &g, inner_tol, &mut z)
            })
        } else {
            // r = r_hi·e^{-u} resolves the integrable r → 0 behaviour.
            let upper = T::of(60.0);
            let inner_tol = tol / (upper * sup.r_hi);
            q.integrate(T::zero(), upper, |u| {
                let r = sup.r_hi * (-u).exp();
                Ok(r * self.spatial(r, &g, inner_tol, &mut z)?)
            })
        }
    }

    fn spatial<G>(&self, r: T, g: &G, tol: T, z: &mut [T]) -> Result<T>
    where
        G: Fn(&[T], T) -> T,
    {
        match self.slice(r) {
            Slice::Empty => Ok(T::zero()),
            s => self.nested(0, s, T::zero(), r, g, tol, z),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn nested<G>(&self, c: usize, s: Slice<T>, used: T, r: T, g: &G, tol: T, z: &mut [T]) -> Result<T>
    where
        G: Fn(&[T], T) -> T,
    {
        let bound = match s {
            Slice::Ball(rho) => (rho * rho - used).max(T::zero()).sqrt(),
            Slice::Cube(a) => a,
            Slice::Empty => return Ok(T::zero()),
        };
        if bound == T::zero() {
            return Ok(T::zero());
        }
        let q = Adaptive::new(tol);
        let inner_tol = tol / (T::of(2.0) * bound);
        let mut zz = z.to_vec();
        q.integrate_split(-bound, bound, T::zero(), |x| {
            zz[c] = x;
            if c + 1 == self.dim {
                Ok(self.eval_inside(&zz, r) * g(&zz, r))
            } else {
                let mut inner = zz.clone();
                self.nested(c + 1, s, used + x * x, r, g, inner_tol, &mut inner)
            }
        })
    }

    /// Kernel value for points known to lie in the closed support slice.
    fn eval_inside(&self, z: &[T], r: T) -> T {
        match &self.shape {
            Shape::Box { height, .. } => *height * self.renormalization,
            Shape::Weierstrass => {
                let z2: T = z.iter().map(|x| *x * *x).sum();
                T::of(0.25) * z2 / (r * r) * self.renormalization
            }
            Shape::Table(t) => t.interpolate(z, r) * self.renormalization,
        }
    }

    fn table_sum<G>(&self, t: &Table<T>, g: &G) -> T
    where
        G: Fn(&[T], T) -> T,
    {
        let wz = trapezoid_weights(t.z_nodes, t.dz());
        let wr = trapezoid_weights(t.r_nodes, t.dr());
        let total = t.z_nodes.pow(t.dim as u32);
        let mut z = vec![T::zero(); t.dim];
        let mut iz = vec![0usize; t.dim];
        let mut acc = T::zero();
        for flat in 0..total {
            let mut rem = flat;
            let mut w = T::one();
            for c in (0..t.dim).rev() {
                iz[c] = rem % t.z_nodes;
                rem /= t.z_nodes;
                z[c] = t.coordinate(iz[c]);
                w *= wz[iz[c]];
            }
            for ir in 0..t.r_nodes {
                let r = t.r_lo + T::of_usize(ir) * t.dr();
                if r < self.r_clip {
                    continue;
                }
                acc += w * wr[ir] * t.values[t.index(&iz, ir)] * self.renormalization * g(&z, r);
            }
        }
        acc
    }

    /// Tabulates an analytic kernel on a uniform lattice.
    pub fn to_table(&self, z_nodes: usize, r_nodes: usize) -> Table<T> {
        let sup = self.support();
        let r_lo = if sup.r_lo > T::zero() { sup.r_lo } else { sup.r_hi * T::of(1e-3) };
        let mut t = Table {
            dim: self.dim,
            z_nodes,
            z_max: sup.half_width,
            r_nodes,
            r_lo,
            r_hi: sup.r_hi,
            values: vec![T::zero(); z_nodes.pow(self.dim as u32) * r_nodes],
        };
        let mut iz = vec![0usize; self.dim];
        let mut z = vec![T::zero(); self.dim];
        for flat in 0..z_nodes.pow(self.dim as u32) {
            let mut rem = flat;
            for c in (0..self.dim).rev() {
                iz[c] = rem % z_nodes;
                rem /= z_nodes;
                z[c] = t.coordinate(iz[c]);
            }
            for ir in 0..r_nodes {
                let r = t.r_lo + T::of_usize(ir) * t.dr();
                let idx = t.index(&iz, ir);
                t.values[idx] = self.eval(&z, r);
            }
        }
        t
    }

    pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let p = path.as_ref();
        let mut rdr = csv::Reader::from_path(p)?;
        let headers = rdr.headers()?.clone();
        let dim = headers.len().checked_sub(2).filter(|d| *d > 0).ok_or_else(|| {
            Error::Config("kernel CSV needs columns z_1..z_d, r, value".into())
        })?;
        for c in 0..dim {
            if headers[c].trim() != format!("z_{}", c + 1) {
                return Err(Error::Config(format!("kernel CSV column {} must be z_{}", c, c + 1)));
            }
        }
        if headers[dim].trim() != "r" || headers[dim + 1].trim() != "value" {
            return Err(Error::Config("kernel CSV must end with columns r, value".into()));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
            rows.push(row.map_err(|e| Error::Config(format!("kernel CSV: {e}")))?);
        }
        let uniq = |col: usize| {
            let mut v: Vec<f64> = rows.iter().map(|r| r[col]).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
            v
        };
        let zs = uniq(0);
        let rs = uniq(dim);
        let z_nodes = zs.len();
        let r_nodes = rs.len();
        if z_nodes < 2 || r_nodes < 2 {
            return Err(Error::Config("kernel CSV lattice too small".into()));
        }
        let z_max = zs[z_nodes - 1];
        if (zs[0] + z_max).abs() > 1e-9 * (1.0 + z_max) {
            return Err(Error::Config("kernel CSV z lattice must be symmetric".into()));
        }
        let mut table = Table {
            dim,
            z_nodes,
            z_max: T::of(z_max),
            r_nodes,
            r_lo: T::of(rs[0]),
            r_hi: T::of(rs[r_nodes - 1]),
            values: vec![T::zero(); z_nodes.pow(dim as u32) * r_nodes],
        };
        if rows.len() != table.values.len() {
            return Err(Error::Config(format!(
                "kernel CSV has {} rows, lattice needs {}",
                rows.len(),
                table.values.len()
            )));
        }
        let dz = 2.0 * z_max / (z_nodes - 1) as f64;
        let dr = (rs[r_nodes - 1] - rs[0]) / (r_nodes - 1) as f64;
        let mut iz = vec![0usize; dim];
        for row in &rows {
            for c in 0..dim {
                iz[c] = ((row[c] + z_max) / dz).round() as usize;
            }
            let ir = ((row[dim] - rs[0]) / dr).round() as usize;
            let idx = table.index(&iz, ir);
            table.values[idx] = T::of(row[dim + 1]);
        }
        Kernel::tabulated(table, &p.to_string_lossy())
    }

    /// Writes the kernel lattice (tabulated kernels only) as CSV.
    pub fn store_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let t = match &self.shape {
            Shape::Table(t) => t,
            _ => return Err(Error::Config("only tabulated kernels are stored as CSV".into())),
        };
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=t.dim).map(|c| format!("z_{c}")).collect();
        header.push("r".into());
        header.push("value".into());
        w.write_record(&header)?;
        let mut iz = vec![0usize; t.dim];
        for flat in 0..t.z_nodes.pow(t.dim as u32) {
            let mut rem = flat;
            for c in (0..t.dim).rev() {
                iz[c] = rem % t.z_nodes;
                rem /= t.z_nodes;
            }
            for ir in 0..t.r_nodes {
                let mut rec: Vec<String> = iz.iter().map(|&i| format!("{:e}", t.coordinate(i).f64())).collect();
                rec.push(format!("{:e}", (t.r_lo + T::of_usize(ir) * t.dr()).f64()));
                rec.push(format!("{:e}", t.values[t.index(&iz, ir)].f64()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Moments of a kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelMoments<T> {
    pub mass: T,
    /// `∬ J z`
    pub first_space: Vec<T>,
    /// `∬ J r`
    pub time_moment: T,
    /// `½ ∬ J z⊗z`, row-major `d×d`.
    pub second_space: Vec<T>,
    /// `⅙ ∬ J z⊗z⊗z`, row-major `d×d×d`.
    pub third_space: Vec<T>,
    /// `∬ J r z`
    pub cross_moment: Vec<T>,
}

pub fn compute_moments<T: Real>(k: &Kernel<T>, tol: T) -> Result<KernelMoments<T>> {
    if !(tol > T::zero()) {
        return Err(Error::Config("quadrature tolerance must be positive".into()));
    }
    let d = k.dim;
    let mass = k.integrate(|_, _| T::one(), tol)?;
    let time_moment = k.integrate(|_, r| r, tol)?;
    let mut first_space = Vec::with_capacity(d);
    let mut cross_moment = Vec::with_capacity(d);
    for a in 0..d {
        first_space.push(k.integrate(|z, _| z[a], tol)?);
        cross_moment.push(k.integrate(|z, r| r * z[a], tol)?);
    }
    let mut second_space = vec![T::zero(); d * d];
    for a in 0..d {
        for b in a..d {
            let v = k.integrate(|z, _| T::of(0.5) * z[a] * z[b], tol)?;
            second_space[a * d + b] = v;
            second_space[b * d + a] = v;
        }
    }
    let mut third_space = vec![T::zero(); d * d * d];
    for a in 0..d {
        for b in a..d {
            for c in b..d {
                let v = k.integrate(|z, _| z[a] * z[b] * z[c] / T::of(6.0), tol)?;
                for (i, j, l) in [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)] {
                    third_space[(i * d + j) * d + l] = v;
                }
            }
        }
    }
    Ok(KernelMoments {
        mass,
        first_space,
        time_moment,
        second_space,
        third_space,
        cross_moment,
    })
}

/// `∬ J(z,r)·w(z,r)·|direction·z|^{p−2}·g(z,r) dz dr`.
pub fn weighted_p_moment<T, W, G>(k: &Kernel<T>, w: W, direction: &[T], p: T, g: G, tol: T) -> Result<T>
where
    T: Real,
    W: Fn(&[T], T) -> T,
    G: Fn(&[T], T) -> T,
{
    if p < T::of(2.0) || direction.len() != k.dim || direction.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config("weighted moment needs p ≥ 2 and a finite direction of length d".into()));
    }
    let e = p - T::of(2.0);
    k.integrate(
        |z, r| {
            let dz: T = z.iter().zip(direction).map(|(a, b)| *a * *b).sum();
            w(z, r) * dz.abs_pow(e) * g(z, r)
        },
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weierstrass_point_values() {
        let k = Kernel::<f64>::truncated_weierstrass(1).unwrap();
        let pi = std::f64::consts::PI;
        assert_eq!(k.eval(&[0.0], 1.0 / (8.0 * pi)), 0.0);
        assert_eq!(k.eval(&[0.01], 1.0 / (4.0 * pi) + 1e-9), 0.0);
        assert_eq!(k.eval(&[0.0], 0.3), 0.0);
        let r = 0.02;
        let z = 0.1;
        assert!((k.eval(&[z], r) - 0.25 * z * z / (r * r)).abs() < 1e-12);
    }

    #[test]
    fn box_moments() {
        let k = Kernel::<f64>::boxed(1, 0.5, 1.0, 2.0).unwrap();
        let m = compute_moments(&k, 1e-12).unwrap();
        assert!((m.mass - 1.0).abs() < 1e-12);
        assert!((m.time_moment - 1.5).abs() < 1e-12);
        assert!((m.second_space[0] - 1.0 / 24.0).abs() < 1e-12);
        assert!(m.first_space[0].abs() < 1e-12);
    }

    #[test]
    fn weighted_mass() {
        let k = Kernel::<f64>::truncated_weierstrass(1).unwrap();
        let v = weighted_p_moment(&k, |_, _| 1.0, &[1.0], 2.0, |_, _| 1.0, 1e-10).unwrap();
        assert!((v - 1.0).abs() < 1e-7);
    }

    #[test]
    fn clipping_records_factor() {
        let k = Kernel::<f64>::truncated_weierstrass(1).unwrap();
        let c = k.clipped(1e-3 / (4.0 * std::f64::consts::PI), 1e-10).unwrap();
        assert!(c.renormalization > 1.2);
        let m = compute_moments(&c, 1e-9).unwrap();
        assert!((m.mass - 1.0).abs() < 1e-7);
    }
}
