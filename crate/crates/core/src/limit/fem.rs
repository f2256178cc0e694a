//! Two-scale Crank–Nicolson finite elements in one macro dimension.
//!
//! Macro space: P1 on a uniform mesh of `[lower, upper]` with zero boundary
//! values. Cell space: per macro element, a vector on the nodes of the periodic
//! cell lattice (`U₁` is piecewise constant in `x`), with a Lagrange multiplier
//! fixing its cell mean to zero. Cell integrals are lattice averages with the
//! same stencil as the cell problems. The `∇ₓU₁` and `∇ₓₓU₀` terms are
//! integrated by parts against `ψ₀`.

use serde::{Deserialize, Serialize};

use super::lu::{tridiagonal, Lu};
use crate::cell::Torus;
use crate::{Error, Real, Result};

/// Degree of freedom of the coupled system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dof {
    /// Interior macro node `1..M`.
    Macro(usize),
    /// Cell node `n` of element `e`.
    Cell(usize, usize),
    /// Mean-zero multiplier of element `e`.
    Multiplier(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FemState<T> {
    pub time: T,
    /// Macro nodal values, boundary zeros included (`M + 1`).
    pub u0: Vec<T>,
    /// Per element, the cell field (`M × cells`).
    pub u1: Vec<Vec<T>>,
}

pub struct TwoScaleFem<T> {
    pub lower: T,
    pub upper: T,
    pub elements: usize,
    pub dt: T,
    pub torus: Torus<T>,
    /// `−⟨μ Σ w μ' r⟩`
    pub alpha_hat: T,
    /// `⟨μ Σ w μ' z²/2⟩`
    pub q0: T,
    /// Cell operator `K[n][n'] = μ(n) Σ_{pred(n,s)=n'} w μ(n') − δ μ(n) Σ w μ'`.
    k: Vec<T>,
    /// `b[n] = −μ(n) Σ w μ' z`.
    b: Vec<T>,
    /// `a[n'] = cells⁻¹ Σ_{pred(n,s)=n'} μ(n) w μ(n') z`.
    a: Vec<T>,
    cell_lu: Lu<T>,
    /// `G⁻¹ c` for the unit macro jump.
    unit: Vec<T>,
}

impl<T: Real> TwoScaleFem<T> {
    pub fn new(torus: Torus<T>, lower: T, upper: T, elements: usize, dt: T) -> Result<Self> {
        if torus.dim != 1 {
            return Err(Error::Config("the two-scale FEM is one dimensional".into()));
        }
        if elements < 2 || !(upper > lower) || !(dt > T::zero()) {
            return Err(Error::Config("FEM needs ≥ 2 elements, upper > lower and Δt > 0".into()));
        }
        let nc = torus.nodes;
        let st = &torus.stencil;
        let mut k = vec![T::zero(); nc * nc];
        let mut b = vec![T::zero(); nc];
        let mut a = vec![T::zero(); nc];
        let (mut alpha, mut q0) = (T::zero(), T::zero());
        let inv = T::one() / T::of_usize(nc);
        for n in 0..nc {
            for s in 0..st.len() {
                let p = torus.pred(n, s);
                let c = st.weight(s) * torus.mu[n] * torus.mu[p];
                let z = st.z(s, 0);
                k[n * nc + p] += c;
                k[n * nc + n] -= c;
                b[n] -= c * z;
                a[p] += c * z * inv;
                alpha -= c * st.r(s) * inv;
                q0 += c * z * z * T::of(0.5) * inv;
            }
        }
        let mut fem = TwoScaleFem {
            lower,
            upper,
            elements,
            dt,
            torus,
            alpha_hat: alpha,
            q0,
            k,
            b,
            a,
            cell_lu: Lu::factor(1, vec![T::one()])?,
            unit: Vec::new(),
        };
        let g = (0..(nc + 1) * (nc + 1))
            .map(|ij| fem.entry(Dof::cell_or_mult(0, ij / (nc + 1), nc), Dof::cell_or_mult(0, ij % (nc + 1), nc)))
            .collect();
        fem.cell_lu = Lu::factor(nc + 1, g)?;
        let mut c = vec![T::zero(); nc + 1];
        // Column of Dof::Macro(1) in the rows of element 0 (δ = U[1] − U[0]).
        for (n, v) in c.iter_mut().enumerate().take(nc) {
            *v = fem.entry(Dof::Cell(0, n), Dof::Macro(1));
        }
        fem.unit = fem.cell_lu.solve(&c);
        Ok(fem)
    }

    pub fn h(&self) -> T {
        (self.upper - self.lower) / T::of_usize(self.elements)
    }

    pub fn cells(&self) -> usize {
        self.torus.nodes
    }

    pub fn node(&self, j: usize) -> T {
        self.lower + T::of_usize(j) * self.h()
    }

    /// Number of unknowns of the coupled system.
    pub fn unknowns(&self) -> usize {
        self.elements - 1 + self.elements * (self.cells() + 1)
    }

    pub fn dofs(&self) -> Vec<Dof> {
        let mut out: Vec<Dof> = (1..self.elements).map(Dof::Macro).collect();
        for e in 0..self.elements {
            out.extend((0..self.cells()).map(|n| Dof::Cell(e, n)));
            out.push(Dof::Multiplier(e));
        }
        out
    }

    /// Coefficient of the new-time unknown `trial` in the equation tested by `test`.
    pub fn entry(&self, test: Dof, trial: Dof) -> T {
        let h = self.h();
        let half = T::of(0.5);
        let nc = self.cells();
        let scale = h / T::of_usize(nc);
        match (test, trial) {
            (Dof::Macro(i), Dof::Macro(j)) => {
                let mass = if i == j {
                    T::of(4.0) * h / T::of(6.0)
                } else if i.abs_diff(j) == 1 {
                    h / T::of(6.0)
                } else {
                    return T::zero();
                };
                let stiff = if i == j { T::of(2.0) / h } else { -T::one() / h };
                self.alpha_hat / self.dt * mass - half * self.q0 * stiff
            }
            // ∫_e ⟨μΣwμ' z U₁'⟩ ∂ₓψ₀ with h·∂ₓφ_i = +1 on element i−1, −1 on element i.
            (Dof::Macro(i), Dof::Cell(e, n)) => {
                let sign = if e + 1 == i {
                    T::one()
                } else if e == i {
                    -T::one()
                } else {
                    return T::zero();
                };
                half * sign * self.a[n]
            }
            (Dof::Macro(_), Dof::Multiplier(_)) => T::zero(),
            // (h/cells)·½ b[n] ∂ₓU₀|_e with ∂ₓφ_j = ±1/h.
            (Dof::Cell(e, n), Dof::Macro(j)) => {
                let sign = if j == e + 1 {
                    T::one()
                } else if j == e {
                    -T::one()
                } else {
                    return T::zero();
                };
                half * sign * self.b[n] / T::of_usize(nc)
            }
            (Dof::Cell(e, n), Dof::Cell(f, m)) if e == f => half * scale * self.k[n * nc + m],
            (Dof::Cell(e, _), Dof::Multiplier(f)) | (Dof::Multiplier(f), Dof::Cell(e, _)) if e == f => scale,
            _ => T::zero(),
        }
    }

    /// Dense coupled matrix, `M[row][col] = entry(dofs[row], dofs[col])`.
    pub fn assemble_full(&self) -> Vec<T> {
        let dofs = self.dofs();
        let n = dofs.len();
        let mut m = vec![T::zero(); n * n];
        for (r, test) in dofs.iter().enumerate() {
            for (c, trial) in dofs.iter().enumerate() {
                m[r * n + c] = self.entry(*test, *trial);
            }
        }
        m
    }

    /// Same matrix assembled with the trial and test roles exchanged.
    pub fn assemble_swapped(&self) -> Vec<T> {
        let dofs = self.dofs();
        let n = dofs.len();
        let mut m = vec![T::zero(); n * n];
        for (r, trial) in dofs.iter().enumerate() {
            for (c, test) in dofs.iter().enumerate() {
                m[r * n + c] = self.entry(*test, *trial);
            }
        }
        m
    }

    /// Right-hand side from the old state: the new-time operator with the
    /// mass term flipped, applied to the old values (multiplier rows are 0).
    pub fn rhs_full(&self, state: &FemState<T>) -> Vec<T> {
        let dofs = self.dofs();
        let h = self.h();
        dofs.iter()
            .map(|test| match test {
                Dof::Multiplier(_) => T::zero(),
                _ => {
                    let mut s = T::zero();
                    for trial in &dofs {
                        let v = match trial {
                            Dof::Macro(j) => state.u0[*j],
                            Dof::Cell(e, n) => state.u1[*e][*n],
                            Dof::Multiplier(_) => continue,
                        };
                        let mut c = -self.entry(*test, *trial);
                        if let (Dof::Macro(i), Dof::Macro(j)) = (test, trial) {
                            let mass = if i == j { T::of(4.0) * h / T::of(6.0) } else { h / T::of(6.0) };
                            if i.abs_diff(*j) <= 1 {
                                c += T::of(2.0) * self.alpha_hat / self.dt * mass;
                            }
                        }
                        s += c * v;
                    }
                    s
                }
            })
            .collect()
    }

    /// Initial state with the cell component solving the stationary cell problem.
    pub fn initial(&self, f: &dyn Fn(T) -> T) -> FemState<T> {
        let m = self.elements;
        let mut u0: Vec<T> = (0..=m).map(|j| f(self.node(j))).collect();
        u0[0] = T::zero();
        u0[m] = T::zero();
        let nc = self.cells();
        let u1 = (0..m)
            .map(|e| {
                let delta = u0[e + 1] - u0[e];
                // G y = −c δ with the ½ factors of both sides matching the stationary problem.
                self.unit[..nc].iter().map(|g| -*g * delta).collect()
            })
            .collect();
        FemState { time: T::zero(), u0, u1 }
    }

    /// One step by static condensation of the cell blocks onto a tridiagonal macro system.
    pub fn step(&self, state: &FemState<T>) -> Result<FemState<T>> {
        let m = self.elements;
        let nc = self.cells();
        let h = self.h();
        let half = T::of(0.5);
        let inv_nc = T::one() / T::of_usize(nc);
        // Old-time parts.
        let y0: Vec<Vec<T>> = (0..m)
            .map(|e| {
                let delta = state.u0[e + 1] - state.u0[e];
                let mut r = vec![T::zero(); nc + 1];
                for n in 0..nc {
                    let mut s = -half * self.b[n] * inv_nc * delta;
                    for q in 0..nc {
                        s -= half * h * inv_nc * self.k[n * nc + q] * state.u1[e][q];
                    }
                    r[n] = s;
                }
                self.cell_lu.solve(&r)
            })
            .collect();
        let a_dot = |v: &[T]| -> T { self.a.iter().zip(v).map(|(x, y)| *x * *y).sum() };
        let a_unit = half * a_dot(&self.unit[..nc]);
        let interior = m - 1;
        let mut lower = vec![T::zero(); interior];
        let mut diag = vec![T::zero(); interior];
        let mut upper = vec![T::zero(); interior];
        let mut rhs = vec![T::zero(); interior];
        let coef = self.alpha_hat / self.dt;
        for r in 0..interior {
            let i = r + 1;
            // Entries of the macro operator plus the condensed cell coupling (A·h·S).
            let d_mass = T::of(4.0) * h / T::of(6.0);
            let o_mass = h / T::of(6.0);
            let d_st = T::of(2.0) / h;
            let o_st = -T::one() / h;
            let cond = -a_unit * h;
            diag[r] = coef * d_mass - half * self.q0 * d_st + cond * d_st;
            lower[r] = coef * o_mass - half * self.q0 * o_st + cond * o_st;
            upper[r] = lower[r];
            let old = |j: usize| state.u0[j];
            let mut s = coef * (d_mass * old(i) + o_mass * (old(i - 1) + old(i + 1)))
                + half * self.q0 * (d_st * old(i) + o_st * (old(i - 1) + old(i + 1)));
            // Old cell coupling and the condensed old-time cell solution.
            s -= half * (a_dot(&state.u1[i - 1]) - a_dot(&state.u1[i]));
            s -= half * (a_dot(&y0[i - 1][..nc]) - a_dot(&y0[i][..nc]));
            rhs[r] = s;
        }
        lower[0] = T::zero();
        upper[interior - 1] = T::zero();
        let sol = tridiagonal(&lower, &diag, &upper, &rhs)?;
        let mut u0 = vec![T::zero(); m + 1];
        u0[1..m].copy_from_slice(&sol);
        let u1 = (0..m)
            .map(|e| {
                let delta = u0[e + 1] - u0[e];
                (0..nc).map(|n| y0[e][n] - self.unit[n] * delta).collect()
            })
            .collect();
        Ok(FemState {
            time: state.time + self.dt,
            u0,
            u1,
        })
    }

    /// Reference step: dense LU of the full coupled system.
    pub fn step_dense(&self, state: &FemState<T>) -> Result<FemState<T>> {
        let n = self.unknowns();
        let lu = Lu::factor(n, self.assemble_full())?;
        let x = lu.solve(&self.rhs_full(state));
        let m = self.elements;
        let nc = self.cells();
        let mut u0 = vec![T::zero(); m + 1];
        u0[1..m].copy_from_slice(&x[..m - 1]);
        let u1 = (0..m)
            .map(|e| x[m - 1 + e * (nc + 1)..m - 1 + e * (nc + 1) + nc].to_vec())
            .collect();
        Ok(FemState {
            time: state.time + self.dt,
            u0,
            u1,
        })
    }
}

impl Dof {
    fn cell_or_mult(e: usize, k: usize, nc: usize) -> Dof {
        if k < nc {
            Dof::Cell(e, k)
        } else {
            Dof::Multiplier(e)
        }
    }
}

/// Advance `(U₀, U₁)` by one Crank–Nicolson step.
pub fn two_scale_fem_step<T: Real>(fem: &TwoScaleFem<T>, state: &FemState<T>) -> Result<FemState<T>> {
    fem.step(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::TorusSpec;
    use crate::kernel::Kernel;
    use crate::lattice::{Stencil, WeightPolicy};
    use crate::media::MediumField;

    fn tiny(medium: &MediumField<f64>) -> TwoScaleFem<f64> {
        let entries = vec![
            (vec![-1], 1, 0.25),
            (vec![1], 1, 0.25),
            (vec![0], 1, 0.2),
            (vec![-1], 2, 0.15),
            (vec![1], 2, 0.15),
        ];
        let st = Stencil::from_parts(1, 0.25, 0.5, entries).unwrap();
        let t = Torus::new(st, medium).unwrap();
        TwoScaleFem::new(t, -1.0, 1.0, 5, 0.05).unwrap()
    }

    #[test]
    fn zero_datum_stays_zero() {
        let k = Kernel::<f64>::boxed(1, 0.5, 1.0, 2.0).unwrap();
        let m = MediumField::constant(1, 1.0).unwrap();
        let t = Torus::from_kernel(&k, &m, &TorusSpec { nz: 8, nt: 4, policy: WeightPolicy::default() }).unwrap();
        let fem = TwoScaleFem::new(t, -1.0, 1.0, 8, 0.1).unwrap();
        let mut s = fem.initial(&|_| 0.0);
        for _ in 0..5 {
            s = fem.step(&s).unwrap();
        }
        assert!(s.u0.iter().chain(s.u1.iter().flatten()).all(|v| *v == 0.0));
    }

    #[test]
    fn condensed_step_matches_dense() {
        let m = MediumField::stripes(1, 0.5, 2.0).unwrap();
        let fem = tiny(&m);
        let s0 = fem.initial(&|x| (1.0 - x * x).max(0.0));
        let a = fem.step(&s0).unwrap();
        let b = fem.step_dense(&s0).unwrap();
        for (x, y) in a.u0.iter().zip(&b.u0) {
            assert!((x - y).abs() < 1e-12, "{x} {y}");
        }
        for (x, y) in a.u1.iter().flatten().zip(b.u1.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
