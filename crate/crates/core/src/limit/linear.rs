use rayon::prelude::*;

use super::{apply_second, record, LocalGrid, LocalSolution, SchemeInfo};
use crate::{Error, Real, Result};

/// Explicit central differences for `α̂ ∂ₜu + Θ:∇∇u = 0`, boundary nodes held at the datum.
pub fn solve_linear_local<T: Real>(
    alpha_hat: T,
    theta: &[T],
    f: &(dyn Fn(&[T]) -> T + Sync),
    grid: &LocalGrid<T>,
) -> Result<LocalSolution<T>> {
    let d = grid.dim();
    if theta.len() != d * d {
        return Err(Error::Config(format!("Θ has {} entries, expected {}", theta.len(), d * d)));
    }
    if alpha_hat == T::zero() {
        return Err(Error::Config("α̂ must be nonzero".into()));
    }
    let diff: Vec<T> = theta.iter().map(|t| -*t / alpha_hat).collect();
    let dm = nalgebra::DMatrix::from_fn(d, d, |i, j| 0.5 * (diff[i * d + j] + diff[j * d + i]).f64());
    let eig = nalgebra::SymmetricEigen::new(dm);
    if eig.eigenvalues.iter().any(|v| *v <= 0.0) {
        return Err(Error::Config(format!(
            "−Θ/α̂ is not positive definite (eigenvalues {:?})",
            eig.eigenvalues.as_slice()
        )));
    }
    let trace: T = (0..d).map(|i| theta[i * d + i]).sum();
    let stable = grid.h * grid.h * alpha_hat.abs() / (T::of(2.0) * trace.abs());
    if grid.tau > stable * (T::one() + T::of(1e-12)) {
        return Err(Error::Config(format!(
            "time step {:e} exceeds the stability bound h²|α̂|/(2 tr Θ) = {:e}",
            grid.tau.f64(),
            stable.f64()
        )));
    }
    let n = grid.len();
    let interior: Vec<bool> = (0..n).map(|k| !grid.on_boundary(k)).collect();
    let mut u: Vec<T> = (0..n).map(|k| f(&grid.point(k))).collect();
    let mut next = u.clone();
    let mut times = vec![T::zero()];
    let mut frames = vec![u.clone()];
    for step in 1..=grid.steps {
        next.par_iter_mut().enumerate().for_each(|(k, v)| {
            *v = if interior[k] {
                u[k] + grid.tau * apply_second(grid, &diff, &u, k)
            } else {
                u[k]
            };
        });
        std::mem::swap(&mut u, &mut next);
        if record(grid.record_every, step, grid.steps) {
            times.push(T::of_usize(step) * grid.tau);
            frames.push(u.clone());
        }
    }
    Ok(LocalSolution {
        grid: grid.clone(),
        coefficients: vec![
            ("alpha_hat".into(), vec![alpha_hat.f64()]),
            ("theta".into(), theta.iter().map(|v| v.f64()).collect()),
        ],
        scheme: SchemeInfo {
            name: "explicit-central".into(),
            h: grid.h.f64(),
            tau: grid.tau.f64(),
            steps: grid.steps,
            regularization: None,
            stable_tau: stable.f64(),
        },
        times,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_datum_is_stationary() {
        let g = LocalGrid::<f64>::new(vec![0.0], vec![1.0], 11, 1e-3, 0.05).unwrap();
        let s = solve_linear_local(-1.0, &[1.0], &|_| 2.5, &g).unwrap();
        assert!(s.final_frame().iter().all(|v| *v == 2.5));
    }

    #[test]
    fn unstable_step_rejected() {
        let g = LocalGrid::<f64>::new(vec![0.0], vec![1.0], 11, 1e-2, 0.05).unwrap();
        assert!(matches!(solve_linear_local(-1.0, &[1.0], &|_| 0.0, &g), Err(Error::Config(_))));
    }
}
