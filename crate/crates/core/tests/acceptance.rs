//! Acceptance criteria, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line (run with `--nocapture` to see them).

use std::time::{Duration, Instant};

use nlhomog::cell::{solve_chi, solve_chi1, solve_chi2, CellOptions, Torus, TorusSpec};
use nlhomog::effective::{alpha_theta_quadrature, estimate_upsilon};
use nlhomog::harness::{
    omega_ensemble, run_convergence_study, run_fluctuation_study, Cache, Datum, FluctuationSpec, StudySpec,
};
use nlhomog::kernel::{compute_moments, k0, Kernel, KernelSpec};
use nlhomog::lattice::{Stencil, WeightPolicy};
use nlhomog::limit::fem::TwoScaleFem;
use nlhomog::limit::spde::{solve_drift, SpdeCoefficients, SpdeDriver};
use nlhomog::limit::{solve_linear_local, Frozen, GaussianHeat, LocalGrid, MacroField};
use nlhomog::media::{MediumField, MediumSpec, PeriodicPattern};
use nlhomog::nonlocal::{decay_rate, solve, Problem, SolveOptions, SpaceTimeGrid, SpatialExtension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn report(n: u32, ok: bool, budget: Duration, start: Instant, detail: String) {
    let elapsed = start.elapsed();
    let ok = ok && elapsed <= budget;
    println!(
        "criterion {n}: {} ({:.2}s of {:.0}s) {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    assert!(ok, "criterion {n} failed: {detail}");
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn weierstrass_clipped() -> KernelSpec {
    KernelSpec::TruncatedWeierstrass { dim: 1, r_min: Some(0.02) }
}

fn box_kernel() -> KernelSpec {
    KernelSpec::Box {
        dim: 1,
        half_width: 0.5,
        r_lo: 1.0,
        r_hi: 2.0,
    }
}

fn constant_medium() -> MediumSpec {
    MediumSpec::Periodic {
        pattern: PeriodicPattern::Constant,
        amplitude: None,
        values: None,
    }
}

fn gaussian(sigma: f64) -> Datum {
    Datum::Gaussian {
        amplitude: 1.0,
        center: vec![0.0],
        sigma,
    }
}

/// `∫₀^∞ v^{3/2} e^{−v} dv` by composite Simpson after `v = w²`.
fn gamma_five_halves() -> f64 {
    let (a, b, n) = (0.0f64, 9.0f64, 20_000usize);
    let h = (b - a) / n as f64;
    let f = |w: f64| 2.0 * w.powi(4) * (-w * w).exp();
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn criterion_01_kernel_constant() {
    let start = Instant::now();
    let k = Kernel::<f64>::truncated_weierstrass(1).unwrap();
    let m = compute_moments(&k, 1e-10).unwrap();
    let closed_form = 1.0 / (36.0 * 3f64.sqrt() * std::f64::consts::PI);
    let a = (m.time_moment - closed_form).abs();
    let b = (m.time_moment - m.second_space[0]).abs();
    report(
        1,
        a < 1e-6 && b < 1e-6 && (k0() - closed_form).abs() < 1e-15,
        secs(1),
        start,
        format!("time_moment {:.9} |Δk₀| {a:.1e} |Δ½∬Jz²| {b:.1e}", m.time_moment),
    );
}

#[test]
fn criterion_02_kernel_normalization() {
    let start = Instant::now();
    let k = Kernel::<f64>::truncated_weierstrass(1).unwrap();
    let m = compute_moments(&k, 1e-10).unwrap();
    // Slice mass ρ³/(6r²) with r = e^{−2v}/(4π) reduces the mass to 8Γ(5/2)/(6√π).
    let oracle = 8.0 * gamma_five_halves() / (6.0 * std::f64::consts::PI.sqrt());
    let ok = (m.mass - 1.0).abs() < 1e-6 && (m.mass - oracle).abs() < 1e-6;
    report(2, ok, secs(1), start, format!("mass {:.10} oracle {oracle:.10}", m.mass));
}

#[test]
fn criterion_03_corrector_degeneration() {
    let start = Instant::now();
    let k: Kernel<f64> = weierstrass_clipped().build(1e-10).unwrap();
    let mu = MediumField::constant(1, 1.0).unwrap();
    let torus = Torus::from_kernel(
        &k,
        &mu,
        &TorusSpec {
            nz: 16,
            nt: 400,
            policy: WeightPolicy::default(),
        },
    )
    .unwrap();
    let opts = CellOptions::default();
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for p in [2.0, 3.0, 4.0] {
        let chi1 = solve_chi1(&torus, p, &[1.0], &opts).unwrap();
        let chi2 = solve_chi2(&torus, p, &chi1, &[1.0], &[1.0], &opts).unwrap();
        worst = worst.max(chi1.max_abs()).max(chi2.max_abs());
        detail += &format!("p={p}: ‖χ₁‖ {:.1e} ‖χ₂‖ {:.1e}; ", chi1.max_abs(), chi2.max_abs());
    }
    report(3, worst <= 1e-10, secs(10), start, detail);
}

#[test]
fn criterion_04_effective_constants() {
    let start = Instant::now();
    let k = Kernel::<f64>::truncated_weierstrass(1).unwrap();
    let mu = MediumField::constant(1, 1.0).unwrap();
    let (alpha, theta) = alpha_theta_quadrature(&k, &mu, None, 1e-10, 1).unwrap();
    let (da, dt) = ((alpha + k0()).abs(), (theta[0] - k0()).abs());
    report(
        4,
        da < 1e-6 && dt < 1e-6,
        secs(5),
        start,
        format!("α̂ {alpha:.9} Θ {:.9} k₀ {:.9}", theta[0], k0()),
    );
}

#[test]
fn criterion_05_homogenized_limit() {
    let start = Instant::now();
    let spec = StudySpec {
        kernel: weierstrass_clipped(),
        medium: constant_medium(),
        p: 2.0,
        datum: gaussian(0.5),
        epsilons: vec![0.2, 0.1, 0.05],
        nz: 16,
        nt: 400,
        t_final: 0.1,
        box_lo: vec![-3.0],
        box_hi: vec![3.0],
        policy: WeightPolicy::default(),
        initial_layer: true,
        time_frames: 100,
        eta_reg: 1e-3,
        burn_in: 40.0,
        ergodic_length: 2000.0,
    };
    let r = run_convergence_study(&spec, &mut Cache::disabled()).unwrap();
    let decreasing = r.errors_raw.windows(2).all(|w| w[1] < w[0]);
    let rate = r.fitted_rate_raw.as_ref().map(|f| f.rate).unwrap_or(f64::NAN);
    report(
        5,
        decreasing && rate >= 0.8 && r.streaming_gap < 1e-12,
        secs(600),
        start,
        format!("errors {} rate {rate:.3} D {:.6}", sci(&r.errors_raw), r.diffusivity[0]),
    );
}

#[test]
fn criterion_06_periodic_convergence() {
    let start = Instant::now();
    let spec = StudySpec {
        kernel: box_kernel(),
        medium: MediumSpec::Periodic {
            pattern: PeriodicPattern::Stripes,
            amplitude: None,
            values: Some(vec![0.5, 2.0]),
        },
        p: 2.0,
        datum: gaussian(0.5),
        epsilons: vec![0.2, 0.1, 0.05],
        nz: 16,
        nt: 8,
        t_final: 1.0,
        box_lo: vec![-1.5],
        box_hi: vec![1.5],
        policy: WeightPolicy::default(),
        initial_layer: true,
        time_frames: 200,
        eta_reg: 1e-3,
        burn_in: 40.0,
        ergodic_length: 2000.0,
    };
    let r = run_convergence_study(&spec, &mut Cache::disabled()).unwrap();
    let decreasing = r.errors_raw.windows(2).all(|w| w[1] < w[0]);
    let corrected = r.errors_corrected.iter().zip(&r.errors_raw).all(|(c, e)| c < e);
    let rate = r.fitted_rate_raw.as_ref().map(|f| f.rate).unwrap_or(f64::NAN);
    report(
        6,
        decreasing && corrected && (0.8..=1.3).contains(&rate) && r.streaming_gap < 1e-12,
        secs(1200),
        start,
        format!(
            "raw {} corrected {} rate {rate:.3}",
            sci(&r.errors_raw),
            sci(&r.errors_corrected)
        ),
    );
}

#[test]
fn criterion_07_scaling_invariance() {
    let start = Instant::now();
    let k: Kernel<f64> = box_kernel().build(1e-10).unwrap();
    let st = Stencil::from_kernel(&k, 1.0 / 16.0, 1.0 / 8.0, WeightPolicy::default()).unwrap();
    let mu = MediumField::stripes(1, 0.5, 2.0).unwrap();
    let eps = 0.1;
    let f = |x: &[f64]| (-(x[0] * x[0]) / 0.18).exp();
    let g = move |y: &[f64]| f(&[eps * y[0]]);
    let mut worst: f64 = 0.0;
    for p in [2.0, 3.0] {
        let small = SpaceTimeGrid::new(eps, 16, 8, vec![-10], vec![20], 160).unwrap();
        let unit = SpaceTimeGrid::new(1.0, 16, 8, vec![-10], vec![20], 160).unwrap();
        let run = |grid: &SpaceTimeGrid<f64>, datum: &(dyn Fn(&[f64]) -> f64 + Sync)| {
            let problem = Problem {
                stencil: &st,
                medium: &mu,
                p,
                grid,
                extension: SpatialExtension::ConstantByDatum,
            };
            solve(&problem, datum, None, &SolveOptions { record_every: 40 }, None).unwrap()
        };
        let a = run(&small, &f);
        let b = run(&unit, &g);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            for (u, v) in fa.iter().zip(fb) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    report(7, worst <= 1e-3, secs(60), start, format!("max |u^ε − v(·/ε, ·/ε²)| {worst:.2e}"));
}

fn random_medium(rng: &mut ChaCha8Rng) -> MediumField<f64> {
    match rng.random_range(0..5) {
        0 => MediumField::constant(1, rng.random_range(0.5..2.0)).unwrap(),
        1 => MediumField::periodic_trig(1, rng.random_range(0.0..0.8)).unwrap(),
        2 => MediumField::checkerboard(1, rng.random_range(0.3..1.0), rng.random_range(1.0..3.0)).unwrap(),
        3 => MediumField::stripes(1, rng.random_range(0.3..1.0), rng.random_range(1.0..3.0)).unwrap(),
        _ => MediumField::time_stationary(
            1,
            MediumField::periodic_cosine(1, 0.5).unwrap(),
            1.0,
            &[0.5, 2.0],
            &[0.5, 0.5],
            rng.random(),
        )
        .unwrap(),
    }
}

fn random_datum(rng: &mut ChaCha8Rng) -> Datum {
    let a = rng.random_range(-2.0..2.0);
    let c = vec![rng.random_range(-0.5..0.5)];
    match rng.random_range(0..4) {
        0 => Datum::Gaussian {
            amplitude: a,
            center: c,
            sigma: rng.random_range(0.1..0.6),
        },
        1 => Datum::Mode {
            amplitude: a,
            wavenumber: vec![rng.random_range(0.3..3.0)],
        },
        2 => Datum::Bump {
            amplitude: a,
            center: c,
            radius: rng.random_range(0.2..1.0),
        },
        _ => Datum::Constant { value: a },
    }
}

#[test]
fn criterion_08_maximum_principle() {
    let start = Instant::now();
    let k: Kernel<f64> = box_kernel().build(1e-10).unwrap();
    let st = Stencil::from_kernel(&k, 1.0 / 16.0, 1.0 / 8.0, WeightPolicy::default()).unwrap();
    let pad = st.max_offset()[0] as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();
    let mut worst: f64 = f64::NEG_INFINITY;
    for run in 0..100 {
        let medium = random_medium(&mut rng);
        let datum = random_datum(&mut rng);
        let p = [2.0, 2.5, 3.0, 4.0][rng.random_range(0..4)];
        let grid = SpaceTimeGrid::new(0.25, 16, 8, vec![-4], vec![8], 32).unwrap();
        let f = |x: &[f64]| datum.eval(x);
        // The datum at every node the marcher can reach, halo included.
        let n = (grid.cells[0] * grid.nz) as i64;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in -pad..n + pad {
            let v = f(&[grid.x(0, i)]);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let problem = Problem {
            stencil: &st,
            medium: &medium,
            p,
            grid: &grid,
            extension: SpatialExtension::ConstantByDatum,
        };
        let traj = solve(&problem, &f, None, &SolveOptions { record_every: 1 }, None).unwrap();
        let (umin, umax) = traj.sup_norm_range();
        worst = worst.max(lo - umin).max(umax - hi);
        if umin < lo - 1e-12 || umax > hi + 1e-12 {
            failures.push(run);
        }
    }
    report(
        8,
        failures.is_empty(),
        secs(300),
        start,
        format!("100 runs, worst overshoot {worst:.1e}, failing runs {failures:?}"),
    );
}

/// Decay rate of `cos(kx)` under the marching update: the dominant real root
/// `λ ∈ (0,1)` of `Σ_s w_s cos(k ε z_s) λ^{−lag_s} = Σ_s w_s`, rate `−ln λ / τ`.
fn multiplier_rate(st: &Stencil<f64>, eps: f64, tau: f64, k: f64) -> f64 {
    let mass = st.mass();
    let g = |lam: f64| -> f64 {
        (0..st.len())
            .map(|s| st.weight(s) * (k * eps * st.z(s, 0)).cos() * lam.powi(-(st.lag(s) as i32)))
            .sum::<f64>()
            - mass
    };
    let (mut a, mut b) = (1e-6, 1.0);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if g(m) > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    -(0.5 * (a + b)).ln() / tau
}

#[test]
fn criterion_09_exponential_decay() {
    let start = Instant::now();
    let k: Kernel<f64> = box_kernel().build(1e-10).unwrap();
    let st = Stencil::from_kernel(&k, 1.0 / 16.0, 1.0 / 8.0, WeightPolicy::default()).unwrap();
    let mu = MediumField::constant(1, 1.0).unwrap();
    let eps = 0.25;
    let grid = SpaceTimeGrid::new(eps, 16, 8, vec![0], vec![4], 384).unwrap();
    let problem = Problem {
        stencil: &st,
        medium: &mu,
        p: 2.0,
        grid: &grid,
        extension: SpatialExtension::Periodic,
    };
    let two_pi = 2.0 * std::f64::consts::PI;
    let mode = |x: &[f64]| (two_pi * x[0]).cos();
    let traj = solve(&problem, &mode, None, &SolveOptions { record_every: 4 }, None).unwrap();
    let fit = decay_rate(&traj, 0.3).unwrap();
    let oracle = multiplier_rate(&st, eps, grid.tau(), two_pi);
    let rel = (fit.rate - oracle).abs() / oracle;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let terms: Vec<(f64, f64, f64)> = (1..=3)
        .map(|m| (m as f64, rng.random_range(0.2..1.0), rng.random_range(0.0..two_pi)))
        .collect();
    let random = move |x: &[f64]| terms.iter().map(|(m, a, ph)| a * (two_pi * m * x[0] + ph).cos()).sum::<f64>();
    let traj = solve(&problem, &random, None, &SolveOptions { record_every: 4 }, None).unwrap();
    let rfit = decay_rate(&traj, 0.3).unwrap();
    report(
        9,
        rel < 0.05 && fit.r2 >= 0.99 && rfit.r2 >= 0.99,
        secs(60),
        start,
        format!(
            "mode rate {:.4} oracle {oracle:.4} (rel {rel:.1e}, R² {:.5}); random datum R² {:.5}",
            fit.rate, fit.r2, rfit.r2
        ),
    );
}

#[test]
fn criterion_10_upsilon_estimator() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = 50_000;
    let iid: Vec<Vec<f64>> = (0..n).map(|_| vec![normal.sample(&mut rng)]).collect();
    let a = estimate_upsilon(&iid, 1.0, 20).unwrap();
    let phi = 0.5;
    let mut x = 0.0;
    let ar: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            x = phi * x + normal.sample(&mut rng);
            vec![x]
        })
        .collect();
    let b = estimate_upsilon(&ar, 1.0, 40).unwrap();
    let exact_ar = 1.0 / ((1.0 - phi) * (1.0 - phi));
    let za = (a.raw[0] - 1.0).abs() / a.standard_errors[0];
    let zb = (b.raw[0] - exact_ar).abs() / b.standard_errors[0];
    report(
        10,
        za <= 3.0 && zb <= 3.0,
        secs(60),
        start,
        format!(
            "i.i.d. Υ {:.4} (exact 1, z {za:.2}); AR(1) Υ {:.4} (exact {exact_ar}, z {zb:.2})",
            a.raw[0], b.raw[0]
        ),
    );
}

#[test]
fn criterion_11_spde_degeneration() {
    let start = Instant::now();
    let heat = GaussianHeat::new(1.0, vec![0.0], 0.5, vec![0.5]).unwrap();
    let grid = LocalGrid::new(vec![-3.0], vec![3.0], 121, 0.002, 0.5).unwrap();
    // Zero noise: the Euler–Maruyama path is the drift solve.
    let drift_coeffs = SpdeCoefficients {
        dim: 1,
        alpha_hat: -1.0,
        theta: vec![0.5],
        mu_tensor: vec![0.2],
        mu1: vec![0.1],
        upsilon: vec![0.0],
    };
    let path: nlhomog::limit::spde::SpdePath<f64> = SpdeDriver::new(&drift_coeffs, &heat, &grid).unwrap().path(11, 0);
    let reference = solve_drift(&drift_coeffs, &heat, &grid).unwrap();
    let mut gap: f64 = 0.0;
    for (a, b) in path.frames.iter().zip(&reference.frames) {
        for (u, v) in a.iter().zip(b) {
            gap = gap.max((u - v).abs());
        }
    }
    let mut silent = drift_coeffs.clone();
    silent.mu_tensor = vec![0.0];
    silent.mu1 = vec![0.0];
    let zero: nlhomog::limit::spde::SpdePath<f64> = SpdeDriver::new(&silent, &heat, &grid).unwrap().path(11, 1);
    let zero_max = zero.frames.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));

    // Itô isometry: Θ = 0, frozen u₀, no drift ⇒ Var ω(x,T) = T (α̂⁻¹ Υ^{1/2} ∂²u₀(x))².
    let frozen = Frozen { inner: &heat, t0: 0.0 };
    let ups = 0.8f64;
    let noise = SpdeCoefficients {
        dim: 1,
        alpha_hat: -1.0,
        theta: vec![0.0],
        mu_tensor: vec![0.0],
        mu1: vec![0.0],
        upsilon: vec![ups],
    };
    let ngrid = LocalGrid::new(vec![-1.0], vec![1.0], 21, 0.01, 0.5).unwrap();
    let driver = SpdeDriver::new(&noise, &frozen, &ngrid).unwrap();
    let probe = 10; // x = 0
    let streams: Vec<u64> = (0..10_000).collect();
    let stats = driver.ensemble(11, &streams, &[probe]).unwrap();
    let x = ngrid.point(probe);
    let h = frozen.hessian(&x, 0.0)[0];
    let predicted = ngrid.horizon() * (ups.sqrt() * h).powi(2);
    let z = (stats[0].variance - predicted).abs() / stats[0].variance_se;
    report(
        11,
        gap <= 1e-8 && zero_max == 0.0 && z <= 3.0,
        secs(300),
        start,
        format!(
            "drift gap {gap:.1e}; Var {:.5} Itô {predicted:.5} (z {z:.2})",
            stats[0].variance
        ),
    );
}

#[test]
fn criterion_12_two_scale_fem() {
    let start = Instant::now();
    let k: Kernel<f64> = box_kernel().build(1e-10).unwrap();
    let tspec = TorusSpec {
        nz: 16,
        nt: 8,
        policy: WeightPolicy::default(),
    };
    let f = |x: f64| (-(x * x) / 0.5).exp();

    let one = MediumField::constant(1, 1.0).unwrap();
    let fem = TwoScaleFem::new(Torus::from_kernel(&k, &one, &tspec).unwrap(), -4.0, 4.0, 400, 0.1).unwrap();
    let mut state = fem.initial(&f);
    for _ in 0..50 {
        state = fem.step(&state).unwrap();
    }
    let theta = vec![fem.q0];
    let tau = 0.4 * 0.01f64.powi(2) * fem.alpha_hat.abs() / (2.0 * fem.q0);
    let mut lgrid = LocalGrid::new(vec![-4.0], vec![4.0], 801, tau, state.time).unwrap();
    lgrid.record_every = lgrid.steps;
    let local = solve_linear_local(fem.alpha_hat, &theta, &|x: &[f64]| f(x[0]), &lgrid).unwrap();
    let macro_gap = (0..=fem.elements)
        .map(|j| (state.u0[j] - local.value(&[fem.node(j)], state.time)).abs())
        .fold(0.0f64, f64::max);

    let stripes = MediumField::stripes(1, 0.5, 2.0).unwrap();
    let torus = Torus::from_kernel(&k, &stripes, &tspec).unwrap();
    let chi = solve_chi(&torus, &CellOptions::default()).unwrap();
    let fem = TwoScaleFem::new(torus, -4.0, 4.0, 160, 0.1).unwrap();
    let mut state = fem.initial(&f);
    for _ in 0..20 {
        state = fem.step(&state).unwrap();
    }
    let h = fem.h();
    let mut worst: f64 = 1.0;
    for e in 0..fem.elements {
        let grad = (state.u0[e + 1] - state.u0[e]) / h;
        if grad.abs() < 0.05 {
            continue;
        }
        let ratio: Vec<f64> = state.u1[e].iter().map(|v| v / grad).collect();
        worst = worst.min(correlation(&ratio, &chi.values));
    }
    report(
        12,
        macro_gap <= 1e-3 && worst >= 0.99,
        secs(300),
        start,
        format!("macro gap {macro_gap:.2e}; min corr(U₁/∂ₓU₀, χ) {worst:.5}"),
    );
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn criterion_13_fluctuation_proxy() {
    let start = Instant::now();
    let spec = FluctuationSpec {
        kernel: box_kernel(),
        medium: MediumSpec::PeriodicXStationaryT {
            base: None,
            values: vec![0.5, 2.0],
            probs: vec![0.5, 0.5],
            tile_size: 1.0,
            seed: 13,
        },
        datum: gaussian(0.5),
        epsilon: 0.1,
        nz: 16,
        nt: 8,
        t_final: 0.5,
        box_lo: -1.0,
        box_hi: 1.0,
        probes: vec![-0.5, -0.25, 0.0, 0.25, 0.5],
        realizations: 200,
        spde_paths: 2000,
        seed: 13,
        policy: WeightPolicy::default(),
        burn_in: 40.0,
        ergodic_length: 4000.0,
        max_lag: 8.0,
        spde_nodes: 161,
    };
    let run = run_fluctuation_study(&spec).unwrap();
    let (_, coarse) = omega_ensemble(&spec, 0.2, &run.coefficients).unwrap();
    let coarse = coarse.iter().sum::<f64>() / coarse.len() as f64;
    let band = run.omega_l2 / coarse;
    let c = &run.comparison;
    report(
        13,
        c.agrees(3.0) && (1.0 / 3.0..=3.0).contains(&band),
        secs(3600),
        start,
        format!(
            "max z mean {:.2} variance {:.2}; ‖ω‖ ε=0.2 {coarse:.4e} ε=0.1 {:.4e} (ratio {band:.3})",
            c.max_mean_z, c.max_variance_z, run.omega_l2
        ),
    );
}
