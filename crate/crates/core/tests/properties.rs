//! Invariants checked on random inputs.

use nlhomog::cell::{solve_chi, CellOptions, Torus, TorusSpec};
use nlhomog::effective::{effective_periodic, estimate_upsilon, psd_sqrt};
use nlhomog::harness::{content_hash, Datum, StudySpec};
use nlhomog::io::{read_csv, read_field, write_csv, write_field};
use nlhomog::kernel::{compute_moments, Kernel, KernelSpec};
use nlhomog::lattice::{Stencil, WeightPolicy};
use nlhomog::limit::fem::TwoScaleFem;
use nlhomog::limit::lu::{tridiagonal, Lu};
use nlhomog::media::{MediumField, MediumSpec, PeriodicPattern};
use nlhomog::nonlocal::{node_root, solve, Problem, SolveOptions, SpaceTimeGrid, SpatialExtension};
use nlhomog::stats::{linear_fit, rate_fit};
use proptest::prelude::*;

fn box_stencil<T: nlhomog::Real>() -> Stencil<T> {
    let k = Kernel::<T>::boxed(1, T::of(0.5), T::of(1.0), T::of(2.0)).unwrap();
    Stencil::from_kernel(&k, T::of(1.0 / 16.0), T::of(1.0 / 8.0), WeightPolicy::default()).unwrap()
}

fn march(
    st: &Stencil<f64>,
    mu: &MediumField<f64>,
    p: f64,
    ext: SpatialExtension,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Vec<f64> {
    let grid = SpaceTimeGrid::new(0.25, 16, 8, vec![-2], vec![4], 24).unwrap();
    let problem = Problem {
        stencil: st,
        medium: mu,
        p,
        grid: &grid,
        extension: ext,
    };
    solve(&problem, f, None, &SolveOptions::default(), None).unwrap().final_frame().to_vec()
}

fn medium(kind: u8, a: f64, b: f64) -> MediumField<f64> {
    match kind % 4 {
        0 => MediumField::constant(1, a).unwrap(),
        1 => MediumField::stripes(1, a, b).unwrap(),
        2 => MediumField::checkerboard(1, a, b).unwrap(),
        _ => MediumField::periodic_trig(1, (b - a).abs().min(0.9)).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn box_kernel_has_unit_mass_and_exact_moments(a in 0.1f64..2.0, lo in 0.1f64..1.0, span in 0.1f64..2.0) {
        let k = Kernel::<f64>::boxed(1, a, lo, lo + span).unwrap();
        let m = compute_moments(&k, 1e-10).unwrap();
        prop_assert!((m.mass - 1.0).abs() < 1e-8);
        prop_assert!((m.time_moment - (lo + 0.5 * span)).abs() < 1e-8);
        prop_assert!((m.second_space[0] - a * a / 6.0).abs() < 1e-8);
        prop_assert!(m.first_space[0].abs() < 1e-10);
    }

    #[test]
    fn weierstrass_is_nonnegative(z in -1.0f64..1.0, r in 0.0f64..0.1) {
        let k = Kernel::<f64>::truncated_weierstrass(1).unwrap();
        prop_assert!(k.eval(&[z], r) >= 0.0);
        prop_assert_eq!(k.eval(&[z], r), k.eval(&[-z], r));
    }

    #[test]
    fn stencil_weights_are_nonnegative(nz in 2usize..24, nt in 2usize..12) {
        let k = Kernel::<f64>::boxed(1, 0.5, 1.0, 2.0).unwrap();
        let st = Stencil::from_kernel(&k, 1.0 / nz as f64, 1.0 / nt as f64, WeightPolicy::default()).unwrap();
        prop_assert!((0..st.len()).all(|s| st.weight(s) >= 0.0));
        prop_assert!((st.mass() - 1.0).abs() < 0.2);
    }

    #[test]
    fn medium_stays_in_bounds(a in 0.1f64..1.0, b in 1.0f64..5.0, kind in 0u8..4, xi in -3.0f64..3.0, q in -3.0f64..3.0) {
        let m = medium(kind, a, b);
        let v = m.eval(&[xi], q);
        prop_assert!(v >= m.bounds.0 - 1e-12 && v <= m.bounds.1 + 1e-12);
        prop_assert!(v > 0.0);
        // Unit periodicity.
        prop_assert!((m.eval(&[xi + 1.0], q + 1.0) - v).abs() < 1e-9);
    }

    #[test]
    fn random_media_are_reproducible(seed in any::<u64>(), q in 0.0f64..50.0) {
        let spec = MediumSpec::PeriodicXStationaryT { base: None, values: vec![0.5, 2.0], probs: vec![0.5, 0.5], tile_size: 1.0, seed };
        let a: MediumField<f64> = spec.build(1).unwrap();
        let b: MediumField<f64> = spec.build(1).unwrap();
        prop_assert_eq!(a.eval(&[0.1], q), b.eval(&[0.1], q));
        let v = a.eval(&[0.1], q);
        prop_assert!(v == 0.5 || v == 2.0);
    }

    #[test]
    fn node_root_is_bracketed(a in prop::collection::vec(-5.0f64..5.0, 1..12), p in 2.0f64..5.0) {
        let c: Vec<f64> = a.iter().enumerate().map(|(i, _)| 0.5 + (i % 3) as f64).collect();
        let v = node_root(&a, &c, p).unwrap();
        let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        let f: f64 = a.iter().zip(&c).map(|(x, w)| w * (x - v).abs().powf(p - 2.0) * (x - v)).sum();
        let scale: f64 = c.iter().sum::<f64>() * (hi - lo).max(1e-3).powf(p - 1.0);
        prop_assert!(f.abs() <= 1e-8 * scale);
    }

    #[test]
    fn constants_are_stationary(c in -3.0f64..3.0, p in prop::sample::select(vec![2.0, 3.0, 4.0]), kind in 0u8..4) {
        let st = box_stencil::<f64>();
        let mu = medium(kind, 0.5, 2.0);
        let u = march(&st, &mu, p, SpatialExtension::ConstantByDatum, &move |_| c);
        prop_assert!(u.iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn linear_case_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, kind in 0u8..4) {
        let st = box_stencil::<f64>();
        let mu = medium(kind, 0.5, 2.0);
        let f = |x: &[f64]| (-(x[0] * x[0])).exp();
        let g = |x: &[f64]| x[0].sin();
        let uf = march(&st, &mu, 2.0, SpatialExtension::Zero, &f);
        let ug = march(&st, &mu, 2.0, SpatialExtension::Zero, &g);
        let h = move |x: &[f64]| a * f(x) + b * g(x);
        let uh = march(&st, &mu, 2.0, SpatialExtension::Zero, &h);
        for k in 0..uh.len() {
            prop_assert!((uh[k] - a * uf[k] - b * ug[k]).abs() < 1e-11);
        }
    }

    #[test]
    fn solutions_are_monotone_in_the_datum(shift in 0.0f64..1.0, p in prop::sample::select(vec![2.0, 3.0])) {
        let st = box_stencil::<f64>();
        let mu = MediumField::stripes(1, 0.5, 2.0).unwrap();
        let f = |x: &[f64]| (-(x[0] * x[0])).exp();
        let g = move |x: &[f64]| f(x) + shift * (-(x[0] - 0.3).powi(2)).exp();
        let uf = march(&st, &mu, p, SpatialExtension::ConstantByDatum, &f);
        let ug = march(&st, &mu, p, SpatialExtension::ConstantByDatum, &g);
        prop_assert!(uf.iter().zip(&ug).all(|(a, b)| *a <= *b + 1e-12));
    }

    #[test]
    fn constant_medium_has_no_corrector(c in 0.2f64..5.0) {
        let k = Kernel::<f64>::boxed(1, 0.5, 1.0, 2.0).unwrap();
        let t = Torus::from_kernel(&k, &MediumField::constant(1, c).unwrap(), &TorusSpec { nz: 8, nt: 4, policy: WeightPolicy::default() }).unwrap();
        let chi = solve_chi(&t, &CellOptions::default()).unwrap();
        prop_assert!(chi.max_abs() < 1e-12);
    }

    #[test]
    fn diffusivity_is_invariant_under_medium_scaling(a in 0.3f64..1.0, b in 1.0f64..3.0, s in 0.5f64..4.0) {
        let k = Kernel::<f64>::boxed(1, 0.5, 1.0, 2.0).unwrap();
        let spec = TorusSpec { nz: 8, nt: 4, policy: WeightPolicy::default() };
        let d = |m: MediumField<f64>| {
            let t = Torus::from_kernel(&k, &m, &spec).unwrap();
            let chi = solve_chi(&t, &CellOptions::default()).unwrap();
            effective_periodic(&t, &chi, None).unwrap().diffusivity()[0]
        };
        let d1 = d(MediumField::stripes(1, a, b).unwrap());
        let d2 = d(MediumField::stripes(1, s * a, s * b).unwrap());
        prop_assert!(d1 > 0.0);
        prop_assert!((d1 - d2).abs() < 1e-7 * d1);
    }

    #[test]
    fn fitted_lines_are_recovered(slope in -3.0f64..3.0, icpt in -2.0f64..2.0) {
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.7).collect();
        let y: Vec<f64> = x.iter().map(|v| icpt + slope * v).collect();
        let f = linear_fit(&x, &y);
        prop_assert!((f.slope - slope).abs() < 1e-10 && (f.intercept - icpt).abs() < 1e-10);
        let eps = [0.2, 0.1, 0.05];
        let err: Vec<f64> = eps.iter().map(|e: &f64| 3.0 * e.powf(slope.abs())).collect();
        prop_assert!((rate_fit(&eps, &err).unwrap().slope - slope.abs()).abs() < 1e-10);
    }

    #[test]
    fn upsilon_scales_quadratically(seed in any::<u64>(), c in 0.1f64..10.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..400).map(|_| vec![rng.random::<f64>() - 0.5, rng.random::<f64>()]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| c * v).collect()).collect();
        let a = estimate_upsilon(&x, 0.5, 5).unwrap();
        let b = estimate_upsilon(&y, 0.5, 5).unwrap();
        for (u, v) in a.raw.iter().zip(&b.raw) {
            prop_assert!((c * c * u - v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
        let r = psd_sqrt(&a.psd, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let s: f64 = (0..2).map(|k| r[i * 2 + k] * r[k * 2 + j]).sum();
                prop_assert!((s - a.psd[i * 2 + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lu_solves_dominant_systems(vals in prop::collection::vec(-1.0f64..1.0, 36), rhs in prop::collection::vec(-1.0f64..1.0, 6)) {
        let n = 6;
        let mut a = vals.clone();
        for i in 0..n {
            a[i * n + i] += 8.0;
        }
        let x = Lu::factor(n, a.clone()).unwrap().solve(&rhs);
        for i in 0..n {
            let r: f64 = (0..n).map(|j| a[i * n + j] * x[j]).sum::<f64>() - rhs[i];
            prop_assert!(r.abs() < 1e-12);
        }
        let lower = &vals[..n];
        let upper = &vals[n..2 * n];
        let diag: Vec<f64> = (0..n).map(|i| 4.0 + vals[2 * n + i]).collect();
        let y = tridiagonal(lower, &diag, upper, &rhs).unwrap();
        for i in 0..n {
            let mut r = diag[i] * y[i] - rhs[i];
            if i > 0 { r += lower[i] * y[i - 1]; }
            if i + 1 < n { r += upper[i] * y[i + 1]; }
            prop_assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn fem_condensation_matches_dense(a in 0.3f64..1.0, b in 1.0f64..3.0) {
        let k = Kernel::<f64>::boxed(1, 0.5, 1.0, 2.0).unwrap();
        let t = Torus::from_kernel(&k, &MediumField::stripes(1, a, b).unwrap(), &TorusSpec { nz: 4, nt: 2, policy: WeightPolicy::default() }).unwrap();
        let fem = TwoScaleFem::new(t, -1.0, 1.0, 6, 0.05).unwrap();
        let s = fem.initial(&|x| (1.0 - x * x).max(0.0));
        let x = fem.step(&s).unwrap();
        let y = fem.step_dense(&s).unwrap();
        for (u, v) in x.u0.iter().zip(&y.u0) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_and_fields_roundtrip(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, &["a", "b", "c"], &rows).unwrap();
        let (h, back) = read_csv(&p).unwrap();
        prop_assert_eq!(h, vec!["a".to_string(), "b".into(), "c".into()]);
        prop_assert_eq!(&back, &rows);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let (bin, _) = write_field(&dir.path().join("f"), &flat, &[rows.len(), 3], None, serde_json::json!({})).unwrap();
        let (data, side) = read_field(&bin).unwrap();
        prop_assert_eq!(data, flat);
        prop_assert_eq!(side.shape, vec![rows.len(), 3]);
    }

    #[test]
    fn datum_and_spec_roundtrip(amp in -5.0f64..5.0, s in 0.1f64..2.0) {
        let d = Datum::Gaussian { amplitude: amp, center: vec![0.0], sigma: s };
        let back: Datum = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        prop_assert_eq!(&back, &d);
        let spec = StudySpec {
            kernel: KernelSpec::Box { dim: 1, half_width: 0.5, r_lo: 1.0, r_hi: 2.0 },
            medium: MediumSpec::Periodic { pattern: PeriodicPattern::Stripes, amplitude: None, values: Some(vec![0.5, 2.0]) },
            p: 2.0,
            datum: d,
            epsilons: vec![0.2, 0.1],
            nz: 16,
            nt: 8,
            t_final: 0.1,
            box_lo: vec![-1.0],
            box_hi: vec![1.0],
            policy: WeightPolicy::default(),
            initial_layer: true,
            time_frames: 10,
            eta_reg: 1e-3,
            burn_in: 4.0,
            ergodic_length: 40.0,
        };
        prop_assert!(spec.validate().is_empty());
        prop_assert_eq!(content_hash(&spec), content_hash(&spec.clone()));
        let mut bad = spec.clone();
        bad.epsilons = vec![0.1, 0.2];
        prop_assert!(!bad.validate().is_empty());
    }
}

#[test]
fn single_precision_tracks_double() {
    let st32 = box_stencil::<f32>();
    let st64 = box_stencil::<f64>();
    let m32 = MediumField::<f32>::stripes(1, 0.5, 2.0).unwrap();
    let m64 = MediumField::<f64>::stripes(1, 0.5, 2.0).unwrap();
    let g32 = SpaceTimeGrid::<f32>::new(0.25, 16, 8, vec![-2], vec![4], 24).unwrap();
    let g64 = SpaceTimeGrid::<f64>::new(0.25, 16, 8, vec![-2], vec![4], 24).unwrap();
    let f32_ = |x: &[f32]| (-(x[0] * x[0])).exp();
    let f64_ = |x: &[f64]| (-(x[0] * x[0])).exp();
    let a = solve(
        &Problem { stencil: &st32, medium: &m32, p: 2.0, grid: &g32, extension: SpatialExtension::ConstantByDatum },
        &f32_,
        None,
        &SolveOptions::default(),
        None,
    )
    .unwrap();
    let b = solve(
        &Problem { stencil: &st64, medium: &m64, p: 2.0, grid: &g64, extension: SpatialExtension::ConstantByDatum },
        &f64_,
        None,
        &SolveOptions::default(),
        None,
    )
    .unwrap();
    for (u, v) in a.final_frame().iter().zip(b.final_frame()) {
        assert!((*u as f64 - v).abs() < 1e-5);
    }
}
