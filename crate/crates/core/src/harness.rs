//! Convergence studies, two-scale reconstructions and fluctuation statistics.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{
    solve_chi, solve_chi1, solve_chi_window, solve_initial_layer, CellOptions, CorrectorField, Torus, TorusSpec, Window,
};
use crate::effective::{effective_periodic, effective_window, evaluate_np, DirectionTable, EffectiveCoefficients, ErgodicOptions};
use crate::kernel::{Kernel, KernelSpec};
use crate::lattice::{Stencil, WeightPolicy};
use crate::limit::spde::{probe_stats, ProbeStats, SpdeCoefficients, SpdeDriver};
use crate::limit::{solve_linear_local, solve_p_local_1d, GaussianHeat, LocalGrid, MacroField};
use crate::media::{MediumCase, MediumField, MediumSpec};
use crate::nonlocal::{solve, Problem, SolveOptions, SpaceTimeGrid, SpatialExtension, Trajectory};
use crate::stats::{rate_fit, LinearFit};
use crate::{Error, Result};

/// Initial datum `f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Datum {
    Zero,
    Constant { value: f64 },
    Gaussian { amplitude: f64, center: Vec<f64>, sigma: f64 },
    /// `a·cos(2π k·x)`
    Mode { amplitude: f64, wavenumber: Vec<f64> },
    /// `a·max(0, 1 − |x−c|²/R²)²`
    Bump { amplitude: f64, center: Vec<f64>, radius: f64 },
}

impl Datum {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Datum::Zero => 0.0,
            Datum::Constant { value } => *value,
            Datum::Gaussian { amplitude, center, sigma } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
                amplitude * (-r2 / (2.0 * sigma * sigma)).exp()
            }
            Datum::Mode { amplitude, wavenumber } => {
                let ph: f64 = x.iter().zip(wavenumber).map(|(a, k)| a * k).sum();
                amplitude * (2.0 * std::f64::consts::PI * ph).cos()
            }
            Datum::Bump { amplitude, center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
                amplitude * (1.0 - r2 / (radius * radius)).max(0.0).powi(2)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Datum::Zero => true,
            Datum::Constant { value } => *value == 0.0,
            Datum::Gaussian { amplitude, .. } | Datum::Mode { amplitude, .. } | Datum::Bump { amplitude, .. } => *amplitude == 0.0,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_frames() -> usize {
    200
}

fn default_eta() -> f64 {
    1e-3
}

fn default_burn() -> f64 {
    40.0
}

fn default_ergodic() -> f64 {
    2000.0
}

/// Convergence-study description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub kernel: KernelSpec,
    pub medium: MediumSpec,
    pub p: f64,
    pub datum: Datum,
    /// Strictly decreasing.
    pub epsilons: Vec<f64>,
    /// Spatial nodes per `ε` and time steps per `ε²`.
    pub nz: usize,
    pub nt: usize,
    pub t_final: f64,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    #[serde(default)]
    pub policy: WeightPolicy,
    /// Include the initial layer in the corrected expansion (time-stationary media).
    #[serde(default = "default_true")]
    pub initial_layer: bool,
    /// Approximate number of time frames entering the time quadrature.
    #[serde(default = "default_frames")]
    pub time_frames: usize,
    /// Regularization of the p-parabolic limit (`p > 2`).
    #[serde(default = "default_eta")]
    pub eta_reg: f64,
    /// Fast-time burn-in of window correctors.
    #[serde(default = "default_burn")]
    pub burn_in: f64,
    /// Fast-time length of the ergodic window for the coefficients.
    #[serde(default = "default_ergodic")]
    pub ergodic_length: f64,
}

impl StudySpec {
    pub fn dim(&self) -> usize {
        self.box_lo.len()
    }

    /// Every violated constraint, in field order.
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut bad = Vec::new();
        let d = self.box_lo.len();
        if d == 0 || self.box_hi.len() != d || self.box_lo.iter().zip(&self.box_hi).any(|(l, h)| !(h > l)) {
            bad.push(("box_lo/box_hi".into(), "need matching non-empty bounds with hi > lo".into()));
        }
        if !(self.p >= 2.0) {
            bad.push(("p".into(), "must be ≥ 2".into()));
        }
        if self.p > 2.0 && d != 1 {
            bad.push(("p".into(), "p > 2 studies are one dimensional".into()));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e > 0.0)) {
            bad.push(("epsilons".into(), "need positive values".into()));
        } else if self.epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            bad.push(("epsilons".into(), "must be strictly decreasing".into()));
        }
        if self.nz == 0 {
            bad.push(("nz".into(), "must be positive".into()));
        }
        if self.nt == 0 {
            bad.push(("nt".into(), "must be positive".into()));
        }
        if !(self.t_final > 0.0) {
            bad.push(("t_final".into(), "must be positive".into()));
        }
        if self.time_frames == 0 {
            bad.push(("time_frames".into(), "must be positive".into()));
        }
        if !(self.eta_reg > 0.0) {
            bad.push(("eta_reg".into(), "must be positive".into()));
        }
        if let MediumSpec::Stationary { .. } = self.medium {
            bad.push(("medium".into(), "fully stationary media have no cell solver; use periodic or periodic-x-stationary-t".into()));
        }
        bad
    }
}

/// Fitted `log error = rate·log ε + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub rate: f64,
    pub intercept: f64,
    pub r2: f64,
    pub residual: f64,
}

impl From<LinearFit> for RateFit {
    fn from(f: LinearFit) -> Self {
        RateFit {
            rate: f.slope,
            intercept: f.intercept,
            r2: f.r2,
            residual: f.residual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub epsilons: Vec<f64>,
    pub errors_raw: Vec<f64>,
    pub errors_corrected: Vec<f64>,
    pub fitted_rate_raw: Option<RateFit>,
    pub fitted_rate_corrected: Option<RateFit>,
    /// `"fitted"` or the reason the fit was skipped.
    pub rate_status: String,
    pub runtimes: Vec<f64>,
    pub alpha_hat: f64,
    pub theta: Vec<f64>,
    /// `−Θ/α̂` (p = 2) or `𝔓/𝔑` (p > 2).
    pub diffusivity: Vec<f64>,
    /// Largest relative gap between the recorded-frame and streaming error norms.
    pub streaming_gap: f64,
    pub cache_hits: usize,
}

/// Cell artifacts shared by every `ε` of a study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellArtifacts {
    pub coefficients: EffectiveCoefficients<f64>,
    /// Periodic `χ` (or `χ₁` for `p > 2`); `None` for time-stationary media.
    pub chi: Option<CorrectorField<f64>>,
    /// `(𝔑, 𝔓)` at unit gradient and Hessian (`p > 2`).
    pub np: Option<(f64, f64)>,
}

/// Hash-keyed store of cell artifacts, optionally mirrored to a directory.
#[derive(Debug, Default)]
pub struct Cache {
    pub dir: Option<PathBuf>,
    pub enabled: bool,
    memory: HashMap<String, CellArtifacts>,
    pub hits: usize,
    pub misses: usize,
}

impl Cache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Cache {
            dir,
            enabled: true,
            ..Default::default()
        }
    }

    pub fn disabled() -> Self {
        Cache::default()
    }

    fn get_or<F: FnOnce() -> Result<CellArtifacts>>(&mut self, key: &str, make: F) -> Result<CellArtifacts> {
        if self.enabled {
            if let Some(a) = self.memory.get(key) {
                self.hits += 1;
                return Ok(a.clone());
            }
            if let Some(dir) = &self.dir {
                let path = dir.join(format!("{key}.json"));
                if let Ok(bytes) = std::fs::read(&path) {
                    if let Ok(a) = serde_json::from_slice::<CellArtifacts>(&bytes) {
                        self.hits += 1;
                        self.memory.insert(key.to_string(), a.clone());
                        return Ok(a);
                    }
                }
            }
        }
        self.misses += 1;
        let a = make()?;
        if self.enabled {
            if let Some(dir) = &self.dir {
                crate::io::write_json(&dir.join(format!("{key}.json")), &a)?;
            }
            self.memory.insert(key.to_string(), a.clone());
        }
        Ok(a)
    }
}

/// FNV-1a of a canonical JSON rendering.
pub fn content_hash<S: Serialize>(value: &S) -> String {
    let s = serde_json::to_string(value).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn cell_key(spec: &StudySpec) -> String {
    content_hash(&serde_json::json!({
        "kernel": spec.kernel, "medium": spec.medium, "p": spec.p, "nz": spec.nz, "nt": spec.nt,
        "policy": spec.policy, "ergodic_length": spec.ergodic_length, "burn_in": spec.burn_in,
        "version": env!("CARGO_PKG_VERSION"),
    }))
}

fn lattice_stencil(kernel: &Kernel<f64>, nz: usize, nt: usize, policy: WeightPolicy) -> Result<Stencil<f64>> {
    Stencil::from_kernel(kernel, 1.0 / nz as f64, 1.0 / nt as f64, policy)
}

/// Cell correctors and effective coefficients on the study lattice.
pub fn cell_artifacts(spec: &StudySpec, kernel: &Kernel<f64>, medium: &MediumField<f64>) -> Result<CellArtifacts> {
    let d = spec.dim();
    let torus_spec = TorusSpec {
        nz: spec.nz,
        nt: spec.nt,
        policy: spec.policy,
    };
    let opts = CellOptions::default();
    match medium.case {
        MediumCase::Periodic => {
            let torus = Torus::from_kernel(kernel, medium, &torus_spec)?;
            if spec.p > 2.0 {
                let chi1 = solve_chi1(&torus, spec.p, &[1.0], &opts)?;
                let mut table = DirectionTable::default();
                table.insert(vec![1.0], chi1.clone());
                let np = evaluate_np(&torus, &table, spec.p, &[1.0], &[1.0])?;
                let chi = solve_chi(&torus, &opts)?;
                let coefficients = effective_periodic(&torus, &chi, None)?;
                Ok(CellArtifacts {
                    coefficients,
                    chi: Some(chi1),
                    np: Some(np),
                })
            } else {
                let chi = solve_chi(&torus, &opts)?;
                let coefficients = effective_periodic(&torus, &chi, None)?;
                Ok(CellArtifacts {
                    coefficients,
                    chi: Some(chi),
                    np: None,
                })
            }
        }
        MediumCase::PeriodicXStationaryT => {
            if spec.p > 2.0 {
                return Err(Error::Config("p > 2 needs a periodic medium".into()));
            }
            let stencil = lattice_stencil(kernel, spec.nz, spec.nt, spec.policy)?;
            let burn = (spec.burn_in * spec.nt as f64).ceil() as usize;
            let len = (spec.ergodic_length * spec.nt as f64).ceil() as usize;
            let window = Window::new(&stencil, medium, 0, len, burn)?;
            let chi = solve_chi_window(&window)?;
            let res = effective_window(
                &stencil,
                medium,
                &window,
                &chi,
                &ErgodicOptions {
                    batches: 20,
                    target_rel_se: None,
                    max_lag: 8 * spec.nt,
                    chi22_burn_in: burn,
                },
            )?;
            let _ = d;
            Ok(CellArtifacts {
                coefficients: res.coefficients,
                chi: None,
                np: None,
            })
        }
        MediumCase::Stationary => Err(Error::Config("fully stationary media have no cell solver".into())),
    }
}

/// Reference limit solution used for the error norms.
pub fn limit_reference(
    spec: &StudySpec,
    art: &CellArtifacts,
    lo: &[f64],
    hi: &[f64],
) -> Result<Box<dyn MacroField<f64>>> {
    let d = spec.dim();
    let c = &art.coefficients;
    if spec.p > 2.0 {
        let (n, p) = art.np.ok_or_else(|| Error::Config("missing 𝔑/𝔓".into()))?;
        let nodes = 801;
        let h = (hi[0] - lo[0]) / (nodes - 1) as f64;
        let tau = 0.4 * h * h * n / (4.0 * (spec.p - 1.0) * p);
        let mut grid = LocalGrid::new(lo.to_vec(), hi.to_vec(), nodes, tau, spec.t_final)?;
        grid.record_every = (grid.steps / 400).max(1);
        let datum = spec.datum.clone();
        return Ok(Box::new(solve_p_local_1d(n, p, spec.p, &move |x| datum.eval(x), &grid, spec.eta_reg)?));
    }
    let diff = c.diffusivity();
    if let Datum::Gaussian { amplitude, center, sigma } = &spec.datum {
        return Ok(Box::new(GaussianHeat::new(*amplitude, center.clone(), *sigma, diff)?));
    }
    let nodes = if d == 1 { 801 } else { 161 };
    let h = (hi[0] - lo[0]) / (nodes - 1) as f64;
    let tr: f64 = (0..d).map(|i| diff[i * d + i]).sum();
    let tau = 0.45 * h * h / (2.0 * tr.max(1e-300));
    let mut grid = LocalGrid::new(lo.to_vec(), hi.to_vec(), nodes, tau, spec.t_final)?;
    grid.record_every = (grid.steps / 400).max(1);
    let datum = spec.datum.clone();
    Ok(Box::new(solve_linear_local(c.alpha_hat, &c.theta, &move |x| datum.eval(x), &grid)?))
}

/// Nodes of `grid` inside the reporting box.
pub fn box_nodes(grid: &SpaceTimeGrid<f64>, lo: &[f64], hi: &[f64]) -> Vec<usize> {
    grid.points()
        .iter()
        .enumerate()
        .filter(|(_, x)| x.iter().zip(lo).zip(hi).all(|((v, l), h)| *v >= *l && *v <= *h))
        .map(|(k, _)| k)
        .collect()
}

/// Lattice index of node `flat` of `grid` on the corrector torus.
pub fn torus_index(grid: &SpaceTimeGrid<f64>, flat: usize) -> usize {
    let shape = grid.shape();
    let d = grid.dim();
    let mut rem = flat;
    let mut idx = vec![0i64; d];
    for c in (0..d).rev() {
        idx[c] = (rem % shape[c]) as i64 + grid.lower[c] * grid.nz as i64;
        rem /= shape[c];
    }
    idx.iter().fold(0usize, |acc, i| acc * grid.nz + i.rem_euclid(grid.nz as i64) as usize)
}

/// Two-scale expansion `u₀ + ε Σ_c (χ_c + ℐ_c) ∂_c u₀` at node `flat`, level `level`.
pub struct Expansion<'a> {
    pub u0: &'a dyn MacroField<f64>,
    pub chi: Option<&'a CorrectorField<f64>>,
    /// One field per component.
    pub layer: Vec<CorrectorField<f64>>,
}

impl Expansion<'_> {
    pub fn first_order(&self, grid: &SpaceTimeGrid<f64>, flat: usize, x: &[f64], level: i64) -> f64 {
        let t = grid.time(level);
        let Some(chi) = self.chi else { return 0.0 };
        let g = self.u0.gradient(x, t);
        let ti = torus_index(grid, flat);
        let mut s = 0.0;
        for (c, gc) in g.iter().enumerate() {
            let mut v = chi.get(ti, level, c.min(chi.components - 1));
            if let Some(l) = self.layer.get(c) {
                v += if level < l.first_level { -chi.get(ti, 0, c) } else { l.get(ti, level, 0) };
            }
            s += v * gc;
        }
        grid.eps * s
    }
}

/// `(raw, corrected)` squared-error sums over the box at one level.
fn level_sums(grid: &SpaceTimeGrid<f64>, points: &[Vec<f64>], nodes: &[usize], frame: &[f64], level: i64, ex: &Expansion) -> (f64, f64) {
    let t = grid.time(level);
    let mut raw = 0.0;
    let mut cor = 0.0;
    for &k in nodes {
        let u0 = ex.u0.value(&points[k], t);
        let e = frame[k] - u0;
        raw += e * e;
        let c = e - ex.first_order(grid, k, &points[k], level);
        cor += c * c;
    }
    (raw, cor)
}

/// Trapezoid in time over recorded levels, midpoint in space.
pub fn error_norms(traj: &Trajectory<f64>, nodes: &[usize], ex: &Expansion) -> (f64, f64) {
    let grid = &traj.grid;
    let points = grid.points();
    let sums: Vec<(f64, f64)> = traj
        .levels
        .par_iter()
        .zip(&traj.frames)
        .map(|(l, f)| level_sums(grid, &points, nodes, f, *l as i64, ex))
        .collect();
    let times = traj.times();
    trapezoid(&times, &sums, grid.h().powi(grid.dim() as i32))
}

fn trapezoid(times: &[f64], sums: &[(f64, f64)], hd: f64) -> (f64, f64) {
    let mut raw = 0.0;
    let mut cor = 0.0;
    for k in 1..times.len() {
        let dt = times[k] - times[k - 1];
        raw += 0.5 * dt * (sums[k - 1].0 + sums[k].0);
        cor += 0.5 * dt * (sums[k - 1].1 + sums[k].1);
    }
    ((raw * hd).sqrt(), (cor * hd).sqrt())
}

fn record_every(steps: usize, frames: usize) -> usize {
    (steps / frames.max(1)).max(1)
}

/// Domain for a reporting box: margin `3·ε_max·S` on each side.
pub fn study_domain(spec: &StudySpec, kernel: &Kernel<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = kernel.support().half_width;
    let m = 3.0 * spec.epsilons.iter().cloned().fold(0.0, f64::max) * s;
    (
        spec.box_lo.iter().map(|v| v - m).collect(),
        spec.box_hi.iter().map(|v| v + m).collect(),
    )
}

pub fn run_convergence_study(spec: &StudySpec, cache: &mut Cache) -> Result<ConvergenceReport> {
    let bad = spec.validate();
    if !bad.is_empty() {
        return Err(Error::Config(
            bad.iter().map(|(f, m)| format!("{f}: {m}")).collect::<Vec<_>>().join("; "),
        ));
    }
    let kernel: Kernel<f64> = spec.kernel.build(1e-10)?;
    let medium: MediumField<f64> = spec.medium.build(spec.dim())?;
    if kernel.dim != spec.dim() {
        return Err(Error::Config("kernel dimension differs from the box dimension".into()));
    }
    let (lo, hi) = study_domain(spec, &kernel);
    let grids: Vec<SpaceTimeGrid<f64>> = spec
        .epsilons
        .iter()
        .map(|e| SpaceTimeGrid::covering(*e, spec.nz, spec.nt, &lo, &hi, spec.t_final))
        .collect::<Result<_>>()?;
    let problems: Vec<String> = grids.iter().filter_map(|g| g.check_resolution(&kernel).err()).map(|e| e.to_string()).collect();
    if !problems.is_empty() {
        return Err(Error::Resolution(problems.join("; ")));
    }
    let hits_before = cache.hits;
    let art = cache.get_or(&cell_key(spec), || cell_artifacts(spec, &kernel, &medium))?;
    let reference = limit_reference(spec, &art, &lo, &hi)?;
    let stencil = lattice_stencil(&kernel, spec.nz, spec.nt, spec.policy)?;
    let datum = spec.datum.clone();
    let f = move |x: &[f64]| datum.eval(x);
    let mut report = ConvergenceReport {
        epsilons: spec.epsilons.clone(),
        errors_raw: Vec::new(),
        errors_corrected: Vec::new(),
        fitted_rate_raw: None,
        fitted_rate_corrected: None,
        rate_status: String::new(),
        runtimes: Vec::new(),
        alpha_hat: art.coefficients.alpha_hat,
        theta: art.coefficients.theta.clone(),
        diffusivity: match art.np {
            Some((n, p)) => vec![p / n],
            None => art.coefficients.diffusivity(),
        },
        streaming_gap: 0.0,
        cache_hits: 0,
    };
    for grid in &grids {
        let start = Instant::now();
        let window_chi;
        let mut layer = Vec::new();
        let chi = match medium.case {
            MediumCase::PeriodicXStationaryT => {
                let burn = (spec.burn_in * spec.nt as f64).ceil() as usize;
                let w = Window::new(&stencil, &medium, 0, grid.steps + 1, burn)?;
                window_chi = solve_chi_window(&w)?;
                if spec.initial_layer {
                    for c in 0..spec.dim() {
                        layer.push(solve_initial_layer(&stencil, &medium, &window_chi, c, grid.steps.max(1))?);
                    }
                }
                Some(&window_chi)
            }
            _ => art.chi.as_ref(),
        };
        let ex = Expansion {
            u0: reference.as_ref(),
            chi,
            layer,
        };
        let nodes = box_nodes(grid, &spec.box_lo, &spec.box_hi);
        let problem = Problem {
            stencil: &stencil,
            medium: &medium,
            p: spec.p,
            grid,
            extension: SpatialExtension::ConstantByDatum,
        };
        let every = record_every(grid.steps, spec.time_frames);
        let points = grid.points();
        let mut streamed: Vec<f64> = Vec::new();
        let mut stream_sums: Vec<(f64, f64)> = Vec::new();
        let mut observer = |level: usize, frame: &[f64]| {
            if level.is_multiple_of(every) || level == grid.steps {
                streamed.push(grid.time(level as i64));
                // Independent pass: sequential, compensated summation.
                let t = grid.time(level as i64);
                let (mut r, mut rc, mut c, mut cc) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
                for &k in &nodes {
                    let u0 = ex.u0.value(&points[k], t);
                    let e = frame[k] - u0;
                    kahan(&mut r, &mut rc, e * e);
                    let ec = e - ex.first_order(grid, k, &points[k], level as i64);
                    kahan(&mut c, &mut cc, ec * ec);
                }
                stream_sums.push((r, c));
            }
        };
        let traj = solve(&problem, &f, None, &SolveOptions { record_every: every }, Some(&mut observer))?;
        let (raw, cor) = error_norms(&traj, &nodes, &ex);
        let (sr, sc) = trapezoid(&streamed, &stream_sums, grid.h().powi(grid.dim() as i32));
        let gap = |a: f64, b: f64| if a == b { 0.0 } else { (a - b).abs() / a.abs().max(b.abs()) };
        report.streaming_gap = report.streaming_gap.max(gap(raw, sr)).max(gap(cor, sc));
        report.errors_raw.push(raw);
        report.errors_corrected.push(cor);
        report.runtimes.push(start.elapsed().as_secs_f64());
    }
    report.cache_hits = cache.hits - hits_before;
    if report.epsilons.len() < 2 {
        report.rate_status = "skipped: fewer than two ε values".into();
    } else if report.errors_raw.iter().chain(&report.errors_corrected).any(|e| *e <= 0.0) {
        report.rate_status = "skipped: zero errors".into();
    } else {
        report.fitted_rate_raw = Some(rate_fit(&report.epsilons, &report.errors_raw)?.into());
        report.fitted_rate_corrected = Some(rate_fit(&report.epsilons, &report.errors_corrected)?.into());
        report.rate_status = "fitted".into();
    }
    Ok(report)
}

fn kahan(sum: &mut f64, comp: &mut f64, x: f64) {
    let y = x - *comp;
    let t = *sum + y;
    *comp = (t - *sum) - y;
    *sum = t;
}

/// `ω^ε = ε⁻¹(u^ε − u₀ − εχ∇u₀)` at the box nodes of one recorded level.
pub fn compute_omega_eps(
    grid: &SpaceTimeGrid<f64>,
    frame: &[f64],
    level: i64,
    u0: &dyn MacroField<f64>,
    chi: &CorrectorField<f64>,
    nodes: &[usize],
) -> Result<Vec<f64>> {
    if frame.len() != grid.len() || chi.nz != grid.nz || chi.nt != grid.nt || chi.dim != grid.dim() || u0.dim() != grid.dim() {
        return Err(Error::Config("ω^ε inputs live on incompatible grids".into()));
    }
    if !chi.periodic_time && (level < chi.first_level || level >= chi.first_level + chi.slices as i64) {
        return Err(Error::Config(format!(
            "level {level} outside the corrector window [{}, {})",
            chi.first_level,
            chi.first_level + chi.slices as i64
        )));
    }
    let points = grid.points();
    let ex = Expansion {
        u0,
        chi: Some(chi),
        layer: Vec::new(),
    };
    let t = grid.time(level);
    nodes
        .iter()
        .map(|&k| {
            if k >= frame.len() {
                return Err(Error::Config("box node outside the grid".into()));
            }
            let x = &points[k];
            Ok((frame[k] - u0.value(x, t) - ex.first_order(grid, k, x, level)) / grid.eps)
        })
        .collect()
}

/// Minimum ensemble size for fluctuation comparisons.
pub const MIN_REALIZATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeComparison {
    pub omega: ProbeStats,
    pub spde: ProbeStats,
    /// `|Δmean| / sqrt(se₁² + se₂²)`
    pub mean_z: f64,
    pub variance_z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctuationComparison {
    pub probes: Vec<ProbeComparison>,
    pub max_mean_z: f64,
    pub max_variance_z: f64,
}

impl FluctuationComparison {
    /// All probes within `k` combined standard errors.
    pub fn agrees(&self, k: f64) -> bool {
        self.max_mean_z <= k && self.max_variance_z <= k
    }
}

fn z_score(a: f64, b: f64, sa: f64, sb: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / (sa * sa + sb * sb).sqrt()
    }
}

/// Mean/variance comparison of `ω^ε` samples against SPDE samples, both `[realization][probe]`.
pub fn fluctuation_statistics(omega: &[Vec<f64>], spde: &[Vec<f64>]) -> Result<FluctuationComparison> {
    if omega.len() < MIN_REALIZATIONS || spde.len() < MIN_REALIZATIONS {
        return Err(Error::Statistics(format!(
            "ensembles have {} and {} members; at least {MIN_REALIZATIONS} are required",
            omega.len(),
            spde.len()
        )));
    }
    let probes = omega[0].len();
    if spde[0].len() != probes || omega.iter().chain(spde).any(|r| r.len() != probes) {
        return Err(Error::Config("ensembles disagree on the probe set".into()));
    }
    let a = probe_stats(omega, probes);
    let b = probe_stats(spde, probes);
    let probes: Vec<ProbeComparison> = a
        .into_iter()
        .zip(b)
        .map(|(o, s)| ProbeComparison {
            mean_z: z_score(o.mean, s.mean, o.mean_se, s.mean_se),
            variance_z: z_score(o.variance, s.variance, o.variance_se, s.variance_se),
            omega: o,
            spde: s,
        })
        .collect();
    Ok(FluctuationComparison {
        max_mean_z: probes.iter().map(|p| p.mean_z).fold(0.0, f64::max),
        max_variance_z: probes.iter().map(|p| p.variance_z).fold(0.0, f64::max),
        probes,
    })
}

/// Ensemble description for `ω^ε` versus the limit SPDE (one space dimension).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluctuationSpec {
    pub kernel: KernelSpec,
    pub medium: MediumSpec,
    pub datum: Datum,
    pub epsilon: f64,
    pub nz: usize,
    pub nt: usize,
    pub t_final: f64,
    pub box_lo: f64,
    pub box_hi: f64,
    pub probes: Vec<f64>,
    pub realizations: usize,
    pub spde_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub policy: WeightPolicy,
    #[serde(default = "default_burn")]
    pub burn_in: f64,
    #[serde(default = "default_ergodic")]
    pub ergodic_length: f64,
    /// Lag window of the `Υ` estimator in fast time units.
    #[serde(default = "default_lag")]
    pub max_lag: f64,
    /// Macro nodes of the SPDE grid.
    #[serde(default = "default_spde_nodes")]
    pub spde_nodes: usize,
}

fn default_lag() -> f64 {
    8.0
}

fn default_spde_nodes() -> usize {
    241
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FluctuationRun {
    pub coefficients: EffectiveCoefficients<f64>,
    pub omega: Vec<Vec<f64>>,
    pub spde: Vec<Vec<f64>>,
    pub comparison: FluctuationComparison,
    /// `‖ω^ε(·,T)‖_{L²(box)}` averaged over the ensemble.
    pub omega_l2: f64,
}

/// Seed of realization `r`.
pub fn realization_seed(master: u64, r: usize) -> u64 {
    crate::media::splitmix64(master ^ (r as u64).wrapping_mul(0xA076_1D64_78BD_642F))
}

/// Ergodic coefficients of the medium (realization `seed`) on the study lattice.
pub fn fluctuation_coefficients(spec: &FluctuationSpec) -> Result<EffectiveCoefficients<f64>> {
    let kernel: Kernel<f64> = spec.kernel.build(1e-10)?;
    let medium: MediumField<f64> = spec.medium.build(1)?;
    let medium = medium.reseeded(realization_seed(spec.seed, usize::MAX));
    let stencil = lattice_stencil(&kernel, spec.nz, spec.nt, spec.policy)?;
    let burn = (spec.burn_in * spec.nt as f64).ceil() as usize;
    let len = (spec.ergodic_length * spec.nt as f64).ceil() as usize;
    let window = Window::new(&stencil, &medium, 0, len, burn)?;
    let chi = solve_chi_window(&window)?;
    let res = effective_window(
        &stencil,
        &medium,
        &window,
        &chi,
        &ErgodicOptions {
            batches: 20,
            target_rel_se: None,
            max_lag: (spec.max_lag * spec.nt as f64).ceil() as usize,
            chi22_burn_in: burn,
        },
    )?;
    Ok(res.coefficients)
}

/// `ω^ε(probes, T)` for `realizations` independent media, plus `‖ω^ε(·,T)‖` per realization.
pub fn omega_ensemble(spec: &FluctuationSpec, eps: f64, coeffs: &EffectiveCoefficients<f64>) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let kernel: Kernel<f64> = spec.kernel.build(1e-10)?;
    let base: MediumField<f64> = spec.medium.build(1)?;
    if base.case != MediumCase::PeriodicXStationaryT {
        return Err(Error::Config("fluctuation ensembles need a periodic-x-stationary-t medium".into()));
    }
    let stencil = lattice_stencil(&kernel, spec.nz, spec.nt, spec.policy)?;
    let s = kernel.support().half_width;
    let lo = [spec.box_lo - 3.0 * eps * s];
    let hi = [spec.box_hi + 3.0 * eps * s];
    let grid = SpaceTimeGrid::covering(eps, spec.nz, spec.nt, &lo, &hi, spec.t_final)?;
    grid.check_resolution(&kernel)?;
    let Datum::Gaussian { amplitude, center, sigma } = &spec.datum else {
        return Err(Error::Config("fluctuation ensembles use a Gaussian datum".into()));
    };
    let u0 = GaussianHeat::new(*amplitude, center.clone(), *sigma, coeffs.diffusivity())?;
    let nodes = box_nodes(&grid, &[spec.box_lo], &[spec.box_hi]);
    let burn = (spec.burn_in * spec.nt as f64).ceil() as usize;
    let datum = spec.datum.clone();
    let f = move |x: &[f64]| datum.eval(x);
    let out: Vec<Result<(Vec<f64>, f64)>> = (0..spec.realizations)
        .into_par_iter()
        .map(|r| {
            let medium = base.reseeded(realization_seed(spec.seed, r));
            let w = Window::new(&stencil, &medium, 0, grid.steps + 1, burn)?;
            let chi = solve_chi_window(&w)?;
            let problem = Problem {
                stencil: &stencil,
                medium: &medium,
                p: 2.0,
                grid: &grid,
                extension: SpatialExtension::ConstantByDatum,
            };
            let traj = solve(&problem, &f, None, &SolveOptions { record_every: 0 }, None)?;
            let omega = compute_omega_eps(&grid, traj.final_frame(), grid.steps as i64, &u0, &chi, &nodes)?;
            let xs: Vec<f64> = nodes.iter().map(|k| grid.x(0, *k as i64)).collect();
            let l2 = (omega.iter().map(|v| v * v).sum::<f64>() * grid.h()).sqrt();
            let probes = spec.probes.iter().map(|p| interp(&xs, &omega, *p)).collect();
            Ok((probes, l2))
        })
        .collect();
    let mut samples = Vec::with_capacity(spec.realizations);
    let mut norms = Vec::with_capacity(spec.realizations);
    for o in out {
        let (p, n) = o?;
        samples.push(p);
        norms.push(n);
    }
    Ok((samples, norms))
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|v| *v <= x).clamp(1, xs.len() - 1);
    let w = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    ys[k - 1] * (1.0 - w) + ys[k] * w
}

/// Macro grid and limit datum of the SPDE for `spec`.
pub fn spde_setup(spec: &FluctuationSpec, coeffs: &EffectiveCoefficients<f64>) -> Result<(LocalGrid<f64>, GaussianHeat<f64>)> {
    let Datum::Gaussian { amplitude, center, sigma } = &spec.datum else {
        return Err(Error::Config("fluctuation ensembles use a Gaussian datum".into()));
    };
    let u0 = GaussianHeat::new(*amplitude, center.clone(), *sigma, coeffs.diffusivity())?;
    let nodes = spec.spde_nodes;
    if nodes < 3 {
        return Err(Error::Config("spde_nodes must be at least 3".into()));
    }
    let h = (spec.box_hi - spec.box_lo) / (nodes - 1) as f64;
    let d = coeffs.diffusivity()[0];
    let steps = ((spec.t_final * 2.0 * d / (0.4 * h * h)).ceil() as usize).max(50);
    let tau = spec.t_final / steps as f64;
    let grid = LocalGrid::new(vec![spec.box_lo], vec![spec.box_hi], nodes, tau, spec.t_final)?;
    Ok((grid, u0))
}

/// Seed shared by all SPDE streams of `spec`.
pub fn spde_seed(spec: &FluctuationSpec) -> u64 {
    realization_seed(spec.seed, usize::MAX - 1)
}

/// SPDE ensemble at the probes (final time) on a macro grid covering the box.
pub fn spde_ensemble(spec: &FluctuationSpec, coeffs: &EffectiveCoefficients<f64>) -> Result<Vec<Vec<f64>>> {
    let (grid, u0) = spde_setup(spec, coeffs)?;
    let c = SpdeCoefficients::from(coeffs);
    let driver = SpdeDriver::new(&c, &u0, &grid)?;
    let h = grid.h;
    let xs: Vec<f64> = (0..spec.spde_nodes).map(|k| spec.box_lo + k as f64 * h).collect();
    let streams: Vec<u64> = (0..spec.spde_paths as u64).collect();
    let seed = spde_seed(spec);
    Ok(streams
        .par_iter()
        .map(|s| {
            let path = driver.path(seed, *s);
            spec.probes.iter().map(|p| interp(&xs, path.final_frame(), *p)).collect()
        })
        .collect())
}

pub fn run_fluctuation_study(spec: &FluctuationSpec) -> Result<FluctuationRun> {
    if spec.realizations < MIN_REALIZATIONS {
        return Err(Error::Statistics(format!(
            "{} realizations requested; at least {MIN_REALIZATIONS} are required",
            spec.realizations
        )));
    }
    let coefficients = fluctuation_coefficients(spec)?;
    let (omega, norms) = omega_ensemble(spec, spec.epsilon, &coefficients)?;
    let spde = spde_ensemble(spec, &coefficients)?;
    let comparison = fluctuation_statistics(&omega, &spde)?;
    Ok(FluctuationRun {
        coefficients,
        omega,
        spde,
        comparison,
        omega_l2: norms.iter().sum::<f64>() / norms.len() as f64,
    })
}
