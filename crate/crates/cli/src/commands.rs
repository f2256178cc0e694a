//! Command pipelines. Each parses its fields, validates all of them before any
//! computation, then writes artifacts through [`Output`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nlhomog::cell::{solve_chi, solve_chi1, solve_chi_window, CellOptions, CorrectorField, CorrectorKind, Torus, TorusSpec, Window};
use nlhomog::effective::{effective_periodic, effective_window, evaluate_np, DirectionTable, EffectiveCoefficients, ErgodicOptions};
use nlhomog::harness::{
    fluctuation_coefficients, fluctuation_statistics, omega_ensemble, run_convergence_study, spde_ensemble, spde_seed,
    spde_setup, Cache, Datum, FluctuationSpec, StudySpec, MIN_REALIZATIONS,
};
use nlhomog::io;
use nlhomog::kernel::{compute_moments, Kernel, KernelSpec};
use nlhomog::lattice::{Stencil, WeightPolicy};
use nlhomog::limit::spde::{SpdeCoefficients, SpdeDriver};
use nlhomog::limit::TwoScaleFem;
use nlhomog::media::{MediumCase, MediumField, MediumSpec};
use nlhomog::nonlocal::{self, Problem, SolveOptions, SpaceTimeGrid, SpatialExtension};
use serde_json::{json, Value};

use crate::config::Checker;
use crate::output::{file_hash, sha256_hex, Output};
use crate::{CliError, Context};

fn provenance(ctx: &Context) -> Value {
    let canonical = serde_json::to_string(&ctx.config).unwrap_or_default();
    let mut seeds = serde_json::Map::new();
    if let Some(s) = ctx.config.get("seed") {
        seeds.insert("master".into(), s.clone());
    }
    if let Some(s) = ctx.config.get("medium").and_then(|m| m.get("seed")) {
        seeds.insert("medium".into(), s.clone());
    }
    json!({
        "command": ctx.command,
        "config_hash": sha256_hex(canonical.as_bytes()),
        "code_version": env!("CARGO_PKG_VERSION"),
        "seeds": seeds,
    })
}

fn start(ctx: &Context) -> Result<Checker, CliError> {
    let mut c = Checker::new(ctx.config.clone())?;
    if let Some(Some(cmd)) = c.maybe::<String>("command") {
        if cmd != ctx.command {
            c.fail("command", format!("config is for `{cmd}`, not `{}`", ctx.command));
        }
    }
    let _ = c.maybe::<String>("out");
    Ok(c)
}

fn positive_usize(c: &mut Checker, name: &'static str) -> Option<usize> {
    let v = c.req::<usize>(name);
    if v == Some(0) {
        c.fail(name, "must be positive");
    }
    v
}

fn positive_f64(c: &mut Checker, name: &'static str) -> Option<f64> {
    let v = c.req::<f64>(name);
    if let Some(x) = v {
        c.check(x > 0.0 && x.is_finite(), name, "must be positive and finite");
    }
    v
}

fn tolerance(c: &mut Checker) -> f64 {
    match c.opt("tol", 1e-10) {
        Some(t) if t > 0.0 => t,
        Some(_) => {
            c.fail("tol", "must be positive");
            1e-10
        }
        None => 1e-10,
    }
}

/// Parses and builds the kernel so construction errors are reported with the other fields.
fn load_kernel(c: &mut Checker, tol: f64) -> Option<Kernel<f64>> {
    let spec: KernelSpec = c.req("kernel")?;
    match spec.build(tol) {
        Ok(k) => Some(k),
        Err(e) => {
            c.fail("kernel", e.to_string());
            None
        }
    }
}

fn load_medium(c: &mut Checker, dim: Option<usize>) -> Option<MediumField<f64>> {
    let spec: MediumSpec = c.req("medium")?;
    let dim = dim?;
    match spec.build(dim) {
        Ok(m) => Some(m),
        Err(e) => {
            c.fail("medium", e.to_string());
            None
        }
    }
}

fn datum_field(c: &mut Checker, dim: Option<usize>) -> Option<Datum> {
    let d: Datum = c.req("datum")?;
    let centre = match &d {
        Datum::Gaussian { center, sigma, .. } => {
            c.check(*sigma > 0.0, "datum", "sigma must be positive");
            Some(center.len())
        }
        Datum::Bump { center, radius, .. } => {
            c.check(*radius > 0.0, "datum", "radius must be positive");
            Some(center.len())
        }
        _ => None,
    };
    if let (Some(n), Some(d)) = (centre, dim) {
        c.check(n == d, "datum", "center dimension does not match the kernel");
    }
    Some(d)
}

fn moments_json(spec: &KernelSpec, m: &nlhomog::KernelMoments) -> Value {
    json!({
        "kernel": spec,
        "mass": m.mass,
        "first_space": m.first_space,
        "time_moment": m.time_moment,
        "second_space": m.second_space,
        "third_space": m.third_space,
        "cross_moment": m.cross_moment,
    })
}

pub fn moments(ctx: Context) -> Result<(), CliError> {
    let mut c = start(&ctx)?;
    let tol = tolerance(&mut c);
    let kernel = load_kernel(&mut c, tol);
    c.finish()?;
    let kernel = kernel.expect("validated");
    let m = compute_moments(&kernel, tol)?;
    let mut out = Output::new(ctx.out.clone(), provenance(&ctx))?;
    out.json("moments.json", &moments_json(&kernel.spec, &m))?;
    out.finish()?;
    Ok(())
}

/// Fields shared by `corrector` and `effective`.
struct CellConfig {
    kernel: Kernel<f64>,
    medium: MediumField<f64>,
    p: f64,
    torus: TorusSpec,
    directions: Vec<Vec<f64>>,
    window_length: f64,
    burn_in: f64,
    batches: usize,
    max_lag: f64,
    cell: CellOptions,
}

fn cell_config(c: &mut Checker) -> Option<CellConfig> {
    let tol = tolerance(c);
    let kernel = load_kernel(c, tol);
    let dim = kernel.as_ref().map(|k| k.dim);
    let medium = load_medium(c, dim);
    let p = c.opt("p", 2.0f64);
    let nz = positive_usize(c, "nz");
    let nt = positive_usize(c, "nt");
    let policy: Option<WeightPolicy> = c.opt("policy", WeightPolicy::default());
    let directions: Option<Option<Vec<Vec<f64>>>> = c.maybe("directions");
    let window_length = c.opt("window_length", 2000.0);
    let burn_in = c.opt("burn_in", 40.0);
    let batches = c.opt("batches", 20usize);
    let max_lag = c.opt("max_lag", 8.0);
    let cell_tol = c.opt("cell_tol", 1e-10);
    let max_iter = c.opt("max_iter", 100_000usize);

    if let Some(p) = p {
        c.check(p >= 2.0 && p.is_finite(), "p", "must be a finite value ≥ 2");
    }
    let directions = match (directions, dim) {
        (Some(Some(list)), Some(d)) => {
            c.check(
                !list.is_empty() && list.iter().all(|g| g.len() == d && g.iter().any(|v| *v != 0.0)),
                "directions",
                "need non-empty list of nonzero vectors of the kernel dimension",
            );
            Some(list)
        }
        (Some(None), Some(d)) => Some(vec![(0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()]),
        _ => None,
    };
    if let Some(m) = &medium {
        match m.case {
            MediumCase::Stationary => c.fail("medium", "fully stationary media have no cell solver"),
            MediumCase::PeriodicXStationaryT => {
                c.check(p.is_none_or(|p| p == 2.0), "p", "p > 2 needs a periodic medium");
            }
            MediumCase::Periodic => {}
        }
    }
    if let (Some(w), Some(b)) = (window_length, burn_in) {
        c.check(b >= 0.0, "burn_in", "must be non-negative");
        c.check(w > b, "window_length", "must exceed burn_in");
    }
    if let Some(b) = batches {
        c.check(b >= 2, "batches", "need at least 2");
    }
    if let Some(l) = max_lag {
        c.check(l > 0.0, "max_lag", "must be positive");
    }
    if let Some(t) = cell_tol {
        c.check(t > 0.0, "cell_tol", "must be positive");
    }
    if let Some(m) = max_iter {
        c.check(m > 0, "max_iter", "must be positive");
    }
    Some(CellConfig {
        kernel: kernel?,
        medium: medium?,
        p: p?,
        torus: TorusSpec {
            nz: nz?,
            nt: nt?,
            policy: policy?,
        },
        directions: directions?,
        window_length: window_length?,
        burn_in: burn_in?,
        batches: batches?,
        max_lag: max_lag?,
        cell: CellOptions {
            tol: cell_tol?,
            max_iter: max_iter?,
            ..CellOptions::default()
        },
    })
}

impl CellConfig {
    fn stencil(&self) -> Result<Stencil<f64>, CliError> {
        Ok(Stencil::from_kernel(
            &self.kernel,
            1.0 / self.torus.nz as f64,
            1.0 / self.torus.nt as f64,
            self.torus.policy,
        )?)
    }

    fn levels(&self, fast: f64) -> usize {
        (fast * self.torus.nt as f64).ceil() as usize
    }

    fn window<'a>(&self, stencil: &'a Stencil<f64>, medium: &'a MediumField<f64>) -> Result<Window<'a, f64>, CliError> {
        Ok(Window::new(stencil, medium, 0, self.levels(self.window_length), self.levels(self.burn_in))?)
    }

    fn identity(&self) -> Value {
        json!({ "kernel": self.kernel.spec, "medium": self.medium.spec, "torus": self.torus })
    }
}

/// Stores a corrector as `values` in a binary field and everything else in the sidecar.
fn save_corrector(out: &mut Output, name: &str, field: &CorrectorField<f64>, identity: &Value) -> Result<(String, String), CliError> {
    let mut header = serde_json::to_value(field)?;
    if let Value::Object(m) = &mut header {
        m.remove("values");
    }
    let shape = [field.slices, field.space(), field.components];
    let content = json!({ "corrector": header, "identity": identity });
    let (bin, hash) = out.field(name, content, |base, meta| io::write_field(base, &field.values, &shape, None, meta))?;
    Ok((bin.file_name().unwrap_or_default().to_string_lossy().into_owned(), hash))
}

fn load_corrector(path: &Path, identity: &Value) -> Result<(CorrectorField<f64>, String), CliError> {
    let bin = path.with_extension("bin");
    let (values, side) = io::read_field(&bin).map_err(|e| crate::bad("corrector_file", e.to_string()))?;
    let content = &side.meta["content"];
    if &content["identity"] != identity {
        return Err(crate::bad(
            "corrector_file",
            "stored corrector was computed for a different kernel, medium or torus",
        ));
    }
    let mut header = content["corrector"].clone();
    if let Value::Object(m) = &mut header {
        m.insert("values".into(), json!(values));
    }
    let field: CorrectorField<f64> = serde_json::from_value(header).map_err(|e| crate::bad("corrector_file", e.to_string()))?;
    Ok((field, file_hash(&bin)?))
}

fn corrector_entry(file: &str, hash: &str, f: &CorrectorField<f64>) -> Value {
    json!({
        "file": file, "sha256": hash, "kind": f.kind, "direction": f.direction,
        "residual": f.residual, "iterations": f.iterations, "max_abs": f.max_abs(),
        "slices": f.slices, "first_level": f.first_level,
    })
}

pub fn corrector(ctx: Context) -> Result<(), CliError> {
    let mut c = start(&ctx)?;
    let cfg = cell_config(&mut c);
    c.finish()?;
    let cfg = cfg.expect("validated");
    let identity = cfg.identity();
    let mut out = Output::new(ctx.out.clone(), provenance(&ctx))?;
    let mut entries = Vec::new();
    match cfg.medium.case {
        MediumCase::Periodic => {
            let torus = Torus::from_kernel(&cfg.kernel, &cfg.medium, &cfg.torus)?;
            if cfg.p > 2.0 {
                for (k, g) in cfg.directions.iter().enumerate() {
                    let chi1 = solve_chi1(&torus, cfg.p, g, &cfg.cell)?;
                    let (file, hash) = save_corrector(&mut out, &format!("chi1_{k}"), &chi1, &identity)?;
                    entries.push(corrector_entry(&file, &hash, &chi1));
                }
            } else {
                let chi = solve_chi(&torus, &cfg.cell)?;
                let (file, hash) = save_corrector(&mut out, "chi", &chi, &identity)?;
                entries.push(corrector_entry(&file, &hash, &chi));
            }
        }
        _ => {
            let stencil = cfg.stencil()?;
            let window = cfg.window(&stencil, &cfg.medium)?;
            let chi = solve_chi_window(&window)?;
            let (file, hash) = save_corrector(&mut out, "chi_window", &chi, &identity)?;
            entries.push(corrector_entry(&file, &hash, &chi));
        }
    }
    out.json(
        "corrector.json",
        &json!({ "p": cfg.p, "identity": identity, "correctors": entries }),
    )?;
    out.finish()?;
    Ok(())
}

pub fn effective(ctx: Context) -> Result<(), CliError> {
    let mut c = start(&ctx)?;
    let cfg = cell_config(&mut c);
    let corrector_file: Option<Option<PathBuf>> = c.maybe("corrector_file");
    if let (Some(Some(_)), Some(cfg)) = (&corrector_file, &cfg) {
        c.check(
            cfg.medium.case == MediumCase::Periodic,
            "corrector_file",
            "stored correctors are reused only for periodic media",
        );
    }
    c.finish()?;
    let cfg = cfg.expect("validated");
    let corrector_file = corrector_file.expect("validated");
    let identity = cfg.identity();
    let mut out = Output::new(ctx.out.clone(), provenance(&ctx))?;
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    let mut np_table = Vec::new();

    let coefficients: EffectiveCoefficients<f64> = match cfg.medium.case {
        MediumCase::Periodic => {
            let torus = Torus::from_kernel(&cfg.kernel, &cfg.medium, &cfg.torus)?;
            let chi = match &corrector_file {
                Some(path) => {
                    let (f, hash) = load_corrector(path, &identity)?;
                    if f.kind != CorrectorKind::Chi {
                        return Err(crate::bad("corrector_file", "expected a χ corrector"));
                    }
                    files.insert(path.display().to_string(), hash);
                    f
                }
                None => {
                    let f = solve_chi(&torus, &cfg.cell)?;
                    let (file, hash) = save_corrector(&mut out, "chi", &f, &identity)?;
                    files.insert(file, hash);
                    f
                }
            };
            if cfg.p > 2.0 {
                let d = torus.dim;
                let hessian: Vec<f64> = (0..d * d).map(|k| if k % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
                let mut table = DirectionTable::default();
                for (k, g) in cfg.directions.iter().enumerate() {
                    let chi1 = solve_chi1(&torus, cfg.p, g, &cfg.cell)?;
                    let (file, hash) = save_corrector(&mut out, &format!("chi1_{k}"), &chi1, &identity)?;
                    files.insert(file, hash);
                    table.insert(g.clone(), chi1);
                }
                for g in &cfg.directions {
                    let (n, p) = evaluate_np(&torus, &table, cfg.p, g, &hessian)?;
                    np_table.push(json!({ "direction": g, "n": n, "p": p, "ratio": p / n }));
                }
            }
            effective_periodic(&torus, &chi, None)?
        }
        _ => {
            let stencil = cfg.stencil()?;
            let window = cfg.window(&stencil, &cfg.medium)?;
            let chi = solve_chi_window(&window)?;
            let (file, hash) = save_corrector(&mut out, "chi_window", &chi, &identity)?;
            files.insert(file, hash);
            let burn = cfg.levels(cfg.burn_in);
            let opts = ErgodicOptions {
                batches: cfg.batches,
                target_rel_se: None,
                max_lag: cfg.levels(cfg.max_lag),
                chi22_burn_in: burn,
            };
            effective_window(&stencil, &cfg.medium, &window, &chi, &opts)?.coefficients
        }
    };

    let mut prov = out.provenance.clone();
    if let Value::Object(m) = &mut prov {
        m.insert("kernel".into(), json!(cfg.kernel.spec));
        m.insert("medium".into(), json!(cfg.medium.spec));
        m.insert("corrector_files".into(), json!(files));
    }
    let mut report = json!({
        "alpha_hat": coefficients.alpha_hat,
        "theta": coefficients.theta,
        "mu_tensor": coefficients.mu_tensor,
        "mu1": coefficients.mu1,
        "upsilon_raw": coefficients.upsilon_raw,
        "upsilon_psd": coefficients.upsilon_psd,
        "standard_errors": coefficients.standard_errors,
        "diffusivity": coefficients.diffusivity(),
        "provenance": prov,
    });
    if cfg.p > 2.0 {
        report["p"] = json!(cfg.p);
        report["np"] = json!(np_table);
    }
    out.json("coefficients.json", &report)?;
    out.finish()?;
    Ok(())
}

pub fn solve(ctx: Context) -> Result<(), CliError> {
    let mut c = start(&ctx)?;
    let tol = tolerance(&mut c);
    let kernel = load_kernel(&mut c, tol);
    let dim = kernel.as_ref().map(|k| k.dim);
    let medium = load_medium(&mut c, dim);
    let p = c.opt("p", 2.0f64);
    let eps = positive_f64(&mut c, "epsilon");
    let nz = positive_usize(&mut c, "nz");
    let nt = positive_usize(&mut c, "nt");
    let t_final = positive_f64(&mut c, "t_final");
    let lo: Option<Vec<f64>> = c.req("box_lo");
    let hi: Option<Vec<f64>> = c.req("box_hi");
    let datum = datum_field(&mut c, dim);
    let extension = c.opt("extension", SpatialExtension::ConstantByDatum);
    let policy = c.opt("policy", WeightPolicy::default());
    let frames = c.opt("frames", 20usize);
    if let Some(p) = p {
        c.check(p >= 2.0 && p.is_finite(), "p", "must be a finite value ≥ 2");
    }
    if let (Some(lo), Some(hi)) = (&lo, &hi) {
        let ok = lo.len() == hi.len() && dim.is_none_or(|d| d == lo.len()) && lo.iter().zip(hi).all(|(l, h)| h > l);
        c.check(ok, "box_lo/box_hi", "need bounds of the kernel dimension with hi > lo");
    }
    if frames == Some(0) {
        c.fail("frames", "must be positive");
    }
    c.finish()?;
    let (kernel, medium, p, eps) = (kernel.unwrap(), medium.unwrap(), p.unwrap(), eps.unwrap());
    let (nz, nt, t_final, lo, hi) = (nz.unwrap(), nt.unwrap(), t_final.unwrap(), lo.unwrap(), hi.unwrap());
    let (datum, extension, policy, frames) = (datum.unwrap(), extension.unwrap(), policy.unwrap(), frames.unwrap());

    let stencil = Stencil::from_kernel(&kernel, 1.0 / nz as f64, 1.0 / nt as f64, policy)?;
    let grid = SpaceTimeGrid::covering(eps, nz, nt, &lo, &hi, t_final)?;
    grid.check_resolution(&kernel)?;
    let problem = Problem {
        stencil: &stencil,
        medium: &medium,
        p,
        grid: &grid,
        extension,
    };
    let f = |x: &[f64]| datum.eval(x);
    let record_every = (grid.steps / frames).max(1);
    let traj = nonlocal::solve(&problem, &f, None, &SolveOptions { record_every }, None)?;

    let mut out = Output::new(ctx.out.clone(), provenance(&ctx))?;
    let (file, hash) = out.field("trajectory", json!({ "kernel": kernel.spec, "medium": medium.spec }), |base, meta| {
        io::save_trajectory(base, &traj, meta)
    })?;
    let d = grid.dim();
    let mut header: Vec<String> = (0..d).map(|c| format!("x{c}")).collect();
    header.push("u".into());
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = grid
        .points()
        .into_iter()
        .zip(traj.final_frame())
        .map(|(mut x, u)| {
            x.push(*u);
            x
        })
        .collect();
    out.csv("final.csv", &header_ref, &rows)?;
    let (umin, umax) = traj.sup_norm_range();
    out.json(
        "solve.json",
        &json!({
            "epsilon": eps, "h": grid.h(), "tau": grid.tau(), "steps": grid.steps, "shape": grid.shape(),
            "time": grid.time(grid.steps as i64), "levels": traj.levels, "range": [umin, umax],
            "trajectory": { "file": file.file_name().map(|f| f.to_string_lossy().into_owned()), "sha256": hash },
        }),
    )?;
    out.finish()?;
    Ok(())
}

pub fn study(ctx: Context) -> Result<(), CliError> {
    let mut c = start(&ctx)?;
    let _: Option<KernelSpec> = c.req("kernel");
    let _: Option<MediumSpec> = c.req("medium");
    let _: Option<f64> = c.req("p");
    let _: Option<Datum> = c.req("datum");
    let _: Option<Vec<f64>> = c.req("epsilons");
    let _: Option<usize> = c.req("nz");
    let _: Option<usize> = c.req("nt");
    let _: Option<f64> = c.req("t_final");
    let _: Option<Vec<f64>> = c.req("box_lo");
    let _: Option<Vec<f64>> = c.req("box_hi");
    let _ = c.maybe::<WeightPolicy>("policy");
    let _ = c.maybe::<bool>("initial_layer");
    let _ = c.maybe::<usize>("time_frames");
    let _ = c.maybe::<f64>("eta_reg");
    let _ = c.maybe::<f64>("burn_in");
    let _ = c.maybe::<f64>("ergodic_length");
    let mut obj = c.known_object();
    if let Value::Object(m) = &mut obj {
        m.remove("command");
        m.remove("out");
    }
    let spec: Option<StudySpec> = if c.errors.is_empty() {
        match serde_json::from_value::<StudySpec>(obj) {
            Ok(s) => {
                for (field, msg) in s.validate() {
                    c.fail(&field, msg);
                }
                Some(s)
            }
            Err(e) => {
                c.fail("$", e.to_string());
                None
            }
        }
    } else {
        None
    };
    c.finish()?;
    let spec = spec.expect("validated");

    let mut cache = if ctx.no_cache {
        Cache::disabled()
    } else {
        Cache::new(Some(ctx.out.join("cache")))
    };
    let report = run_convergence_study(&spec, &mut cache)?;
    let mut out = Output::new(ctx.out.clone(), provenance(&ctx))?;
    let rows: Vec<Vec<f64>> = (0..report.epsilons.len())
        .map(|k| vec![report.epsilons[k], report.errors_raw[k], report.errors_corrected[k]])
        .collect();
    out.csv("study.csv", &["epsilon", "error_raw", "error_corrected"], &rows)?;
    let timings: Vec<Vec<f64>> = report.epsilons.iter().zip(&report.runtimes).map(|(e, t)| vec![*e, *t]).collect();
    out.csv("timings.csv", &["epsilon", "runtime"], &timings)?;
    let loglog: Vec<Vec<f64>> = rows.iter().filter(|r| r[1] > 0.0).map(|r| vec![r[0].ln(), r[1].ln()]).collect();
    out.csv("loglog_raw.csv", &["log_epsilon", "log_error_raw"], &loglog)?;
    let loglog: Vec<Vec<f64>> = rows.iter().filter(|r| r[2] > 0.0).map(|r| vec![r[0].ln(), r[2].ln()]).collect();
    out.csv("loglog_corrected.csv", &["log_epsilon", "log_error_corrected"], &loglog)?;
    out.json("summary.json", &report)?;
    out.finish()?;
    Ok(())
}

pub fn spde(ctx: Context) -> Result<(), CliError> {
    let mut c = start(&ctx)?;
    let tol = tolerance(&mut c);
    let kernel = load_kernel(&mut c, tol);
    let dim = kernel.as_ref().map(|k| k.dim);
    let medium = load_medium(&mut c, dim);
    let datum = datum_field(&mut c, Some(1));
    let eps = positive_f64(&mut c, "epsilon");
    positive_usize(&mut c, "nz");
    positive_usize(&mut c, "nt");
    positive_f64(&mut c, "t_final");
    let lo: Option<f64> = c.req("box_lo");
    let hi: Option<f64> = c.req("box_hi");
    let probes: Option<Vec<f64>> = c.req("probes");
    let realizations = c.opt("realizations", 0usize);
    positive_usize(&mut c, "spde_paths");
    let _: Option<u64> = c.req("seed");
    let _ = c.maybe::<WeightPolicy>("policy");
    let _ = c.maybe::<f64>("burn_in");
    let _ = c.maybe::<f64>("ergodic_length");
    let _ = c.maybe::<f64>("max_lag");
    let nodes = c.maybe::<usize>("spde_nodes");
    c.check(dim.is_none_or(|d| d == 1), "kernel", "the fluctuation pipeline is one dimensional");
    if let Some(m) = &medium {
        c.check(
            m.case == MediumCase::PeriodicXStationaryT,
            "medium",
            "needs a periodic-x-stationary-t medium",
        );
    }
    if let Some(d) = &datum {
        c.check(matches!(d, Datum::Gaussian { .. }), "datum", "must be Gaussian");
    }
    if let (Some(lo), Some(hi)) = (lo, hi) {
        c.check(hi > lo, "box_lo/box_hi", "need box_hi > box_lo");
        if let Some(p) = &probes {
            c.check(
                !p.is_empty() && p.iter().all(|x| *x >= lo && *x <= hi),
                "probes",
                "need at least one probe inside the box",
            );
        }
    }
    if let Some(r) = realizations {
        c.check(
            r == 0 || r >= MIN_REALIZATIONS,
            "realizations",
            &format!("use 0 (SPDE only) or at least {MIN_REALIZATIONS}"),
        );
    }
    if let Some(Some(n)) = nodes {
        c.check(n >= 3, "spde_nodes", "need at least 3");
    }
    let mut obj = c.known_object();
    if let Value::Object(m) = &mut obj {
        m.remove("command");
        m.remove("out");
        m.remove("tol");
        m.insert("realizations".into(), json!(realizations.unwrap_or(0)));
    }
    let spec: Option<FluctuationSpec> = if c.errors.is_empty() {
        serde_json::from_value(obj).map_err(|e| c.fail("$", e.to_string())).ok()
    } else {
        None
    };
    c.finish()?;
    let (spec, eps) = (spec.expect("validated"), eps.unwrap());

    let coefficients = fluctuation_coefficients(&spec)?;
    let mut out = Output::new(ctx.out.clone(), provenance(&ctx))?;
    let (grid, u0) = spde_setup(&spec, &coefficients)?;
    let driver = SpdeDriver::new(&SpdeCoefficients::from(&coefficients), &u0, &grid)?;
    let path = driver.path(spde_seed(&spec), 0);
    out.field("spde_path0", json!({ "coefficients": coefficients }), |base, meta| {
        io::save_spde(base, &path, &grid.n, meta)
    })?;
    let header: Vec<String> = (0..spec.probes.len()).map(|k| format!("probe_{k}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let spde_samples = spde_ensemble(&spec, &coefficients)?;
    out.csv("spde_probes.csv", &header, &spde_samples)?;
    let mut summary = json!({ "probes": spec.probes, "coefficients": coefficients });
    if spec.realizations > 0 {
        let (omega, norms) = omega_ensemble(&spec, eps, &coefficients)?;
        out.csv("omega_probes.csv", &header, &omega)?;
        let comparison = fluctuation_statistics(&omega, &spde_samples)?;
        summary["comparison"] = json!(comparison);
        summary["agrees_within_3se"] = json!(comparison.agrees(3.0));
        summary["omega_l2_mean"] = json!(norms.iter().sum::<f64>() / norms.len() as f64);
    }
    out.json("spde.json", &summary)?;
    out.finish()?;
    Ok(())
}

pub fn fem(ctx: Context) -> Result<(), CliError> {
    let mut c = start(&ctx)?;
    let tol = tolerance(&mut c);
    let kernel = load_kernel(&mut c, tol);
    let dim = kernel.as_ref().map(|k| k.dim);
    let medium = load_medium(&mut c, dim);
    let nz = positive_usize(&mut c, "nz");
    let nt = positive_usize(&mut c, "nt");
    let policy = c.opt("policy", WeightPolicy::default());
    let lower: Option<f64> = c.req("lower");
    let upper: Option<f64> = c.req("upper");
    let elements = positive_usize(&mut c, "elements");
    let dt = positive_f64(&mut c, "dt");
    let steps = positive_usize(&mut c, "steps");
    let datum = datum_field(&mut c, Some(1));
    let frames = c.opt("frames", 20usize);
    c.check(dim.is_none_or(|d| d == 1), "kernel", "the two-scale FEM is one dimensional");
    if let Some(m) = &medium {
        c.check(m.case == MediumCase::Periodic, "medium", "the two-scale FEM needs a periodic medium");
    }
    if let (Some(l), Some(u)) = (lower, upper) {
        c.check(u > l, "lower/upper", "need upper > lower");
    }
    if let Some(e) = elements {
        c.check(e >= 2, "elements", "need at least 2");
    }
    if frames == Some(0) {
        c.fail("frames", "must be positive");
    }
    c.finish()?;
    let (kernel, medium) = (kernel.unwrap(), medium.unwrap());
    let torus_spec = TorusSpec {
        nz: nz.unwrap(),
        nt: nt.unwrap(),
        policy: policy.unwrap(),
    };
    let (steps, datum, frames) = (steps.unwrap(), datum.unwrap(), frames.unwrap());

    let torus = Torus::from_kernel(&kernel, &medium, &torus_spec)?;
    let fem = TwoScaleFem::new(torus, lower.unwrap(), upper.unwrap(), elements.unwrap(), dt.unwrap())?;
    let f = |x: f64| datum.eval(&[x]);
    let mut state = fem.initial(&f);
    let every = (steps / frames).max(1);
    let mut times = vec![state.time];
    let mut u0_frames = state.u0.clone();
    for n in 1..=steps {
        state = fem.step(&state)?;
        if n % every == 0 || n == steps {
            times.push(state.time);
            u0_frames.extend_from_slice(&state.u0);
        }
    }

    let mut out = Output::new(ctx.out.clone(), provenance(&ctx))?;
    let m = fem.elements;
    out.field("u0", json!({ "lower": fem.lower, "upper": fem.upper, "elements": m }), |base, meta| {
        io::write_field(base, &u0_frames, &[times.len(), m + 1], Some(times.clone()), meta)
    })?;
    let u1: Vec<f64> = state.u1.iter().flatten().copied().collect();
    out.field("u1", json!({ "time": state.time, "cells": fem.cells() }), |base, meta| {
        io::write_field(base, &u1, &[m, fem.cells()], None, meta)
    })?;
    let rows: Vec<Vec<f64>> = (0..=m).map(|j| vec![fem.node(j), state.u0[j]]).collect();
    out.csv("u0_final.csv", &["x", "u0"], &rows)?;
    out.json(
        "fem.json",
        &json!({
            "alpha_hat": fem.alpha_hat, "q0": fem.q0,
            "h": fem.h(), "dt": fem.dt, "steps": steps, "time": state.time, "unknowns": fem.unknowns(),
        }),
    )?;
    out.finish()?;
    Ok(())
}
