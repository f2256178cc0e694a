use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_nlhomog");

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(BIN)
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("NLHOMOG_OUT_DIR")
        .output()
        .unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

fn box_kernel() -> Value {
    json!({ "kind": "box", "dim": 1, "half_width": 0.5, "r_lo": 1.0, "r_hi": 2.0 })
}

fn stripes() -> Value {
    json!({ "case": "periodic", "pattern": "stripes", "values": [0.5, 2.0] })
}

fn study_config() -> Value {
    json!({
        "command": "study",
        "kernel": box_kernel(),
        "medium": stripes(),
        "p": 2.0,
        "datum": { "kind": "gaussian", "amplitude": 1.0, "center": [0.0], "sigma": 0.5 },
        "epsilons": [0.2, 0.1],
        "nz": 16, "nt": 8, "t_final": 0.5,
        "box_lo": [-1.0], "box_hi": [1.0]
    })
}

/// Every file in the manifest either embeds provenance or has a provenance sidecar.
fn assert_provenance(out: &Path) {
    let manifest = read_json(&out.join("manifest.json"));
    let prov = &manifest["provenance"];
    assert!(prov["config_hash"].as_str().is_some_and(|h| h.len() == 64));
    assert_eq!(prov["code_version"], env!("CARGO_PKG_VERSION"));
    let files: Vec<String> = manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["file"].as_str().unwrap().to_string())
        .collect();
    assert!(!files.is_empty());
    for f in &files {
        let path = out.join(f);
        assert!(path.exists(), "{f} listed but missing");
        if f.ends_with(".csv") {
            let side = read_json(&out.join(format!("{f}.provenance.json")));
            assert_eq!(side["provenance"]["config_hash"], prov["config_hash"]);
        } else if f.ends_with(".bin") {
            let side = read_json(&path.with_extension("json"));
            assert_eq!(side["meta"]["provenance"]["config_hash"], prov["config_hash"], "{f}");
        } else {
            let v = read_json(&path);
            let p = if v.get("file").is_some() { &v["meta"]["provenance"] } else { &v["provenance"] };
            assert_eq!(p["config_hash"], prov["config_hash"], "{f}");
        }
    }
}

#[test]
fn moments_reports_the_time_moment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "m.json",
        &json!({ "command": "moments", "kernel": { "kind": "truncated_weierstrass", "dim": 1 } }),
    );
    let out = dir.path().join("out");
    let o = run("moments", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&out.join("moments.json"));
    let tm = m["time_moment"].as_f64().unwrap();
    assert!((tm - 0.0051049).abs() < 5e-8, "time moment {tm}");
    assert!((m["mass"].as_f64().unwrap() - 1.0).abs() < 1e-8);
    assert_provenance(&out);
}

#[test]
fn missing_kernel_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.json", &json!({ "command": "moments" }));
    let out = dir.path().join("out");
    let o = run("moments", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = read_json(&out.join("error.json"));
    assert_eq!(err["error"], "validation");
    assert!(err["errors"].as_array().unwrap().iter().any(|e| e["field"] == "kernel"));
    let printed: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(printed, err);
}

#[test]
fn every_violated_field_is_listed_at_once() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = study_config();
    c["epsilons"] = json!([0.1, 0.2]);
    c["nz"] = json!("sixteen");
    c["t_final"] = json!(-1.0);
    c["colour"] = json!("blue");
    c.as_object_mut().unwrap().remove("datum");
    let cfg = write_config(dir.path(), "s.json", &c);
    let out = dir.path().join("out");
    let o = run("study", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = read_json(&out.join("error.json"));
    let fields: Vec<&str> = err["errors"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap()).collect();
    for f in ["datum", "nz", "colour"] {
        assert!(fields.contains(&f), "{f} not in {fields:?}");
    }
    // Semantic checks run once the types are right.
    c["nz"] = json!(16);
    c["datum"] = json!({ "kind": "zero" });
    c.as_object_mut().unwrap().remove("colour");
    let cfg = write_config(dir.path(), "s.json", &c);
    let o = run("study", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = read_json(&out.join("error.json"));
    let fields: Vec<&str> = err["errors"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap()).collect();
    assert!(fields.contains(&"epsilons") && fields.contains(&"t_final"), "{fields:?}");
}

#[test]
fn config_for_another_command_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.json", &study_config());
    let o = run("moments", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn repeated_study_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.json", &study_config());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert!(run("study", &cfg, &a, &[]).status.success());
    assert!(run("study", &cfg, &b, &[]).status.success());
    assert!(run("study", &cfg, &c, &["--no-cache"]).status.success());
    let csv = fs::read(a.join("study.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("study.csv")).unwrap());
    assert_eq!(csv, fs::read(c.join("study.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("study.csv.provenance.json")).unwrap(),
        fs::read(b.join("study.csv.provenance.json")).unwrap()
    );
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epsilon,error_raw,error_corrected\r\n"));
    assert_eq!(text.lines().count(), 3);
    assert!(!c.join("cache").exists());
    assert_provenance(&a);

    // A second run in the same directory reads the disk cache and agrees.
    assert!(run("study", &cfg, &a, &[]).status.success());
    assert_eq!(fs::read(a.join("study.csv")).unwrap(), fs::read(b.join("study.csv")).unwrap());
    assert!(read_json(&a.join("summary.json"))["cache_hits"].as_u64().unwrap() > 0);
}

#[test]
fn effective_reuses_a_stored_corrector() {
    let dir = tempfile::tempdir().unwrap();
    let base = json!({ "kernel": box_kernel(), "medium": stripes(), "nz": 16, "nt": 8 });
    let mut c = base.clone();
    c["command"] = json!("corrector");
    let cfg = write_config(dir.path(), "c.json", &c);
    let cor = dir.path().join("cor");
    assert!(run("corrector", &cfg, &cor, &[]).status.success());
    assert_provenance(&cor);

    let direct = dir.path().join("direct");
    let cfg = write_config(dir.path(), "e.json", &base);
    assert!(run("effective", &cfg, &direct, &[]).status.success());

    let mut e = base.clone();
    let chi = cor.join("chi.bin");
    e["corrector_file"] = json!(chi);
    let cfg = write_config(dir.path(), "e2.json", &e);
    let reused = dir.path().join("reused");
    let o = run("effective", &cfg, &reused, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let a = read_json(&direct.join("coefficients.json"));
    let b = read_json(&reused.join("coefficients.json"));
    for key in ["alpha_hat", "theta", "mu_tensor", "mu1", "upsilon_raw", "upsilon_psd", "standard_errors"] {
        assert_eq!(a[key], b[key], "{key}");
    }
    let manifest = read_json(&cor.join("manifest.json"));
    let hash = manifest["artifacts"].as_array().unwrap().iter().find(|f| f["file"] == "chi.bin").unwrap()["sha256"].clone();
    assert_eq!(b["provenance"]["corrector_files"][chi.display().to_string()], hash);
    assert_eq!(b["provenance"]["kernel"], box_kernel());
    assert_eq!(b["provenance"]["medium"], stripes());

    // A corrector for another medium is refused.
    e["medium"] = json!({ "case": "periodic", "pattern": "stripes", "values": [0.5, 3.0] });
    let cfg = write_config(dir.path(), "e3.json", &e);
    assert_eq!(run("effective", &cfg, &dir.path().join("x"), &[]).status.code(), Some(2));
}

#[test]
fn corrector_tabulates_a_direction_grid() {
    let dir = tempfile::tempdir().unwrap();
    let c = json!({
        "kernel": box_kernel(), "medium": stripes(), "nz": 16, "nt": 8,
        "p": 3.0, "directions": [[1.0], [-1.0], [0.5]]
    });
    let cfg = write_config(dir.path(), "c.json", &c);
    let out = dir.path().join("out");
    assert!(run("corrector", &cfg, &out, &[]).status.success());
    let summary = read_json(&out.join("corrector.json"));
    let list = summary["correctors"].as_array().unwrap();
    assert_eq!(list.len(), 3);
    for (k, g) in [1.0, -1.0, 0.5].iter().enumerate() {
        assert_eq!(list[k]["direction"], json!([g]));
        assert!(out.join(format!("chi1_{k}.bin")).exists());
    }
    let cfg = write_config(dir.path(), "e.json", &c);
    let eff = dir.path().join("eff");
    assert!(run("effective", &cfg, &eff, &[]).status.success());
    let np = read_json(&eff.join("coefficients.json"))["np"].clone();
    assert_eq!(np.as_array().unwrap().len(), 3);
}

#[test]
fn env_var_overrides_the_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "m.json",
        &json!({ "kernel": { "kind": "truncated_weierstrass", "dim": 1 }, "out": dir.path().join("cfg") }),
    );
    let env_dir = dir.path().join("env");
    let o = Command::new(BIN)
        .args(["moments", "--config"])
        .arg(&cfg)
        .env("NLHOMOG_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_dir.join("moments.json").exists());
    assert!(!dir.path().join("cfg").exists());

    let flag_dir = dir.path().join("flag");
    let o = Command::new(BIN)
        .args(["moments", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&flag_dir)
        .env("NLHOMOG_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag_dir.join("moments.json").exists());

    let o = Command::new(BIN).args(["moments", "--config"]).arg(&cfg).env_remove("NLHOMOG_OUT_DIR").output().unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("cfg").join("moments.json").exists());
}

#[test]
fn solve_and_fem_write_fields_with_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let datum = json!({ "kind": "gaussian", "amplitude": 1.0, "center": [0.0], "sigma": 0.5 });
    let s = json!({
        "kernel": box_kernel(), "medium": stripes(), "epsilon": 0.1, "nz": 16, "nt": 8,
        "t_final": 0.2, "box_lo": [-1.0], "box_hi": [1.0], "datum": datum, "frames": 4
    });
    let cfg = write_config(dir.path(), "s.json", &s);
    let out = dir.path().join("solve");
    let o = run("solve", &cfg, &out, &["--threads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_provenance(&out);
    let side = read_json(&out.join("trajectory.json"));
    let shape: Vec<u64> = side["shape"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    let bytes = fs::metadata(out.join("trajectory.bin")).unwrap().len();
    assert_eq!(bytes, 8 * shape.iter().product::<u64>());
    let range = read_json(&out.join("solve.json"))["range"].clone();
    assert!(range[0].as_f64().unwrap() >= 0.0 && range[1].as_f64().unwrap() <= 1.0);

    let f = json!({
        "kernel": box_kernel(), "medium": stripes(), "nz": 16, "nt": 8,
        "lower": -4.0, "upper": 4.0, "elements": 40, "dt": 0.1, "steps": 5, "datum": datum
    });
    let cfg = write_config(dir.path(), "f.json", &f);
    let out = dir.path().join("fem");
    let o = run("fem", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_provenance(&out);
    let csv = fs::read_to_string(out.join("u0_final.csv")).unwrap();
    assert_eq!(csv.lines().count(), 42);
}

#[test]
fn spde_paths_are_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let c = json!({
        "kernel": box_kernel(),
        "medium": {
            "case": "periodic-x-stationary-t", "values": [0.5, 2.0], "probs": [0.5, 0.5],
            "tile_size": 1.0, "seed": 13
        },
        "datum": { "kind": "gaussian", "amplitude": 1.0, "center": [0.0], "sigma": 0.3 },
        "epsilon": 0.1, "nz": 16, "nt": 8, "t_final": 0.2,
        "box_lo": -1.0, "box_hi": 1.0, "probes": [0.0, 0.5],
        "spde_paths": 20, "seed": 7, "ergodic_length": 200.0, "spde_nodes": 41
    });
    let cfg = write_config(dir.path(), "p.json", &c);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let s = dir.path().join("s");
    assert!(run("spde", &cfg, &a, &[]).status.success());
    assert!(run("spde", &cfg, &b, &[]).status.success());
    assert!(run("spde", &cfg, &s, &["--seed-override", "99"]).status.success());
    assert_provenance(&a);
    let csv = fs::read(a.join("spde_probes.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("spde_probes.csv")).unwrap());
    assert_ne!(csv, fs::read(s.join("spde_probes.csv")).unwrap());
    let pa = read_json(&a.join("manifest.json"))["provenance"].clone();
    let ps = read_json(&s.join("manifest.json"))["provenance"].clone();
    assert_eq!(ps["seeds"], json!({ "master": 99, "medium": 99 }));
    assert_ne!(pa["config_hash"], ps["config_hash"]);

    let mut bad = c.clone();
    bad["realizations"] = json!(10);
    let cfg = write_config(dir.path(), "bad.json", &bad);
    assert_eq!(run("spde", &cfg, &dir.path().join("x"), &[]).status.code(), Some(2));
}
