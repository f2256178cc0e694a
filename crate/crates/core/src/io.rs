//! On-disk formats: little-endian `f64` field files with JSON sidecars, RFC-4180 CSV
//! and pretty JSON.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::limit::{LocalSolution, SpdePath};
use crate::nonlocal::Trajectory;
use crate::{Error, Real, Result};

/// Sidecar describing a binary field file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub file: String,
    pub dtype: String,
    /// Row-major shape; the first axis is time when `times` is present.
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    #[serde(default)]
    pub meta: Value,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

/// Writes `<base>.bin` and `<base>.json`; returns the two paths.
pub fn write_field(base: &Path, data: &[f64], shape: &[usize], times: Option<Vec<f64>>, meta: Value) -> Result<(PathBuf, PathBuf)> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Config(format!("field of {} values does not have shape {shape:?}", data.len())));
    }
    let bin = base.with_extension("bin");
    let json = base.with_extension("json");
    ensure_parent(&bin)?;
    let mut w = BufWriter::new(fs::File::create(&bin)?);
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let side = Sidecar {
        file: bin.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        dtype: "f64-le".into(),
        shape: shape.to_vec(),
        times,
        meta,
    };
    write_json(&json, &side)?;
    Ok((bin, json))
}

/// Reads a field written by [`write_field`] given either of its two paths.
pub fn read_field(path: &Path) -> Result<(Vec<f64>, Sidecar)> {
    let side: Sidecar = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
    let bytes = fs::read(path.with_extension("bin"))?;
    if bytes.len() != 8 * side.shape.iter().product::<usize>() {
        return Err(Error::Config(format!("{} does not match its sidecar shape", path.display())));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((data, side))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// CSV with a header row; floats use the shortest round-trip representation.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(
            rec.iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad CSV number {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((header, rows))
}

fn stack<T: Real>(frames: &[Vec<T>]) -> Vec<f64> {
    frames.iter().flatten().map(|v| v.f64()).collect()
}

pub fn save_trajectory<T: Real>(base: &Path, traj: &Trajectory<T>, meta: Value) -> Result<(PathBuf, PathBuf)> {
    let mut shape = vec![traj.frames.len()];
    shape.extend(traj.grid.shape());
    let times = traj.times().iter().map(|t| t.f64()).collect();
    let meta = serde_json::json!({
        "grid": {
            "eps": traj.grid.eps.f64(), "nz": traj.grid.nz, "nt": traj.grid.nt,
            "lower": traj.grid.lower, "cells": traj.grid.cells, "steps": traj.grid.steps
        },
        "p": traj.p.f64(), "extension": traj.extension, "extra": meta });
    write_field(base, &stack(&traj.frames), &shape, Some(times), meta)
}

pub fn save_local<T: Real>(base: &Path, sol: &LocalSolution<T>, meta: Value) -> Result<(PathBuf, PathBuf)> {
    let mut shape = vec![sol.frames.len()];
    shape.extend(sol.grid.n.iter().copied());
    let times = sol.times.iter().map(|t| t.f64()).collect();
    let meta = serde_json::json!({
        "grid": {
            "lower": sol.grid.lower.iter().map(|v| v.f64()).collect::<Vec<_>>(),
            "h": sol.grid.h.f64(), "n": sol.grid.n, "tau": sol.grid.tau.f64(), "steps": sol.grid.steps
        },
        "scheme": sol.scheme, "coefficients": sol.coefficients, "extra": meta
    });
    write_field(base, &stack(&sol.frames), &shape, Some(times), meta)
}

pub fn save_spde<T: Real>(base: &Path, path: &SpdePath<T>, grid_shape: &[usize], meta: Value) -> Result<(PathBuf, PathBuf)> {
    let mut shape = vec![path.frames.len()];
    shape.extend(grid_shape.iter().copied());
    let times = path.times.iter().map(|t| t.f64()).collect();
    let meta = serde_json::json!({ "seed": path.seed, "stream": path.stream, "extra": meta });
    write_field(base, &stack(&path.frames), &shape, Some(times), meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("f");
        let data = vec![1.0, -2.5, 3.25, 1e-300, f64::MAX, 0.0];
        write_field(&base, &data, &[2, 3], Some(vec![0.0, 0.5]), Value::Null).unwrap();
        let (back, side) = read_field(&base.with_extension("bin")).unwrap();
        assert_eq!(back, data);
        assert_eq!(side.shape, vec![2, 3]);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, &["a", "b"], &[vec![0.1, 2.0], vec![1e-17, -3.5]]).unwrap();
        let (h, rows) = read_csv(&p).unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(rows[1][0], 1e-17);
    }
}
