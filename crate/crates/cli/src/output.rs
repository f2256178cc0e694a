//! Artifact writer: every file it emits carries the run's provenance.

use std::path::{Path, PathBuf};

use nlhomog::io;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub struct Output {
    pub dir: PathBuf,
    pub provenance: Value,
    artifacts: Vec<(String, String)>,
}

impl Output {
    pub fn new(dir: PathBuf, provenance: Value) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir)?;
        Ok(Output {
            dir,
            provenance,
            artifacts: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, path: &Path) -> Result<String, CliError> {
        let hash = file_hash(path)?;
        let name = path.strip_prefix(&self.dir).unwrap_or(path).to_string_lossy().replace('\\', "/");
        self.artifacts.push((name, hash.clone()));
        Ok(hash)
    }

    /// Pretty JSON with a `provenance` block merged in (non-object values are wrapped).
    pub fn json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<PathBuf, CliError> {
        let mut v = serde_json::to_value(value)?;
        if !v.is_object() {
            v = json!({ "value": v });
        }
        if let Value::Object(m) = &mut v {
            m.entry("provenance").or_insert_with(|| self.provenance.clone());
        }
        let path = self.path(name);
        io::write_json(&path, &v)?;
        self.record(&path)?;
        Ok(path)
    }

    /// RFC-4180 CSV plus `<name>.provenance.json` naming the CSV and its hash.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        io::write_csv(&path, header, rows)?;
        let hash = self.record(&path)?;
        let side = self.path(&format!("{name}.provenance.json"));
        io::write_json(&side, &json!({ "artifact": name, "sha256": hash, "provenance": self.provenance }))?;
        self.record(&side)?;
        Ok(path)
    }

    /// Binary field with a sidecar; `write(base, meta)` receives the provenance as meta.
    pub fn field<F>(&mut self, name: &str, extra: Value, write: F) -> Result<(PathBuf, String), CliError>
    where
        F: FnOnce(&Path, Value) -> nlhomog::Result<(PathBuf, PathBuf)>,
    {
        let base = self.path(name);
        let meta = json!({ "provenance": self.provenance, "content": extra });
        let (bin, side) = write(&base, meta)?;
        // Some writers nest the caller's meta; keep provenance at a fixed place.
        let mut sidecar: io::Sidecar = serde_json::from_slice(&std::fs::read(&side)?)?;
        if let Value::Object(m) = &mut sidecar.meta {
            if !m.contains_key("provenance") {
                m.insert("provenance".into(), self.provenance.clone());
                io::write_json(&side, &sidecar)?;
            }
        }
        let hash = self.record(&bin)?;
        self.record(&side)?;
        Ok((bin, hash))
    }

    /// Writes `manifest.json` listing every artifact with its SHA-256.
    pub fn finish(mut self) -> Result<Vec<(String, String)>, CliError> {
        let list: Vec<Value> = self.artifacts.iter().map(|(f, h)| json!({ "file": f, "sha256": h })).collect();
        let path = self.path("manifest.json");
        io::write_json(&path, &json!({ "provenance": self.provenance, "artifacts": list }))?;
        self.artifacts.push(("manifest.json".into(), file_hash(&path)?));
        Ok(self.artifacts)
    }
}
