//! `nlhomog`: batch front end for the homogenization laboratory.
//!
//! Each run reads one strict JSON config, writes its artifacts to an output
//! directory and exits 0, 2 on an invalid config, or 1 on a runtime failure.
//! The output directory is `--out`, else `$NLHOMOG_OUT_DIR`, else the config's
//! `out` field, else `./out`.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use config::FieldError;

pub const OUT_ENV: &str = "NLHOMOG_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration ({} problem(s))", .0.len())]
    Validation(Vec<FieldError>),
    #[error(transparent)]
    Core(#[from] nlhomog::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<Vec<FieldError>> for CliError {
    fn from(v: Vec<FieldError>) -> Self {
        CliError::Validation(v)
    }
}

#[derive(Parser, Debug)]
#[command(name = "nlhomog", version, about = "Nonlocal space-time homogenization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Recompute cell artifacts instead of reading or writing the cache.
    #[arg(long, global = true)]
    no_cache: bool,
    /// Replaces every seed in the config.
    #[arg(long, global = true, value_name = "N")]
    seed_override: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Kernel moments.
    Moments,
    /// Cell correctors, stored as binary fields.
    Corrector,
    /// Effective coefficients.
    Effective,
    /// March the scaled nonlocal problem.
    Solve,
    /// Convergence study over a list of ε.
    Study,
    /// Limit SPDE paths, optionally compared with the fluctuation ensemble.
    Spde,
    /// Two-scale finite elements.
    Fem,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Moments => "moments",
            Command::Corrector => "corrector",
            Command::Effective => "effective",
            Command::Solve => "solve",
            Command::Study => "study",
            Command::Spde => "spde",
            Command::Fem => "fem",
        }
    }
}

/// Everything a command needs besides its own fields.
pub struct Context {
    pub command: &'static str,
    pub config: Value,
    pub out: PathBuf,
    pub no_cache: bool,
}

fn output_dir(flag: Option<&Path>, config: Option<&Value>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    if let Some(s) = config.and_then(|c| c.get("out")).and_then(Value::as_str) {
        return PathBuf::from(s);
    }
    PathBuf::from("out")
}

pub(crate) fn bad(field: &str, message: impl Into<String>) -> CliError {
    CliError::Validation(vec![FieldError {
        field: field.into(),
        message: message.into(),
    }])
}

fn read_config(path: Option<&Path>) -> Result<Value, CliError> {
    let path = path.ok_or_else(|| bad("--config", "a config file is required"))?;
    let text = std::fs::read_to_string(path).map_err(|e| bad("--config", format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| bad("$", format!("malformed JSON: {e}")))
}

/// Replaces the medium seed and the top-level seed, where present.
fn override_seeds(config: &mut Value, seed: u64) {
    if let Some(m) = config.get_mut("seed") {
        *m = json!(seed);
    }
    if let Some(Value::Object(medium)) = config.get_mut("medium") {
        if medium.contains_key("seed") {
            medium.insert("seed".into(), json!(seed));
        }
    }
}

fn run(cli: &Cli, config: Value, out: PathBuf) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(bad("--threads", "must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| bad("--threads", e.to_string()))?;
    }
    let ctx = Context {
        command: cli.command.name(),
        config,
        out,
        no_cache: cli.no_cache,
    };
    match cli.command {
        Command::Moments => commands::moments(ctx),
        Command::Corrector => commands::corrector(ctx),
        Command::Effective => commands::effective(ctx),
        Command::Solve => commands::solve(ctx),
        Command::Study => commands::study(ctx),
        Command::Spde => commands::spde(ctx),
        Command::Fem => commands::fem(ctx),
    }
}

fn report_error(err: &CliError, out: &Path) -> ExitCode {
    let (code, body) = match err {
        CliError::Validation(errors) => (2, json!({ "error": "validation", "errors": errors })),
        other => (1, json!({ "error": "runtime", "message": other.to_string() })),
    };
    let text = serde_json::to_string_pretty(&body).unwrap_or_default();
    eprintln!("{text}");
    if std::fs::create_dir_all(out).is_ok() {
        let _ = std::fs::write(out.join("error.json"), format!("{text}\n"));
    }
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let raw = read_config(cli.config.as_deref());
    let out = output_dir(cli.out.as_deref(), raw.as_ref().ok());
    let result = raw.and_then(|mut config| {
        if let Some(seed) = cli.seed_override {
            override_seeds(&mut config, seed);
        }
        run(&cli, config, out.clone())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e, &out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_override_touches_only_existing_seeds() {
        let mut c = json!({"seed": 1, "medium": {"case": "periodic", "pattern": "constant"}});
        override_seeds(&mut c, 9);
        assert_eq!(c["seed"], 9);
        assert!(c["medium"].get("seed").is_none());
        let mut c = json!({"medium": {"seed": 3}});
        override_seeds(&mut c, 9);
        assert_eq!(c["medium"]["seed"], 9);
        assert!(c.get("seed").is_none());
    }

    #[test]
    fn flag_wins_over_config() {
        let c = json!({"out": "from-config"});
        assert_eq!(output_dir(Some(Path::new("flag")), Some(&c)), PathBuf::from("flag"));
    }
}
