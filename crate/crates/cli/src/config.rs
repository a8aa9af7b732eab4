//! Run configuration: a JSON file overlaid by explicit flags, resolved into
//! a typed struct and written beside the outputs.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

pub fn fail(msg: impl Into<String>) -> CliError {
    CliError { code: 1, msg: msg.into() }
}

impl From<utg_core::Error> for CliError {
    fn from(e: utg_core::Error) -> Self {
        let code = if matches!(e, utg_core::Error::Divergence { .. }) { 2 } else { 1 };
        CliError { code, msg: e.to_string() }
    }
}

impl From<utg_service::ModelError> for CliError {
    fn from(e: utg_service::ModelError) -> Self {
        match e {
            utg_service::ModelError::Core(c) => c.into(),
            other => fail(other.to_string()),
        }
    }
}

impl From<utg_service::StoreError> for CliError {
    fn from(e: utg_service::StoreError) -> Self {
        fail(e.to_string())
    }
}

/// Overlays the non-null fields of `flags` on the object in `config` and
/// deserializes the result.
pub fn resolve<R: DeserializeOwned>(config: Option<&Path>, flags: &impl Serialize) -> CliResult<R> {
    let mut merged = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(fail(format!("{}: config must be a JSON object", path.display()))),
                Err(e) => return Err(fail(format!("{}: {e}", path.display()))),
            }
        }
        None => Map::new(),
    };
    if let Value::Object(over) = serde_json::to_value(flags).map_err(|e| fail(e.to_string()))? {
        merged.extend(over.into_iter().filter(|(_, v)| !v.is_null()));
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| {
        let origin = config.map_or("flags".to_string(), |p| format!("{} and flags", p.display()));
        fail(format!("{origin}: {e}"))
    })
}

/// Absolute form of `p` without touching the filesystem.
pub fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Absolute path of a file that must exist; `what` names it in the error.
pub fn existing(p: &Path, what: &str) -> CliResult<PathBuf> {
    if p.exists() {
        Ok(absolute(p))
    } else {
        Err(fail(format!("{what} file {} not found", p.display())))
    }
}

/// The given seed, or one drawn from the clock when absent.
pub fn seed_or_fresh(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64)
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| fail(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| fail(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| fail(format!("{}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| fail(format!("{}: {e}", dir.display())))
}

/// `m.utgm` -> `m.<suffix>` in the same directory.
pub fn sidecar(model: &Path, suffix: &str) -> PathBuf {
    model.with_extension(suffix)
}
