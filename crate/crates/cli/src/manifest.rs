//! Run manifests: the fully resolved spec of a command, written next to its
//! outputs and accepted back through `--config`.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST_FILE: &str = "manifest.json";

/// A problem with the user's configuration rather than with the run.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Serialize, Deserialize)]
pub struct Manifest<S> {
    pub command: String,
    pub version: String,
    pub spec: S,
    pub outputs: Vec<String>,
}

/// Reads a spec, unwrapping it from a manifest when the file is one.
pub fn load_spec<S: DeserializeOwned>(path: &Path, command: &str) -> Result<S> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let spec = match value {
        Value::Object(mut m) if m.contains_key("spec") && m.contains_key("command") => {
            let cmd = m.get("command").and_then(Value::as_str).unwrap_or_default().to_string();
            if cmd != command {
                return Err(config_error(format!(
                    "{} is a manifest for `{cmd}`, not `{command}`",
                    path.display()
                )));
            }
            m.remove("spec").unwrap_or(Value::Null)
        }
        v => v,
    };
    serde_json::from_value(spec).with_context(|| format!("reading the {command} spec in {}", path.display()))
}

pub fn write_manifest<S: Serialize>(out: &Path, command: &str, spec: &S, outputs: &[String]) -> Result<()> {
    let m = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        spec,
        outputs: outputs.to_vec(),
    };
    write_json(&out.join(MANIFEST_FILE), &m)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// Opens a CSV writer on `out/name`.
pub fn csv_writer(out: &Path, name: &str) -> Result<csv::Writer<fs::File>> {
    let path = out.join(name);
    csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))
}
