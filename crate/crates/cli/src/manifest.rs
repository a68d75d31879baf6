use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Record of one invocation: enough to rerun it and get the same bytes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub spec_path: String,
    pub spec_sha256: String,
    pub options: BTreeMap<String, Value>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, spec_path: &Path, spec_sha256: &str) -> Self {
        Self {
            command: command.to_string(),
            spec_path: spec_path.display().to_string(),
            spec_sha256: spec_sha256.to_string(),
            options: BTreeMap::new(),
            seed: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
        }
    }

    pub fn option(&mut self, name: &str, value: impl Serialize) -> &mut Self {
        self.options
            .insert(name.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Next to `out` as `<out>.manifest.json`, or on stderr without one.
    pub fn emit(&self, out: Option<&Path>) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        match out {
            Some(path) => std::fs::write(manifest_path(path), text)?,
            None => std::io::stderr().write_all(text.as_bytes())?,
        }
        Ok(())
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
