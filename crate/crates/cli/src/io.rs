//! JSONL artifacts with a schema header line, and per-stage run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use svllm_core::retrieval::transport::write_atomic;
use svllm_core::seed::sha256_hex;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, schema: &str, records: &[T]) -> Result<(), CliError> {
    let mut out = serde_json::to_string(&Header { schema: schema.into(), version: SCHEMA_VERSION }).expect("header");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(CliError::data)?);
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

/// Reads an artifact produced by stage `producer`; a missing file names
/// that stage.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: &str, producer: &str) -> Result<Vec<T>, CliError> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Data(format!("missing artifact {} (produced by `svllm {producer}`)", path.display()))
        } else {
            CliError::Data(format!("{}: {e}", path.display()))
        }
    })?;
    let mut lines = BufReader::new(file).lines();
    let header: Header = match lines.next() {
        Some(line) => serde_json::from_str(&line.map_err(CliError::data)?)
            .map_err(|e| CliError::Data(format!("{}: bad schema header: {e}", path.display())))?,
        None => return Err(CliError::Data(format!("{}: empty file", path.display()))),
    };
    if header.schema != schema || header.version != SCHEMA_VERSION {
        return Err(CliError::Data(format!(
            "{}: expected schema {schema} v{SCHEMA_VERSION}, found {} v{}",
            path.display(),
            header.schema,
            header.version
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(CliError::data)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 2)))?);
    }
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, producer: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Data(format!("missing artifact {} (produced by `svllm {producer}`)", path.display()))
        } else {
            CliError::Data(format!("{}: {e}", path.display()))
        }
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::data)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Digest of a file, or of a directory tree (sorted relative paths and file
/// digests). `None` when the path does not exist.
pub fn hash_path(path: &Path) -> Option<String> {
    let meta = fs::metadata(path).ok()?;
    if meta.is_file() {
        return fs::read(path).ok().map(sha256_hex);
    }
    let mut entries = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).ok()?.flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(bytes) = fs::read(&p) {
                let rel = p.strip_prefix(path).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                entries.push(format!("{rel}\t{}", sha256_hex(bytes)));
            }
        }
    }
    entries.sort();
    Some(sha256_hex(entries.join("\n")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub template_version: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, serde_json::Value>,
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn hashes(root: &Path, paths: &[PathBuf]) -> BTreeMap<String, String> {
    paths.iter().map(|p| (rel(root, p), hash_path(p).unwrap_or_else(|| "missing".into()))).collect()
}

impl Manifest {
    pub fn build(
        stage: &str,
        config_hash: &str,
        seed: u64,
        root: &Path,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        counts: BTreeMap<String, serde_json::Value>,
    ) -> Self {
        Self {
            stage: stage.into(),
            config_hash: config_hash.into(),
            seed,
            template_version: svllm_core::prompt::TEMPLATE_VERSION.into(),
            inputs: hashes(root, inputs),
            outputs: hashes(root, outputs),
            counts,
        }
    }

    /// True when a previous run used the same config and inputs and its
    /// outputs are still in place, unchanged.
    pub fn is_current(&self, config_hash: &str, root: &Path, inputs: &[PathBuf], outputs: &[PathBuf]) -> bool {
        self.config_hash == config_hash
            && self.inputs == hashes(root, inputs)
            && self.outputs == hashes(root, outputs)
            && !self.outputs.values().any(|h| h == "missing")
    }
}
