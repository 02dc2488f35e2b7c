//! Run manifests and the stamp every output file carries.
//!
//! Each subcommand writes a `manifest.json` describing the run: tool
//! version, effective configuration, applied overrides, and SHA-256 hashes
//! of the inputs it read. The manifest hash covers tool version, config,
//! and input hashes (not the subcommand name), so every stage run against
//! the same setup stamps its outputs with the same value and downstream
//! stages can refuse mixed inputs.

use std::collections::BTreeMap;
use std::path::Path;

use adaptstress::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

/// Hashes every regular file directly inside `dir`, keyed by file name.
pub fn hash_dir(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let entries =
        std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    for path in paths {
        let name = path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        out.insert(name, hash_file(&path)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: RunConfig,
    pub overrides: Vec<String>,
    pub input_hashes: BTreeMap<String, String>,
    pub manifest_hash: String,
}

#[derive(Serialize)]
struct HashBasis<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    input_hashes: &'a BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(
        command: &str,
        config: &RunConfig,
        overrides: Vec<String>,
        input_hashes: BTreeMap<String, String>,
    ) -> Manifest {
        let tool = "adaptstress";
        let version = env!("CARGO_PKG_VERSION");
        let basis = HashBasis {
            tool,
            version,
            config,
            input_hashes: &input_hashes,
        };
        let manifest_hash =
            sha256_hex(serde_json::to_string(&basis).expect("manifest basis").as_bytes());
        Manifest {
            tool,
            version,
            command: command.to_string(),
            config: config.clone(),
            overrides,
            input_hashes,
            manifest_hash,
        }
    }

    /// Writes `manifest.json` into the run's output directory.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("manifest.json"), self)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    manifest_hash: &'a str,
    #[serde(flatten)]
    payload: &'a T,
}

/// Writes a JSON file whose top level carries the manifest hash alongside
/// the payload's own fields.
pub fn write_stamped_json<T: Serialize>(path: &Path, hash: &str, payload: &T) -> Result<()> {
    write_json(
        path,
        &Stamped {
            manifest_hash: hash,
            payload,
        },
    )
}

/// Appends the manifest stamp to CSV (or JSONL) text as a comment line.
pub fn stamp_text(text: &mut String, hash: &str) {
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(&format!("# manifest_hash={hash}\n"));
}

pub fn write_stamped_text(path: &Path, hash: &str, text: &str) -> Result<()> {
    let mut text = text.to_string();
    stamp_text(&mut text, hash);
    write_text(path, &text)
}

/// Appends the stamp comment to an existing line-oriented file, creating it
/// when absent.
pub fn append_stamp(path: &Path, hash: &str) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(file, "# manifest_hash={hash}")
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a stamped JSON file, returning the payload and its embedded hash.
pub fn read_stamped_json(path: &Path) -> Result<(serde_json::Value, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Schema {
        file: path.display().to_string(),
        message: format!("bad JSON: {e}"),
    })?;
    let hash = value
        .get("manifest_hash")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Schema {
            file: path.display().to_string(),
            message: "missing manifest_hash".into(),
        })?
        .to_string();
    Ok((value, hash))
}

/// Extracts the stamp from text written by [`write_stamped_text`].
pub fn read_text_stamp(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix("# manifest_hash="))
        .map(str::to_string)
        .ok_or_else(|| Error::Schema {
            file: path.display().to_string(),
            message: "missing manifest_hash stamp".into(),
        })
}
