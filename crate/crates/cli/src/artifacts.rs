//! Atomic artifact writes and the run manifest that makes every invocation
//! replayable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// A file produced in memory and written only once the command succeeds.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) -> Self {
        Artifact { path: path.into(), bytes: bytes.into() }
    }
}

/// Everything a subcommand hands back to the driver.
#[derive(Debug, Default)]
pub struct Run {
    /// Every parameter that affects the outputs, defaults included.
    pub params: BTreeMap<String, serde_json::Value>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<Artifact>,
    /// Files the command wrote itself (the activation cache): the path
    /// recorded in the manifest and where the bytes actually are.
    pub side_outputs: Vec<(PathBuf, PathBuf)>,
    pub messages: Vec<String>,
    /// A check that failed after the artifacts were produced; they are still
    /// written so the failure can be inspected.
    pub failure: Option<CliError>,
}

impl Run {
    pub fn param(&mut self, key: &str, value: impl Serialize) {
        self.params.insert(key.into(), serde_json::to_value(value).expect("parameter serializes"));
    }

    pub fn say(&mut self, line: impl Into<String>) {
        self.messages.push(line.into());
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let name = path.file_name().ok_or_else(|| CliError::invalid(format!("`{}` is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::io(path, e)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Arguments after the program name, exactly as given. Paths are
    /// relative to the directory the command ran in.
    pub argv: Vec<String>,
    pub params: BTreeMap<String, serde_json::Value>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(subcommand: &str, argv: Vec<String>, run: &Run) -> Result<Self, CliError> {
        let inputs = run.inputs.iter().map(|p| digest_file(p, p)).collect::<Result<_, _>>()?;
        let mut outputs: Vec<FileDigest> = run
            .outputs
            .iter()
            .map(|a| FileDigest { path: a.path.clone(), sha256: sha256_hex(&a.bytes), bytes: a.bytes.len() as u64 })
            .collect();
        for (logical, actual) in &run.side_outputs {
            outputs.push(digest_file(logical, actual)?);
        }
        Ok(Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            argv,
            params: run.params.clone(),
            seeds: run.seeds.clone(),
            inputs,
            outputs,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let m: Manifest =
            serde_json::from_str(text).map_err(|e| CliError::invalid(format!("cannot parse manifest: {e}")))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(CliError::invalid(format!("unsupported manifest schema version {}", m.schema_version)));
        }
        Ok(m)
    }
}

fn digest_file(logical: &Path, actual: &Path) -> Result<FileDigest, CliError> {
    let bytes = fs::read(actual).map_err(|e| CliError::io(actual, e))?;
    Ok(FileDigest { path: logical.to_path_buf(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 })
}

/// Default manifest location: next to the first output, e.g. `plan.json`
/// gets `plan.manifest.json`.
pub fn default_manifest_path(first_output: &Path) -> PathBuf {
    first_output.with_extension("manifest.json")
}
