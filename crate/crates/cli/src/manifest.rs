//! Per-stage provenance records.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rethead_core::seed::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

pub const FILE: &str = "run-manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub stage: String,
    pub code_version: String,
    /// Hash of the configuration sections the stage reads.
    pub config_hash: String,
    /// Upstream artifacts, relative to the run directory, with content hashes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Only present when timing was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Option<Self> {
        let bytes = fs::read(dir.join(FILE)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        fs::write(dir.join(FILE), json)?;
        Ok(())
    }

    /// Same stage, configuration and inputs.
    pub fn matches(&self, config_hash: &str, inputs: &BTreeMap<String, String>) -> bool {
        self.config_hash == config_hash
            && &self.inputs == inputs
            && self.code_version == env!("CARGO_PKG_VERSION")
    }
}

pub fn file_hash(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Content hashes of every file under `dir` except the manifest, keyed by
/// relative path with `/` separators.
pub fn hash_tree(dir: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    out.remove(FILE);
    Ok(out)
}

fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> CliResult<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.insert(key, file_hash(&path)?);
        }
    }
    Ok(())
}
