//! Run manifests and output validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST_FORMAT: &str = "harmonize-run";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// `manifest.json` of a non-dataset run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub files: Vec<FileEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Hash of every file below `dir`, visited in sorted relative-path order.
pub fn sha256_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(std::fs::read(dir.join(&rel)).with_context(|| format!("reading {rel}"))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("below root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Check that written outputs parse back: JSON files as JSON, CSV files as
/// rectangular tables with the expected header.
pub fn validate_output(path: &Path, csv_header: Option<&str>) -> Result<()> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("re-reading {}", path.display()))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            serde_json::from_str::<serde_json::Value>(&text)
                .with_context(|| format!("{} is not valid JSON", path.display()))?;
        }
        Some("csv") => {
            let mut lines = text.lines();
            let header = lines
                .next()
                .with_context(|| format!("{} is empty", path.display()))?;
            if let Some(expected) = csv_header {
                if header != expected {
                    bail!(
                        "{} has header {header:?}, expected {expected:?}",
                        path.display()
                    );
                }
            }
            let cols = header.split(',').count();
            for (i, line) in lines.enumerate() {
                if line.split(',').count() != cols {
                    bail!(
                        "{} row {} has the wrong number of columns",
                        path.display(),
                        i + 1
                    );
                }
            }
        }
        _ => {}
    }
    Ok(())
}

/// Write `manifest.json` listing `files` (relative to `dir`) with their hashes.
pub fn finish_run(
    dir: &Path,
    command: &str,
    seed: u64,
    files: &[PathBuf],
    notes: BTreeMap<String, String>,
) -> Result<RunManifest> {
    let mut entries = Vec::new();
    for f in files {
        let full = dir.join(f);
        let meta = std::fs::metadata(&full)
            .with_context(|| format!("missing output {}", full.display()))?;
        let sha256 = if meta.is_dir() {
            sha256_dir(&full)?
        } else {
            sha256_file(&full)?
        };
        let bytes = if meta.is_dir() { 0 } else { meta.len() };
        entries.push(FileEntry {
            path: f.to_string_lossy().replace('\\', "/"),
            bytes,
            sha256,
        });
    }
    let manifest = RunManifest {
        format: RUN_MANIFEST_FORMAT.into(),
        schema_version: 1,
        command: command.into(),
        seed,
        files: entries,
        notes,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if back != manifest {
        bail!("run manifest did not read back identically");
    }
    Ok(manifest)
}
