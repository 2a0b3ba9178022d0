//! Content-addressed stage directories `<out>/<stage>/<config-hash>/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ldznet::checkpoint::{file_hash, read_json, sha256_hex, write_json};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{RunError, RunResult};

pub const RUN_FILE: &str = "run.json";

/// Identity of a stage run: its resolved config plus upstream keys.
#[derive(Clone, Debug, PartialEq)]
pub struct StageKey {
    pub stage: String,
    pub config: Value,
    pub upstream: BTreeMap<String, String>,
    pub hash: String,
}

impl StageKey {
    pub fn new<C: Serialize>(stage: &str, config: &C, upstream: &[&StageKey]) -> StageKey {
        let config = serde_json::to_value(config).expect("config serializes");
        let upstream: BTreeMap<String, String> = upstream.iter().map(|k| (k.stage.clone(), k.hash.clone())).collect();
        let canon = serde_json::json!({ "stage": stage, "config": config, "upstream": upstream });
        let hash = sha256_hex(canon.to_string().as_bytes())[..16].to_string();
        StageKey { stage: stage.to_string(), config, upstream, hash }
    }

    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join(&self.stage).join(&self.hash)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpstreamRef {
    pub config_hash: String,
    pub output_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub stage: String,
    pub config_hash: String,
    pub config: Value,
    pub upstream: BTreeMap<String, UpstreamRef>,
    pub wall_clock_s: f64,
    pub output_sha256: String,
    pub summary: Value,
    pub tool: String,
}

/// A finished, hash-verified stage directory.
#[derive(Clone, Debug)]
pub struct Artifact {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Artifact {
    pub fn upstream_ref(&self) -> UpstreamRef {
        UpstreamRef { config_hash: self.manifest.config_hash.clone(), output_sha256: self.manifest.output_sha256.clone() }
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> RunResult<()> {
    let entries = std::fs::read_dir(dir).map_err(ldznet::error::io_err(dir))?;
    for e in entries {
        let e = e.map_err(ldznet::error::io_err(dir))?;
        let p = e.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.strip_prefix(root).map(|r| r != Path::new(RUN_FILE)).unwrap_or(true) {
            out.push(p);
        }
    }
    Ok(())
}

/// Hash over every file below `dir` except the run manifest, in path order.
pub fn output_hash(dir: &Path) -> RunResult<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut listing = String::new();
    for f in files {
        let rel = f.strip_prefix(dir).expect("below dir").to_string_lossy().replace('\\', "/");
        listing.push_str(&format!("{rel}\0{}\n", file_hash(&f)?));
    }
    Ok(sha256_hex(listing.as_bytes()))
}

/// Opens a finished stage and checks its outputs against the manifest.
pub fn open(out: &Path, key: &StageKey) -> RunResult<Artifact> {
    let dir = key.dir(out);
    let run = dir.join(RUN_FILE);
    if !run.exists() {
        return Err(RunError::MissingArtifact { stage: key.stage.clone(), path: dir, expected: key.hash.clone() });
    }
    let manifest: RunManifest = read_json(&run)?;
    if manifest.config_hash != key.hash {
        return Err(RunError::HashMismatch { what: format!("{} config", key.stage), expected: key.hash.clone(), found: manifest.config_hash });
    }
    let found = output_hash(&dir)?;
    if found != manifest.output_sha256 {
        return Err(RunError::HashMismatch { what: format!("{} outputs in {}", key.stage, dir.display()), expected: manifest.output_sha256, found });
    }
    Ok(Artifact { dir, manifest })
}

pub fn exists(out: &Path, key: &StageKey) -> bool {
    key.dir(out).join(RUN_FILE).exists()
}

/// Seals a stage directory by writing its run manifest last.
pub fn finish(
    key: &StageKey,
    dir: &Path,
    command: &str,
    upstream: &[&Artifact],
    wall_clock_s: f64,
    summary: Value,
) -> RunResult<Artifact> {
    let manifest = RunManifest {
        command: command.to_string(),
        stage: key.stage.clone(),
        config_hash: key.hash.clone(),
        config: key.config.clone(),
        upstream: upstream.iter().map(|a| (a.manifest.stage.clone(), a.upstream_ref())).collect(),
        wall_clock_s,
        output_sha256: output_hash(dir)?,
        summary,
        tool: format!("ldznet-runner {}", env!("CARGO_PKG_VERSION")),
    };
    write_json(&dir.join(RUN_FILE), &manifest)?;
    Ok(Artifact { dir: dir.to_path_buf(), manifest })
}

/// Fresh working directory for `key` (any unfinished leftovers are kept so
/// restartable stages can resume).
pub fn prepare_dir(out: &Path, key: &StageKey) -> RunResult<PathBuf> {
    let dir = key.dir(out);
    std::fs::create_dir_all(&dir).map_err(ldznet::error::io_err(&dir))?;
    write_json(&dir.join("config.json"), &key.config)?;
    Ok(dir)
}
