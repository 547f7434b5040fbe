//! `manifest.json`: one per output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{read_json, sha256_file, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<FileDigest>,
    pub decisions: BTreeMap<String, serde_json::Value>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn read(dir: &Path) -> CliResult<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }
}

/// If `path` was written by an earlier run whose manifest sits next to it,
/// its current digest must match the recorded one.
pub fn verify_upstream(path: &Path) -> CliResult<Option<String>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Ok(None);
    }
    let m: RunManifest = read_json(&mpath)?;
    let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
        return Ok(None);
    };
    let Some(rec) = m.outputs.iter().find(|o| o.path == name) else {
        return Ok(None);
    };
    let now = sha256_file(path)?;
    if now != rec.sha256 {
        return Err(CliError::Integrity {
            path: path.to_path_buf(),
            msg: format!("digest {now} does not match {} recorded in {}", rec.sha256, mpath.display()),
        });
    }
    Ok(Some(now))
}

/// Rechecks every output listed in `dir/manifest.json`.
pub fn verify_dir(dir: &Path) -> CliResult<usize> {
    let m = RunManifest::read(dir)?;
    for o in &m.outputs {
        let p = dir.join(&o.path);
        let now = sha256_file(&p)?;
        if now != o.sha256 {
            return Err(CliError::Integrity {
                path: p,
                msg: format!("digest {now} does not match recorded {}", o.sha256),
            });
        }
    }
    Ok(m.outputs.len())
}

pub struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    config: RunConfig,
    inputs: Vec<FileDigest>,
    decisions: BTreeMap<String, serde_json::Value>,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            inputs: Vec::new(),
            decisions: BTreeMap::new(),
            start: Instant::now(),
        }
    }

    /// Records an input file, checking it against its upstream manifest.
    pub fn input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        if !path.is_file() {
            return Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")));
        }
        let sha256 = match verify_upstream(path)? {
            Some(d) => d,
            None => sha256_file(path)?,
        };
        self.inputs.push(FileDigest { role: role.into(), path: path.display().to_string(), sha256 });
        Ok(())
    }

    pub fn decision(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.decisions.insert(key.to_string(), v);
    }

    /// Digests `outputs` (files inside `dir`) and writes the manifest.
    pub fn finish(self, dir: &Path, outputs: &[(&str, PathBuf)]) -> CliResult<RunManifest> {
        let mut out = Vec::with_capacity(outputs.len());
        for (role, p) in outputs {
            let rel = p.strip_prefix(dir).unwrap_or(p);
            out.push(FileDigest {
                role: role.to_string(),
                path: rel.display().to_string(),
                sha256: sha256_file(p)?,
            });
        }
        let m = RunManifest {
            tool: "susmap".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command,
            seed: self.seed,
            threads: rayon::current_num_threads(),
            config: self.config,
            inputs: self.inputs,
            outputs: out,
            decisions: self.decisions,
            wall_clock_secs: self.start.elapsed().as_secs_f64(),
        };
        write_json(&dir.join(MANIFEST_FILE), &m)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutation_of_a_recorded_output_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.csv");
        std::fs::write(&f, "x\n1\n").unwrap();
        let cfg = RunConfig::default();
        ManifestBuilder::new("test", &cfg).finish(dir.path(), &[("a", f.clone())]).unwrap();
        assert_eq!(verify_dir(dir.path()).unwrap(), 1);
        let mut b = ManifestBuilder::new("next", &cfg);
        b.input("a", &f).unwrap();

        std::fs::write(&f, "x\n2\n").unwrap();
        assert!(matches!(verify_dir(dir.path()), Err(CliError::Integrity { .. })));
        let mut b = ManifestBuilder::new("next", &cfg);
        let e = b.input("a", &f).unwrap_err();
        assert_eq!(e.exit_code(), crate::error::exit::INTEGRITY);
    }

    #[test]
    fn missing_input_names_the_path() {
        let mut b = ManifestBuilder::new("x", &RunConfig::default());
        let e = b.input("units", Path::new("/nonexistent/units.csv")).unwrap_err();
        assert!(e.record().contains("/nonexistent/units.csv"));
        assert_eq!(e.exit_code(), crate::error::exit::IO);
    }
}
