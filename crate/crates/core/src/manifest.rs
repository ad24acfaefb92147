//! Run manifest: one JSON file per run directory recording, for every
//! stage executed, the resolved configuration, content hashes of the
//! artifacts read and written, and wall-clock cost.
//!
//! The hashes are the reproducibility contract: re-running a stage with
//! the config snapshot from its manifest entry must reproduce every output
//! hash exactly (given the same thread count). Timestamps and wall-clock
//! are bookkeeping and are deliberately excluded from that contract.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "run-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One executed stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    /// Unix seconds when the stage finished.
    pub finished_unix: u64,
    pub wallclock_s: f64,
    /// The full resolved run configuration at execution time.
    pub config: serde_json::Value,
    /// Artifact path (relative to the run directory) → SHA-256 hex.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    /// Stage name → latest record for that stage.
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            stages: BTreeMap::new(),
        }
    }
}

impl RunManifest {
    pub fn path_in(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    /// Read the run's manifest, or start a fresh one if none exists yet.
    pub fn load_or_new(run_dir: &Path) -> Result<RunManifest> {
        let path = Self::path_in(run_dir);
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let text = std::fs::read_to_string(&path)?;
        let bad = |detail: String| Error::MalformedArtifact {
            path: path.display().to_string(),
            detail,
        };
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(bad(format!("format `{}` is not `{MANIFEST_FORMAT}`", m.format)));
        }
        if m.version != MANIFEST_VERSION {
            return Err(Error::FormatVersion {
                path: path.display().to_string(),
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    /// Hash the named artifacts and store the stage's record, then persist
    /// the manifest. Paths are stored relative to `run_dir` so manifests of
    /// two runs are comparable wherever the runs live.
    pub fn record_stage(
        &mut self,
        run_dir: &Path,
        stage: &str,
        config: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        wallclock_s: f64,
    ) -> Result<()> {
        let hash_all = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            let mut map = BTreeMap::new();
            for p in paths {
                let rel = p.strip_prefix(run_dir).unwrap_or(p);
                map.insert(rel.display().to_string(), sha256_hex(p)?);
            }
            Ok(map)
        };
        let record = StageRecord {
            finished_unix: SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs(),
            wallclock_s,
            config,
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
        };
        self.stages.insert(stage.to_string(), record);
        self.save(run_dir)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        let path = Self::path_in(run_dir);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Total recorded wall-clock of one stage, if it ran.
    pub fn wallclock_of(&self, stage: &str) -> Option<f64> {
        self.stages.get(stage).map(|s| s.wallclock_s)
    }
}

/// SHA-256 of a file's contents, lowercase hex.
pub fn sha256_hex(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| {
        Error::InvalidConfig(format!("cannot hash `{}`: {e}", path.display()))
    })?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        write!(hex, "{b:02x}").expect("writing to a String cannot fail");
    }
    Ok(hex)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_match_a_known_vector() {
        // SHA-256("abc") is the classic FIPS 180-2 test vector.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_hex(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn stages_round_trip_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("tasks").join("x.jsonl");
        std::fs::create_dir_all(artifact.parent().unwrap()).unwrap();
        std::fs::write(&artifact, "{}\n").unwrap();

        let mut m = RunManifest::load_or_new(dir.path()).unwrap();
        m.record_stage(
            dir.path(),
            "gen-tasks",
            serde_json::json!({"seed": 42}),
            &[],
            &[artifact.clone()],
            1.25,
        )
        .unwrap();

        let back = RunManifest::load_or_new(dir.path()).unwrap();
        assert_eq!(back, m);
        let rec = &back.stages["gen-tasks"];
        assert!(rec.outputs.contains_key("tasks/x.jsonl"), "{:?}", rec.outputs);
        assert_eq!(rec.wallclock_s, 1.25);

        // Identical content ⇒ identical hash, regardless of where it lives.
        let other = dir.path().join("elsewhere.jsonl");
        std::fs::write(&other, "{}\n").unwrap();
        assert_eq!(sha256_hex(&other).unwrap(), rec.outputs["tasks/x.jsonl"]);
    }

    #[test]
    fn unknown_versions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            RunManifest::path_in(dir.path()),
            r#"{"format":"run-manifest","version":99,"stages":{}}"#,
        )
        .unwrap();
        assert!(matches!(
            RunManifest::load_or_new(dir.path()),
            Err(Error::FormatVersion { found: 99, .. })
        ));
    }
}
