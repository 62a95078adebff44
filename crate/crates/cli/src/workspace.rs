//! Run directories. All writes go to a sibling staging directory that
//! replaces the run directory by rename once the manifest describing it is
//! complete, so a run directory never lists files it does not hold.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    /// Hash of the settings and input files the phase consumed.
    pub key: String,
    pub outputs: Vec<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    /// The full configuration, every key explicit.
    pub config: String,
    /// Content hash of each generated dataset, by split name.
    pub dataset_fingerprint: BTreeMap<String, String>,
    pub phases: BTreeMap<String, PhaseRecord>,
    /// SHA-256 of every file in the run directory except the manifest.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(config: &ExperimentConfig) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.to_text(),
            dataset_fingerprint: BTreeMap::new(),
            phases: BTreeMap::new(),
            files: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(CliError::MissingArtifact(path));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash of a list of strings, for phase keys.
pub fn digest<S: AsRef<str>>(parts: &[S]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_ref().as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sibling(root: &Path, suffix: &str) -> PathBuf {
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let parent = root.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    parent.join(format!(".{name}.{suffix}"))
}

fn list_files(dir: &Path, prefix: &str, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name().to_string_lossy().into_owned();
        let rel = if prefix.is_empty() { name } else { format!("{prefix}/{name}") };
        if e.file_type()?.is_dir() {
            list_files(&e.path(), &rel, out)?;
        } else {
            out.push(rel);
        }
    }
    Ok(())
}

pub struct Workspace {
    root: PathBuf,
    staging: PathBuf,
    pub manifest: RunManifest,
}

impl Workspace {
    /// Opens `root` for writing. Files listed in an existing manifest are
    /// carried over when their hashes still match; phases that produced a
    /// missing or altered file are forgotten so they run again.
    pub fn open(root: &Path, config: &ExperimentConfig) -> Result<Self> {
        let staging = sibling(root, "staging");
        if staging.exists() {
            log::warn!("removing leftover staging directory {}", staging.display());
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        let mut manifest = RunManifest::new(config);
        if root.exists() {
            let has_manifest = root.join(MANIFEST).exists();
            if !has_manifest && fs::read_dir(root)?.next().is_some() {
                fs::remove_dir_all(&staging)?;
                return Err(CliError::NotARunDir(root.to_path_buf()));
            }
            if has_manifest {
                let old = RunManifest::load(root)?;
                manifest.dataset_fingerprint = old.dataset_fingerprint;
                let mut bad = Vec::new();
                for (rel, hash) in &old.files {
                    let src = root.join(rel);
                    if src.is_file() && sha256_file(&src)? == *hash {
                        let dst = staging.join(rel);
                        fs::create_dir_all(dst.parent().expect("relative path has a parent"))?;
                        if fs::hard_link(&src, &dst).is_err() {
                            fs::copy(&src, &dst)?;
                        }
                        manifest.files.insert(rel.clone(), hash.clone());
                    } else {
                        log::warn!("{} is missing or altered; its phase will run again", src.display());
                        bad.push(rel.clone());
                    }
                }
                for (name, rec) in old.phases {
                    if rec.outputs.iter().all(|o| !bad.contains(o)) {
                        manifest.phases.insert(name, rec);
                    } else {
                        // the whole phase reruns; drop its intact files too
                        for o in &rec.outputs {
                            if manifest.files.remove(o).is_some() {
                                fs::remove_file(staging.join(o))?;
                            }
                        }
                    }
                }
            }
        }
        Ok(Workspace {
            root: root.to_path_buf(),
            staging,
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Where a phase writes `rel`.
    pub fn path(&self, rel: &str) -> PathBuf {
        self.staging.join(rel)
    }

    /// `rel` as produced by an earlier phase, or an error naming it.
    pub fn require(&self, rel: &str) -> Result<PathBuf> {
        if self.manifest.files.contains_key(rel) {
            Ok(self.path(rel))
        } else {
            Err(CliError::MissingArtifact(self.root.join(rel)))
        }
    }

    /// Hashes of the recorded files under `prefix`, in path order.
    pub fn hashes_under(&self, prefix: &str) -> Vec<String> {
        self.manifest
            .files
            .iter()
            .filter(|(p, _)| p.starts_with(prefix))
            .map(|(p, h)| format!("{p}={h}"))
            .collect()
    }

    /// Whether `phase` already ran with this key.
    pub fn is_current(&self, phase: &str, key: &str) -> bool {
        self.manifest.phases.get(phase).is_some_and(|r| r.key == key)
    }

    /// Drops a phase's previous outputs before it runs again.
    pub fn begin(&mut self, phase: &str) -> Result<()> {
        if let Some(old) = self.manifest.phases.remove(phase) {
            for rel in old.outputs {
                self.manifest.files.remove(&rel);
                let p = self.path(&rel);
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
        }
        Ok(())
    }

    /// Records the files a phase wrote under each of `dirs` (relative
    /// directories or single files).
    pub fn record(&mut self, phase: &str, key: String, dirs: &[&str], seconds: f64) -> Result<()> {
        let mut outputs = Vec::new();
        for d in dirs {
            let p = self.path(d);
            if p.is_dir() {
                list_files(&p, d, &mut outputs)?;
            } else if p.is_file() {
                outputs.push(d.to_string());
            }
        }
        for rel in &outputs {
            let hash = sha256_file(&self.path(rel))?;
            self.manifest.files.insert(rel.clone(), hash);
        }
        self.manifest.phases.insert(
            phase.to_string(),
            PhaseRecord {
                key,
                outputs,
                seconds,
            },
        );
        Ok(())
    }

    /// Publishes the staging directory as the run directory.
    pub fn commit(&mut self) -> Result<()> {
        self.publish()?;
        // continue in a fresh staging copy
        fs::create_dir_all(&self.staging)?;
        for rel in self.manifest.files.keys() {
            let (src, dst) = (self.root.join(rel), self.staging.join(rel));
            fs::create_dir_all(dst.parent().expect("relative path has a parent"))?;
            if fs::hard_link(&src, &dst).is_err() {
                fs::copy(&src, &dst)?;
            }
        }
        Ok(())
    }

    fn publish(&mut self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&self.staging.join(MANIFEST), json.as_bytes())?;
        let old = sibling(&self.root, "old");
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        if self.root.exists() {
            fs::rename(&self.root, &old)?;
        }
        fs::rename(&self.staging, &self.root)?;
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.publish()?;
        Ok(self.manifest.clone())
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        // an abandoned staging directory is harmless but untidy
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    #[test]
    fn commit_publishes_and_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let mut ws = Workspace::open(&root, &cfg()).unwrap();
        ws.begin("p").unwrap();
        write_atomic(&ws.path("a/x.txt"), b"hello").unwrap();
        ws.record("p", "k1".into(), &["a"], 0.0).unwrap();
        let m = ws.finish().unwrap();
        assert_eq!(m.files.len(), 1);
        assert_eq!(fs::read(root.join("a/x.txt")).unwrap(), b"hello");
        assert_eq!(RunManifest::load(&root).unwrap(), m);
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("run")]);
    }

    #[test]
    fn altered_files_invalidate_their_phase() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let mut ws = Workspace::open(&root, &cfg()).unwrap();
        write_atomic(&ws.path("a.txt"), b"1").unwrap();
        ws.record("first", "k".into(), &["a.txt"], 0.0).unwrap();
        write_atomic(&ws.path("b.txt"), b"2").unwrap();
        ws.record("second", "k".into(), &["b.txt"], 0.0).unwrap();
        ws.finish().unwrap();

        fs::write(root.join("b.txt"), b"tampered").unwrap();
        let ws = Workspace::open(&root, &cfg()).unwrap();
        assert!(ws.is_current("first", "k"));
        assert!(!ws.is_current("second", "k"));
        assert!(ws.require("a.txt").is_ok());
        assert!(ws.path("a.txt").exists() && !ws.path("b.txt").exists());
        let err = ws.require("b.txt").unwrap_err();
        assert!(err.to_string().contains("b.txt"));
    }

    #[test]
    fn foreign_directories_are_left_alone() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("precious.txt"), b"x").unwrap();
        let err = Workspace::open(dir.path(), &cfg()).err().unwrap();
        assert!(matches!(err, CliError::NotARunDir(_)));
        assert!(dir.path().join("precious.txt").exists());
    }

    #[test]
    fn unfinished_work_never_reaches_the_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        {
            let ws = Workspace::open(&root, &cfg()).unwrap();
            write_atomic(&ws.path("half.txt"), b"...").unwrap();
            // dropped without commit, as after a failure
        }
        assert!(!root.exists());
    }
}
