//! Run directory: every artifact goes here, indexed by `manifest.json`.

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub command: String,
    pub argv: Vec<String>,
    /// Effective settings after config-file and flag merging.
    pub config: Value,
    pub seeds: Value,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub generator: String,
    pub entries: Vec<Entry>,
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    /// Resolves an artifact name inside the run directory. Absolute paths
    /// and `..` are refused so nothing lands outside it.
    pub fn artifact_path(&self, name: &Path) -> Result<PathBuf, CliError> {
        let escapes = name.is_absolute()
            || name
                .components()
                .any(|c| matches!(c, Component::ParentDir | Component::Prefix(_)));
        if escapes || name.as_os_str().is_empty() {
            return Err(CliError::Argument(format!(
                "output name '{}' must be a relative path inside the run directory",
                name.display()
            )));
        }
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(path)
    }

    pub fn write(&self, name: &Path, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.artifact_path(name)?;
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn load_manifest(&self) -> Result<Manifest, CliError> {
        let path = self.root.join(MANIFEST);
        if !path.exists() {
            return Ok(Manifest {
                tool: "deeppce".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                generator: deeppce::rng::GENERATOR_NAME.into(),
                entries: Vec::new(),
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Appends one command's record to the manifest.
    pub fn record(&self, command: &str, config: Value, seeds: Value, written: &[PathBuf]) -> Result<(), CliError> {
        let mut manifest = self.load_manifest()?;
        let artifacts = written
            .iter()
            .map(|p| {
                let bytes = fs::metadata(p).map_err(|e| CliError::io(p, e))?.len();
                let rel = p.strip_prefix(&self.root).unwrap_or(p);
                Ok(Artifact {
                    path: rel.display().to_string(),
                    bytes,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        manifest.entries.push(Entry {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seeds,
            artifacts,
        });
        let text = serde_json::to_string_pretty(&manifest)?;
        let path = self.root.join(MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_escaping_names() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path()).unwrap();
        assert!(run.artifact_path(Path::new("../x")).is_err());
        assert!(run.artifact_path(Path::new("/tmp/x")).is_err());
        assert!(run.artifact_path(Path::new("a/b.json")).is_ok());
        assert!(dir.path().join("a").is_dir());
    }

    #[test]
    fn manifest_accumulates_entries() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path()).unwrap();
        let a = run.write(Path::new("a.txt"), b"hello").unwrap();
        run.record("one", Value::Null, serde_json::json!({"seed": 1}), &[a]).unwrap();
        run.record("two", Value::Null, Value::Null, &[]).unwrap();
        let m = run.load_manifest().unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].artifacts[0].bytes, 5);
        assert_eq!(m.entries[0].artifacts[0].path, "a.txt");
    }
}
