use std::path::{Path, PathBuf};

use protolab::agent::{load_checkpoint, CheckpointMeta, PolicyParams};
use protolab::experiment::{ExperimentConfig, Manifest};
use protolab::{Error, Result};

/// Output directory that records everything written into `manifest.json`.
pub struct OutDir {
    root: PathBuf,
    manifest: Manifest,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Manifest::default(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8], digest: Option<String>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.manifest.record(rel, bytes, digest);
        Ok(path)
    }

    pub fn write_json<T: serde::Serialize>(
        &mut self,
        rel: &str,
        value: &T,
        digest: Option<String>,
    ) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes(), digest)
    }

    pub fn finish(self) -> Result<()> {
        let mut text = self.manifest.to_json();
        text.push('\n');
        std::fs::write(self.root.join("manifest.json"), text)?;
        Ok(())
    }
}

pub const CHECKPOINT_EXT: &str = "ckpt";

fn collect(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect(&e, out)?;
        }
    } else if path.extension().is_some_and(|e| e == CHECKPOINT_EXT) {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Checkpoint files under the given files or directories, in sorted order.
pub fn find_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
        if p.is_file() {
            found.push(p.clone());
        } else {
            collect(p, &mut found)?;
        }
    }
    if found.is_empty() {
        return Err(Error::Config("no checkpoints found".into()));
    }
    Ok(found)
}

pub struct LoadedAgent {
    pub path: PathBuf,
    pub params: PolicyParams<f32>,
    pub meta: CheckpointMeta,
}

impl LoadedAgent {
    /// Name unique within one evaluation.
    pub fn label(&self, index: usize) -> String {
        let stem = self
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{index:02}_{stem}")
    }

    /// The experiment config saved next to the checkpoint, if any.
    pub fn config(&self) -> Option<ExperimentConfig> {
        let path = self.path.parent()?.join("config.toml");
        path.exists()
            .then(|| ExperimentConfig::load(&path).ok())
            .flatten()
    }
}

/// Loads every checkpoint and checks that they share dimensions.
pub fn load_agents(paths: &[PathBuf]) -> Result<Vec<LoadedAgent>> {
    let mut agents = Vec::new();
    for path in find_checkpoints(paths)? {
        let bytes = std::fs::read(&path)?;
        let (params, meta) = load_checkpoint(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        agents.push(LoadedAgent { path, params, meta });
    }
    let first = agents[0].params.config;
    for a in &agents[1..] {
        if a.params.config.classes != first.classes || a.params.config.vocab != first.vocab {
            return Err(Error::Checkpoint(format!(
                "{} has {} classes and {} symbols, {} has {} and {}",
                a.path.display(),
                a.params.config.classes,
                a.params.config.vocab,
                agents[0].path.display(),
                first.classes,
                first.vocab
            )));
        }
    }
    Ok(agents)
}
