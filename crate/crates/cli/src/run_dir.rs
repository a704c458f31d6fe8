//! Layout of a run directory and its manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use meda_core::datasets::{load_archive, save_archive, ImageShape, LabeledImageSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORTS_FILE: &str = "reports.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// Which prepared split a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub data_hash: String,
    pub class_count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub minority_classes: Vec<usize>,
    pub train_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
    pub test_counts: Option<Vec<usize>>,
    /// Source indices of the training and validation samples.
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Relative path → digest of every file a command wrote.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl Manifest {
    pub fn shape(&self) -> ImageShape {
        ImageShape {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    pub fn minority_mask(&self) -> Vec<bool> {
        (0..self.class_count)
            .map(|c| self.minority_classes.contains(&c))
            .collect()
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn ensure(&self, rel_dir: &str) -> CliResult<PathBuf> {
        let p = self.path(rel_dir);
        fs::create_dir_all(&p).map_err(|e| CliError::io(format!("creating {}", p.display()), e))?;
        Ok(p)
    }

    fn set_paths(&self, stem: &str) -> (String, String) {
        (format!("{stem}.images.bin"), format!("{stem}.labels.idx"))
    }

    pub fn split_stem(split: Split) -> String {
        format!("data/{}", split.name())
    }

    pub fn write_set(&self, stem: &str, set: &LabeledImageSet) -> CliResult<Vec<String>> {
        let (img, lab) = self.set_paths(stem);
        if let Some(parent) = self.path(&img).parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(format!("creating {}", parent.display()), e))?;
        }
        save_archive(set, &self.path(&img), &self.path(&lab))?;
        Ok(vec![img, lab])
    }

    pub fn read_set(&self, stem: &str, class_count: usize) -> CliResult<LabeledImageSet> {
        let (img, lab) = self.set_paths(stem);
        Ok(load_archive(&self.path(&img), &self.path(&lab), class_count)?)
    }

    pub fn has_set(&self, stem: &str) -> bool {
        self.path(&self.set_paths(stem).0).exists()
    }

    pub fn read_manifest(&self) -> CliResult<Manifest> {
        let p = self.path(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(|e| {
            CliError::Config(format!(
                "{} is not a prepared run directory ({e}); run `prepare` first",
                self.root.display()
            ))
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    }

    pub fn write_manifest(&self, m: &Manifest) -> CliResult<()> {
        let p = self.path(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(m).expect("manifest always serializes");
        fs::write(&p, text + "\n").map_err(|e| CliError::io(format!("writing {}", p.display()), e))
    }

    /// Loads the manifest and checks it was prepared from the same data
    /// settings as `cfg`.
    pub fn prepared_manifest(&self, cfg: &RunConfig) -> CliResult<Manifest> {
        let m = self.read_manifest()?;
        if m.data_hash != cfg.data_hash() {
            return Err(CliError::Config(format!(
                "{} was prepared with different data settings or seed; run `prepare` again",
                self.root.display()
            )));
        }
        Ok(m)
    }

    /// Records the digests of `files` in the manifest under `config_hash`.
    pub fn register(&self, files: &[String], config_hash: &str) -> CliResult<()> {
        let mut m = self.read_manifest()?;
        for f in files {
            m.artifacts.insert(
                f.clone(),
                ArtifactEntry {
                    sha256: sha256_file(&self.path(f))?,
                    config_hash: config_hash.to_string(),
                },
            );
        }
        self.write_manifest(&m)
    }
}
