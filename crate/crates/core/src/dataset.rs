//! Dataset manifests.
//!
//! A manifest is a text file with one image per line, prefixed by its split:
//!
//! ```text
//! # optional comment
//! name: my-set
//! train: images/a.png
//! test: images/b.png
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<(Split, PathBuf)>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut name = None;
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (tag, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("manifest line {}: expected 'train:' or 'test:' prefix", lineno + 1)))?;
            let value = rest.trim();
            let split = match tag.trim() {
                "train" => Split::Train,
                "test" => Split::Test,
                "name" => {
                    name = Some(value.to_string());
                    continue;
                }
                other => return Err(Error::Config(format!("manifest line {}: unknown tag '{other}'", lineno + 1))),
            };
            if value.is_empty() {
                return Err(Error::Config(format!("manifest line {}: empty path", lineno + 1)));
            }
            let p = Path::new(value);
            entries.push((split, if p.is_absolute() { p.to_path_buf() } else { base.join(p) }));
        }
        let m = Self { name: name.unwrap_or_else(|| "dataset".into()), entries };
        m.check_overlap()?;
        Ok(m)
    }

    /// Reads and parses `path`, then checks that every listed file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base)?;
        if let Some((_, p)) = m.entries.iter().find(|(_, p)| !p.is_file()) {
            return Err(Error::Config(format!("manifest {}: missing file {}", path.display(), p.display())));
        }
        Ok(m)
    }

    pub fn from_paths(name: &str, train: &[PathBuf], test: &[PathBuf]) -> Result<Self> {
        let entries = train
            .iter()
            .map(|p| (Split::Train, p.clone()))
            .chain(test.iter().map(|p| (Split::Test, p.clone())))
            .collect();
        let m = Self { name: name.into(), entries };
        m.check_overlap()?;
        Ok(m)
    }

    pub fn split(&self, split: Split) -> Vec<&Path> {
        self.entries.iter().filter(|(s, _)| *s == split).map(|(_, p)| p.as_path()).collect()
    }

    pub fn train(&self) -> Vec<&Path> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&Path> {
        self.split(Split::Test)
    }

    fn check_overlap(&self) -> Result<()> {
        let key = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
        let train: HashSet<PathBuf> = self.train().into_iter().map(key).collect();
        if let Some(p) = self.test().into_iter().find(|p| train.contains(&key(p))) {
            return Err(Error::Config(format!("{} is in both train and test splits", p.display())));
        }
        Ok(())
    }
}

/// Identifier used for an image in metric tables: the file stem.
pub fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}
