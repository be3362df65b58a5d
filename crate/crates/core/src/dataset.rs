//! Dataset manifests for the `root/<class-name>/*.{png,jpg}` layout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::image::ClassLabel;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Folder name to label binding. Defaults to `glaucoma` = 1, `non-glaucoma` = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub folders: BTreeMap<String, u8>,
}

impl Default for ClassMapping {
    fn default() -> Self {
        let folders = [("glaucoma".to_string(), 1), ("non-glaucoma".to_string(), 0)]
            .into_iter()
            .collect();
        Self { folders }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<ClassLabel>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Builds a manifest, checking that every entry's label is one of `classes`.
    pub fn new(root: impl Into<PathBuf>, classes: Vec<ClassLabel>, entries: Vec<ManifestEntry>) -> Result<Self> {
        for e in &entries {
            if !classes.iter().any(|c| c.value == e.label) {
                return Err(Error::contract(format!(
                    "entry {} has label {} not among the manifest classes",
                    e.path.display(),
                    e.label
                )));
            }
        }
        Ok(Self {
            root: root.into(),
            classes,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry count for each class, in `classes` order.
    pub fn class_counts(&self) -> Vec<(ClassLabel, usize)> {
        self.classes
            .iter()
            .map(|c| {
                let n = self.entries.iter().filter(|e| e.label == c.value).count();
                (c.clone(), n)
            })
            .collect()
    }

    pub fn class(&self, label: u8) -> Option<&ClassLabel> {
        self.classes.iter().find(|c| c.value == label)
    }

    /// Looks up an entry by its path relative to the root.
    pub fn find(&self, relative: &str) -> Option<&ManifestEntry> {
        let wanted = Path::new(relative);
        self.entries.iter().find(|e| e.path == wanted)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = crate::io::read_json(path)?;
        Self::new(m.root, m.classes, m.entries)
    }
}

pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    scan_dataset_with(root, &ClassMapping::default())
}

/// Lists every image under each known class folder, in lexicographic path order.
///
/// Unknown subdirectories are logged and skipped. An empty tree is an error.
pub fn scan_dataset_with(root: impl AsRef<Path>, mapping: &ClassMapping) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let read = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut class_dirs = Vec::new();
    for entry in read {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if !entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        match mapping.folders.get(&name) {
            Some(&label) => class_dirs.push((name, label)),
            None => log::warn!("skipping unknown class folder {}", entry.path().display()),
        }
    }
    class_dirs.sort();

    let mut classes: Vec<ClassLabel> = mapping
        .folders
        .iter()
        .map(|(name, &value)| ClassLabel::new(value, name.clone()))
        .collect::<Result<_>>()?;
    classes.sort_by_key(|c| c.value);

    let mut entries = Vec::new();
    for (name, label) in &class_dirs {
        for file in WalkDir::new(root.join(name)).sort_by_file_name() {
            let file = file.map_err(|e| Error::io(root, e.into()))?;
            if file.file_type().is_file() && is_image(file.path()) {
                let rel = file.path().strip_prefix(root).expect("walked under root").to_path_buf();
                entries.push(ManifestEntry {
                    path: rel,
                    label: *label,
                });
            }
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));

    if entries.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    DatasetManifest::new(root, classes, entries)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}
