//! Dataset index: a directory of recording containers plus `dataset.json`.

use std::path::{Path, PathBuf};

use eegtok_core::signal::{load_recording, Recording};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const INDEX_FILE: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    /// Relative to the dataset directory.
    pub path: String,
    #[serde(default)]
    pub label: Option<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub name: String,
    #[serde(default)]
    pub classes: Vec<String>,
    pub items: Vec<DatasetItem>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    /// A dataset directory, or a single container / CSV treated as a
    /// one-item unlabelled dataset.
    pub fn open(path: &Path) -> CliResult<Self> {
        let idx = path.join(INDEX_FILE);
        if idx.is_file() {
            let text = std::fs::read_to_string(&idx).map_err(|e| CliError::Data(format!("{}: {e}", idx.display())))?;
            let index: DatasetIndex =
                serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", idx.display())))?;
            for it in &index.items {
                if let Some(l) = it.label {
                    if l >= index.classes.len() {
                        return Err(CliError::Data(format!(
                            "{}: item `{}` has label {l} but only {} classes",
                            idx.display(),
                            it.id,
                            index.classes.len()
                        )));
                    }
                }
            }
            return Ok(Self {
                root: path.to_path_buf(),
                index,
            });
        }
        if !path.exists() {
            return Err(CliError::Data(format!("{} does not exist", path.display())));
        }
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "recording".into());
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let rel = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self {
            root,
            index: DatasetIndex {
                name: "UNNAMED".into(),
                classes: Vec::new(),
                items: vec![DatasetItem {
                    id,
                    path: rel,
                    label: None,
                    split: Split::Train,
                }],
            },
        })
    }

    pub fn write_index(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.root)?;
        let text = serde_json::to_string_pretty(&self.index).expect("index serializes");
        std::fs::write(self.root.join(INDEX_FILE), text)?;
        Ok(())
    }

    pub fn item_path(&self, item: &DatasetItem) -> PathBuf {
        self.root.join(&item.path)
    }

    pub fn load(&self, item: &DatasetItem) -> CliResult<Recording> {
        load_recording(&self.item_path(item)).map_err(CliError::from)
    }

    pub fn items(&self, split: Option<Split>) -> Vec<&DatasetItem> {
        self.index
            .items
            .iter()
            .filter(|i| split.is_none_or(|s| i.split == s))
            .collect()
    }

    pub fn labeled(&self, split: Split) -> CliResult<Vec<(&DatasetItem, usize)>> {
        let out: Vec<_> = self
            .items(Some(split))
            .into_iter()
            .filter_map(|i| i.label.map(|l| (i, l)))
            .collect();
        if out.is_empty() {
            return Err(CliError::Data(format!(
                "dataset `{}` has no labelled {split:?} items",
                self.index.name
            )));
        }
        Ok(out)
    }
}
