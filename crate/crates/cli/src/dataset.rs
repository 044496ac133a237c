//! On-disk dataset layout shared by every stage.
//!
//! A dataset directory holds `dataset.json`, listing cases with their
//! subset and the locations of their image and mask. Locations are
//! relative to the dataset directory unless absolute, and may be either
//! raw containers or NIfTI files.

use std::fs;
use std::path::{Path, PathBuf};

use menisc_core::io::{load_mask_any, load_volume_any, save_mask, save_volume};
use menisc_core::split::Subset;
use menisc_core::volume::{AnatomicalAxis, BinaryMask, Volume, DEFAULT_AXES};
use serde::{Deserialize, Serialize};

use crate::error::{require, CliError, Result};

pub const INDEX_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub subset: Subset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    /// Axis labels used when reading NIfTI files, which carry none.
    #[serde(default = "default_axes")]
    pub axes: [AnatomicalAxis; 3],
    pub cases: Vec<CaseEntry>,
}

fn default_axes() -> [AnatomicalAxis; 3] {
    DEFAULT_AXES
}

impl DatasetIndex {
    pub fn new(cases: Vec<CaseEntry>) -> Self {
        Self { axes: DEFAULT_AXES, cases }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        require(&path, "dataset index")?;
        let text = fs::read_to_string(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        let text = serde_json::to_string_pretty(self)? + "\n";
        let path = dir.join(INDEX_FILE);
        fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    pub fn subset(&self, subset: Subset) -> Vec<&CaseEntry> {
        self.cases.iter().filter(|c| c.subset == subset).collect()
    }

    pub fn find(&self, id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.id == id)
    }
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// A dataset directory with its index loaded.
pub struct Dataset {
    pub dir: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self { dir: dir.to_path_buf(), index: DatasetIndex::load(dir)? })
    }

    pub fn image(&self, case: &CaseEntry) -> Result<Volume> {
        let rel = case.image.as_deref().ok_or_else(|| CliError::Config(format!("case {} has no image", case.id)))?;
        let path = resolve(&self.dir, rel);
        require(&path, &format!("image of case {}", case.id))?;
        Ok(load_volume_any(path, self.index.axes)?)
    }

    pub fn mask(&self, case: &CaseEntry) -> Result<BinaryMask> {
        let rel = case.mask.as_deref().ok_or_else(|| CliError::Config(format!("case {} has no mask", case.id)))?;
        let path = resolve(&self.dir, rel);
        require(&path, &format!("mask of case {}", case.id))?;
        Ok(load_mask_any(path, self.index.axes)?)
    }
}

pub fn image_rel(id: &str) -> String {
    format!("cases/{id}/image")
}

pub fn mask_rel(id: &str) -> String {
    format!("cases/{id}/mask")
}

pub fn write_image(dir: &Path, id: &str, v: &Volume) -> Result<String> {
    let rel = image_rel(id);
    save_volume(dir.join(&rel), v)?;
    Ok(rel)
}

pub fn write_mask(dir: &Path, id: &str, m: &BinaryMask) -> Result<String> {
    let rel = mask_rel(id);
    save_mask(dir.join(&rel), m)?;
    Ok(rel)
}
