//! Dataset discovery: `images/` and `masks/` directories paired by file stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use salfuse_core::imaging::{load_image, GrayMap, Image};

use crate::error::CliError;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    /// Sorted by stem.
    pub entries: Vec<DatasetEntry>,
}

/// Problems found while ingesting; none of them is fatal on its own.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub missing_masks: Vec<String>,
    pub orphan_masks: Vec<String>,
    pub empty_masks: Vec<String>,
    pub unreadable: Vec<(String, String)>,
    pub size_mismatch: Vec<String>,
}

impl IngestReport {
    pub fn is_clean(&self) -> bool {
        *self == IngestReport::default()
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.missing_masks.iter().map(|s| format!("{s}: no mask")));
        out.extend(self.orphan_masks.iter().map(|s| format!("{s}: mask without image")));
        out.extend(self.empty_masks.iter().map(|s| format!("{s}: all-zero mask, excluded")));
        out.extend(self.unreadable.iter().map(|(s, e)| format!("{s}: {e}")));
        out.extend(
            self.size_mismatch
                .iter()
                .map(|s| format!("{s}: image and mask sizes differ")),
        );
        out
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files of a directory keyed by stem (first by name on stem clashes).
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for p in paths {
        if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
            out.entry(stem.to_string()).or_insert(p);
        }
    }
    Ok(out)
}

/// Pairs `dir/images/*` with `dir/masks/*`, dropping pairs that cannot be used.
pub fn ingest(dir: &Path) -> Result<(DatasetManifest, IngestReport), CliError> {
    let images = list_images(&dir.join("images"))?;
    let masks = list_images(&dir.join("masks"))?;
    let mut report = IngestReport {
        orphan_masks: masks.keys().filter(|k| !images.contains_key(*k)).cloned().collect(),
        ..IngestReport::default()
    };
    let mut entries = Vec::new();
    for (stem, image) in images {
        let Some(mask) = masks.get(&stem) else {
            report.missing_masks.push(stem);
            continue;
        };
        match (load_image(&image), GrayMap::load(mask)) {
            (Err(e), _) | (_, Err(e)) => report.unreadable.push((stem, e.to_string())),
            (Ok(img), Ok(gt)) => {
                if (img.width(), img.height()) != (gt.width(), gt.height()) {
                    report.size_mismatch.push(stem);
                } else if gt.values().iter().all(|&v| v == 0.0) {
                    report.empty_masks.push(stem);
                } else {
                    entries.push(DatasetEntry {
                        stem,
                        image,
                        mask: mask.clone(),
                    });
                }
            }
        }
    }
    for line in report.lines() {
        log::warn!("{line}");
    }
    if entries.is_empty() {
        return Err(CliError::Io(format!("{}: no usable image/mask pairs", dir.display())));
    }
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok((DatasetManifest { name, entries }, report))
}

/// Decodes one entry's image and mask.
pub fn load_pair(entry: &DatasetEntry) -> Result<(Image, GrayMap), CliError> {
    Ok((load_image(&entry.image)?, GrayMap::load(&entry.mask)?))
}
