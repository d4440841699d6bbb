//! CSV manifest `id,path,label,pai_type,group_id` listing images on disk.
//! Paths are relative to the manifest's directory; empty fields are absent.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::folder::{read_image, write_png};
use super::{Label, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub pai_type: Option<String>,
    pub group_id: Option<String>,
}

/// Parses manifest rows, rejecting duplicate ids and absolute or escaping paths.
pub fn parse_manifest(reader: impl Read) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, rec) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = rec.map_err(|e| Error::Dataset(format!("manifest row {}: {e}", i + 1)))?;
        if row.id.is_empty() {
            return Err(Error::Dataset(format!("manifest row {} has an empty id", i + 1)));
        }
        let p = Path::new(&row.path);
        if row.path.is_empty() || p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(Error::Dataset(format!("manifest row {}: bad path `{}`", i + 1, row.path)));
        }
        if !seen.insert(row.id.clone()) {
            return Err(Error::Dataset(format!("duplicate sample id `{}`", row.id)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Loads the samples listed in a manifest, resizing to `size` when given.
pub fn read_manifest(path: &Path, size: Option<usize>) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(file)?
        .into_iter()
        .map(|row| {
            Ok(Sample {
                image: read_image(&base.join(&row.path), size)?,
                id: row.id,
                label: row.label,
                pai_type: row.pai_type,
                group_id: row.group_id,
            })
        })
        .collect()
}

/// Writes `rows` as a manifest CSV at `path`.
pub fn write_rows(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes every sample as `images/<id>.png` next to `manifest.csv` in `dir`
/// and returns the manifest rows.
pub fn write_manifest(dir: &Path, samples: &[Sample]) -> Result<Vec<ManifestRow>> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
            return Err(Error::Dataset(format!("sample id `{}` is not a file name", s.id)));
        }
        let rel = format!("images/{}.png", s.id);
        write_png(&dir.join(&rel), &s.image)?;
        rows.push(ManifestRow {
            id: s.id.clone(),
            path: rel,
            label: s.label,
            pai_type: s.pai_type.clone(),
            group_id: s.group_id.clone(),
        });
    }
    write_rows(&dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}
