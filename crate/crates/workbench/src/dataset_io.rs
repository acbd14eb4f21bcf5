//! Datasets on disk: one grayscale PNG per instance plus a JSONL manifest.

use std::path::{Path, PathBuf};

use gradia_core::attention::{BinaryMask, MaskProvenance};
use gradia_core::dataset::{InstanceId, Split};
use gradia_core::synthetic::SyntheticInstance;
use serde::{Deserialize, Serialize};

use crate::error::{read_required, write_file, Result, WorkbenchError};
use crate::pngio::{decode_gray, encode_gray};

pub const MANIFEST: &str = "manifest.jsonl";

/// One manifest line. Masks use the attention module's RLE and are absent
/// for data without ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: InstanceId,
    pub path: String,
    pub label: usize,
    pub split: Split,
    pub intrinsic_mask_rle: Option<Vec<u32>>,
    pub context_mask_rle: Option<Vec<u32>>,
}

impl DatasetRecord {
    pub fn of(instance: &SyntheticInstance) -> Self {
        Self {
            id: instance.id,
            path: format!("images/{:06}.png", instance.id.0),
            label: instance.label,
            split: instance.split,
            intrinsic_mask_rle: Some(instance.intrinsic_mask.to_rle()),
            context_mask_rle: Some(instance.context_mask.to_rle()),
        }
    }
}

pub fn manifest_text(records: &[DatasetRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| WorkbenchError::Runtime(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes images and the manifest under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, instances: &[SyntheticInstance]) -> Result<PathBuf> {
    let records: Vec<DatasetRecord> = instances.iter().map(DatasetRecord::of).collect();
    for (r, instance) in records.iter().zip(instances) {
        write_file(&dir.join(&r.path), encode_gray(&instance.image)?)?;
    }
    let path = dir.join(MANIFEST);
    write_file(&path, manifest_text(&records)?)?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<DatasetRecord>> {
    let path = dir.join(MANIFEST);
    let text = String::from_utf8(read_required(&path, "dataset manifest")?)
        .map_err(|e| WorkbenchError::Config(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| WorkbenchError::Config(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn mask_or_empty(rle: &Option<Vec<u32>>, h: usize, w: usize) -> Result<BinaryMask> {
    let Some(rle) = rle else {
        return Ok(BinaryMask::empty(h, w, MaskProvenance::Oracle));
    };
    let mask = BinaryMask::from_rle(rle, MaskProvenance::Oracle)?;
    if mask.dims() != (h, w) {
        return Err(WorkbenchError::Config(format!(
            "mask is {:?}, image is {:?}",
            mask.dims(),
            (h, w)
        )));
    }
    Ok(mask)
}

/// Loads every instance listed in `dir`'s manifest. Absent masks load as
/// empty masks.
pub fn read_dataset(dir: &Path) -> Result<Vec<SyntheticInstance>> {
    read_manifest(dir)?
        .iter()
        .map(|r| {
            let image = decode_gray(&read_required(&dir.join(&r.path), "dataset image")?)?;
            let (h, w) = (image.height(), image.width());
            if r.label > 1 {
                return Err(WorkbenchError::Config(format!("instance {}: label {} is not 0 or 1", r.id, r.label)));
            }
            Ok(SyntheticInstance {
                id: r.id,
                label: r.label,
                split: r.split,
                intrinsic_mask: mask_or_empty(&r.intrinsic_mask_rle, h, w)?,
                context_mask: mask_or_empty(&r.context_mask_rle, h, w)?,
                image,
            })
        })
        .collect()
}

pub fn split_of(data: &[SyntheticInstance], split: Split) -> Vec<SyntheticInstance> {
    data.iter().filter(|d| d.split == split).cloned().collect()
}
