//! On-disk volume format.
//!
//! A volume `<id>` is stored as `<id>.raw` (little-endian `f32`, x fastest)
//! plus a `<id>.json` sidecar:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "id": "vol00000",
//!   "dims": [32, 32, 32],
//!   "spacing": [1.0, 1.0, 1.0],
//!   "modality": "ct-like",
//!   "dataset_name": "synth-liver",
//!   "dtype": "float32-le",
//!   "attributes": { "structure_kind": "ellipsoid-lesion", "count": 2, ... },
//!   "label_path": "vol00000.labels.raw",
//!   "label_kind": "instance",
//!   "label_classes": []
//! }
//! ```
//!
//! Labels, when present, live in `<id>.labels.raw` as little-endian `u32`.
//! A dataset directory adds `index.json` listing volume ids in order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttributeRecord, Dims3, LabelKind, LabelVolume, Modality, Volume};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "float32-le";
const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSidecar {
    pub format_version: u32,
    pub id: String,
    pub dims: Dims3,
    pub spacing: [f64; 3],
    pub modality: Modality,
    pub dataset_name: String,
    pub dtype: String,
    pub attributes: AttributeRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_kind: Option<LabelKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_classes: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub volumes: Vec<String>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sidecar_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => path.to_path_buf(),
        _ => path.with_extension("json"),
    }
}

/// Write `<dir>/<id>.raw` and `<dir>/<id>.json`; returns the sidecar path.
pub fn write_volume(v: &Volume, dir: &Path) -> Result<PathBuf> {
    write_volume_with_labels(v, None, dir)
}

fn write_volume_with_labels(v: &Volume, labels: Option<&LabelVolume>, dir: &Path) -> Result<PathBuf> {
    v.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let raw: Vec<u8> = v.voxels.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_bytes(&dir.join(format!("{}.raw", v.id)), &raw)?;
    let mut sidecar = VolumeSidecar {
        format_version: FORMAT_VERSION,
        id: v.id.clone(),
        dims: v.dims,
        spacing: v.spacing,
        modality: v.modality,
        dataset_name: v.dataset_name.clone(),
        dtype: DTYPE.into(),
        attributes: v.attributes.clone(),
        label_path: None,
        label_kind: None,
        label_classes: None,
    };
    if let Some(l) = labels {
        let name = write_labels(l, &v.id, dir)?;
        sidecar.label_path = Some(name);
        sidecar.label_kind = Some(l.kind);
        sidecar.label_classes = Some(l.classes.clone());
    }
    let json_path = dir.join(format!("{}.json", v.id));
    write_bytes(&json_path, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(json_path)
}

/// Write `<dir>/<id>.labels.raw`; returns the file name.
pub fn write_labels(l: &LabelVolume, id: &str, dir: &Path) -> Result<String> {
    l.validate()?;
    let name = format!("{id}.labels.raw");
    let raw: Vec<u8> = l.labels.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_bytes(&dir.join(&name), &raw)?;
    Ok(name)
}

fn read_sidecar(path: &Path) -> Result<VolumeSidecar> {
    let json = sidecar_path(path);
    if !json.exists() {
        return Err(Error::format(&json, "missing sidecar metadata"));
    }
    let bytes = read_bytes(&json)?;
    let sidecar: VolumeSidecar = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(&json, format!("invalid sidecar: {e}")))?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &json,
            format!("unsupported format version {}", sidecar.format_version),
        ));
    }
    if sidecar.dtype != DTYPE {
        return Err(Error::format(&json, format!("unsupported dtype `{}`", sidecar.dtype)));
    }
    Ok(sidecar)
}

fn check_len(path: &Path, bytes: &[u8], dims: Dims3, width: usize) -> Result<()> {
    let expected = dims.len() * width;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes for dims {dims}, found {}",
                bytes.len()
            ),
        ));
    }
    Ok(())
}

/// Read a volume from its sidecar (`.json`) or payload (`.raw`) path.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let sc = read_sidecar(path)?;
    let json = sidecar_path(path);
    let raw_path = json.with_extension("raw");
    let bytes = read_bytes(&raw_path)?;
    check_len(&raw_path, &bytes, sc.dims, 4)?;
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(
        sc.id,
        sc.dims,
        sc.spacing,
        sc.modality,
        sc.dataset_name,
        voxels,
        sc.attributes,
    )
    .map_err(|e| Error::format(&json, e.to_string()))
}

/// Read the label volume referenced by a sidecar, if any.
pub fn read_labels(path: &Path) -> Result<Option<LabelVolume>> {
    let sc = read_sidecar(path)?;
    let Some(name) = sc.label_path else {
        return Ok(None);
    };
    let json = sidecar_path(path);
    let dir = json.parent().unwrap_or_else(|| Path::new("."));
    let label_path = dir.join(name);
    let bytes = read_bytes(&label_path)?;
    check_len(&label_path, &bytes, sc.dims, 4)?;
    let labels = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let lv = LabelVolume {
        dims: sc.dims,
        labels,
        kind: sc.label_kind.unwrap_or(LabelKind::Instance),
        classes: sc.label_classes.unwrap_or_default(),
    };
    lv.validate()
        .map_err(|e| Error::format(&label_path, e.to_string()))?;
    Ok(Some(lv))
}

/// Write volumes (and labels) plus `index.json` into `dir`.
pub fn write_dataset(dir: &Path, volumes: &[Volume], labels: Option<&[LabelVolume]>) -> Result<()> {
    if let Some(ls) = labels {
        if ls.len() != volumes.len() {
            return Err(Error::config(format!(
                "{} label volumes for {} volumes",
                ls.len(),
                volumes.len()
            )));
        }
    }
    for (i, v) in volumes.iter().enumerate() {
        write_volume_with_labels(v, labels.map(|ls| &ls[i]), dir)?;
    }
    let index = DatasetIndex {
        format_version: FORMAT_VERSION,
        volumes: volumes.iter().map(|v| v.id.clone()).collect(),
    };
    write_bytes(
        &dir.join(INDEX_FILE),
        serde_json::to_string_pretty(&index)?.as_bytes(),
    )
}

/// Read every volume listed in `<dir>/index.json`, with labels when present.
pub fn read_dataset(dir: &Path) -> Result<(Vec<Volume>, Vec<Option<LabelVolume>>)> {
    let index_path = dir.join(INDEX_FILE);
    let bytes = read_bytes(&index_path)?;
    let index: DatasetIndex = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(&index_path, format!("invalid index: {e}")))?;
    let mut volumes = Vec::with_capacity(index.volumes.len());
    let mut labels = Vec::with_capacity(index.volumes.len());
    for id in &index.volumes {
        let p = dir.join(format!("{id}.json"));
        volumes.push(read_volume(&p)?);
        labels.push(read_labels(&p)?);
    }
    Ok((volumes, labels))
}
