//! Volume data model, synthetic dataset generation, patch sampling,
//! dual-view augmentation, slice extraction and the on-disk format.

mod augment;
mod io;
pub mod synth;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use augment::{augment_views, AugmentationSpec};
pub use io::{
    read_dataset, read_labels, read_volume, write_dataset, write_labels, write_volume,
    DatasetIndex, VolumeSidecar,
};
pub use synth::{dataset_name_for, synth_dataset, SynthSpec};

/// Smallest extent accepted along any axis of a volume.
pub const MIN_VOLUME_EXTENT: usize = 8;

/// Extent of a 3D grid as (z, y, x); x is the fastest-varying axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims3 {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Dims3 {
    pub const fn new(z: usize, y: usize, x: usize) -> Self {
        Dims3 { z, y, x }
    }

    pub const fn cube(n: usize) -> Self {
        Dims3 { z: n, y: n, x: n }
    }

    pub fn len(&self) -> usize {
        self.z * self.y * self.x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.z, self.y, self.x]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.y + y) * self.x + x
    }

    pub fn fits_within(&self, outer: &Dims3) -> bool {
        self.z <= outer.z && self.y <= outer.y && self.x <= outer.x
    }

    pub fn min_extent(&self) -> usize {
        self.z.min(self.y).min(self.x)
    }
}

impl From<[usize; 3]> for Dims3 {
    fn from(a: [usize; 3]) -> Self {
        Dims3::new(a[0], a[1], a[2])
    }
}

impl From<Dims3> for [usize; 3] {
    fn from(d: Dims3) -> Self {
        d.as_array()
    }
}

impl std::fmt::Display for Dims3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.z, self.y, self.x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    CtLike,
    MriLike,
    EmLike,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::CtLike, Modality::MriLike, Modality::EmLike];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::CtLike => "ct-like",
            Modality::MriLike => "mri-like",
            Modality::EmLike => "em-like",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructureKind {
    EllipsoidLesion,
    TubularVessel,
    DenseCells,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastSign {
    Hyper,
    Hypo,
}

/// Ground-truth description of what a synthetic volume contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub structure_kind: StructureKind,
    pub count: u32,
    pub mean_radius_voxels: f64,
    pub contrast_sign: ContrastSign,
    pub noise_level: f64,
}

impl AttributeRecord {
    pub fn empty() -> Self {
        AttributeRecord {
            structure_kind: StructureKind::None,
            count: 0,
            mean_radius_voxels: 0.0,
            contrast_sign: ContrastSign::Hyper,
            noise_level: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.count == 0) != (self.structure_kind == StructureKind::None) {
            return Err(Error::config(format!(
                "attribute count {} inconsistent with structure kind {:?}",
                self.count, self.structure_kind
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::config(format!(
                "noise level {} outside [0, 1]",
                self.noise_level
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub dims: Dims3,
    pub spacing: [f64; 3],
    pub modality: Modality,
    pub dataset_name: String,
    pub voxels: Vec<f32>,
    pub attributes: AttributeRecord,
}

impl Volume {
    pub fn new(
        id: impl Into<String>,
        dims: Dims3,
        spacing: [f64; 3],
        modality: Modality,
        dataset_name: impl Into<String>,
        voxels: Vec<f32>,
        attributes: AttributeRecord,
    ) -> Result<Self> {
        let v = Volume {
            id: id.into(),
            dims,
            spacing,
            modality,
            dataset_name: dataset_name.into(),
            voxels,
            attributes,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.min_extent() < MIN_VOLUME_EXTENT {
            return Err(Error::dimension(format!(
                "volume `{}` dims {} below the minimum extent {MIN_VOLUME_EXTENT}",
                self.id, self.dims
            )));
        }
        if self.voxels.len() != self.dims.len() {
            return Err(Error::dimension(format!(
                "volume `{}` holds {} voxels, dims {} require {}",
                self.id,
                self.voxels.len(),
                self.dims,
                self.dims.len()
            )));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::config(format!(
                "volume `{}` spacing {:?} must be positive",
                self.id, self.spacing
            )));
        }
        self.attributes.validate()
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.dims.index(z, y, x)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    Semantic,
    Instance,
}

/// Integer label field; 0 is background for both kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims3,
    pub labels: Vec<u32>,
    pub kind: LabelKind,
    /// Declared class set for semantic labels; empty for instance labels.
    pub classes: Vec<u32>,
}

impl LabelVolume {
    pub const BACKGROUND: u32 = 0;

    pub fn instance(dims: Dims3, labels: Vec<u32>) -> Result<Self> {
        let lv = LabelVolume {
            dims,
            labels,
            kind: LabelKind::Instance,
            classes: Vec::new(),
        };
        lv.validate()?;
        Ok(lv)
    }

    pub fn semantic(dims: Dims3, labels: Vec<u32>, classes: Vec<u32>) -> Result<Self> {
        let lv = LabelVolume {
            dims,
            labels,
            kind: LabelKind::Semantic,
            classes,
        };
        lv.validate()?;
        Ok(lv)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.dims.len() {
            return Err(Error::dimension(format!(
                "label volume holds {} labels, dims {} require {}",
                self.labels.len(),
                self.dims,
                self.dims.len()
            )));
        }
        if self.kind == LabelKind::Semantic {
            if self.classes.is_empty() {
                return Err(Error::config("semantic label volume without a class set"));
            }
            if let Some(bad) = self.labels.iter().find(|l| !self.classes.contains(l)) {
                return Err(Error::config(format!(
                    "label {bad} is not in the declared class set {:?}",
                    self.classes
                )));
            }
        }
        Ok(())
    }

    /// Distinct non-background ids, ascending.
    pub fn foreground_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .labels
            .iter()
            .copied()
            .filter(|&l| l != Self::BACKGROUND)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Binary foreground mask as a semantic volume with classes {0, 1}.
    pub fn to_binary_semantic(&self) -> LabelVolume {
        LabelVolume {
            dims: self.dims,
            labels: self.labels.iter().map(|&l| u32::from(l != 0)).collect(),
            kind: LabelKind::Semantic,
            classes: vec![0, 1],
        }
    }

    /// Cell-interior target for densely packed instance labelings: a voxel is
    /// interior (1) when all six face neighbours inside the volume share its
    /// id, boundary (0) otherwise.
    pub fn to_interior_semantic(&self) -> LabelVolume {
        let d = self.dims;
        let mut out = vec![0u32; d.len()];
        for z in 0..d.z {
            for y in 0..d.y {
                for x in 0..d.x {
                    let i = d.index(z, y, x);
                    let l = self.labels[i];
                    if l == 0 {
                        continue;
                    }
                    let mut interior = true;
                    let neigh: [(isize, isize, isize); 6] = [
                        (-1, 0, 0),
                        (1, 0, 0),
                        (0, -1, 0),
                        (0, 1, 0),
                        (0, 0, -1),
                        (0, 0, 1),
                    ];
                    for (dz, dy, dx) in neigh {
                        let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                        if nz < 0
                            || ny < 0
                            || nx < 0
                            || nz >= d.z as isize
                            || ny >= d.y as isize
                            || nx >= d.x as isize
                        {
                            continue;
                        }
                        if self.labels[d.index(nz as usize, ny as usize, nx as usize)] != l {
                            interior = false;
                            break;
                        }
                    }
                    out[i] = u32::from(interior);
                }
            }
        }
        LabelVolume {
            dims: d,
            labels: out,
            kind: LabelKind::Semantic,
            classes: vec![0, 1],
        }
    }

    /// Semantic segmentation target used for finetuning on this volume.
    pub fn segmentation_target(&self, modality: Modality) -> LabelVolume {
        match (self.kind, modality) {
            (LabelKind::Semantic, _) => self.clone(),
            (LabelKind::Instance, Modality::EmLike) => self.to_interior_semantic(),
            (LabelKind::Instance, _) => self.to_binary_semantic(),
        }
    }
}

/// Cropped sub-volume used as a training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub source_id: String,
    pub origin: [usize; 3],
    pub dims: Dims3,
    pub voxels: Vec<f32>,
}

impl Patch {
    /// Patch covering a whole volume.
    pub fn whole(v: &Volume) -> Self {
        Patch {
            source_id: v.id.clone(),
            origin: [0, 0, 0],
            dims: v.dims,
            voxels: v.voxels.clone(),
        }
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.dims.index(z, y, x)]
    }
}

/// Crop a patch with origin drawn uniformly over all valid positions.
pub fn sample_patch(v: &Volume, dims: Dims3, rng: &mut Rng) -> Result<Patch> {
    if dims.is_empty() || !dims.fits_within(&v.dims) {
        return Err(Error::dimension(format!(
            "patch dims {dims} do not fit inside volume `{}` dims {}",
            v.id, v.dims
        )));
    }
    let origin = [
        rng.gen_range(0..=v.dims.z - dims.z),
        rng.gen_range(0..=v.dims.y - dims.y),
        rng.gen_range(0..=v.dims.x - dims.x),
    ];
    Ok(crop(v, origin, dims))
}

/// Crop at a fixed origin. Caller guarantees containment.
pub fn crop(v: &Volume, origin: [usize; 3], dims: Dims3) -> Patch {
    let mut voxels = Vec::with_capacity(dims.len());
    for z in 0..dims.z {
        for y in 0..dims.y {
            let start = v.dims.index(origin[0] + z, origin[1] + y, origin[2]);
            voxels.extend_from_slice(&v.voxels[start..start + dims.x]);
        }
    }
    Patch {
        source_id: v.id.clone(),
        origin,
        dims,
        voxels,
    }
}

/// Centered crop, used for deterministic evaluation.
pub fn center_crop(v: &Volume, dims: Dims3) -> Result<Patch> {
    if !dims.fits_within(&v.dims) {
        return Err(Error::dimension(format!(
            "patch dims {dims} do not fit inside volume `{}` dims {}",
            v.id, v.dims
        )));
    }
    let origin = [
        (v.dims.z - dims.z) / 2,
        (v.dims.y - dims.y) / 2,
        (v.dims.x - dims.x) / 2,
    ];
    Ok(crop(v, origin, dims))
}

pub fn crop_labels(l: &LabelVolume, origin: [usize; 3], dims: Dims3) -> LabelVolume {
    let mut labels = Vec::with_capacity(dims.len());
    for z in 0..dims.z {
        for y in 0..dims.y {
            let start = l.dims.index(origin[0] + z, origin[1] + y, origin[2]);
            labels.extend_from_slice(&l.labels[start..start + dims.x]);
        }
    }
    LabelVolume {
        dims,
        labels,
        kind: l.kind,
        classes: l.classes.clone(),
    }
}

/// One axial (z) plane of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2 {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

/// Draw a z index uniformly and return that plane.
pub fn sample_slice(v: &Volume, rng: &mut Rng) -> (Slice2, usize) {
    let k = if v.dims.z <= 1 {
        0
    } else {
        rng.gen_range(0..v.dims.z)
    };
    (slice_at(v, k), k)
}

pub fn slice_at(v: &Volume, k: usize) -> Slice2 {
    let plane = v.dims.y * v.dims.x;
    Slice2 {
        height: v.dims.y,
        width: v.dims.x,
        pixels: v.voxels[k * plane..(k + 1) * plane].to_vec(),
    }
}
