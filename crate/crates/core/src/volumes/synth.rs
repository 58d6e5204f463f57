//! Deterministic synthetic corpus with ground-truth labels.
//!
//! Three styles stand in for real scans: CT-like volumes have a
//! piecewise-constant background with hyperdense structures, MRI-like volumes
//! a smooth intensity gradient with hypointense structures, and EM-like
//! volumes a dense Voronoi partition of cells separated by dark membranes,
//! whose seeds drift slowly with depth.
//! Lesions are prolate ellipsoids centred at mid-depth whose long axis
//! exceeds the field of view, and vessels run along z, so every axial slice
//! shows every structure a caption talks about. Each dataset has its own
//! background intensity band.

use std::collections::BTreeMap;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{
    AttributeRecord, ContrastSign, Dims3, LabelVolume, Modality, StructureKind, Volume,
    MIN_VOLUME_EXTENT,
};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

/// In-plane radius separating "small" from "large" lesions.
pub const LARGE_RADIUS_THRESHOLD: f64 = 2.2;

const SMALL_RADIUS: (f64, f64) = (1.3, 1.8);
const LARGE_RADIUS: (f64, f64) = (2.6, 3.0);
const VESSEL_RADIUS: (f64, f64) = (1.2, 2.0);
const PLACEMENT_ATTEMPTS: usize = 2000;
const LESION_TRIES: usize = 50;
/// Maximum in-plane drift of a cell seed per slice.
const CELL_DRIFT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_volumes: usize,
    pub dims: Dims3,
    pub modality_mix: BTreeMap<Modality, f64>,
    /// Structure weights for CT-like and MRI-like volumes. EM-like volumes
    /// are always dense cells.
    pub structure_mix: BTreeMap<StructureKind, f64>,
    /// Inclusive range for lesion and vessel counts.
    pub count_range: [u32; 2],
    /// Inclusive range for EM cell counts.
    pub cell_count_range: [u32; 2],
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_volumes: 20,
            dims: Dims3::cube(32),
            modality_mix: Modality::ALL.iter().map(|&m| (m, 1.0)).collect(),
            structure_mix: [
                (StructureKind::EllipsoidLesion, 0.5),
                (StructureKind::TubularVessel, 0.3),
                (StructureKind::None, 0.2),
            ]
            .into_iter()
            .collect(),
            count_range: [1, 3],
            cell_count_range: [3, 5],
            spacing: [1.0; 3],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_volumes == 0 {
            return Err(Error::config("n_volumes must be >= 1"));
        }
        if self.dims.min_extent() < MIN_VOLUME_EXTENT {
            return Err(Error::dimension(format!(
                "synthetic dims {} below the minimum extent {MIN_VOLUME_EXTENT}",
                self.dims
            )));
        }
        if !self.modality_mix.values().any(|&w| w > 0.0)
            || self.modality_mix.values().any(|&w| !(w >= 0.0))
        {
            return Err(Error::config("modality mix is empty or has negative weights"));
        }
        if !self.structure_mix.values().any(|&w| w > 0.0)
            || self.structure_mix.values().any(|&w| !(w >= 0.0))
        {
            return Err(Error::config("structure mix is empty or has negative weights"));
        }
        let needs_plain = self
            .modality_mix
            .iter()
            .any(|(m, &w)| w > 0.0 && *m != Modality::EmLike);
        if needs_plain && self.plain_structures().is_empty() {
            return Err(Error::config(
                "structure mix has no ellipsoid-lesion/tubular-vessel/none entry for CT-like or MRI-like volumes",
            ));
        }
        for (name, [lo, hi]) in [
            ("count_range", self.count_range),
            ("cell_count_range", self.cell_count_range),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::config(format!(
                    "{name} [{lo}, {hi}] must satisfy 1 <= lo <= hi"
                )));
            }
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("spacing components must be positive"));
        }
        Ok(())
    }

    fn plain_structures(&self) -> Vec<(StructureKind, f64)> {
        self.structure_mix
            .iter()
            .filter(|(k, &w)| **k != StructureKind::DenseCells && w > 0.0)
            .map(|(k, w)| (*k, *w))
            .collect()
    }
}

/// Dataset name attached to a (modality, structure) combination.
pub fn dataset_name_for(modality: Modality, structure: StructureKind) -> &'static str {
    use Modality::*;
    use StructureKind::*;
    match (modality, structure) {
        (CtLike, EllipsoidLesion) => "synth-liver",
        (CtLike, TubularVessel) => "synth-hepaticvessel",
        (CtLike, _) => "synth-spleen",
        (MriLike, EllipsoidLesion) => "synth-braintumour",
        (MriLike, TubularVessel) => "synth-angio",
        (MriLike, _) => "synth-heart",
        (EmLike, _) => "synth-cremi",
    }
}

/// Generate `n_volumes` volumes with matching instance label volumes.
///
/// Volume `i` is generated from its own stream seeded with `seed + i`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(Vec<Volume>, Vec<LabelVolume>)> {
    spec.validate()?;
    let mut volumes = Vec::with_capacity(spec.n_volumes);
    let mut labels = Vec::with_capacity(spec.n_volumes);
    for i in 0..spec.n_volumes {
        let mut rng = seeded(spec.seed.wrapping_add(i as u64));
        let (v, l) = synth_one(spec, i, &mut rng)?;
        volumes.push(v);
        labels.push(l);
    }
    Ok((volumes, labels))
}

fn weighted_pick<T: Copy>(items: &[(T, f64)], rng: &mut Rng) -> T {
    let dist = WeightedIndex::new(items.iter().map(|(_, w)| *w)).expect("validated weights");
    items[dist.sample(rng)].0
}

fn synth_one(spec: &SynthSpec, index: usize, rng: &mut Rng) -> Result<(Volume, LabelVolume)> {
    let d = spec.dims;
    let modalities: Vec<(Modality, f64)> = spec
        .modality_mix
        .iter()
        .filter(|(_, &w)| w > 0.0)
        .map(|(m, w)| (*m, *w))
        .collect();
    let modality = weighted_pick(&modalities, rng);
    let structure = if modality == Modality::EmLike {
        StructureKind::DenseCells
    } else {
        weighted_pick(&spec.plain_structures(), rng)
    };
    let noise_level = rng.gen_range(0.0..0.5);

    let mut voxels = match modality {
        Modality::CtLike => ct_background(d, background_band(structure), rng),
        Modality::MriLike => mri_background(d, background_band(structure) + 0.5, rng),
        Modality::EmLike => vec![0.0; d.len()],
    };
    let mut labels = vec![0u32; d.len()];
    let contrast_sign = match modality {
        Modality::CtLike => ContrastSign::Hyper,
        _ => ContrastSign::Hypo,
    };

    let (count, mean_radius) = match structure {
        StructureKind::None => (0, 0.0),
        StructureKind::EllipsoidLesion => {
            let count = rng.gen_range(spec.count_range[0]..=spec.count_range[1]);
            let large = rng.gen_bool(0.5);
            let r = place_ellipsoids(d, count, large, &mut labels, rng)?;
            paint_structures(&mut voxels, &labels, contrast_sign);
            (count, r)
        }
        StructureKind::TubularVessel => {
            let count = rng.gen_range(spec.count_range[0]..=spec.count_range[1]);
            let r = place_vessels(d, count, &mut labels, rng)?;
            paint_structures(&mut voxels, &labels, contrast_sign);
            (count, r)
        }
        StructureKind::DenseCells => {
            let count = rng.gen_range(spec.cell_count_range[0]..=spec.cell_count_range[1]);
            voronoi_cells(d, count, &mut voxels, &mut labels, rng)?;
            let r = ((d.y * d.x) as f64 / (count as f64 * std::f64::consts::PI)).sqrt();
            (count, r)
        }
    };

    let sigma = 0.1 * noise_level;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in voxels.iter_mut() {
            *v += normal.sample(rng) as f32;
        }
    }

    let attributes = AttributeRecord {
        structure_kind: structure,
        count,
        mean_radius_voxels: mean_radius,
        contrast_sign,
        noise_level,
    };
    let id = format!("vol{index:05}");
    let volume = Volume::new(
        id,
        d,
        spec.spacing,
        modality,
        dataset_name_for(modality, structure),
        voxels,
        attributes,
    )?;
    Ok((volume, LabelVolume::instance(d, labels)?))
}

/// Lower edge of the background intensity band for a structure kind.
fn background_band(structure: StructureKind) -> f64 {
    match structure {
        StructureKind::EllipsoidLesion => 0.05,
        StructureKind::TubularVessel => 0.2,
        _ => 0.35,
    }
}

fn ct_background(d: Dims3, band: f64, rng: &mut Rng) -> Vec<f32> {
    let split_axis_is_y = rng.gen_bool(0.5);
    let extent = if split_axis_is_y { d.y } else { d.x };
    let split = rng.gen_range(extent / 4..=3 * extent / 4);
    let a = rng.gen_range(band..band + 0.07);
    let b = (a + rng.gen_range(0.03..0.06)) as f32;
    let a = a as f32;
    let mut out = vec![0.0; d.len()];
    for z in 0..d.z {
        for y in 0..d.y {
            for x in 0..d.x {
                let c = if split_axis_is_y { y } else { x };
                out[d.index(z, y, x)] = if c < split { a } else { b };
            }
        }
    }
    out
}

fn mri_background(d: Dims3, band: f64, rng: &mut Rng) -> Vec<f32> {
    let base = rng.gen_range(band + 0.04..band + 0.1);
    let gy = rng.gen_range(-0.08..0.08);
    let gx = rng.gen_range(-0.08..0.08);
    let gz = rng.gen_range(-0.03..0.03);
    let mut out = vec![0.0; d.len()];
    for z in 0..d.z {
        let fz = z as f64 / (d.z - 1).max(1) as f64 - 0.5;
        for y in 0..d.y {
            let fy = y as f64 / (d.y - 1).max(1) as f64 - 0.5;
            for x in 0..d.x {
                let fx = x as f64 / (d.x - 1).max(1) as f64 - 0.5;
                out[d.index(z, y, x)] = (base + gy * fy + gx * fx + gz * fz) as f32;
            }
        }
    }
    out
}

fn paint_structures(voxels: &mut [f32], labels: &[u32], sign: ContrastSign) {
    for (v, &l) in voxels.iter_mut().zip(labels) {
        if l != 0 {
            *v = match sign {
                ContrastSign::Hyper => *v + 0.4,
                ContrastSign::Hypo => (*v - 0.35).max(0.02),
            };
        }
    }
}

/// Place `count` disjoint prolate ellipsoids; returns the mean in-plane radius.
fn place_ellipsoids(
    d: Dims3,
    count: u32,
    large: bool,
    labels: &mut [u32],
    rng: &mut Rng,
) -> Result<f64> {
    let (lo, hi) = if large { LARGE_RADIUS } else { SMALL_RADIUS };
    for _ in 0..PLACEMENT_ATTEMPTS / LESION_TRIES {
        let mut placed: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
        for _ in 0..count {
            let fits = (0..LESION_TRIES).find_map(|_| {
                let r = rng.gen_range(lo..hi);
                let rz = 0.75 * d.z as f64;
                let cz = (d.z as f64 - 1.0) / 2.0 + rng.gen_range(-1.0..1.0);
                let cy = edge_range(d.y, r, rng)?;
                let cx = edge_range(d.x, r, rng)?;
                let clash = placed.iter().any(|&(_, py, px, pr, _)| {
                    ((cy - py).powi(2) + (cx - px).powi(2)).sqrt() < r + pr + 2.0
                });
                (!clash).then_some((cz, cy, cx, r, rz))
            });
            match fits {
                Some(p) => placed.push(p),
                None => break,
            }
        }
        if placed.len() < count as usize {
            continue;
        }
        for (id, &(cz, cy, cx, r, rz)) in placed.iter().enumerate() {
            for z in 0..d.z {
                let nz = (z as f64 - cz) / rz;
                for y in 0..d.y {
                    let ny = (y as f64 - cy) / r;
                    for x in 0..d.x {
                        let nx = (x as f64 - cx) / r;
                        if nz * nz + ny * ny + nx * nx <= 1.0 {
                            labels[d.index(z, y, x)] = id as u32 + 1;
                        }
                    }
                }
            }
        }
        return Ok(placed.iter().map(|p| p.3).sum::<f64>() / count as f64);
    }
    Err(Error::config(format!(
        "cannot place {count} disjoint lesions inside dims {d}"
    )))
}

/// Place `count` disjoint straight tubes running along z.
fn place_vessels(d: Dims3, count: u32, labels: &mut [u32], rng: &mut Rng) -> Result<f64> {
    let half = (d.z as f64 - 1.0) / 2.0;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut placed: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
        let mut ok = true;
        for _ in 0..count {
            let r = rng.gen_range(VESSEL_RADIUS.0..VESSEL_RADIUS.1);
            let sy: f64 = rng.gen_range(-0.1..0.1);
            let sx: f64 = rng.gen_range(-0.1..0.1);
            let margin_y = r + sy.abs() * half;
            let margin_x = r + sx.abs() * half;
            if 2.0 * margin_y >= d.y as f64 - 1.0 || 2.0 * margin_x >= d.x as f64 - 1.0 {
                ok = false;
                break;
            }
            let cy = rng.gen_range(margin_y..d.y as f64 - 1.0 - margin_y);
            let cx = rng.gen_range(margin_x..d.x as f64 - 1.0 - margin_x);
            let clash = placed.iter().any(|&(py, px, psy, psx, pr)| {
                (0..d.z).any(|z| {
                    let t = z as f64 - half;
                    let dy = (cy + sy * t) - (py + psy * t);
                    let dx = (cx + sx * t) - (px + psx * t);
                    (dy * dy + dx * dx).sqrt() < r + pr + 2.0
                })
            });
            if clash {
                ok = false;
                break;
            }
            placed.push((cy, cx, sy, sx, r));
        }
        if !ok {
            continue;
        }
        for (id, &(cy, cx, sy, sx, r)) in placed.iter().enumerate() {
            for z in 0..d.z {
                let t = z as f64 - half;
                let (py, px) = (cy + sy * t, cx + sx * t);
                for y in 0..d.y {
                    for x in 0..d.x {
                        let dy = y as f64 - py;
                        let dx = x as f64 - px;
                        if dy * dy + dx * dx <= r * r {
                            labels[d.index(z, y, x)] = id as u32 + 1;
                        }
                    }
                }
            }
        }
        return Ok(placed.iter().map(|p| p.4).sum::<f64>() / count as f64);
    }
    Err(Error::config(format!(
        "cannot place {count} disjoint vessels inside dims {d}"
    )))
}

/// Dense 2D Voronoi partition extruded along z; membranes are dark.
fn voronoi_cells(
    d: Dims3,
    count: u32,
    voxels: &mut [f32],
    labels: &mut [u32],
    rng: &mut Rng,
) -> Result<()> {
    // Seeds drift linearly with depth and stay at least 3 voxels apart in every slice.
    let mid = (d.z as f64 - 1.0) / 2.0;
    let at = |s: &Seed, z: usize| {
        let t = z as f64 - mid;
        (
            (s.0 + s.2 * t).clamp(0.5, d.y as f64 - 0.5),
            (s.1 + s.3 * t).clamp(0.5, d.x as f64 - 0.5),
        )
    };
    let mut seeds: Vec<Seed> = Vec::new();
    let mut attempts = 0;
    while seeds.len() < count as usize {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS * 10 {
            return Err(Error::config(format!(
                "cannot seed {count} cells inside dims {d}"
            )));
        }
        let s = (
            rng.gen_range(0..d.y) as f64 + 0.5,
            rng.gen_range(0..d.x) as f64 + 0.5,
            rng.gen_range(-CELL_DRIFT..CELL_DRIFT),
            rng.gen_range(-CELL_DRIFT..CELL_DRIFT),
        );
        let apart = seeds.iter().all(|p| {
            (0..d.z).all(|z| {
                let (a, b) = (at(p, z), at(&s, z));
                ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() >= 3.0
            })
        });
        if apart {
            seeds.push(s);
        }
    }
    let tone: Vec<f32> = (0..count)
        .map(|_| rng.gen_range(0.5..0.75) as f32)
        .collect();
    let mut plane = vec![0u32; d.y * d.x];
    for z in 0..d.z {
        let centres: Vec<(f64, f64)> = seeds.iter().map(|s| at(s, z)).collect();
        for y in 0..d.y {
            for x in 0..d.x {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, c) in centres.iter().enumerate() {
                    let dist = (py - c.0).powi(2) + (px - c.1).powi(2);
                    if dist < best_d {
                        best_d = dist;
                        best = i;
                    }
                }
                plane[y * d.x + x] = best as u32 + 1;
            }
        }
        for y in 0..d.y {
            for x in 0..d.x {
                let l = plane[y * d.x + x];
                let membrane = (y > 0 && plane[(y - 1) * d.x + x] != l)
                    || (y + 1 < d.y && plane[(y + 1) * d.x + x] != l)
                    || (x > 0 && plane[y * d.x + x - 1] != l)
                    || (x + 1 < d.x && plane[y * d.x + x + 1] != l);
                let i = d.index(z, y, x);
                labels[i] = l;
                voxels[i] = if membrane { 0.1 } else { tone[l as usize - 1] };
            }
        }
    }
    Ok(())
}

/// (y, x, dy/dz, dx/dz) of a cell seed at mid-depth.
type Seed = (f64, f64, f64, f64);

fn edge_range(extent: usize, radius: f64, rng: &mut Rng) -> Option<f64> {
    let lo = radius;
    let hi = extent as f64 - 1.0 - radius;
    (hi > lo).then(|| rng.gen_range(lo..hi))
}
