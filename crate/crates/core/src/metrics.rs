//! Segmentation evaluation: Dice for semantic labelings, variation of
//! information and adapted Rand error for instance labelings, all built on a
//! sparse contingency table.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{Dims3, LabelKind, LabelVolume};

/// Sparse joint label counts between labelings `a` and `b`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContingencyTable {
    cells: BTreeMap<(u32, u32), u64>,
    a_marginal: BTreeMap<u32, u64>,
    b_marginal: BTreeMap<u32, u64>,
    n: u64,
}

impl ContingencyTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Count one chunk of co-located labels. Chunks may arrive in any order;
    /// the resulting table is the same as a single pass.
    pub fn accumulate(&mut self, a: &[u32], b: &[u32], exclude_background: bool) {
        debug_assert_eq!(a.len(), b.len());
        for (&la, &lb) in a.iter().zip(b) {
            if exclude_background && la == LabelVolume::BACKGROUND {
                continue;
            }
            *self.cells.entry((la, lb)).or_insert(0) += 1;
            *self.a_marginal.entry(la).or_insert(0) += 1;
            *self.b_marginal.entry(lb).or_insert(0) += 1;
            self.n += 1;
        }
    }

    pub fn from_slices(a: &[u32], b: &[u32], exclude_background: bool) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::dimension(format!(
                "labelings hold {} and {} voxels",
                a.len(),
                b.len()
            )));
        }
        let mut t = Self::new();
        t.accumulate(a, b, exclude_background);
        Ok(t)
    }

    pub fn merge(&mut self, other: &ContingencyTable) {
        for (&k, &c) in &other.cells {
            *self.cells.entry(k).or_insert(0) += c;
        }
        for (&k, &c) in &other.a_marginal {
            *self.a_marginal.entry(k).or_insert(0) += c;
        }
        for (&k, &c) in &other.b_marginal {
            *self.b_marginal.entry(k).or_insert(0) += c;
        }
        self.n += other.n;
    }

    /// Swap the roles of `a` and `b`.
    pub fn transposed(&self) -> ContingencyTable {
        ContingencyTable {
            cells: self.cells.iter().map(|(&(a, b), &c)| ((b, a), c)).collect(),
            a_marginal: self.b_marginal.clone(),
            b_marginal: self.a_marginal.clone(),
            n: self.n,
        }
    }

    pub fn cells(&self) -> &BTreeMap<(u32, u32), u64> {
        &self.cells
    }

    pub fn a_marginal(&self) -> &BTreeMap<u32, u64> {
        &self.a_marginal
    }

    pub fn b_marginal(&self) -> &BTreeMap<u32, u64> {
        &self.b_marginal
    }

    pub fn total(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Build the table for two labelings; with `exclude_background`, voxels
/// whose `a` label is 0 are dropped before counting.
pub fn contingency(
    a: &LabelVolume,
    b: &LabelVolume,
    exclude_background: bool,
) -> Result<ContingencyTable> {
    if a.dims != b.dims {
        return Err(Error::dimension(format!(
            "label volumes have dims {} and {}",
            a.dims, b.dims
        )));
    }
    ContingencyTable::from_slices(&a.labels, &b.labels, exclude_background)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Nats,
    Bits,
}

impl LogBase {
    fn scale(self) -> f64 {
        match self {
            LogBase::Nats => 1.0,
            LogBase::Bits => 1.0 / std::f64::consts::LN_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Voi {
    pub split: f64,
    pub merge: f64,
    pub total: f64,
}

/// Variation of information from a table: `split = H(A|B)`,
/// `merge = H(B|A)`. With the segmentation on side `a` and ground truth on
/// side `b`, `split` measures over-segmentation.
pub fn voi(t: &ContingencyTable, base: LogBase) -> Result<Voi> {
    if t.n == 0 {
        return Err(Error::Degenerate(
            "variation of information needs at least one voxel".into(),
        ));
    }
    let n = t.n as f64;
    // H(A|B) = -sum p_ij log(p_ij / p_j), H(B|A) = -sum p_ij log(p_ij / p_i)
    let mut split = 0.0;
    let mut merge = 0.0;
    for (&(a, b), &c) in &t.cells {
        let p = c as f64 / n;
        let pa = t.a_marginal[&a] as f64 / n;
        let pb = t.b_marginal[&b] as f64 / n;
        split -= p * (p / pb).ln();
        merge -= p * (p / pa).ln();
    }
    let s = base.scale();
    let (split, merge) = ((split * s).max(0.0), (merge * s).max(0.0));
    Ok(Voi {
        split,
        merge,
        total: split + merge,
    })
}

fn pairs(c: u64) -> u128 {
    let c = c as u128;
    c * c.saturating_sub(1) / 2
}

/// Pair counts behind the adapted Rand error: pairs joined in both
/// labelings, pairs joined in `b`, pairs joined in `a`.
pub fn rand_pair_counts(t: &ContingencyTable) -> (u128, u128, u128) {
    let joint: u128 = t.cells.values().map(|&c| pairs(c)).sum();
    let b: u128 = t.b_marginal.values().map(|&c| pairs(c)).sum();
    let a: u128 = t.a_marginal.values().map(|&c| pairs(c)).sum();
    (joint, b, a)
}

/// Adapted Rand error `1 - F1` over voxel pairs, ground truth on side `a`.
///
/// Precision is the fraction of pairs joined in `b` that are also joined in
/// `a`, recall the fraction of pairs joined in `a` also joined in `b`. A
/// side that joins no pairs has precision (or recall) 1.
pub fn arand(t: &ContingencyTable) -> Result<f64> {
    if t.n < 2 {
        return Err(Error::Degenerate(format!(
            "adapted Rand error needs at least two voxels, table holds {}",
            t.n
        )));
    }
    let (joint, b, a) = rand_pair_counts(t);
    Ok(rand_error_from_counts(joint, b, a))
}

pub(crate) fn rand_error_from_counts(joint: u128, b: u128, a: u128) -> f64 {
    let precision = if b == 0 { 1.0 } else { joint as f64 / b as f64 };
    let recall = if a == 0 { 1.0 } else { joint as f64 / a as f64 };
    if precision + recall == 0.0 {
        return 1.0;
    }
    let f1 = 2.0 * precision * recall / (precision + recall);
    (1.0 - f1).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_class: BTreeMap<u32, f64>,
    /// Mean over foreground classes (all classes if only background given).
    pub mean: f64,
}

/// Dice on raw label slices.
pub fn dice_slices(pred: &[u32], gt: &[u32], classes: &[u32]) -> Result<DiceReport> {
    if classes.is_empty() {
        return Err(Error::config("dice needs a non-empty class set"));
    }
    if pred.len() != gt.len() {
        return Err(Error::dimension(format!(
            "prediction holds {} voxels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut per_class = BTreeMap::new();
    for &c in classes {
        let mut p = 0u64;
        let mut g = 0u64;
        let mut both = 0u64;
        for (&lp, &lg) in pred.iter().zip(gt) {
            let ip = lp == c;
            let ig = lg == c;
            p += u64::from(ip);
            g += u64::from(ig);
            both += u64::from(ip && ig);
        }
        let score = if p + g == 0 {
            1.0
        } else {
            2.0 * both as f64 / (p + g) as f64
        };
        per_class.insert(c, score);
    }
    let fg: Vec<f64> = per_class
        .iter()
        .filter(|(&c, _)| c != LabelVolume::BACKGROUND)
        .map(|(_, &s)| s)
        .collect();
    let mean = if fg.is_empty() {
        per_class.values().sum::<f64>() / per_class.len() as f64
    } else {
        fg.iter().sum::<f64>() / fg.len() as f64
    };
    Ok(DiceReport { per_class, mean })
}

/// Per-class Dice `2|P∩G| / (|P|+|G|)`; a class absent from both scores 1.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, classes: &[u32]) -> Result<DiceReport> {
    if pred.kind != LabelKind::Semantic || gt.kind != LabelKind::Semantic {
        return Err(Error::config("dice expects semantic label volumes"));
    }
    if pred.dims != gt.dims {
        return Err(Error::dimension(format!(
            "label volumes have dims {} and {}",
            pred.dims, gt.dims
        )));
    }
    dice_slices(&pred.labels, &gt.labels, classes)
}

/// Argmax over channel-major logits (`classes × voxels`); ties resolve to
/// the lowest class index.
pub fn argmax_labels(logits: &[f64], n_classes: usize, dims: Dims3) -> Result<LabelVolume> {
    let n = dims.len();
    if n_classes == 0 || logits.len() != n_classes * n {
        return Err(Error::dimension(format!(
            "{} logits for {n_classes} classes over {n} voxels",
            logits.len()
        )));
    }
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..n_classes {
                if logits[c * n + i] > logits[best * n + i] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    LabelVolume::semantic(dims, labels, (0..n_classes as u32).collect())
}

/// 26-connected components of every foreground class, numbered 1..M in
/// raster scan order of their first voxel.
pub fn instances_from_argmax(pred: &LabelVolume) -> LabelVolume {
    let d = pred.dims;
    let mut out = vec![0u32; d.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..d.len() {
        let class = pred.labels[start];
        if class == LabelVolume::BACKGROUND || out[start] != 0 {
            continue;
        }
        next += 1;
        out[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let z = i / (d.y * d.x);
            let y = (i / d.x) % d.y;
            let x = i % d.x;
            for dz in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
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
                        let j = d.index(nz as usize, ny as usize, nx as usize);
                        if out[j] == 0 && pred.labels[j] == class {
                            out[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    LabelVolume {
        dims: d,
        labels: out,
        kind: LabelKind::Instance,
        classes: Vec::new(),
    }
}

/// Full evaluation of one prediction against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: Option<DiceReport>,
    pub voi_split: Option<f64>,
    pub voi_merge: Option<f64>,
    pub voi_total: Option<f64>,
    pub arand: Option<f64>,
    pub log_base: LogBase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Drop ground-truth background voxels for the instance metrics.
    pub exclude_background_instances: bool,
    /// Drop ground-truth background voxels for Dice.
    pub exclude_background_dice: bool,
    pub log_base: LogBase,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            exclude_background_instances: true,
            exclude_background_dice: false,
            log_base: LogBase::Nats,
        }
    }
}

/// Semantic labelings get Dice; instance labelings get VOI and adapted Rand.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, opts: &EvalOptions) -> Result<MetricReport> {
    if pred.dims != gt.dims {
        return Err(Error::dimension(format!(
            "prediction dims {} differ from ground truth dims {}",
            pred.dims, gt.dims
        )));
    }
    let mut report = MetricReport {
        dice: None,
        voi_split: None,
        voi_merge: None,
        voi_total: None,
        arand: None,
        log_base: opts.log_base,
    };
    match gt.kind {
        LabelKind::Semantic => {
            let classes = gt.classes.clone();
            let d = if opts.exclude_background_dice {
                let (p, g): (Vec<u32>, Vec<u32>) = pred
                    .labels
                    .iter()
                    .zip(&gt.labels)
                    .filter(|(_, &g)| g != LabelVolume::BACKGROUND)
                    .map(|(&p, &g)| (p, g))
                    .unzip();
                dice_slices(&p, &g, &classes)?
            } else {
                dice_slices(&pred.labels, &gt.labels, &classes)?
            };
            report.dice = Some(d);
        }
        LabelKind::Instance => {
            let t = contingency(gt, pred, opts.exclude_background_instances)?;
            let v = voi(&t.transposed(), opts.log_base)?;
            report.voi_split = Some(v.split);
            report.voi_merge = Some(v.merge);
            report.voi_total = Some(v.total);
            report.arand = Some(arand(&t)?);
        }
    }
    Ok(report)
}

impl MetricReport {
    /// Rows of `metric,class_or_side,value`.
    pub fn csv_rows(&self) -> Vec<(String, String, f64)> {
        let mut rows = Vec::new();
        if let Some(d) = &self.dice {
            for (c, s) in &d.per_class {
                rows.push(("dice".into(), c.to_string(), *s));
            }
            rows.push(("dice".into(), "mean".into(), d.mean));
        }
        for (side, v) in [
            ("split", self.voi_split),
            ("merge", self.voi_merge),
            ("total", self.voi_total),
        ] {
            if let Some(v) = v {
                rows.push(("voi".into(), side.into(), v));
            }
        }
        if let Some(a) = self.arand {
            rows.push(("arand".into(), "error".into(), a));
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(labels: &[u32]) -> LabelVolume {
        LabelVolume {
            dims: Dims3::new(1, 1, labels.len()),
            labels: labels.to_vec(),
            kind: LabelKind::Instance,
            classes: vec![],
        }
    }

    fn sem(labels: &[u32], classes: &[u32]) -> LabelVolume {
        LabelVolume::semantic(Dims3::new(1, 1, labels.len()), labels.to_vec(), classes.to_vec())
            .unwrap()
    }

    #[test]
    fn identical_labelings_give_diagonal_table() {
        let a = inst(&[0, 1, 1, 2, 2, 2, 3, 3]);
        let t = contingency(&a, &a, false).unwrap();
        assert_eq!(t.total(), 8);
        assert!(t.cells().keys().all(|(x, y)| x == y));
        assert_eq!(t.cells().values().sum::<u64>(), 8);
    }

    #[test]
    fn hand_counted_table() {
        let t = contingency(&inst(&[1, 1, 2, 2]), &inst(&[1, 1, 1, 2]), false).unwrap();
        let expect: BTreeMap<(u32, u32), u64> =
            [((1, 1), 2), ((2, 1), 1), ((2, 2), 1)].into_iter().collect();
        assert_eq!(t.cells(), &expect);
    }

    #[test]
    fn exclude_background_with_all_zero_is_empty() {
        let t = contingency(&inst(&[0, 0, 0]), &inst(&[1, 2, 3]), true).unwrap();
        assert!(t.is_empty());
        assert!(voi(&t, LogBase::Nats).is_err());
        assert!(arand(&t).is_err());
    }

    #[test]
    fn dims_must_match() {
        assert!(contingency(&inst(&[1, 2]), &inst(&[1, 2, 3]), false).is_err());
    }

    #[test]
    fn voi_worked_example() {
        let t = contingency(&inst(&[1, 1, 2, 2]), &inst(&[1, 1, 1, 2]), false).unwrap();
        let bits = voi(&t, LogBase::Bits).unwrap();
        let h_b = -(0.75f64 * 0.75f64.log2() + 0.25 * 0.25f64.log2());
        assert!((bits.total - (3.0 - 1.0 - h_b)).abs() < 1e-12);
        let nats = voi(&t, LogBase::Nats).unwrap();
        assert!((nats.total - bits.total * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((nats.total - 0.8240).abs() < 1e-4);
        assert!((nats.split + nats.merge - nats.total).abs() < 1e-12);
        let swapped = voi(&t.transposed(), LogBase::Nats).unwrap();
        assert!((swapped.split - nats.merge).abs() < 1e-15);
        assert!((swapped.merge - nats.split).abs() < 1e-15);
    }

    #[test]
    fn identity_metrics() {
        let a = inst(&[1, 1, 2, 2, 3, 0]);
        let t = contingency(&a, &a, true).unwrap();
        let v = voi(&t, LogBase::Nats).unwrap();
        assert_eq!((v.split, v.merge, v.total), (0.0, 0.0, 0.0));
        assert_eq!(arand(&t).unwrap(), 0.0);
        let s = sem(&[0, 1, 1, 2], &[0, 1, 2]);
        assert_eq!(dice(&s, &s, &[0, 1, 2]).unwrap().mean, 1.0);
    }

    #[test]
    fn arand_worked_example() {
        // b joins all 6 pairs, a joins 2: precision 1/3, recall 1, F1 1/2.
        let t = contingency(&inst(&[1, 1, 2, 2]), &inst(&[1, 1, 1, 1]), false).unwrap();
        assert_eq!(rand_pair_counts(&t), (2, 6, 2));
        assert!((arand(&t).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dice_counting_cases() {
        // |P| = 4, |G| = 6, overlap 3
        let pred = sem(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0], &[0, 1]);
        let gt = sem(&[1, 1, 1, 0, 1, 1, 1, 0, 0, 0], &[0, 1]);
        let r = dice(&pred, &gt, &[1]).unwrap();
        assert!((r.per_class[&1] - 0.6).abs() < 1e-15);
        let disjoint = sem(&[0, 0, 0, 0, 1, 1, 0, 0, 0, 0], &[0, 1]);
        let only = sem(&[1, 1, 0, 0, 0, 0, 0, 0, 0, 0], &[0, 1]);
        assert_eq!(dice(&disjoint, &only, &[1]).unwrap().mean, 0.0);
        assert!(matches!(dice(&pred, &gt, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn absent_class_scores_one() {
        let p = sem(&[0, 1], &[0, 1, 2]);
        let r = dice(&p, &p, &[1, 2]).unwrap();
        assert_eq!(r.per_class[&2], 1.0);
    }

    #[test]
    fn components_are_separated_and_scan_ordered() {
        let d = Dims3::new(1, 3, 5);
        let labels = vec![
            1, 1, 0, 0, 1, //
            0, 0, 0, 0, 1, //
            2, 0, 0, 0, 0,
        ];
        let lv = LabelVolume::semantic(d, labels, vec![0, 1, 2]).unwrap();
        let inst = instances_from_argmax(&lv);
        assert_eq!(
            inst.labels,
            vec![1, 1, 0, 0, 2, 0, 0, 0, 0, 2, 3, 0, 0, 0, 0]
        );
        assert_eq!(inst, instances_from_argmax(&lv));
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let d = Dims3::new(2, 2, 2);
        let lv = LabelVolume::semantic(d, vec![1, 0, 0, 0, 0, 0, 0, 1], vec![0, 1]).unwrap();
        assert_eq!(instances_from_argmax(&lv).foreground_ids(), vec![1]);
        let single = LabelVolume::semantic(d, vec![0, 0, 0, 1, 0, 0, 0, 0], vec![0, 1]).unwrap();
        assert_eq!(instances_from_argmax(&single).foreground_ids(), vec![1]);
    }

    #[test]
    fn argmax_ties_pick_lowest_class() {
        let d = Dims3::new(1, 1, 2);
        let l = argmax_labels(&[0.5, 1.0, 0.5, 1.0], 2, d).unwrap();
        assert_eq!(l.labels, vec![0, 0]);
        let single = argmax_labels(&[3.0, -1.0], 1, d).unwrap();
        assert_eq!(single.labels, vec![0, 0]);
    }

    #[test]
    fn chunked_accumulation_matches_single_pass() {
        let a: Vec<u32> = (0..97).map(|i| (i * 7 % 5) as u32).collect();
        let b: Vec<u32> = (0..97).map(|i| (i * 3 % 4) as u32).collect();
        let whole = ContingencyTable::from_slices(&a, &b, true).unwrap();
        let mut chunks = ContingencyTable::new();
        for (ca, cb) in a.chunks(13).zip(b.chunks(13)).rev() {
            let mut part = ContingencyTable::new();
            part.accumulate(ca, cb, true);
            chunks.merge(&part);
        }
        assert_eq!(whole, chunks);
    }
}
