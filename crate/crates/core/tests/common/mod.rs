//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use synthvlp::metrics::{arand, dice_slices, rand_pair_counts, voi, ContingencyTable, LogBase};

/// Outcome of an exhaustive metric sweep.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sweep {
    pub cases: u64,
    pub violations: u64,
    pub worst_entropy_error: f64,
}

/// Every labeling of `n` voxels with labels drawn from `0..k`.
pub fn all_labelings(n: usize, k: u32) -> Vec<Vec<u32>> {
    let total = (k as usize).pow(n as u32);
    (0..total)
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let l = (code % k as usize) as u32;
                    code /= k as usize;
                    l
                })
                .collect()
        })
        .collect()
}

/// Compare the library's table, pair counts, adapted Rand error and VOI for
/// one pair of labelings against direct enumeration.
pub fn check_pair(a: &[u32], b: &[u32], exclude: bool, out: &mut Sweep) {
    out.cases += 1;
    let keep: Vec<usize> = (0..a.len()).filter(|&i| !exclude || a[i] != 0).collect();
    let mut bad = false;

    let t = ContingencyTable::from_slices(a, b, exclude).unwrap();
    let mut cells = [[0u64; 3]; 3];
    for &i in &keep {
        cells[a[i] as usize][b[i] as usize] += 1;
    }
    for (x, row) in cells.iter().enumerate() {
        for (y, &c) in row.iter().enumerate() {
            let lib = t.cells().get(&(x as u32, y as u32)).copied().unwrap_or(0);
            bad |= lib != c;
        }
    }
    bad |= t.total() != keep.len() as u64;

    let (mut both, mut same_a, mut same_b) = (0u128, 0u128, 0u128);
    for (p, &u) in keep.iter().enumerate() {
        for &v in &keep[p + 1..] {
            let sa = a[u] == a[v];
            let sb = b[u] == b[v];
            both += u128::from(sa && sb);
            same_a += u128::from(sa);
            same_b += u128::from(sb);
        }
    }
    bad |= rand_pair_counts(&t) != (both, same_b, same_a);

    if keep.len() >= 2 {
        let expect = if same_a == 0 && same_b == 0 {
            0.0
        } else if both == 0 {
            1.0
        } else {
            let p = if same_b == 0 { 1.0 } else { both as f64 / same_b as f64 };
            let r = if same_a == 0 { 1.0 } else { both as f64 / same_a as f64 };
            1.0 - 2.0 * p * r / (p + r)
        };
        bad |= (arand(&t).unwrap() - expect).abs() >= 1e-12;
    }

    if !keep.is_empty() {
        let n = keep.len() as f64;
        let count = |f: &dyn Fn(usize) -> bool| keep.iter().filter(|&&j| f(j)).count() as f64;
        let (mut h_a_given_b, mut h_b_given_a) = (0.0, 0.0);
        for &i in &keep {
            let joint = count(&|j| a[j] == a[i] && b[j] == b[i]);
            h_a_given_b -= (joint / count(&|j| b[j] == b[i])).ln() / n;
            h_b_given_a -= (joint / count(&|j| a[j] == a[i])).ln() / n;
        }
        let v = voi(&t, LogBase::Nats).unwrap();
        let err = (v.split - h_a_given_b).abs().max((v.merge - h_b_given_a).abs());
        out.worst_entropy_error = out.worst_entropy_error.max(err);
        bad |= err >= 1e-12;
    }

    out.violations += u64::from(bad);
}

/// Per-class Dice over classes {0, 1, 2} against direct counting.
pub fn check_dice(pred: &[u32], gt: &[u32], out: &mut Sweep) {
    out.cases += 1;
    let d = dice_slices(pred, gt, &[0, 1, 2]).unwrap();
    let mut bad = false;
    for c in 0..3u32 {
        let p = pred.iter().filter(|&&l| l == c).count() as f64;
        let g = gt.iter().filter(|&&l| l == c).count() as f64;
        let both = pred.iter().zip(gt).filter(|(&x, &y)| x == c && y == c).count() as f64;
        let expect = if p + g == 0.0 { 1.0 } else { 2.0 * both / (p + g) };
        bad |= d.per_class[&c] != expect;
    }
    out.violations += u64::from(bad);
}

/// Labelings of `n` voxels with at most `k` labels, one per class of label
/// renamings: the first voxel is 0 and every new label is the next unused.
pub fn canonical_labelings(n: usize, k: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(n);
    fn rec(n: usize, k: u32, next: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for l in 0..=next.min(k - 1) {
            cur.push(l);
            rec(n, k, next.max(l + 1), cur, out);
            cur.pop();
        }
    }
    rec(n, k, 0, &mut cur, &mut out);
    out
}

pub const GRID_VOXEL_COUNTS: [usize; 4] = [1, 2, 4, 8];

/// Instance metrics: every ground-truth labeling with at most three labels
/// against every prediction up to renaming of its labels, for every voxel
/// count of a grid up to 2×2×2, with and without background exclusion.
pub fn exhaustive_instance_sweep(counts: &[usize]) -> Sweep {
    let mut out = Sweep::default();
    for &n in counts {
        let preds = canonical_labelings(n, 3);
        for a in &all_labelings(n, 3) {
            for b in &preds {
                check_pair(a, b, false, &mut out);
                check_pair(a, b, true, &mut out);
            }
        }
    }
    out
}

/// Dice: every pair of labelings with labels in {0, 1, 2}.
pub fn exhaustive_dice_sweep(counts: &[usize]) -> Sweep {
    let mut out = Sweep::default();
    for &n in counts {
        let all = all_labelings(n, 3);
        for p in &all {
            for g in &all {
                check_dice(p, g, &mut out);
            }
        }
    }
    out
}

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use synthvlp::objectives::{vlp_loss, vr_loss, LossWeights};
use synthvlp::rng::{seeded, Rng as ChaRng};

pub fn random_matrix(rng: &mut ChaRng, k: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((k, d), |_| rng.gen_range(-2.0..2.0))
}

/// Cross-correlation of per-feature standardized batches, computed directly.
pub fn cross_correlation(v1: ArrayView2<f64>, v2: ArrayView2<f64>) -> Array2<f64> {
    let std = |v: ArrayView2<f64>| {
        let k = v.nrows() as f64;
        let mut out = v.to_owned();
        for mut col in out.axis_iter_mut(Axis(1)) {
            let mean = col.sum() / k;
            col.mapv_inplace(|x| x - mean);
            let norm = col.dot(&col).sqrt();
            col.mapv_inplace(|x| x / norm);
        }
        out
    };
    std(v1).t().dot(&std(v2))
}

pub fn vlp_permutation_holds(vhat: &Array2<f64>, that: &Array2<f64>, perm: &[usize]) -> bool {
    let a = vlp_loss(vhat.view(), that.view(), 0.07).unwrap().total;
    let p = |m: &Array2<f64>| m.select(Axis(0), perm);
    let b = vlp_loss(p(vhat).view(), p(that).view(), 0.07).unwrap().total;
    (a - b).abs() <= 1e-12 * a.abs().max(1.0)
}

pub fn vr_affine_holds(v1: &Array2<f64>, v2: &Array2<f64>, scale: &[f64], shift: &[f64]) -> bool {
    let w = LossWeights::default();
    let t = |m: &Array2<f64>| {
        let mut m = m.clone();
        for (j, mut col) in m.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|x| scale[j] * x + shift[j]);
        }
        m
    };
    let a = vr_loss(v1.view(), v2.view(), &w).unwrap().total;
    let b = vr_loss(t(v1).view(), t(v2).view(), &w).unwrap().total;
    (a - b).abs() <= 1e-10 * a.abs().max(1.0)
}

/// The loss equals the direct formula in C, is bounded below by a multiple
/// of ||C - I||², and so vanishes exactly when C = I.
pub fn vr_zero_iff_identity_holds(v1: &Array2<f64>, v2: &Array2<f64>) -> bool {
    let w = LossWeights::default();
    let c = cross_correlation(v1.view(), v2.view());
    let d = c.nrows();
    let mut direct = 0.0;
    let mut dist2 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let e = c[[i, j]] - if i == j { 1.0 } else { 0.0 };
            dist2 += e * e;
            direct += if i == j { e * e } else { w.lambda_offdiag * e * e };
        }
    }
    direct /= d as f64;
    let loss = vr_loss(v1.view(), v2.view(), &w).unwrap().total;
    let bound = w.lambda_offdiag.min(1.0) / d as f64 * dist2;
    (loss - direct).abs() <= 1e-10 * direct.max(1.0) && loss >= bound * (1.0 - 1e-10) && (loss == 0.0) == (dist2 == 0.0)
}

/// Batch whose standardized columns are orthonormal, so that C(V, V) = I.
pub fn decorrelated_batch(rng: &mut ChaRng, k: usize, d: usize) -> Array2<f64> {
    let mut q = random_matrix(rng, k, d);
    for j in 0..d {
        let mean = q.column(j).sum() / k as f64;
        q.column_mut(j).mapv_inplace(|x| x - mean);
        for i in 0..j {
            let prev = q.column(i).to_owned();
            let proj = q.column(j).dot(&prev);
            q.column_mut(j).scaled_add(-proj, &prev);
        }
        let n = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|x| x / n);
    }
    for j in 0..d {
        let (a, b) = (rng.gen_range(0.5..3.0), rng.gen_range(-1.0..1.0));
        q.column_mut(j).mapv_inplace(|x| a * x + b);
    }
    q
}

/// Counts of `(instances, violations)` for the three objective invariances.
pub fn fuzz_objective_invariances(instances: usize, seed: u64) -> [(usize, usize); 3] {
    let mut rng = seeded(seed);
    let mut out = [(0, 0); 3];
    for _ in 0..instances {
        let k = rng.gen_range(2..=8);
        let d = rng.gen_range(3..=16);
        let (a, b) = (random_matrix(&mut rng, k, d), random_matrix(&mut rng, k, d));
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        out[0].0 += 1;
        out[0].1 += usize::from(!vlp_permutation_holds(&a, &b, &perm));

        let scale: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..10.0)).collect();
        let shift: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        out[1].0 += 1;
        out[1].1 += usize::from(!vr_affine_holds(&a, &b, &scale, &shift));

        let kk = rng.gen_range(d + 1..=d + 8);
        let z = decorrelated_batch(&mut rng, kk, d);
        let zero = vr_loss(z.view(), z.view(), &LossWeights::default()).unwrap().total;
        out[2].0 += 2;
        out[2].1 += usize::from(zero > 1e-20 && !vr_zero_iff_identity_holds(&z, &z));
        out[2].1 += usize::from(!vr_zero_iff_identity_holds(&a, &b));
        let c = cross_correlation(z.view(), z.view());
        let off = (&c - &Array2::<f64>::eye(d)).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        out[2].1 += usize::from(zero > 1e-24 || off > 1e-12);
    }
    out
}
