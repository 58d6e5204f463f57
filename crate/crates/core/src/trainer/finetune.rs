use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointKind, RngState};
use super::{config_hash, FinetuneConfig};
use crate::encoders::{EncoderConfig, ImageEncoder, SegDecoder};
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, evaluate, instances_from_argmax};
use crate::nn::{prefixed, prefixed_mut, softmax, AdamW, FeatureMap, Grads, Parameterized, Tensor};
use crate::rng::{derive_seed, derived};
use crate::volumes::{center_crop, crop_labels, sample_patch, LabelKind, LabelVolume, Patch, Volume};

const STEP_STREAM: u64 = 20;
const DICE_SMOOTH: f64 = 1.0;

/// Image encoder with a segmentation decoder on top.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    pub encoder: ImageEncoder,
    pub decoder: SegDecoder,
}

impl SegmentationModel {
    pub fn random(enc: &EncoderConfig, n_classes: usize, seed: u64) -> Result<Self> {
        let encoder = ImageEncoder::new(enc, derive_seed(seed, &[201]))?;
        let decoder = SegDecoder::new(&encoder.stage_channels(), n_classes, derive_seed(seed, &[200]))?;
        Ok(SegmentationModel { encoder, decoder })
    }

    /// Encoder weights from a pretraining checkpoint, fresh decoder.
    pub fn from_pretrained(ckpt: &Checkpoint, n_classes: usize, seed: u64) -> Result<Self> {
        let enc_cfg: EncoderConfig = serde_json::from_value(
            ckpt.config
                .get("encoder")
                .cloned()
                .ok_or_else(|| Error::config("checkpoint config has no encoder section"))?,
        )?;
        let mut m = SegmentationModel::random(&enc_cfg, n_classes, seed)?;
        m.encoder.load_blocks(&ckpt.sub_blocks("image_encoder"))?;
        Ok(m)
    }

    /// Per-voxel class logits for a patch.
    pub fn logits(&self, p: &Patch) -> Result<FeatureMap> {
        let t = self.encoder.forward(p)?;
        Ok(self.decoder.forward(&t)?.logits)
    }

    pub fn predict(&self, p: &Patch) -> Result<LabelVolume> {
        let l = self.logits(p)?;
        argmax_labels(&l.data, l.channels, l.dims)
    }

    fn loss_and_grads(&self, p: &Patch, target: &[u32], grads: &mut Grads) -> Result<f64> {
        let t = self.encoder.forward(p)?;
        let d = self.decoder.forward(&t)?;
        let (loss, g) = soft_dice_ce(&d.logits, target)?;
        let (gb, gs) = self.decoder.backward(&d, &g, grads, "decoder");
        self.encoder.backward(&t, gb, Some(&gs), grads, "image_encoder");
        Ok(loss)
    }
}

impl Parameterized for SegmentationModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("image_encoder", self.encoder.params());
        v.extend(prefixed("decoder", self.decoder.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("image_encoder", self.encoder.params_mut());
        v.extend(prefixed_mut("decoder", self.decoder.params_mut()));
        v
    }
}

/// Mean soft-Dice loss over all classes plus mean voxel cross-entropy, with
/// the gradient with respect to the logits.
pub fn soft_dice_ce(logits: &FeatureMap, target: &[u32]) -> Result<(f64, FeatureMap)> {
    let c = logits.channels;
    let n = logits.dims.len();
    if target.len() != n {
        return Err(Error::dimension(format!(
            "target holds {} voxels, logits {n}",
            target.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
        return Err(Error::config(format!("target class {bad} outside {c} logit channels")));
    }
    let mut probs = vec![0.0; c * n];
    let mut ce = 0.0;
    let mut col = vec![0.0; c];
    for i in 0..n {
        for k in 0..c {
            col[k] = logits.data[k * n + i];
        }
        let p = softmax(&col);
        ce -= p[target[i] as usize].max(f64::MIN_POSITIVE).ln();
        for k in 0..c {
            probs[k * n + i] = p[k];
        }
    }
    ce /= n as f64;
    // dL/dp for the Dice part
    let mut gp = vec![0.0; c * n];
    let mut dice_loss = 0.0;
    for k in 0..c {
        let pk = &probs[k * n..(k + 1) * n];
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for i in 0..n {
            let g = f64::from(target[i] as usize == k);
            inter += pk[i] * g;
            psum += pk[i];
            gsum += g;
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = psum + gsum + DICE_SMOOTH;
        dice_loss += 1.0 - num / den;
        for i in 0..n {
            let g = f64::from(target[i] as usize == k);
            gp[k * n + i] = -(2.0 * g * den - num) / (den * den) / c as f64;
        }
    }
    dice_loss /= c as f64;
    let mut out = FeatureMap::zeros(c, logits.dims);
    for i in 0..n {
        let dot: f64 = (0..c).map(|k| probs[k * n + i] * gp[k * n + i]).sum();
        for k in 0..c {
            let p = probs[k * n + i];
            let onehot = f64::from(target[i] as usize == k);
            out.data[k * n + i] = p * (gp[k * n + i] - dot) + (p - onehot) / n as f64;
        }
    }
    Ok((dice_loss + ce, out))
}

/// Seeded split of the labeled volume indices into a training subset (the
/// label-fraction prefix of the training pool) and a held-out set.
pub fn split_labeled(labeled: &[usize], cfg: &FinetuneConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    if labeled.len() < 2 {
        return Err(Error::config(format!(
            "finetuning needs at least 2 labeled volumes, found {}",
            labeled.len()
        )));
    }
    let mut order = labeled.to_vec();
    order.shuffle(&mut derived(cfg.seed, &[1]));
    let n_hold =
        ((labeled.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, labeled.len() - 1);
    let (held, pool) = order.split_at(n_hold);
    let n_train = (pool.len() as f64 * cfg.label_fraction + 1e-9).floor() as usize;
    if n_train == 0 {
        return Err(Error::config(format!(
            "label_fraction {} of a {}-volume training pool leaves no volumes",
            cfg.label_fraction,
            pool.len()
        )));
    }
    Ok((pool[..n_train].to_vec(), held.to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub run_seed: u64,
    pub train_volumes: usize,
    pub heldout_volumes: usize,
    pub heldout_ids: Vec<String>,
    /// Mean over held-out volumes of the foreground-mean Dice.
    pub dice: f64,
    /// Means over held-out volumes with instance ground truth.
    pub voi_split: Option<f64>,
    pub voi_merge: Option<f64>,
    pub arand: Option<f64>,
    pub loss_curve: Vec<f64>,
}

impl FinetuneReport {
    /// Rows of `run_seed,metric,value`.
    pub fn csv_rows(&self) -> Vec<(u64, String, f64)> {
        let mut rows = vec![(self.run_seed, "dice".to_string(), self.dice)];
        for (name, v) in [
            ("voi_split", self.voi_split),
            ("voi_merge", self.voi_merge),
            ("arand", self.arand),
        ] {
            if let Some(v) = v {
                rows.push((self.run_seed, name.into(), v));
            }
        }
        if let Some(&l) = self.loss_curve.last() {
            rows.push((self.run_seed, "final_loss".into(), l));
        }
        rows
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: SegmentationModel,
    pub checkpoint: Checkpoint,
    pub report: FinetuneReport,
}

/// Whole volume when it matches `dims`, otherwise its center crop.
pub fn eval_patch(v: &Volume, dims: crate::volumes::Dims3) -> Result<Patch> {
    if v.dims == dims {
        Ok(Patch::whole(v))
    } else {
        center_crop(v, dims)
    }
}

/// Jointly train encoder and decoder on the label-fraction subset and
/// evaluate on the held-out split. `init` is a pretraining checkpoint; `None`
/// means a randomly initialized encoder.
pub fn finetune(
    volumes: &[Volume],
    labels: &[Option<LabelVolume>],
    cfg: &FinetuneConfig,
    init: Option<&Checkpoint>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if labels.len() != volumes.len() {
        return Err(Error::dimension(format!(
            "{} label entries for {} volumes",
            labels.len(),
            volumes.len()
        )));
    }
    let targets: Vec<Option<LabelVolume>> = labels
        .iter()
        .zip(volumes)
        .map(|(l, v)| l.as_ref().map(|l| l.segmentation_target(v.modality)))
        .collect();
    let labeled: Vec<usize> = (0..volumes.len()).filter(|&i| targets[i].is_some()).collect();
    let (train, held) = split_labeled(&labeled, cfg)?;
    let n_classes = targets
        .iter()
        .flatten()
        .flat_map(|t| t.classes.iter().chain(t.labels.iter()))
        .max()
        .map_or(2, |&m| m as usize + 1)
        .max(2);
    let mut model = match init {
        Some(c) => SegmentationModel::from_pretrained(c, n_classes, cfg.seed)?,
        None => SegmentationModel::random(&cfg.encoder, n_classes, cfg.seed)?,
    };
    model.encoder.check_dims(cfg.patch_dims)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = derived(cfg.seed, &[STEP_STREAM, step]);
        let mut grads = Grads::new();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let i = train[rng.gen_range(0..train.len())];
            let p = sample_patch(&volumes[i], cfg.patch_dims, &mut rng)?;
            let t = crop_labels(targets[i].as_ref().unwrap(), p.origin, p.dims);
            loss += model.loss_and_grads(&p, &t.labels, &mut grads)?;
        }
        let s = 1.0 / cfg.batch_size as f64;
        grads.scale(s);
        curve.push(loss * s);
        opt.step(model.params_mut(), &grads)?;
    }

    let mut dice = 0.0;
    let mut split = Vec::new();
    let mut merge = Vec::new();
    let mut arand = Vec::new();
    for &i in &held {
        let p = eval_patch(&volumes[i], cfg.patch_dims)?;
        let pred = model.predict(&p)?;
        let gt = crop_labels(targets[i].as_ref().unwrap(), p.origin, p.dims);
        let r = evaluate(&pred, &gt, &cfg.eval)?;
        dice += r.dice.map_or(0.0, |d| d.mean);
        if let Some(raw) = labels[i].as_ref().filter(|l| l.kind == LabelKind::Instance) {
            if volumes[i].modality == crate::volumes::Modality::EmLike {
                let gt_inst = crop_labels(raw, p.origin, p.dims);
                let r = evaluate(&instances_from_argmax(&pred), &gt_inst, &cfg.eval)?;
                split.extend(r.voi_split);
                merge.extend(r.voi_merge);
                arand.extend(r.arand);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let report = FinetuneReport {
        run_seed: cfg.seed,
        train_volumes: train.len(),
        heldout_volumes: held.len(),
        heldout_ids: held.iter().map(|&i| volumes[i].id.clone()).collect(),
        dice: dice / held.len() as f64,
        voi_split: mean(&split),
        voi_merge: mean(&merge),
        arand: mean(&arand),
        loss_curve: curve,
    };
    let mut config = serde_json::to_value(cfg)?;
    if let Some(c) = init {
        config["pretrain_config_hash"] = c.config_hash.clone().into();
    }
    let checkpoint = Checkpoint {
        kind: CheckpointKind::Finetune,
        config,
        config_hash: config_hash(cfg)?,
        iteration: cfg.steps,
        rng: RngState {
            seed: cfg.seed,
            next_step: cfg.steps,
        },
        blocks: Checkpoint::collect_blocks(&model),
        optimizer: Some(opt),
        text_encoder: init.and_then(|c| c.text_encoder.clone()),
    };
    Ok(FinetuneOutcome {
        model,
        checkpoint,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::Dims3;

    #[test]
    fn fraction_cut_is_a_floor() {
        let labeled: Vec<usize> = (0..13).collect();
        let cfg = FinetuneConfig {
            label_fraction: 1.0,
            ..Default::default()
        };
        let (train, held) = split_labeled(&labeled, &cfg).unwrap();
        assert_eq!(held.len(), 3);
        assert_eq!(train.len(), 10);
        let cfg = FinetuneConfig {
            label_fraction: 0.1,
            ..cfg
        };
        assert_eq!(split_labeled(&labeled, &cfg).unwrap().0.len(), 1);
        let small: Vec<usize> = (0..5).collect();
        assert!(matches!(split_labeled(&small, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn dice_ce_gradient_matches_finite_differences() {
        let d = Dims3::new(1, 2, 3);
        let data: Vec<f64> = (0..18).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let logits = FeatureMap {
            channels: 3,
            dims: d,
            data,
        };
        let target = [0, 2, 1, 1, 0, 2];
        let (_, g) = soft_dice_ce(&logits, &target).unwrap();
        let h = 1e-6;
        for j in 0..18 {
            let mut a = logits.clone();
            a.data[j] += h;
            let mut b = logits.clone();
            b.data[j] -= h;
            let num = (soft_dice_ce(&a, &target).unwrap().0 - soft_dice_ce(&b, &target).unwrap().0)
                / (2.0 * h);
            assert!((num - g.data[j]).abs() < 1e-8, "{j}: {num} vs {}", g.data[j]);
        }
    }
}
