use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::lm::{lm_generate, lm_loss, slice_feature, CaptionLm, Decode, FEATURE_DIM};
use super::{template_caption, Caption, CaptionSource, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Grads, Parameterized};
use crate::rng::{derived, Rng};
use crate::volumes::{sample_slice, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionTrainConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub cond_hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub holdout_fraction: f64,
    /// Greedy token accuracy the held-out split must reach before the
    /// learned captions replace the template ones.
    pub accuracy_gate: f64,
    pub seed: u64,
}

impl Default for CaptionTrainConfig {
    fn default() -> Self {
        CaptionTrainConfig {
            hidden: 32,
            embed_dim: 16,
            cond_hidden: 256,
            steps: 2000,
            batch_size: 64,
            lr: 5e-3,
            weight_decay: 0.0,
            cosine_decay: true,
            holdout_fraction: 0.2,
            accuracy_gate: 0.95,
            seed: 0,
        }
    }
}

impl CaptionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed_dim == 0 || self.cond_hidden == 0 {
            return Err(Error::config("captioner widths must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("captioner batch_size must be >= 1"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config(format!(
                "holdout_fraction {} must lie in (0, 1)",
                self.holdout_fraction
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("captioner lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionTrainReport {
    pub steps: usize,
    pub train_volumes: usize,
    pub heldout_volumes: usize,
    /// Mean per-caption loss of every step's batch.
    pub loss_curve: Vec<f64>,
    pub heldout_accuracy: f64,
    pub passed_gate: bool,
}

/// Image feature of one randomly drawn axial slice.
pub fn caption_features(v: &Volume, rng: &mut Rng) -> Vec<f64> {
    slice_feature(&sample_slice(v, rng).0)
}

/// Position-wise greedy-decode accuracy over `(feature, target)` items,
/// where each target ends with `<eos>`. Missing positions count as errors.
pub fn token_accuracy(model: &CaptionLm, items: &[(Vec<f64>, Vec<u32>)]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (f, target) in items {
        let mut got = lm_generate(model, f, target.len(), Decode::Greedy)?;
        got.push(EOS);
        hits += target
            .iter()
            .zip(&got)
            .filter(|(a, b)| a == b)
            .count();
        total += target.len();
    }
    if total == 0 {
        return Err(Error::config("token accuracy needs at least one target"));
    }
    Ok(hits as f64 / total as f64)
}

/// Teacher-force a [`CaptionLm`] on template captions of a seeded training
/// split and measure greedy token accuracy on the held-out split.
pub fn train_captioner(
    volumes: &[Volume],
    vocab: &Vocabulary,
    cfg: &CaptionTrainConfig,
) -> Result<(CaptionLm, CaptionTrainReport)> {
    cfg.validate()?;
    if volumes.len() < 2 {
        return Err(Error::config("captioner training needs at least 2 volumes"));
    }
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    order.shuffle(&mut derived(cfg.seed, &[1]));
    let n_hold = ((volumes.len() as f64 * cfg.holdout_fraction).round() as usize)
        .clamp(1, volumes.len() - 1);
    let (held, train) = order.split_at(n_hold);
    let targets: Vec<Vec<u32>> = volumes
        .iter()
        .map(|v| template_caption(v, vocab).lm_target())
        .collect();

    let mut model = CaptionLm::new(
        vocab.len(),
        FEATURE_DIM,
        cfg.hidden,
        cfg.embed_dim,
        cfg.cond_hidden,
        &mut derived(cfg.seed, &[0]),
    );
    let sample: Vec<Vec<f64>> = train
        .iter()
        .map(|&i| caption_features(&volumes[i], &mut derived(cfg.seed, &[4, i as u64])))
        .collect();
    model.fit_feature_norm(&sample);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = derived(cfg.seed, &[2, step as u64]);
        let mut grads = Grads::new();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let i = train[rng.gen_range(0..train.len())];
            let f = caption_features(&volumes[i], &mut rng);
            let (l, g) = lm_loss(&model, &f, &targets[i])?;
            loss += l;
            grads.merge(&g);
        }
        let scale = 1.0 / cfg.batch_size as f64;
        grads.scale(scale);
        curve.push(loss * scale);
        if cfg.cosine_decay {
            let t = step as f64 / cfg.steps as f64;
            opt.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        }
        opt.step(model.params_mut(), &grads)?;
    }

    let items: Vec<(Vec<f64>, Vec<u32>)> = held
        .iter()
        .map(|&i| {
            let f = caption_features(&volumes[i], &mut derived(cfg.seed, &[3, i as u64]));
            (f, targets[i].clone())
        })
        .collect();
    let acc = token_accuracy(&model, &items)?;
    Ok((
        model,
        CaptionTrainReport {
            steps: cfg.steps,
            train_volumes: train.len(),
            heldout_volumes: held.len(),
            loss_curve: curve,
            heldout_accuracy: acc,
            passed_gate: acc >= cfg.accuracy_gate,
        },
    ))
}

/// Greedy captions from the learned model, one per volume.
///
/// Each volume is conditioned on one slice drawn from `seed` and its index.
pub fn generate_captions(
    model: &CaptionLm,
    volumes: &[Volume],
    vocab: &Vocabulary,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Caption>> {
    volumes
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let f = caption_features(v, &mut derived(seed, &[i as u64]));
            let ids = lm_generate(model, &f, max_len, Decode::Greedy)?;
            let text = vocab.decode(&ids)?;
            Ok(Caption {
                volume_id: v.id.clone(),
                text,
                token_ids: ids,
                source: CaptionSource::Lm,
                dataset_name: v.dataset_name.clone(),
            })
        })
        .collect()
}
