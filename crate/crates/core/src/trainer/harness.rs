use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::finetune::finetune;
use super::pretrain::{pretrain, LossRow};
use super::{FinetuneConfig, TermMask, TrainConfig};
use crate::captioner::ImageTextPair;
use crate::error::{Error, Result};
use crate::volumes::{LabelVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub iteration: u64,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
    pub n_seeds: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Finetune from each checkpoint with identical configs and seeds.
pub fn sweep(
    volumes: &[Volume],
    labels: &[Option<LabelVolume>],
    ckpts: &[Checkpoint],
    cfg: &FinetuneConfig,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if ckpts.len() < 2 {
        return Err(Error::config("sweep needs at least 2 checkpoints"));
    }
    if seeds.is_empty() {
        return Err(Error::config("sweep needs at least one seed"));
    }
    if let Some(c) = ckpts.iter().find(|c| c.config_hash != ckpts[0].config_hash) {
        return Err(Error::config(format!(
            "checkpoint config hashes differ ({} vs {})",
            ckpts[0].config_hash, c.config_hash
        )));
    }
    let mut rows = Vec::new();
    for c in ckpts {
        let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for &s in seeds {
            let run = FinetuneConfig {
                seed: s,
                ..cfg.clone()
            };
            let out = finetune(volumes, labels, &run, Some(c))?;
            for (_, m, v) in out.report.csv_rows() {
                per_metric.entry(m).or_default().push(v);
            }
        }
        for (metric, v) in per_metric {
            let (mean, std) = mean_std(&v);
            rows.push(SweepRow {
                iteration: c.iteration,
                metric,
                mean,
                std,
                n_seeds: v.len(),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Combination {
    pub name: &'static str,
    pub terms: TermMask,
}

pub const ABLATION_COMBINATIONS: [Combination; 4] = [
    Combination {
        name: "vr",
        terms: TermMask {
            cap: false,
            vlp: false,
            vr: true,
        },
    },
    Combination {
        name: "vlp",
        terms: TermMask {
            cap: false,
            vlp: true,
            vr: false,
        },
    },
    Combination {
        name: "cap+vlp",
        terms: TermMask {
            cap: true,
            vlp: true,
            vr: false,
        },
    },
    Combination {
        name: "cap+vlp+vr",
        terms: TermMask {
            cap: true,
            vlp: true,
            vr: true,
        },
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub train: TrainConfig,
    /// Downstream finetuning per combination; skipped when absent.
    pub finetune: Option<FinetuneConfig>,
    /// Steps averaged for the initial and final loss.
    pub window: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            train: TrainConfig::default(),
            finetune: None,
            window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub combination: String,
    pub cap: bool,
    pub vlp: bool,
    pub vr: bool,
    pub metric: String,
    pub value: f64,
}

/// Means of the first and last `window` totals of a loss curve.
pub fn initial_final(curve: &[LossRow], window: usize) -> (f64, f64) {
    let w = window.clamp(1, curve.len().max(1));
    let m = |s: &[LossRow]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
    (m(&curve[..w]), m(&curve[curve.len() - w..]))
}

/// Pretrain once per term combination and report loss convergence and, if
/// configured, downstream Dice.
pub fn ablate(
    volumes: &[Volume],
    pairs: &[ImageTextPair],
    labels: Option<&[Option<LabelVolume>]>,
    cfg: &AblateConfig,
) -> Result<Vec<AblationRow>> {
    if cfg.finetune.is_some() && labels.is_none() {
        return Err(Error::config("ablation finetuning needs labels"));
    }
    let mut rows = Vec::new();
    for combo in ABLATION_COMBINATIONS {
        let train = TrainConfig {
            terms: combo.terms,
            ..cfg.train.clone()
        };
        let out = pretrain(volumes, pairs, &train, None, None, |_| Ok(()))?;
        if out.curve.is_empty() {
            return Err(Error::config("ablation needs at least one pretraining step"));
        }
        let (initial, last) = initial_final(&out.curve, cfg.window);
        let mut metrics = vec![
            ("initial_loss".to_string(), initial),
            ("final_loss".to_string(), last),
            ("loss_ratio".to_string(), last / initial),
        ];
        if let (Some(ft), Some(l)) = (&cfg.finetune, labels) {
            let r = finetune(volumes, l, ft, Some(&out.checkpoint))?;
            metrics.push(("dice".into(), r.report.dice));
        }
        for (metric, value) in metrics {
            rows.push(AblationRow {
                combination: combo.name.into(),
                cap: combo.terms.cap,
                vlp: combo.terms.vlp,
                vr: combo.terms.vr,
                metric,
                value,
            });
        }
    }
    Ok(rows)
}
