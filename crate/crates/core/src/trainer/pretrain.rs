use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng as _;

use super::checkpoint::{Checkpoint, CheckpointKind, RngState};
use super::{TrainConfig, VlpImageSource};
use crate::captioner::{Caption, ImageTextPair};
use crate::encoders::{
    EncoderTrace, ImageEncoder, Projector, ProjectorTrace, TextEncoder,
};
use crate::error::{Error, Result};
use crate::nn::{prefixed, prefixed_mut, AdamW, Grads, Parameterized, Tensor};
use crate::objectives::{total_loss, vlp_loss, vr_loss, LossReport, VlpImage, TERM_VLP, TERM_VR};
use crate::rng::{derive_seed, derived};
use crate::volumes::{augment_views, sample_patch, Volume};

const STEP_STREAM: u64 = 10;

/// Trainable image side plus both projectors and the frozen text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainModel {
    pub encoder: ImageEncoder,
    pub image_projector: Projector,
    pub text_projector: Projector,
    pub text: TextEncoder,
}

impl PretrainModel {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let encoder = ImageEncoder::new(&cfg.encoder, derive_seed(cfg.seed, &[100]))?;
        let d_img = encoder.output_dim();
        Ok(PretrainModel {
            image_projector: Projector::new(
                d_img,
                cfg.projector_hidden,
                cfg.embed_dim,
                derive_seed(cfg.seed, &[101]),
            ),
            text_projector: Projector::new(
                cfg.text_width,
                cfg.projector_hidden,
                cfg.embed_dim,
                derive_seed(cfg.seed, &[102]),
            ),
            text: TextEncoder::new(cfg.text_width, cfg.text_seed)?,
            encoder,
        })
    }

    pub fn from_checkpoint(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = PretrainModel::new(cfg)?;
        m.load_blocks(&ckpt.blocks)?;
        if let Some(t) = &ckpt.text_encoder {
            m.text = t.clone();
        }
        Ok(m)
    }

    /// Projected image embedding of a patch.
    pub fn embed_image(&self, p: &crate::volumes::Patch) -> Result<Vec<f64>> {
        self.image_projector.project(&self.encoder.encode(p)?)
    }
}

impl Parameterized for PretrainModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("image_encoder", self.encoder.params());
        v.extend(prefixed("image_projector", self.image_projector.params()));
        v.extend(prefixed("text_projector", self.text_projector.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("image_encoder", self.encoder.params_mut());
        v.extend(prefixed_mut("image_projector", self.image_projector.params_mut()));
        v.extend(prefixed_mut("text_projector", self.text_projector.params_mut()));
        v
    }
}

/// One row of the loss curve. Disabled terms are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub total: f64,
    pub term_vlp: Option<f64>,
    pub term_vr: Option<f64>,
    pub grad_norm: f64,
}

pub fn write_loss_csv(rows: &[LossRow], mut w: impl Write, header: bool) -> std::io::Result<()> {
    if header {
        writeln!(w, "step,total,term_vlp,term_vr,grad_norm")?;
    }
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{:e},{},{},{:e}",
            r.step,
            r.total,
            opt(r.term_vlp),
            opt(r.term_vr),
            r.grad_norm
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: PretrainModel,
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRow>,
}

/// Token ids of the dataset-name prefix of a caption.
pub fn dataset_prefix_ids(c: &Caption) -> Vec<u32> {
    let n = c.dataset_name.split_whitespace().count();
    c.token_ids.iter().take(n).copied().collect()
}

fn rows_of(m: &Array2<f64>, i: usize) -> &[f64] {
    let w = m.ncols();
    &m.as_slice().expect("standard layout")[i * w..(i + 1) * w]
}

fn stack(rows: &[ProjectorTrace]) -> Array2<f64> {
    let w = rows[0].output.len();
    let flat: Vec<f64> = rows.iter().flat_map(|t| t.output.iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), w), flat).expect("uniform widths")
}

struct Branch {
    enc: Vec<EncoderTrace>,
    proj: Vec<ProjectorTrace>,
}

impl Branch {
    fn backward(&self, m: &PretrainModel, g: &Array2<f64>, grads: &mut Grads) {
        for (i, (e, p)) in self.enc.iter().zip(&self.proj).enumerate() {
            let ge = m
                .image_projector
                .backward(p, rows_of(g, i), grads, "image_projector");
            m.encoder.backward_embedding(e, &ge, grads, "image_encoder");
        }
    }
}

fn image_branch(m: &PretrainModel, patches: &[crate::volumes::Patch]) -> Result<Branch> {
    let mut enc = Vec::with_capacity(patches.len());
    let mut proj = Vec::with_capacity(patches.len());
    for p in patches {
        let t = m.encoder.forward(p)?;
        proj.push(m.image_projector.forward(&t.embedding)?);
        enc.push(t);
    }
    Ok(Branch { enc, proj })
}

/// Loss and parameter gradients of one pretraining step. Everything random
/// comes from `(cfg.seed, step)`.
pub(crate) fn step_gradients(
    m: &PretrainModel,
    volumes: &[Volume],
    pairs: &[ImageTextPair],
    text_inputs: &[Vec<f64>],
    cfg: &TrainConfig,
    step: u64,
) -> Result<(LossReport, Grads)> {
    let mut rng = derived(cfg.seed, &[STEP_STREAM, step]);
    let k = cfg.batch_size;
    let picks = sample(&mut rng, pairs.len(), k).into_vec();
    let mut raw = Vec::with_capacity(k);
    let mut view1 = Vec::with_capacity(k);
    let mut view2 = Vec::with_capacity(k);
    for &i in &picks {
        let v = &volumes[pairs[i].volume_index];
        let patch = sample_patch(v, cfg.patch_dims, &mut rng)?;
        let (a, b) = augment_views(&patch, &cfg.augmentation.with_seed(rng.gen()))?;
        raw.push(patch);
        view1.push(a);
        view2.push(b);
    }
    let t = cfg.terms;
    let w = &cfg.weights;
    let b1 = image_branch(m, &view1)?;
    let v1 = stack(&b1.proj);
    let b2 = if t.vr { Some(image_branch(m, &view2)?) } else { None };
    let braw = if t.vlp && cfg.vlp_image == VlpImageSource::RawPatch {
        Some(image_branch(m, &raw)?)
    } else {
        None
    };
    let text: Vec<ProjectorTrace> = if t.vlp {
        picks
            .iter()
            .map(|&i| m.text_projector.forward(&text_inputs[i]))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let vraw = braw.as_ref().map(|b| stack(&b.proj));
    let image = match &vraw {
        Some(r) => VlpImage::Separate(r.view()),
        None => VlpImage::View1,
    };
    let that = if t.vlp { Some(stack(&text)) } else { None };
    let v2 = b2.as_ref().map(|b| stack(&b.proj));
    let report = match (&that, &v2) {
        (Some(th), Some(v2)) => total_loss(image, th.view(), v1.view(), v2.view(), w)?,
        (Some(th), None) => {
            let vhat = match image {
                VlpImage::Separate(r) => r,
                VlpImage::View1 => v1.view(),
            };
            let r = vlp_loss(vhat, th.view(), w.sigma1)?;
            let key = if vraw.is_some() { "vhat_vlp" } else { "v1" };
            LossReport {
                total: w.lambda_vlp * r.total,
                terms: r.terms,
                gradients: [
                    (key.to_string(), &r.gradients["vhat"] * w.lambda_vlp),
                    ("that".to_string(), &r.gradients["that"] * w.lambda_vlp),
                ]
                .into(),
            }
        }
        (None, Some(v2)) => {
            w.validate()?;
            let r = vr_loss(v1.view(), v2.view(), w)?;
            LossReport {
                total: w.lambda_vr * r.total,
                terms: r.terms,
                gradients: r
                    .gradients
                    .into_iter()
                    .map(|(n, g)| (n, g * w.lambda_vr))
                    .collect(),
            }
        }
        (None, None) => unreachable!("validated config enables a term"),
    };

    let mut grads = Grads::new();
    if let Some(g) = report.grad("v1") {
        b1.backward(m, g, &mut grads);
    }
    if let (Some(b), Some(g)) = (&b2, report.grad("v2")) {
        b.backward(m, g, &mut grads);
    }
    if let (Some(b), Some(g)) = (&braw, report.grad("vhat_vlp")) {
        b.backward(m, g, &mut grads);
    }
    if let Some(g) = report.grad("that") {
        for (i, tr) in text.iter().enumerate() {
            m.text_projector
                .backward(tr, rows_of(g, i), &mut grads, "text_projector");
        }
    }
    Ok((report, grads))
}

/// Text-encoder inputs for every pair, honouring the `cap` switch.
pub(crate) fn text_inputs(m: &PretrainModel, pairs: &[ImageTextPair], cap: bool) -> Vec<Vec<f64>> {
    pairs
        .iter()
        .map(|p| {
            let ids = if cap {
                p.caption.token_ids.clone()
            } else {
                dataset_prefix_ids(&p.caption)
            };
            m.text.encode_ids(&ids).vector
        })
        .collect()
}

/// Run pretraining up to `stop_at` (default `cfg.steps`), optionally resuming
/// from a checkpoint written by an earlier run with the same config.
/// `on_checkpoint` sees every periodic checkpoint.
pub fn pretrain(
    volumes: &[Volume],
    pairs: &[ImageTextPair],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    stop_at: Option<u64>,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if pairs.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "corpus of {} pairs is smaller than batch_size {}",
            pairs.len(),
            cfg.batch_size
        )));
    }
    if let Some(p) = pairs.iter().find(|p| p.volume_index >= volumes.len()) {
        return Err(Error::Linkage(p.caption.volume_id.clone()));
    }
    let hash = cfg.hash()?;
    let config = serde_json::to_value(cfg)?;
    let (mut model, mut opt, start) = match resume {
        Some(c) => {
            if c.config_hash != hash {
                return Err(Error::config(format!(
                    "checkpoint config hash {} does not match current config {hash}",
                    c.config_hash
                )));
            }
            let opt = c
                .optimizer
                .clone()
                .ok_or_else(|| Error::config("checkpoint has no optimizer state"))?;
            (PretrainModel::from_checkpoint(cfg, c)?, opt, c.iteration)
        }
        None => (
            PretrainModel::new(cfg)?,
            AdamW::new(cfg.lr, cfg.weight_decay),
            0,
        ),
    };
    let end = stop_at.unwrap_or(cfg.steps).min(cfg.steps);
    let texts = text_inputs(&model, pairs, cfg.terms.cap);
    let snapshot = |model: &PretrainModel, opt: &AdamW, it: u64| Checkpoint {
        kind: CheckpointKind::Pretrain,
        config: config.clone(),
        config_hash: hash.clone(),
        iteration: it,
        rng: RngState {
            seed: cfg.seed,
            next_step: it,
        },
        blocks: Checkpoint::collect_blocks(model),
        optimizer: Some(opt.clone()),
        text_encoder: Some(model.text.clone()),
    };
    let mut curve = Vec::with_capacity(end.saturating_sub(start) as usize);
    for step in start..end {
        let (report, grads) = step_gradients(&model, volumes, pairs, &texts, cfg, step)?;
        if !report.total.is_finite() {
            return Err(Error::Numeric {
                name: "pretrain loss".into(),
                message: format!("non-finite loss {} at step {step}", report.total),
            });
        }
        curve.push(LossRow {
            step,
            total: report.total,
            term_vlp: report.terms.get(TERM_VLP).copied(),
            term_vr: report.terms.get(TERM_VR).copied(),
            grad_norm: grads.norm(),
        });
        opt.step(model.params_mut(), &grads)?;
        let it = step + 1;
        if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 && it < end {
            on_checkpoint(&snapshot(&model, &opt, it))?;
        }
    }
    let checkpoint = snapshot(&model, &opt, end.max(start));
    Ok(PretrainOutcome {
        model,
        checkpoint,
        curve,
    })
}

impl PretrainOutcome {
    pub fn save_curve(&self, path: &Path, append: bool) -> Result<()> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let header = !append || file.metadata().map(|m| m.len() == 0).unwrap_or(true);
        write_loss_csv(&self.curve, std::io::BufWriter::new(file), header)
            .map_err(|e| Error::io(path, e))
    }
}
