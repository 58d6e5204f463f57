//! Finetune from several checkpoints of one pretraining run.
use std::cell::RefCell;

use synthvlp::captioner::{build_pairs, template_caption, Vocabulary};
use synthvlp::encoders::EncoderConfig;
use synthvlp::trainer::{pretrain, sweep, FinetuneConfig, TrainConfig};
use synthvlp::volumes::{synth_dataset, Dims3, SynthSpec};

fn main() -> synthvlp::Result<()> {
    let (volumes, labels) = synth_dataset(&SynthSpec {
        n_volumes: 30,
        dims: Dims3::cube(16),
        ..SynthSpec::default()
    })?;
    let labels: Vec<_> = labels.into_iter().map(Some).collect();
    let vocab = Vocabulary::template();
    let captions: Vec<_> = volumes.iter().map(|v| template_caption(v, &vocab)).collect();
    let pairs = build_pairs(&volumes, &captions)?;
    let encoder = EncoderConfig {
        channels: vec![4, 8],
        bias: true,
    };
    let train = TrainConfig {
        steps: 40,
        checkpoint_interval: 20,
        patch_dims: Dims3::cube(16),
        encoder: encoder.clone(),
        ..TrainConfig::default()
    };
    let saved = RefCell::new(Vec::new());
    let out = pretrain(&volumes, &pairs, &train, None, None, |c| {
        saved.borrow_mut().push(c.clone());
        Ok(())
    })?;
    let mut ckpts = saved.into_inner();
    ckpts.push(out.checkpoint);
    let cfg = FinetuneConfig {
        steps: 20,
        label_fraction: 0.5,
        patch_dims: Dims3::cube(16),
        encoder,
        ..FinetuneConfig::default()
    };
    println!("iteration,metric,mean,std,n_seeds");
    for r in sweep(&volumes, &labels, &ckpts, &cfg, &[0, 1])? {
        println!("{},{},{:.4},{:.4},{}", r.iteration, r.metric, r.mean, r.std, r.n_seeds);
    }
    Ok(())
}
