//! Finetune a segmentation model from random and pretrained encoders.
use synthvlp::captioner::{build_pairs, template_caption, Vocabulary};
use synthvlp::encoders::EncoderConfig;
use synthvlp::trainer::{finetune, pretrain, FinetuneConfig, TrainConfig};
use synthvlp::volumes::{synth_dataset, Dims3, SynthSpec};

fn main() -> synthvlp::Result<()> {
    let (volumes, labels) = synth_dataset(&SynthSpec {
        n_volumes: 60,
        dims: Dims3::cube(16),
        seed: 7,
        ..SynthSpec::default()
    })?;
    let labels: Vec<_> = labels.into_iter().map(Some).collect();
    let vocab = Vocabulary::template();
    let captions: Vec<_> = volumes.iter().map(|v| template_caption(v, &vocab)).collect();
    let pairs = build_pairs(&volumes, &captions)?;
    let encoder = EncoderConfig {
        channels: vec![4, 8, 16],
        bias: true,
    };
    let pre = pretrain(
        &volumes,
        &pairs,
        &TrainConfig {
            steps: 100,
            patch_dims: Dims3::cube(16),
            encoder: encoder.clone(),
            ..TrainConfig::default()
        },
        None,
        None,
        |_| Ok(()),
    )?;
    let cfg = FinetuneConfig {
        steps: 60,
        label_fraction: 0.25,
        patch_dims: Dims3::cube(16),
        encoder,
        ..FinetuneConfig::default()
    };
    for (name, init) in [("random", None), ("pretrained", Some(&pre.checkpoint))] {
        let r = finetune(&volumes, &labels, &cfg, init)?.report;
        println!(
            "{name:<10} train {} held-out {} dice {:.4} arand {:?}",
            r.train_volumes, r.heldout_volumes, r.dice, r.arand
        );
    }
    Ok(())
}
