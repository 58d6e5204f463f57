//! Image-text pretraining with periodic checkpoints and a bit-exact resume.
use synthvlp::captioner::{build_pairs, template_caption, Vocabulary};
use synthvlp::encoders::EncoderConfig;
use synthvlp::trainer::{pretrain, TrainConfig};
use synthvlp::volumes::{synth_dataset, Dims3, SynthSpec};

fn main() -> synthvlp::Result<()> {
    let (volumes, _) = synth_dataset(&SynthSpec {
        n_volumes: 40,
        dims: Dims3::cube(16),
        ..SynthSpec::default()
    })?;
    let vocab = Vocabulary::template();
    let captions: Vec<_> = volumes.iter().map(|v| template_caption(v, &vocab)).collect();
    let pairs = build_pairs(&volumes, &captions)?;
    let cfg = TrainConfig {
        steps: 60,
        checkpoint_interval: 20,
        patch_dims: Dims3::cube(16),
        encoder: EncoderConfig {
            channels: vec![4, 8, 16],
            bias: true,
        },
        ..TrainConfig::default()
    };
    let full = pretrain(&volumes, &pairs, &cfg, None, None, |c| {
        println!("checkpoint at step {}", c.iteration);
        Ok(())
    })?;
    let first = &full.curve[0];
    let last = full.curve.last().expect("steps > 0");
    println!("loss {:.4} -> {:.4}", first.total, last.total);

    let half = pretrain(&volumes, &pairs, &cfg, None, Some(30), |_| Ok(()))?;
    let resumed = pretrain(&volumes, &pairs, &cfg, Some(&half.checkpoint), None, |_| Ok(()))?;
    println!(
        "resume from step 30 matches the uninterrupted run: {}",
        resumed.checkpoint.to_bytes() == full.checkpoint.to_bytes()
    );
    Ok(())
}
