//! Pretrain each objective combination and compare loss convergence.
use synthvlp::captioner::{build_pairs, template_caption, Vocabulary};
use synthvlp::encoders::EncoderConfig;
use synthvlp::trainer::{ablate, AblateConfig, TrainConfig};
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
    let cfg = AblateConfig {
        train: TrainConfig {
            steps: 80,
            patch_dims: Dims3::cube(16),
            encoder: EncoderConfig {
                channels: vec![4, 8, 16],
                bias: true,
            },
            ..TrainConfig::default()
        },
        finetune: None,
        window: 10,
    };
    println!("combination,cap,vlp,vr,metric,value");
    for r in ablate(&volumes, &pairs, None, &cfg)? {
        println!("{},{},{},{},{},{:.4}", r.combination, r.cap, r.vlp, r.vr, r.metric, r.value);
    }
    Ok(())
}
