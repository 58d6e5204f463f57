//! Embed volumes with a pretrained encoder and project onto two principal axes.
use synthvlp::captioner::{build_pairs, template_caption, Vocabulary};
use synthvlp::cli::embed::{embed_volumes, pca_2d, projection_svg};
use synthvlp::encoders::EncoderConfig;
use synthvlp::trainer::{pretrain, TrainConfig};
use synthvlp::volumes::{synth_dataset, Dims3, SynthSpec};

fn main() -> synthvlp::Result<()> {
    let (volumes, _) = synth_dataset(&SynthSpec {
        n_volumes: 30,
        dims: Dims3::cube(16),
        ..SynthSpec::default()
    })?;
    let vocab = Vocabulary::template();
    let captions: Vec<_> = volumes.iter().map(|v| template_caption(v, &vocab)).collect();
    let pairs = build_pairs(&volumes, &captions)?;
    let cfg = TrainConfig {
        steps: 50,
        patch_dims: Dims3::cube(16),
        encoder: EncoderConfig {
            channels: vec![4, 8],
            bias: true,
        },
        ..TrainConfig::default()
    };
    let pre = pretrain(&volumes, &pairs, &cfg, None, None, |_| Ok(()))?;
    let rows = embed_volumes(&pre.checkpoint, &volumes)?;
    let proj = pca_2d(&rows.iter().map(|r| r.embedding.clone()).collect::<Vec<_>>())?;
    println!("component variances {:.4e} {:.4e}", proj.variances[0], proj.variances[1]);
    for (r, p) in rows.iter().zip(&proj.points).take(5) {
        println!("{} {:<9} ({:+.4}, {:+.4})", r.volume_id, r.modality.as_str(), p[0], p[1]);
    }
    let modalities: Vec<_> = rows.iter().map(|r| r.modality).collect();
    let path = std::env::temp_dir().join("synthvlp_projection.svg");
    std::fs::write(&path, projection_svg(&proj.points, &modalities, proj.variances))
        .map_err(|e| synthvlp::Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}
