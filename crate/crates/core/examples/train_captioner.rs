//! Train the image-conditioned caption model briefly and decode captions.
use synthvlp::captioner::{generate_captions, train_captioner, CaptionTrainConfig, Vocabulary};
use synthvlp::volumes::{synth_dataset, Dims3, SynthSpec};

fn main() -> synthvlp::Result<()> {
    let (volumes, _) = synth_dataset(&SynthSpec {
        n_volumes: 200,
        dims: Dims3::cube(16),
        seed: 3,
        ..SynthSpec::default()
    })?;
    let vocab = Vocabulary::template();
    let cfg = CaptionTrainConfig {
        steps: 300,
        ..CaptionTrainConfig::default()
    };
    let (model, report) = train_captioner(&volumes, &vocab, &cfg)?;
    let c = &report.loss_curve;
    println!(
        "loss {:.3} -> {:.3}, held-out greedy token accuracy {:.3}",
        c[0],
        c[c.len() - 1],
        report.heldout_accuracy
    );
    for cap in generate_captions(&model, &volumes[..3], &vocab, 32, 0)? {
        println!("{}: {}", cap.volume_id, cap.text);
    }
    Ok(())
}
