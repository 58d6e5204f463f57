//! Template captions, stop-pattern filtering and deduplication.
use synthvlp::captioner::{filter_captions, parse_stop_patterns, template_caption, Vocabulary};
use synthvlp::volumes::{synth_dataset, Dims3, SynthSpec};

fn main() -> synthvlp::Result<()> {
    let (volumes, _) = synth_dataset(&SynthSpec {
        n_volumes: 12,
        dims: Dims3::cube(16),
        ..SynthSpec::default()
    })?;
    let vocab = Vocabulary::template();
    let captions: Vec<_> = volumes.iter().map(|v| template_caption(v, &vocab)).collect();
    for c in &captions[..4] {
        println!("{}: {}", c.volume_id, c.text);
    }
    let patterns = parse_stop_patterns("\\bscan with\\b\n(?:hypo|hyper)intense\n")?;
    let kept = filter_captions(&captions, &patterns, &vocab)?;
    println!("{} captions, {} after filtering", captions.len(), kept.len());
    for c in &kept[..3] {
        println!("  {}", c.text);
    }
    Ok(())
}
