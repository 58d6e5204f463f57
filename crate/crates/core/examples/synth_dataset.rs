//! Generate a small synthetic corpus and write it to disk.
use synthvlp::volumes::{read_dataset, synth_dataset, write_dataset, Dims3, SynthSpec};

fn main() -> synthvlp::Result<()> {
    let spec = SynthSpec {
        n_volumes: 6,
        dims: Dims3::cube(16),
        seed: 1,
        ..SynthSpec::default()
    };
    let (volumes, labels) = synth_dataset(&spec)?;
    for (v, l) in volumes.iter().zip(&labels) {
        println!(
            "{} {:<10} {:<22} {} instances",
            v.id,
            v.modality.as_str(),
            v.dataset_name,
            l.foreground_ids().len()
        );
    }
    let dir = std::env::temp_dir().join("synthvlp_example_dataset");
    write_dataset(&dir, &volumes, Some(&labels))?;
    let (back, _) = read_dataset(&dir)?;
    assert_eq!(back, volumes);
    println!("round-tripped through {}", dir.display());
    Ok(())
}
