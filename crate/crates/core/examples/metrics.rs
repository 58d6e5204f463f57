//! Dice, variation of information and adapted Rand error on small labelings.
use synthvlp::metrics::{evaluate, EvalOptions};
use synthvlp::volumes::{Dims3, LabelVolume};

fn main() -> synthvlp::Result<()> {
    let dims = Dims3::new(2, 2, 4);
    let gt = LabelVolume::instance(dims, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 3, 3, 3, 3, 0, 0])?;
    let merged = LabelVolume::instance(dims, vec![1, 1, 1, 1, 1, 1, 1, 1, 3, 3, 3, 3, 3, 3, 0, 0])?;
    let opts = EvalOptions::default();
    for (name, pred) in [("identical", &gt), ("merged", &merged)] {
        println!("{name}:");
        for (m, c, v) in evaluate(pred, &gt, &opts)?.csv_rows() {
            println!("  {m:<6} {c:<6} {v:.6}");
        }
    }
    let sem_gt = gt.to_binary_semantic();
    let sem_pred = LabelVolume::semantic(dims, vec![1; 16], vec![0, 1])?;
    let d = evaluate(&sem_pred, &sem_gt, &opts)?.dice.expect("semantic");
    println!("all-foreground dice mean {:.4}", d.mean);
    Ok(())
}
