//! Contrastive alignment and redundancy-reduction losses on small batches.
use ndarray::array;
use synthvlp::objectives::{total_loss, vlp_loss, vr_loss, LossWeights, VlpImage};

fn main() -> synthvlp::Result<()> {
    let w = LossWeights::default();
    let v1 = array![[1.0, 0.0], [0.0, 1.0]];
    println!("vr(identity pair)   = {}", vr_loss(v1.view(), v1.view(), &w)?.total);
    println!("vr(negated view)    = {}", vr_loss(v1.view(), (-&v1).view(), &w)?.total);
    let img = array![[1.0, 0.2, 0.0], [0.1, 1.0, 0.3], [0.0, 0.2, 1.0]];
    let txt = array![[0.9, 0.1, 0.0], [0.0, 1.1, 0.2], [0.1, 0.0, 0.8]];
    println!("vlp(aligned)        = {:.6}", vlp_loss(img.view(), txt.view(), w.sigma1)?.total);
    let v2 = array![[0.9, 0.3, 0.1], [0.2, 0.8, 0.2], [0.1, 0.3, 1.2]];
    let r = total_loss(VlpImage::View1, txt.view(), img.view(), v2.view(), &w)?;
    println!("{}", r.to_json());
    Ok(())
}
