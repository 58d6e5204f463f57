use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, prefixed, prefixed_mut, relu_backward_inplace, relu_inplace, split_channels,
    upsample2, upsample2_backward, Conv3d, FeatureMap, Grads, Parameterized, Tensor,
};
use crate::rng::derived;

use super::EncoderTrace;

/// U-Net style decoder. Stage `s` upsamples, concatenates encoder skip `s`
/// and applies `conv3 -> relu`; a 1x1 head maps to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SegDecoder {
    /// Ordered from the deepest stage to the shallowest.
    pub stages: Vec<Conv3d>,
    pub head: Conv3d,
    skip_channels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    /// Concatenated input of each stage, deepest first.
    pub inputs: Vec<FeatureMap>,
    pub outputs: Vec<FeatureMap>,
    pub logits: FeatureMap,
}

impl SegDecoder {
    /// `encoder_channels` lists the encoder stage widths, shallowest first.
    pub fn new(encoder_channels: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        if encoder_channels.is_empty() {
            return Err(Error::config("decoder needs at least one encoder stage"));
        }
        if n_classes == 0 {
            return Err(Error::config("decoder needs at least one class"));
        }
        let depth = encoder_channels.len();
        let mut stages = Vec::with_capacity(depth);
        let mut width = encoder_channels[depth - 1];
        for (k, s) in (0..depth).rev().enumerate() {
            let out = encoder_channels[s];
            stages.push(Conv3d::new(
                width + out,
                out,
                3,
                true,
                &mut derived(seed, &[k as u64]),
            )?);
            width = out;
        }
        let head = Conv3d::new(width, n_classes, 1, true, &mut derived(seed, &[depth as u64]))?;
        Ok(SegDecoder {
            stages,
            head,
            skip_channels: encoder_channels.to_vec(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.head.out_channels()
    }

    fn check_pyramid(&self, enc: &EncoderTrace) -> Result<()> {
        let got: Vec<usize> = enc.skips.iter().map(|s| s.channels).collect();
        if got != self.skip_channels || enc.bottom.channels != *self.skip_channels.last().unwrap() {
            return Err(Error::dimension(format!(
                "decoder built for encoder stages {:?}, got feature pyramid {:?}",
                self.skip_channels, got
            )));
        }
        Ok(())
    }

    pub fn forward(&self, enc: &EncoderTrace) -> Result<DecoderTrace> {
        self.check_pyramid(enc)?;
        let depth = self.stages.len();
        let mut x = enc.bottom.clone();
        let mut inputs = Vec::with_capacity(depth);
        let mut outputs = Vec::with_capacity(depth);
        for (k, conv) in self.stages.iter().enumerate() {
            let skip = &enc.skips[depth - 1 - k];
            let input = concat_channels(&upsample2(&x), skip)?;
            let mut y = conv.forward(&input)?;
            relu_inplace(&mut y);
            inputs.push(input);
            outputs.push(y.clone());
            x = y;
        }
        let logits = self.head.forward(&x)?;
        Ok(DecoderTrace {
            inputs,
            outputs,
            logits,
        })
    }

    /// Returns gradients with respect to the encoder bottom map and each
    /// skip (shallowest first), ready for `ImageEncoder::backward`.
    pub fn backward(
        &self,
        t: &DecoderTrace,
        g_logits: &FeatureMap,
        grads: &mut Grads,
        prefix: &str,
    ) -> (FeatureMap, Vec<FeatureMap>) {
        let depth = self.stages.len();
        let last = t.outputs.last().expect("decoder has stages");
        let mut g = self
            .head
            .backward(last, g_logits, grads, &format!("{prefix}.head"), true);
        let mut g_skips = vec![None; depth];
        for k in (0..depth).rev() {
            relu_backward_inplace(&mut g, &t.outputs[k]);
            let gin = self.stages[k].backward(
                &t.inputs[k],
                &g,
                grads,
                &format!("{prefix}.stage{k}"),
                true,
            );
            let up_channels = gin.channels - self.skip_channels[depth - 1 - k];
            let (g_up, g_skip) = split_channels(&gin, up_channels);
            g_skips[depth - 1 - k] = Some(g_skip);
            g = upsample2_backward(&g_up);
        }
        (g, g_skips.into_iter().map(Option::unwrap).collect())
    }
}

impl Parameterized for SegDecoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<_> = self
            .stages
            .iter()
            .enumerate()
            .flat_map(|(k, c)| prefixed(&format!("stage{k}"), c.params()))
            .collect();
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<_> = self
            .stages
            .iter_mut()
            .enumerate()
            .flat_map(|(k, c)| prefixed_mut(&format!("stage{k}"), c.params_mut()))
            .collect();
        v.extend(prefixed_mut("head", self.head.params_mut()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, ImageEncoder};
    use crate::metrics::argmax_labels;
    use crate::rng::seeded;
    use crate::volumes::{Dims3, Patch};
    use rand::Rng as _;

    fn random_patch(n: usize, seed: u64) -> Patch {
        let mut rng = seeded(seed);
        let d = Dims3::cube(n);
        Patch {
            source_id: "p".into(),
            origin: [0; 3],
            dims: d,
            voxels: (0..d.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            channels: vec![2, 3],
            bias: true,
        }
    }

    #[test]
    fn logits_keep_patch_dims() {
        let enc = ImageEncoder::new(&EncoderConfig { channels: vec![2, 2, 2], bias: true }, 1).unwrap();
        let dec = SegDecoder::new(&enc.stage_channels(), 3, 2).unwrap();
        for n in [16, 32] {
            let t = enc.forward(&random_patch(n, 3)).unwrap();
            let out = dec.forward(&t).unwrap();
            assert_eq!(out.logits.dims, Dims3::cube(n));
            assert_eq!(out.logits.channels, 3);
        }
    }

    #[test]
    fn single_class_predicts_zero_everywhere() {
        let enc = ImageEncoder::new(&small(), 1).unwrap();
        let dec = SegDecoder::new(&enc.stage_channels(), 1, 2).unwrap();
        let t = enc.forward(&random_patch(8, 5)).unwrap();
        let out = dec.forward(&t).unwrap();
        let l = argmax_labels(&out.logits.data, 1, out.logits.dims).unwrap();
        assert!(l.labels.iter().all(|&c| c == 0));
    }

    #[test]
    fn pyramid_mismatch_is_rejected() {
        let enc = ImageEncoder::new(&small(), 1).unwrap();
        let dec = SegDecoder::new(&[2, 4], 2, 2).unwrap();
        let t = enc.forward(&random_patch(8, 5)).unwrap();
        assert!(matches!(dec.forward(&t), Err(Error::Dimension(_))));
    }

    fn composed_loss(enc: &ImageEncoder, dec: &SegDecoder, p: &Patch, w: &[f64]) -> f64 {
        let t = enc.forward(p).unwrap();
        let o = dec.forward(&t).unwrap();
        o.logits.data.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn composition_gradient_matches_finite_differences() {
        let mut enc = ImageEncoder::new(&small(), 11).unwrap();
        let mut dec = SegDecoder::new(&enc.stage_channels(), 2, 12).unwrap();
        let p = random_patch(8, 13);
        let mut rng = seeded(14);
        let w: Vec<f64> = (0..2 * 512).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let t = enc.forward(&p).unwrap();
        let o = dec.forward(&t).unwrap();
        let g_logits = FeatureMap {
            channels: 2,
            dims: o.logits.dims,
            data: w.clone(),
        };
        let mut grads = Grads::new();
        let (gb, gs) = dec.backward(&o, &g_logits, &mut grads, "dec");
        enc.backward(&t, gb, Some(&gs), &mut grads, "enc");

        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for which in 0..2 {
            let names: Vec<String> = if which == 0 {
                enc.params().into_iter().map(|(n, _)| n).collect()
            } else {
                dec.params().into_iter().map(|(n, _)| n).collect()
            };
            for name in names {
                let full = format!("{}.{name}", if which == 0 { "enc" } else { "dec" });
                let analytic = grads.get(&full).unwrap().to_vec();
                for idx in (0..analytic.len()).step_by(analytic.len().div_ceil(4).max(1)) {
                    let bump = |enc: &mut ImageEncoder, dec: &mut SegDecoder, dv: f64| {
                        let blocks = if which == 0 { enc.params_mut() } else { dec.params_mut() };
                        for (n, t) in blocks {
                            if n == name {
                                t.data[idx] += dv;
                            }
                        }
                    };
                    bump(&mut enc, &mut dec, h);
                    let lp = composed_loss(&enc, &dec, &p, &w);
                    bump(&mut enc, &mut dec, -2.0 * h);
                    let lm = composed_loss(&enc, &dec, &p, &w);
                    bump(&mut enc, &mut dec, h);
                    let numeric = (lp - lm) / (2.0 * h);
                    let a = analytic[idx];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
