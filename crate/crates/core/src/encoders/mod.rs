//! Image encoder, frozen text encoder, projectors and segmentation decoder.

mod decoder;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, prefixed,
    prefixed_mut, relu_backward_inplace, relu_inplace, Conv3d, FeatureMap, Grads, Linear,
    Parameterized, Tensor,
};
use crate::rng::{derive_seed, derived, seeded};
use crate::volumes::{Dims3, Patch};

pub use decoder::{DecoderTrace, SegDecoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels of each stage; the last one is the embedding width.
    pub channels: Vec<usize>,
    pub bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![16, 32, 64],
            bias: true,
        }
    }
}

/// Stack of `conv3 -> relu -> avgpool2` stages followed by global average
/// pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub stages: Vec<Conv3d>,
}

/// Intermediate activations of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Input of every stage; `inputs[0]` is the patch itself.
    pub inputs: Vec<FeatureMap>,
    /// Rectified stage outputs before pooling, used as decoder skips.
    pub skips: Vec<FeatureMap>,
    /// Output of the last pooling step.
    pub bottom: FeatureMap,
    pub embedding: Vec<f64>,
}

impl ImageEncoder {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.channels.contains(&0) {
            return Err(Error::config("encoder needs at least one stage of positive width"));
        }
        let mut stages = Vec::with_capacity(cfg.channels.len());
        let mut input = 1;
        for (s, &c) in cfg.channels.iter().enumerate() {
            stages.push(Conv3d::new(input, c, 3, cfg.bias, &mut derived(seed, &[s as u64]))?);
            input = c;
        }
        Ok(ImageEncoder { stages })
    }

    /// Encoder with every weight and bias set to zero.
    pub fn zeroed(cfg: &EncoderConfig) -> Result<Self> {
        let mut e = ImageEncoder::new(cfg, 0)?;
        for (_, t) in e.params_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(e)
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().map_or(0, Conv3d::out_channels)
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages.iter().map(Conv3d::out_channels).collect()
    }

    /// Every patch side must be a multiple of this.
    pub fn required_multiple(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn check_dims(&self, d: Dims3) -> Result<()> {
        let m = self.required_multiple();
        if d.as_array().iter().any(|&s| s == 0 || s % m != 0) {
            return Err(Error::dimension(format!(
                "patch dims {d} must be divisible by {m} for a {}-stage encoder",
                self.stages.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, p: &Patch) -> Result<EncoderTrace> {
        self.check_dims(p.dims)?;
        let mut x = FeatureMap::from_f32(p.dims, &p.voxels);
        let mut inputs = Vec::with_capacity(self.stages.len());
        let mut skips = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let mut y = conv.forward(&x)?;
            relu_inplace(&mut y);
            let pooled = avg_pool2(&y)?;
            inputs.push(x);
            skips.push(y);
            x = pooled;
        }
        let embedding = global_avg_pool(&x);
        Ok(EncoderTrace {
            inputs,
            skips,
            bottom: x,
            embedding,
        })
    }

    pub fn encode(&self, p: &Patch) -> Result<Vec<f64>> {
        Ok(self.forward(p)?.embedding)
    }

    /// Backpropagate gradients arriving at the bottom map and, optionally,
    /// at each skip. Parameter gradients accumulate under `prefix`.
    pub fn backward(
        &self,
        trace: &EncoderTrace,
        g_bottom: FeatureMap,
        g_skips: Option<&[FeatureMap]>,
        grads: &mut Grads,
        prefix: &str,
    ) {
        let mut g = g_bottom;
        for s in (0..self.stages.len()).rev() {
            let y = &trace.skips[s];
            let mut gy = avg_pool2_backward(&g, y.dims);
            if let Some(gs) = g_skips {
                gy.data
                    .iter_mut()
                    .zip(&gs[s].data)
                    .for_each(|(a, b)| *a += b);
            }
            relu_backward_inplace(&mut gy, y);
            g = self.stages[s].backward(
                &trace.inputs[s],
                &gy,
                grads,
                &format!("{prefix}.stage{s}"),
                s > 0,
            );
        }
    }

    /// Backpropagate a gradient with respect to the pooled embedding.
    pub fn backward_embedding(
        &self,
        trace: &EncoderTrace,
        g_embedding: &[f64],
        grads: &mut Grads,
        prefix: &str,
    ) {
        let g = global_avg_pool_backward(g_embedding, trace.bottom.dims);
        self.backward(trace, g, None, grads, prefix);
    }
}

impl Parameterized for ImageEncoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, c)| prefixed(&format!("stage{s}"), c.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.stages
            .iter_mut()
            .enumerate()
            .flat_map(|(s, c)| prefixed_mut(&format!("stage{s}"), c.params_mut()))
            .collect()
    }
}

/// Frozen bag-of-tokens embedder. Each token id owns a pseudo-random
/// Gaussian direction derived from `(seed, id)`; a caption embeds to the
/// L2-normalized sum of its token directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoder {
    pub width: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    /// No content tokens: the vector is all zeros.
    pub degenerate: bool,
}

impl TextEncoder {
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::config("text embedding width must be positive"));
        }
        Ok(TextEncoder { width, seed })
    }

    pub fn token_direction(&self, id: u32) -> Vec<f64> {
        let mut rng = seeded(derive_seed(self.seed, &[id as u64]));
        (0..self.width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    /// Embed a token multiset. Ids are sorted first so any permutation gives
    /// a bit-identical result.
    pub fn encode_ids(&self, ids: &[u32]) -> TextEmbedding {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        let mut v = vec![0.0; self.width];
        for id in sorted {
            v.iter_mut()
                .zip(self.token_direction(id))
                .for_each(|(a, b)| *a += b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return TextEmbedding {
                vector: vec![0.0; self.width],
                degenerate: true,
            };
        }
        v.iter_mut().for_each(|x| *x /= norm);
        TextEmbedding {
            vector: v,
            degenerate: false,
        }
    }

    pub fn encode_text(&self, c: &crate::captioner::Caption) -> TextEmbedding {
        self.encode_ids(&c.token_ids)
    }

    /// Canonical serialized form stored in checkpoints.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("plain struct serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

/// Two affine layers with a rectifier between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub l1: Linear,
    pub l2: Linear,
}

/// Forward state needed for [`Projector::backward`].
#[derive(Debug, Clone)]
pub struct ProjectorTrace {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Projector {
    pub fn new(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        Projector {
            l1: Linear::new(input, hidden, &mut derived(seed, &[0])),
            l2: Linear::new(hidden, output, &mut derived(seed, &[1])),
        }
    }

    /// Square projector with identity weights and zero biases, so the output
    /// is the rectified input.
    pub fn identity(width: usize) -> Self {
        let eye = |n: usize| {
            let mut t = Tensor::zeros(&[n, n]);
            (0..n).for_each(|i| t.data[i * n + i] = 1.0);
            t
        };
        Projector {
            l1: Linear {
                weight: eye(width),
                bias: Tensor::zeros(&[width]),
            },
            l2: Linear {
                weight: eye(width),
                bias: Tensor::zeros(&[width]),
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.l2.output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ProjectorTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::dimension(format!(
                "projector expects width {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut hidden = self.l1.forward(x);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let output = self.l2.forward(&hidden);
        Ok(ProjectorTrace {
            input: x.to_vec(),
            hidden,
            output,
        })
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.output)
    }

    /// Project every row of a batch.
    pub fn project_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.project(r)).collect()
    }

    /// Returns `dL/dx`; parameter gradients accumulate under `prefix`.
    pub fn backward(&self, t: &ProjectorTrace, g_out: &[f64], grads: &mut Grads, prefix: &str) -> Vec<f64> {
        let mut gh = self.l2.backward(&t.hidden, g_out, grads, &format!("{prefix}.l2"));
        gh.iter_mut().zip(&t.hidden).for_each(|(g, h)| {
            if *h <= 0.0 {
                *g = 0.0
            }
        });
        self.l1.backward(&t.input, &gh, grads, &format!("{prefix}.l1"))
    }
}

impl Parameterized for Projector {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("l1", self.l1.params());
        v.extend(prefixed("l2", self.l2.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("l1", self.l1.params_mut());
        v.extend(prefixed_mut("l2", self.l2.params_mut()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(d: Dims3, f: impl Fn(usize) -> f32) -> Patch {
        Patch {
            source_id: "t".into(),
            origin: [0; 3],
            dims: d,
            voxels: (0..d.len()).map(f).collect(),
        }
    }

    #[test]
    fn zero_patch_through_bias_free_zero_encoder_is_zero() {
        let cfg = EncoderConfig {
            channels: vec![2, 3, 4],
            bias: false,
        };
        let enc = ImageEncoder::zeroed(&cfg).unwrap();
        let e = enc.encode(&patch(Dims3::cube(8), |_| 0.0)).unwrap();
        assert_eq!(e, vec![0.0; 4]);
        let enc = ImageEncoder::new(&cfg, 3).unwrap();
        let e = enc.encode(&patch(Dims3::cube(8), |_| 0.0)).unwrap();
        assert_eq!(e, vec![0.0; 4]);
    }

    #[test]
    fn indivisible_dims_name_the_multiple() {
        let enc = ImageEncoder::new(&EncoderConfig::default(), 1).unwrap();
        assert!(enc.encode(&patch(Dims3::cube(32), |i| (i % 7) as f32)).is_ok());
        let err = enc.encode(&patch(Dims3::cube(20), |_| 0.0)).unwrap_err();
        assert!(err.to_string().contains("divisible by 8"), "{err}");
    }

    #[test]
    fn text_embedding_is_unit_and_order_free() {
        let t = TextEncoder::new(64, 9).unwrap();
        let a = t.encode_ids(&[5, 9, 12]);
        let b = t.encode_ids(&[12, 5, 9]);
        assert_eq!(a, b);
        let n: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let empty = t.encode_ids(&[]);
        assert!(empty.degenerate);
        assert!(empty.vector.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_projector_rectifies() {
        let p = Projector::identity(4);
        assert_eq!(p.project(&[1.0, -2.0, 0.5, 0.0]).unwrap(), vec![1.0, 0.0, 0.5, 0.0]);
        assert!(p.project(&[1.0]).is_err());
    }
}
