//! Minimal dense-network building blocks with explicit backward passes.
//!
//! Every layer keeps its parameters in named [`Tensor`] blocks so optimizers,
//! checkpoints and finite-difference checks can address them uniformly.

mod conv;
mod optim;

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use conv::{
    avg_pool2, avg_pool2_backward, concat_channels, global_avg_pool, global_avg_pool_backward,
    relu_backward_inplace, relu_inplace, split_channels, upsample2, upsample2_backward, Conv3d,
    FeatureMap,
};
pub use optim::AdamW;

/// Named-parameter storage: a shape plus row-major `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Fan-in scaled uniform bound for layers followed by a rectifier.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Objects owning named trainable (or frozen) parameter blocks.
///
/// Both methods must list blocks in the same, fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Copy values from `(name, tensor)` blocks with matching names and shapes.
    fn load_blocks(&mut self, blocks: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in self.params_mut() {
            let src = blocks
                .get(&name)
                .ok_or_else(|| Error::config(format!("missing parameter block `{name}`")))?;
            if src.shape != t.shape {
                return Err(Error::dimension(format!(
                    "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                    t.shape, src.shape
                )));
            }
            t.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

pub fn prefixed<'a>(prefix: &str, blocks: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    blocks
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub fn prefixed_mut<'a>(
    prefix: &str,
    blocks: Vec<(String, &'a mut Tensor)>,
) -> Vec<(String, &'a mut Tensor)> {
    blocks
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Gradient blocks keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads(BTreeMap<String, Vec<f64>>);

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add `values` into block `name`, creating it when absent.
    pub fn accumulate(&mut self, name: &str, values: &[f64]) {
        match self.0.get_mut(name) {
            Some(g) => {
                debug_assert_eq!(g.len(), values.len(), "gradient block `{name}` resized");
                g.iter_mut().zip(values).for_each(|(a, b)| *a += b);
            }
            None => {
                self.0.insert(name.to_string(), values.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn merge(&mut self, other: &Grads) {
        for (k, v) in &other.0 {
            self.accumulate(k, v);
        }
    }

    pub fn merge_prefixed(&mut self, prefix: &str, other: &Grads) {
        for (k, v) in &other.0 {
            self.accumulate(&format!("{prefix}.{k}"), v);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.0.values_mut() {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Global L2 norm over all blocks, summed in name order.
    pub fn norm(&self) -> f64 {
        self.0
            .values()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Fully connected layer `y = W x + b` with `W` stored as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: Tensor::uniform(&[output, input], he_bound(input), rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn with_bound(input: usize, output: usize, bound: f64, rng: &mut Rng) -> Self {
        Linear {
            weight: Tensor::uniform(&[output, input], bound, rng),
            bias: Tensor::uniform(&[output], bound, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (o, i) = (self.output_dim(), self.input_dim());
        debug_assert_eq!(x.len(), i);
        (0..o)
            .map(|r| {
                let row = &self.weight.data[r * i..(r + 1) * i];
                self.bias.data[r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients under `prefix` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], gy: &[f64], grads: &mut Grads, prefix: &str) -> Vec<f64> {
        let (o, i) = (self.output_dim(), self.input_dim());
        let mut gw = vec![0.0; o * i];
        let mut gx = vec![0.0; i];
        for r in 0..o {
            let g = gy[r];
            if g == 0.0 {
                continue;
            }
            let row = &self.weight.data[r * i..(r + 1) * i];
            let grow = &mut gw[r * i..(r + 1) * i];
            for c in 0..i {
                grow[c] += g * x[c];
                gx[c] += g * row[c];
            }
        }
        grads.accumulate(&format!("{prefix}.weight"), &gw);
        grads.accumulate(&format!("{prefix}.bias"), gy);
        gx
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| (v - lse).exp()).collect()
}
