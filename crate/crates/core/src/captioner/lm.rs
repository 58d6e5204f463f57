use rand::Rng as _;

use super::{Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, prefixed, prefixed_mut, sigmoid, Grads, Linear, Parameterized, Tensor};
use crate::rng::{seeded, Rng};
use crate::volumes::Slice2;

/// Width of [`slice_feature`]: an 8x8 grid of block means.
pub const FEATURE_DIM: usize = 64;
const GRID: usize = 8;

/// Mean-pool a slice onto an 8x8 grid (row-major). Pixel `(y, x)` lands in
/// block `(y*8/h, x*8/w)`; blocks that receive no pixel are zero.
pub fn slice_feature(s: &Slice2) -> Vec<f64> {
    let mut sum = vec![0.0; FEATURE_DIM];
    let mut count = vec![0usize; FEATURE_DIM];
    for y in 0..s.height {
        let by = y * GRID / s.height;
        for x in 0..s.width {
            let b = by * GRID + x * GRID / s.width;
            sum[b] += s.pixels[y * s.width + x] as f64;
            count[b] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// Image-conditioned gated recurrent language model.
///
/// The initial state is `h0 = tanh(P2 relu(P1 ((f - shift) * scale)))` for an
/// image feature `f`; `shift` and `scale` are fixed statistics, not trained.
/// Each step embeds the previous token, updates the state with a gated
/// recurrent cell
///
/// ```text
/// z = sigmoid(Wz x + Uz h + bz)
/// r = sigmoid(Wr x + Ur h + br)
/// n = tanh(Wn x + Un (r * h) + bn)
/// h' = (1 - z) * n + z * h
/// ```
///
/// and emits `softmax(Wo h' + bo)` over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionLm {
    pub feature_shift: Tensor,
    pub feature_scale: Tensor,
    pub embed: Tensor,
    pub cond1: Linear,
    pub cond2: Linear,
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wn: Tensor,
    pub un: Tensor,
    pub bn: Tensor,
    pub out: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decode {
    Greedy,
    Sampled(u64),
}

impl CaptionLm {
    pub fn new(
        vocab_size: usize,
        feature_dim: usize,
        hidden: usize,
        embed_dim: usize,
        cond_hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        let g = 1.0 / (hidden as f64).sqrt();
        let gate = |cols: usize, rng: &mut Rng| Tensor::uniform(&[hidden, cols], g, rng);
        let embed = Tensor::uniform(&[vocab_size, embed_dim], 1.0, rng);
        let cond1 = Linear::new(feature_dim, cond_hidden, rng);
        let cond2 = Linear::with_bound(cond_hidden, hidden, 1.0 / (cond_hidden as f64).sqrt(), rng);
        let wz = gate(embed_dim, rng);
        let uz = gate(hidden, rng);
        let wr = gate(embed_dim, rng);
        let ur = gate(hidden, rng);
        let wn = gate(embed_dim, rng);
        let un = gate(hidden, rng);
        let out = Linear::with_bound(hidden, vocab_size, g, rng);
        CaptionLm {
            feature_shift: Tensor::zeros(&[feature_dim]),
            feature_scale: Tensor::from_vec(&[feature_dim], vec![1.0; feature_dim]).expect("shape"),
            embed,
            cond1,
            cond2,
            wz,
            uz,
            bz: Tensor::zeros(&[hidden]),
            wr,
            ur,
            br: Tensor::zeros(&[hidden]),
            wn,
            un,
            bn: Tensor::zeros(&[hidden]),
            out,
        }
    }

    pub fn for_vocabulary(vocab: &Vocabulary, hidden: usize, embed_dim: usize, seed: u64) -> Self {
        CaptionLm::new(vocab.len(), FEATURE_DIM, hidden, embed_dim, 256, &mut seeded(seed))
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.shape[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.shape[1]
    }

    pub fn hidden(&self) -> usize {
        self.bz.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.cond1.input_dim()
    }

    fn check_feature(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.feature_dim() {
            return Err(Error::dimension(format!(
                "image feature has width {}, model expects {}",
                f.len(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    /// Set the fixed input standardization from sample features: per-feature
    /// mean and inverse standard deviation (1 where the deviation vanishes).
    pub fn fit_feature_norm(&mut self, features: &[Vec<f64>]) {
        let n = features.len().max(1) as f64;
        for j in 0..self.feature_dim() {
            let mean = features.iter().map(|f| f[j]).sum::<f64>() / n;
            let var = features.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            self.feature_shift.data[j] = mean;
            self.feature_scale.data[j] = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        }
    }

    fn normalized(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.feature_shift.data)
            .zip(&self.feature_scale.data)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    /// Returns the normalized feature, the hidden activation and `h0`.
    fn initial_state(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x = self.normalized(f);
        let mut a1 = self.cond1.forward(&x);
        a1.iter_mut().for_each(|v| *v = v.max(0.0));
        let h0 = self.cond2.forward(&a1).into_iter().map(f64::tanh).collect();
        (x, a1, h0)
    }

    fn embedding(&self, tok: u32) -> &[f64] {
        let e = self.embed_dim();
        &self.embed.data[tok as usize * e..(tok as usize + 1) * e]
    }

    fn cell(&self, x: &[f64], h: &[f64]) -> Step {
        let hd = self.hidden();
        let e = self.embed_dim();
        let z: Vec<f64> = (0..hd)
            .map(|i| sigmoid(self.bz.data[i] + dot(&self.wz.data[i * e..], x) + dot(&self.uz.data[i * hd..], h)))
            .collect();
        let r: Vec<f64> = (0..hd)
            .map(|i| sigmoid(self.br.data[i] + dot(&self.wr.data[i * e..], x) + dot(&self.ur.data[i * hd..], h)))
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let n: Vec<f64> = (0..hd)
            .map(|i| (self.bn.data[i] + dot(&self.wn.data[i * e..], x) + dot(&self.un.data[i * hd..], &rh)).tanh())
            .collect();
        let h_new: Vec<f64> = (0..hd).map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i]).collect();
        let logits = self.out.forward(&h_new);
        Step {
            h_prev: h.to_vec(),
            z,
            r,
            rh,
            n,
            h: h_new,
            logits,
        }
    }

    /// Output distribution for every step of a teacher-forced pass.
    pub fn step_distributions(&self, feature: &[f64], inputs: &[u32]) -> Result<Vec<Vec<f64>>> {
        self.check_feature(feature)?;
        let (_, _, mut h) = self.initial_state(feature);
        let mut out = Vec::with_capacity(inputs.len());
        for &tok in inputs {
            self.check_token(tok)?;
            let s = self.cell(self.embedding(tok), &h);
            out.push(crate::nn::softmax(&s.logits));
            h = s.h;
        }
        Ok(out)
    }

    fn check_token(&self, tok: u32) -> Result<()> {
        if tok as usize >= self.vocab_size() {
            return Err(Error::Vocabulary {
                id: tok,
                size: self.vocab_size(),
            });
        }
        Ok(())
    }
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// `acc[c] += sum_r w[r, c] * g[r]`
fn add_transpose_mv(acc: &mut [f64], w: &[f64], g: &[f64]) {
    let cols = acc.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        for (a, wv) in acc.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *a += gr * wv;
        }
    }
}

/// `acc[r, c] += g[r] * x[c]`
fn add_outer(acc: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &gr) in g.iter().enumerate() {
        for (a, xv) in acc[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *a += gr * xv;
        }
    }
}

struct Step {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    rh: Vec<f64>,
    n: Vec<f64>,
    h: Vec<f64>,
    logits: Vec<f64>,
}

impl Parameterized for CaptionLm {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("norm.shift".to_string(), &self.feature_shift),
            ("norm.scale".to_string(), &self.feature_scale),
            ("embed".to_string(), &self.embed),
        ];
        v.extend(prefixed("cond1", self.cond1.params()));
        v.extend(prefixed("cond2", self.cond2.params()));
        for (n, t) in [
            ("wz", &self.wz),
            ("uz", &self.uz),
            ("bz", &self.bz),
            ("wr", &self.wr),
            ("ur", &self.ur),
            ("br", &self.br),
            ("wn", &self.wn),
            ("un", &self.un),
            ("bn", &self.bn),
        ] {
            v.push((format!("gru.{n}"), t));
        }
        v.extend(prefixed("out", self.out.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![
            ("norm.shift".to_string(), &mut self.feature_shift),
            ("norm.scale".to_string(), &mut self.feature_scale),
            ("embed".to_string(), &mut self.embed),
        ];
        v.extend(prefixed_mut("cond1", self.cond1.params_mut()));
        v.extend(prefixed_mut("cond2", self.cond2.params_mut()));
        for (n, t) in [
            ("wz", &mut self.wz),
            ("uz", &mut self.uz),
            ("bz", &mut self.bz),
            ("wr", &mut self.wr),
            ("ur", &mut self.ur),
            ("br", &mut self.br),
            ("wn", &mut self.wn),
            ("un", &mut self.un),
            ("bn", &mut self.bn),
        ] {
            v.push((format!("gru.{n}"), t));
        }
        v.extend(prefixed_mut("out", self.out.params_mut()));
        v
    }
}

/// Teacher-forced negative log-likelihood of `target` (which must end with
/// `<eos>`) and its gradient for every parameter.
pub fn lm_loss(model: &CaptionLm, feature: &[f64], target: &[u32]) -> Result<(f64, Grads)> {
    model.check_feature(feature)?;
    if target.last() != Some(&EOS) {
        return Err(Error::config("caption target must be non-empty and end with <eos>"));
    }
    for &t in target {
        model.check_token(t)?;
    }
    let hd = model.hidden();
    let e = model.embed_dim();
    let (xf, a1, h0) = model.initial_state(feature);

    let mut inputs = Vec::with_capacity(target.len());
    inputs.push(BOS);
    inputs.extend_from_slice(&target[..target.len() - 1]);

    let mut steps = Vec::with_capacity(target.len());
    let mut loss = 0.0;
    let mut h = h0.clone();
    for (&inp, &tgt) in inputs.iter().zip(target) {
        let s = model.cell(model.embedding(inp), &h);
        loss += log_sum_exp(&s.logits) - s.logits[tgt as usize];
        h = s.h.clone();
        steps.push(s);
    }

    let mut grads = Grads::new();
    let mut g_embed = vec![0.0; model.embed.len()];
    let mut gw = [vec![0.0; hd * e], vec![0.0; hd * e], vec![0.0; hd * e]];
    let mut gu = [vec![0.0; hd * hd], vec![0.0; hd * hd], vec![0.0; hd * hd]];
    let mut gb = [vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]];
    let mut dh_next = vec![0.0; hd];
    for (t, s) in steps.iter().enumerate().rev() {
        let mut dlogits = crate::nn::softmax(&s.logits);
        dlogits[target[t] as usize] -= 1.0;
        let mut dh = model.out.backward(&s.h, &dlogits, &mut grads, "out");
        dh.iter_mut().zip(&dh_next).for_each(|(a, b)| *a += b);

        let x = model.embedding(inputs[t]);
        let mut dh_prev: Vec<f64> = dh.iter().zip(&s.z).map(|(d, z)| d * z).collect();
        let da_n: Vec<f64> = (0..hd)
            .map(|i| dh[i] * (1.0 - s.z[i]) * (1.0 - s.n[i] * s.n[i]))
            .collect();
        let da_z: Vec<f64> = (0..hd)
            .map(|i| dh[i] * (s.h_prev[i] - s.n[i]) * s.z[i] * (1.0 - s.z[i]))
            .collect();
        let mut d_rh = vec![0.0; hd];
        add_transpose_mv(&mut d_rh, &model.un.data, &da_n);
        let da_r: Vec<f64> = (0..hd)
            .map(|i| d_rh[i] * s.h_prev[i] * s.r[i] * (1.0 - s.r[i]))
            .collect();
        for i in 0..hd {
            dh_prev[i] += d_rh[i] * s.r[i];
        }
        add_transpose_mv(&mut dh_prev, &model.uz.data, &da_z);
        add_transpose_mv(&mut dh_prev, &model.ur.data, &da_r);

        let mut dx = vec![0.0; e];
        for (k, (da, w)) in [(&da_z, &model.wz), (&da_r, &model.wr), (&da_n, &model.wn)]
            .into_iter()
            .enumerate()
        {
            add_outer(&mut gw[k], da, x);
            add_transpose_mv(&mut dx, &w.data, da);
            gb[k].iter_mut().zip(da.iter()).for_each(|(a, b)| *a += b);
        }
        add_outer(&mut gu[0], &da_z, &s.h_prev);
        add_outer(&mut gu[1], &da_r, &s.h_prev);
        add_outer(&mut gu[2], &da_n, &s.rh);
        let row = inputs[t] as usize * e;
        g_embed[row..row + e]
            .iter_mut()
            .zip(&dx)
            .for_each(|(a, b)| *a += b);
        dh_next = dh_prev;
    }

    let da2: Vec<f64> = dh_next.iter().zip(&h0).map(|(d, h)| d * (1.0 - h * h)).collect();
    let mut da1 = model.cond2.backward(&a1, &da2, &mut grads, "cond2");
    da1.iter_mut().zip(&a1).for_each(|(g, a)| {
        if *a <= 0.0 {
            *g = 0.0
        }
    });
    model.cond1.backward(&xf, &da1, &mut grads, "cond1");

    grads.accumulate("embed", &g_embed);
    for (k, gate) in ["z", "r", "n"].iter().enumerate() {
        grads.accumulate(&format!("gru.w{gate}"), &gw[k]);
        grads.accumulate(&format!("gru.u{gate}"), &gu[k]);
        grads.accumulate(&format!("gru.b{gate}"), &gb[k]);
    }
    Ok((loss, grads))
}

/// Autoregressive decoding from `<bos>` until `<eos>` or `max_len` content
/// tokens. Greedy ties go to the lowest token id.
pub fn lm_generate(
    model: &CaptionLm,
    feature: &[f64],
    max_len: usize,
    decode: Decode,
) -> Result<Vec<u32>> {
    model.check_feature(feature)?;
    let mut rng = match decode {
        Decode::Sampled(seed) => Some(seeded(seed)),
        Decode::Greedy => None,
    };
    let (_, _, mut h) = model.initial_state(feature);
    let mut prev = BOS;
    let mut out = Vec::new();
    while out.len() < max_len {
        let s = model.cell(model.embedding(prev), &h);
        let next = match rng.as_mut() {
            None => argmax(&s.logits),
            Some(rng) => sample(&crate::nn::softmax(&s.logits), rng),
        };
        if next == EOS {
            break;
        }
        out.push(next);
        prev = next;
        h = s.h;
    }
    Ok(out)
}

fn argmax(x: &[f64]) -> u32 {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best as u32
}

/// Inverse-CDF draw from one uniform variate.
pub(crate) fn sample(p: &[f64], rng: &mut Rng) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i as u32;
        }
    }
    (p.len() - 1) as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_is_block_mean() {
        let s = Slice2 {
            height: 16,
            width: 8,
            pixels: (0..128).map(|i| i as f32).collect(),
        };
        let f = slice_feature(&s);
        assert_eq!(f.len(), FEATURE_DIM);
        // block (0, 0) covers rows 0..2 of column 0: pixels 0 and 8.
        assert_eq!(f[0], 4.0);
        // block (1, 1): rows 2..4 of column 1, pixels 17 and 25.
        assert_eq!(f[9], 21.0);
    }

    #[test]
    fn distributions_sum_to_one() {
        let m = CaptionLm::new(9, 5, 4, 3, 6, &mut seeded(2));
        let f = [0.3, -0.2, 1.0, 0.0, 0.7];
        for p in m.step_distributions(&f, &[0, 4, 8, 2]).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
