//! Central finite-difference checks of every differentiable operation.
//!
//! The error of a gradient block is `|a - n| / max(|a|, |n|, f)` with
//! Euclidean norms over the checked entries of the block and
//! `f = SCALE_FLOOR * max(1, |loss|)`; an instance's error is the worst of its
//! blocks. The floor keeps identically vanishing gradients (a two-row batch
//! normalization, for one) from turning rounding noise of the loss into a
//! relative error of one.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::captioner::{lm_loss, CaptionLm, EOS};
use crate::encoders::{EncoderConfig, ImageEncoder, Projector, SegDecoder};
use crate::error::{Error, Result};
use crate::nn::{FeatureMap, Grads, Parameterized};
use crate::objectives::{total_loss, vlp_loss, vr_loss, LossWeights, VlpImage};
use crate::rng::{derived, Rng};
use crate::volumes::{Dims3, Patch};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
pub const DEEP_TOLERANCE: f64 = 1e-4;
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Objectives,
    Captioner,
    Encoders,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "objectives" => Ok(Suite::Objectives),
            "captioner" => Ok(Suite::Captioner),
            "encoders" => Ok(Suite::Encoders),
            "all" => Ok(Suite::All),
            _ => Err(Error::config(format!(
                "unknown gradcheck suite `{s}` (objectives, captioner, encoders, all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub operation: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn total_instances(&self) -> usize {
        self.entries.iter().map(|e| e.instances).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("operation,instances,max_rel_error,tolerance,passed\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{:e},{:e},{}\n",
                e.operation, e.instances, e.max_rel_error, e.tolerance, e.passed
            ));
        }
        s
    }
}

/// Relative error between two gradient vectors of a loss with value `loss`.
pub fn rel_error(analytic: &[f64], numeric: &[f64], loss: f64) -> f64 {
    let sq = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = sq(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = sq(&mut analytic.iter().copied()).max(sq(&mut numeric.iter().copied()));
    diff / scale.max(SCALE_FLOOR * loss.abs().max(1.0))
}

/// Central differences of `f` at `x` for the given entries.
pub fn numeric_grad(x: &mut [f64], entries: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    entries
        .iter()
        .map(|&i| {
            let x0 = x[i];
            x[i] = x0 + STEP;
            let lp = f(x);
            x[i] = x0 - STEP;
            let lm = f(x);
            x[i] = x0;
            (lp - lm) / (2.0 * STEP)
        })
        .collect()
}

fn normal_matrix(rng: &mut Rng, k: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((k, d), |_| rng.sample(StandardNormal))
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Worst block error of a loss over several matrix inputs.
fn check_matrices(
    inputs: &[Array2<f64>],
    analytic: &[&Array2<f64>],
    f: impl Fn(&[Array2<f64>]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let loss = f(inputs);
    let mut work = inputs.to_vec();
    for (b, a) in analytic.iter().enumerate() {
        let n = work[b].len();
        let mut flat = work[b].as_slice().unwrap().to_vec();
        let shape = work[b].raw_dim();
        let numeric = numeric_grad(&mut flat, &all(n), |x| {
            work[b] = Array2::from_shape_vec(shape, x.to_vec()).unwrap();
            f(&work)
        });
        work[b] = inputs[b].clone();
        worst = worst.max(rel_error(a.as_slice().unwrap(), &numeric, loss));
    }
    worst
}

/// Worst block error of a loss over the parameters of a model. At most
/// `per_block` evenly spaced entries of each block are perturbed.
pub fn check_params<M: Parameterized>(
    model: &mut M,
    analytic: &Grads,
    per_block: Option<usize>,
    f: impl Fn(&M) -> f64,
) -> f64 {
    let names: Vec<(String, usize)> = model
        .params()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let mut worst: f64 = 0.0;
    let loss = f(model);
    for (name, len) in names {
        let Some(a) = analytic.get(&name) else { continue };
        let entries: Vec<usize> = match per_block {
            Some(m) if m < len => (0..m).map(|j| j * len / m).collect(),
            _ => all(len),
        };
        let numeric: Vec<f64> = entries
            .iter()
            .map(|&i| {
                let bump = |model: &mut M, dv: f64| {
                    for (n, t) in model.params_mut() {
                        if n == name {
                            t.data[i] += dv;
                        }
                    }
                };
                bump(model, STEP);
                let lp = f(model);
                bump(model, -2.0 * STEP);
                let lm = f(model);
                bump(model, STEP);
                (lp - lm) / (2.0 * STEP)
            })
            .collect();
        let picked: Vec<f64> = entries.iter().map(|&i| a[i]).collect();
        worst = worst.max(rel_error(&picked, &numeric, loss));
    }
    worst
}

fn entry(op: &str, errors: &[f64], tol: f64) -> GradcheckEntry {
    let max = errors.iter().copied().fold(0.0, f64::max);
    GradcheckEntry {
        operation: op.into(),
        instances: errors.len(),
        max_rel_error: max,
        tolerance: tol,
        passed: errors.iter().all(|e| e.is_finite()) && max < tol,
    }
}

fn batch_shape(rng: &mut Rng) -> (usize, usize) {
    (rng.gen_range(2..=8), rng.gen_range(3..=16))
}

pub fn check_vr(rng: &mut Rng) -> Result<f64> {
    let (k, d) = batch_shape(rng);
    let w = LossWeights::default();
    let v = [normal_matrix(rng, k, d), normal_matrix(rng, k, d)];
    let r = vr_loss(v[0].view(), v[1].view(), &w)?;
    Ok(check_matrices(&v, &[&r.gradients["v1"], &r.gradients["v2"]], |x| {
        vr_loss(x[0].view(), x[1].view(), &w).unwrap().total
    }))
}

pub fn check_vlp(rng: &mut Rng) -> Result<f64> {
    let (k, d) = batch_shape(rng);
    let sigma = LossWeights::default().sigma1;
    let v = [normal_matrix(rng, k, d), normal_matrix(rng, k, d)];
    let r = vlp_loss(v[0].view(), v[1].view(), sigma)?;
    Ok(check_matrices(&v, &[&r.gradients["vhat"], &r.gradients["that"]], |x| {
        vlp_loss(x[0].view(), x[1].view(), sigma).unwrap().total
    }))
}

/// Alternates between a separate VLP image batch and a shared first view.
pub fn check_total(rng: &mut Rng, separate: bool) -> Result<f64> {
    let (k, d) = batch_shape(rng);
    let w = LossWeights::default();
    let v: Vec<Array2<f64>> = (0..4).map(|_| normal_matrix(rng, k, d)).collect();
    let eval = |x: &[Array2<f64>]| {
        let image = if separate {
            VlpImage::Separate(x[3].view())
        } else {
            VlpImage::View1
        };
        total_loss(image, x[2].view(), x[0].view(), x[1].view(), &w)
    };
    let r = eval(&v)?;
    let mut analytic = vec![&r.gradients["v1"], &r.gradients["v2"], &r.gradients["that"]];
    if separate {
        analytic.push(&r.gradients["vhat_vlp"]);
    }
    Ok(check_matrices(&v[..analytic.len()], &analytic, |x| {
        let mut full = x.to_vec();
        if !separate {
            full.push(v[3].clone());
        }
        eval(&full).unwrap().total
    }))
}

pub fn check_projector(rng: &mut Rng, input: usize, output: usize) -> Result<f64> {
    let hidden = rng.gen_range(3..=12);
    let mut p = Projector::new(input, hidden, output, rng.gen());
    // keep hidden units away from the rectifier kink
    for b in p.l1.bias.data.iter_mut() {
        *b += 0.1;
    }
    let x: Vec<f64> = (0..input).map(|_| rng.sample(StandardNormal)).collect();
    let w: Vec<f64> = (0..output).map(|_| rng.sample(StandardNormal)).collect();
    let loss = |p: &Projector, x: &[f64]| -> f64 {
        p.project(x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let t = p.forward(&x)?;
    let mut grads = Grads::new();
    let gx = p.backward(&t, &w, &mut grads, "p");
    let blocks: Grads = {
        let mut g = Grads::new();
        for (n, v) in grads.iter() {
            g.accumulate(n.strip_prefix("p.").unwrap(), v);
        }
        g
    };
    let mut worst = check_params(&mut p, &blocks, None, |p| loss(p, &x));
    let mut xs = x.clone();
    let numeric = numeric_grad(&mut xs, &all(input), |x| loss(&p, x));
    worst = worst.max(rel_error(&gx, &numeric, loss(&p, &x)));
    Ok(worst)
}

pub fn check_lm(rng: &mut Rng) -> Result<f64> {
    let vocab = rng.gen_range(4..=9);
    let feat = rng.gen_range(3..=8);
    let hidden = rng.gen_range(3..=8);
    let embed = rng.gen_range(2..=6);
    let cond = rng.gen_range(3..=10);
    let mut m = CaptionLm::new(vocab, feat, hidden, embed, cond, rng);
    let f: Vec<f64> = (0..feat).map(|_| rng.sample(StandardNormal)).collect();
    let len = rng.gen_range(1..=5);
    let mut target: Vec<u32> = (0..len - 1)
        .map(|_| rng.gen_range(3..vocab as u32))
        .collect();
    target.push(EOS);
    let (_, grads) = lm_loss(&m, &f, &target)?;
    Ok(check_params(&mut m, &grads, None, |m| lm_loss(m, &f, &target).unwrap().0))
}

/// Encoder followed by decoder on an 8³ patch with a random linear readout
/// of the logits.
pub fn check_encoder_decoder(rng: &mut Rng) -> Result<f64> {
    let cfg = EncoderConfig {
        channels: vec![rng.gen_range(2..=3), rng.gen_range(2..=4)],
        bias: true,
    };
    let classes = rng.gen_range(2..=3);
    let d = Dims3::cube(8);
    let patch = Patch {
        source_id: "gradcheck".into(),
        origin: [0; 3],
        dims: d,
        voxels: (0..d.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let w: Vec<f64> = (0..classes * d.len()).map(|_| rng.sample(StandardNormal)).collect();

    struct Both {
        enc: ImageEncoder,
        dec: SegDecoder,
    }
    impl Parameterized for Both {
        fn params(&self) -> Vec<(String, &crate::nn::Tensor)> {
            let mut v = crate::nn::prefixed("enc", self.enc.params());
            v.extend(crate::nn::prefixed("dec", self.dec.params()));
            v
        }
        fn params_mut(&mut self) -> Vec<(String, &mut crate::nn::Tensor)> {
            let mut v = crate::nn::prefixed_mut("enc", self.enc.params_mut());
            v.extend(crate::nn::prefixed_mut("dec", self.dec.params_mut()));
            v
        }
    }
    let enc = ImageEncoder::new(&cfg, rng.gen())?;
    let dec = SegDecoder::new(&enc.stage_channels(), classes, rng.gen())?;
    let mut m = Both { enc, dec };
    // zero biases put whole regions exactly on the rectifier kink
    for (name, t) in m.params_mut() {
        if name.ends_with("bias") {
            t.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
        }
    }
    let loss = |m: &Both| -> f64 {
        let t = m.enc.forward(&patch).unwrap();
        let o = m.dec.forward(&t).unwrap();
        o.logits.data.iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let t = m.enc.forward(&patch)?;
    let o = m.dec.forward(&t)?;
    let g = FeatureMap {
        channels: classes,
        dims: d,
        data: w.clone(),
    };
    let mut grads = Grads::new();
    let (gb, gs) = m.dec.backward(&o, &g, &mut grads, "dec");
    m.enc.backward(&t, gb, Some(&gs), &mut grads, "enc");
    Ok(check_params(&mut m, &grads, Some(6), loss))
}

/// Instance counts per operation.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub objectives: usize,
    pub projector: usize,
    pub lm: usize,
    pub composition: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            objectives: 200,
            projector: 50,
            lm: 30,
            composition: 4,
        }
    }
}

/// Run the selected suites.
pub fn gradcheck(suites: &[Suite], seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(suites, seed, Budget::default())
}

pub fn gradcheck_with(suites: &[Suite], seed: u64, budget: Budget) -> Result<GradcheckReport> {
    if suites.is_empty() {
        return Err(Error::config("no gradcheck suite selected"));
    }
    let has = |s: Suite| suites.contains(&s) || suites.contains(&Suite::All);
    let run = |stream: u64, n: usize, f: &dyn Fn(&mut Rng, usize) -> Result<f64>| {
        (0..n)
            .map(|i| f(&mut derived(seed, &[stream, i as u64]), i))
            .collect::<Result<Vec<f64>>>()
    };
    let mut entries = Vec::new();
    if has(Suite::Objectives) {
        let n = budget.objectives;
        entries.push(entry("vr_loss", &run(1, n, &|r, _| check_vr(r))?, TOLERANCE));
        entries.push(entry("vlp_loss", &run(2, n, &|r, _| check_vlp(r))?, TOLERANCE));
        entries.push(entry(
            "total_loss",
            &run(3, n, &|r, i| check_total(r, i % 2 == 0))?,
            TOLERANCE,
        ));
    }
    if has(Suite::Captioner) {
        entries.push(entry("lm_loss", &run(4, budget.lm, &|r, _| check_lm(r))?, TOLERANCE));
    }
    if has(Suite::Encoders) {
        entries.push(entry(
            "projector",
            &run(5, budget.projector, &|r, i| {
                if i == 0 {
                    check_projector(r, 8, 4)
                } else {
                    let (a, b) = (r.gen_range(2..=10), r.gen_range(2..=10));
                    check_projector(r, a, b)
                }
            })?,
            TOLERANCE,
        ));
        entries.push(entry(
            "encoder_decoder",
            &run(6, budget.composition, &|r, _| check_encoder_decoder(r))?,
            DEEP_TOLERANCE,
        ));
    }
    Ok(GradcheckReport { seed, entries })
}
