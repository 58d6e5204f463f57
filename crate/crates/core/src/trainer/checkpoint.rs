use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config_hash;
use crate::captioner::{CaptionLm, CaptionTrainConfig, Vocabulary, FEATURE_DIM};
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::nn::{AdamW, Parameterized, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SVLPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
    Captioner,
}

/// Per-step generators are derived from `(seed, step)`, so the seed and the
/// next step index are the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

/// Named parameter blocks plus everything needed to resume training.
///
/// On disk: magic, little-endian `u32` version, `u64` header length, JSON
/// header, then every block's values as little-endian `f64` in header order.
/// Optimizer moments are stored as blocks named `adamw.m.*` and `adamw.v.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub iteration: u64,
    pub rng: RngState,
    pub blocks: BTreeMap<String, Tensor>,
    pub optimizer: Option<AdamW>,
    pub text_encoder: Option<TextEncoder>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: CheckpointKind,
    config: serde_json::Value,
    config_hash: String,
    iteration: u64,
    rng: RngState,
    optimizer: Option<OptimizerHeader>,
    text_encoder: Option<TextEncoder>,
    blocks: Vec<BlockHeader>,
}

const M_PREFIX: &str = "adamw.m.";
const V_PREFIX: &str = "adamw.v.";

impl Checkpoint {
    pub fn collect_blocks(model: &impl Parameterized) -> BTreeMap<String, Tensor> {
        model
            .params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut all: Vec<(String, Vec<usize>, &[f64])> = self
            .blocks
            .iter()
            .map(|(n, t)| (n.clone(), t.shape.clone(), t.data.as_slice()))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, map) in [(M_PREFIX, &opt.m), (V_PREFIX, &opt.v)] {
                for (n, v) in map {
                    all.push((format!("{prefix}{n}"), vec![v.len()], v.as_slice()));
                }
            }
        }
        let header = Header {
            kind: self.kind,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            iteration: self.iteration,
            rng: self.rng,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                lr: o.lr,
                weight_decay: o.weight_decay,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
            }),
            text_encoder: self.text_encoder.clone(),
            blocks: all
                .iter()
                .map(|(n, s, _)| BlockHeader {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(
            20 + json.len() + 8 * all.iter().map(|(_, _, d)| d.len()).sum::<usize>(),
        );
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &all {
            for v in *data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
        let mut offset = 20 + hlen;
        let mut blocks = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for b in header.blocks {
            let n: usize = b.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad(format!("truncated block `{}`", b.name)))?;
            offset += 8 * n;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(name) = b.name.strip_prefix(M_PREFIX) {
                m.insert(name.to_string(), data);
            } else if let Some(name) = b.name.strip_prefix(V_PREFIX) {
                v.insert(name.to_string(), data);
            } else {
                blocks.insert(b.name, Tensor { shape: b.shape, data });
            }
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        let optimizer = header.optimizer.map(|o| AdamW {
            lr: o.lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
            m,
            v,
        });
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            config_hash: header.config_hash,
            iteration: header.iteration,
            rng: header.rng,
            blocks,
            optimizer,
            text_encoder: header.text_encoder,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Package a trained captioner with its vocabulary and training config.
    pub fn from_captioner(model: &CaptionLm, vocab: &Vocabulary, cfg: &CaptionTrainConfig) -> Result<Self> {
        Ok(Checkpoint {
            kind: CheckpointKind::Captioner,
            config: serde_json::json!({ "train": cfg, "vocabulary": vocab }),
            config_hash: config_hash(cfg)?,
            iteration: cfg.steps as u64,
            rng: RngState {
                seed: cfg.seed,
                next_step: cfg.steps as u64,
            },
            blocks: Checkpoint::collect_blocks(model),
            optimizer: None,
            text_encoder: None,
        })
    }

    /// Rebuild the captioner and vocabulary stored by [`Checkpoint::from_captioner`].
    pub fn captioner(&self) -> Result<(CaptionLm, Vocabulary)> {
        if self.kind != CheckpointKind::Captioner {
            return Err(Error::config(format!(
                "expected a captioner checkpoint, found {:?}",
                self.kind
            )));
        }
        let cfg: CaptionTrainConfig = serde_json::from_value(self.config["train"].clone())
            .map_err(|e| Error::config(format!("captioner checkpoint config: {e}")))?;
        let vocab: Vocabulary = serde_json::from_value(self.config["vocabulary"].clone())
            .map_err(|e| Error::config(format!("captioner checkpoint vocabulary: {e}")))?;
        let mut model = CaptionLm::new(
            vocab.len(),
            FEATURE_DIM,
            cfg.hidden,
            cfg.embed_dim,
            cfg.cond_hidden,
            &mut crate::rng::seeded(0),
        );
        model.load_blocks(&self.blocks)?;
        Ok((model, vocab))
    }

    /// Blocks whose names start with `prefix.`, with the prefix removed.
    pub fn sub_blocks(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.blocks
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut opt = AdamW::new(1e-3, 5e-2);
        opt.step = 7;
        opt.m.insert("a.w".into(), vec![0.1, -0.2]);
        opt.v.insert("a.w".into(), vec![1e-300, 3.0]);
        Checkpoint {
            kind: CheckpointKind::Pretrain,
            config: serde_json::json!({"b": 1, "a": [1, 2]}),
            config_hash: "abc".into(),
            iteration: 7,
            rng: RngState { seed: 3, next_step: 7 },
            blocks: BTreeMap::from([(
                "a.w".to_string(),
                Tensor::from_vec(&[2], vec![std::f64::consts::PI, -0.0]).unwrap(),
            )]),
            optimizer: Some(opt),
            text_encoder: Some(TextEncoder::new(8, 1).unwrap()),
        }
    }

    #[test]
    fn captioner_round_trip() {
        let vocab = Vocabulary::template();
        let cfg = CaptionTrainConfig {
            hidden: 4,
            embed_dim: 3,
            cond_hidden: 5,
            ..Default::default()
        };
        let m = CaptionLm::new(vocab.len(), FEATURE_DIM, 4, 3, 5, &mut crate::rng::seeded(3));
        let c = Checkpoint::from_captioner(&m, &vocab, &cfg).unwrap();
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
        let (m2, v2) = back.captioner().unwrap();
        assert_eq!(m2, m);
        assert_eq!(v2, vocab);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.blocks["a.w"].data[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.optimizer.unwrap().v["a.w"][0], 1e-300);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = Checkpoint::from_bytes(b"NOTACKPTxxxxxxxxxxxxxxxx", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
