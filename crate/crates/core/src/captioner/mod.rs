//! Caption generation for synthetic volumes.
//!
//! Two paths produce text: a deterministic template synthesizer driven by a
//! volume's [`AttributeRecord`](crate::volumes::AttributeRecord), and a small
//! image-conditioned recurrent language model ([`CaptionLm`]) trained on the
//! template captions. Post-processing removes stop patterns, drops duplicates
//! and prefixes each caption with its dataset name.

mod lm;
mod train;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write as _};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{synth::LARGE_RADIUS_THRESHOLD, ContrastSign, Modality, StructureKind, Volume};

pub use lm::{lm_generate, lm_loss, slice_feature, CaptionLm, Decode, FEATURE_DIM};
pub use train::{
    caption_features, generate_captions, token_accuracy, train_captioner, CaptionTrainConfig, CaptionTrainReport,
};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;

const RESERVED: [&str; 3] = ["<bos>", "<eos>", "<unk>"];

const COUNT_WORDS: [&str; 13] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve",
];

/// Token alphabet with fixed reserved ids `<bos>`=0, `<eos>`=1, `<unk>`=2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocabulary::new(tokens).map_err(serde::de::Error::custom)
    }
}

impl Vocabulary {
    /// Build from an explicit token list, which must start with the reserved
    /// tokens and contain no duplicates.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::config(format!(
                "vocabulary must start with {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Closed vocabulary covering every template caption plus a few common
    /// report phrases.
    pub fn template() -> Self {
        let mut words: Vec<&str> = RESERVED.to_vec();
        words.extend([
            "synth-liver",
            "synth-hepaticvessel",
            "synth-spleen",
            "synth-braintumour",
            "synth-angio",
            "synth-heart",
            "synth-cremi",
            "ct",
            "mri",
            "em",
            "scan",
            "with",
            "no",
            "focal",
            "finding",
            "small",
            "large",
            "hyperdense",
            "hypodense",
            "hyperintense",
            "hypointense",
            "bright",
            "dark",
            "lesion",
            "lesions",
            "vessel",
            "vessels",
            "densely",
            "packed",
            "cell",
            "cells",
            "the",
            "image",
            "shows",
            "a",
            "of",
        ]);
        words.extend(COUNT_WORDS);
        Vocabulary::new(words.into_iter().map(String::from).collect()).expect("static vocabulary")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::Vocabulary {
                id,
                size: self.len(),
            })
    }

    /// Lowercase whitespace tokenization; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }

    /// Join content tokens with single spaces, skipping `<bos>`/`<eos>`.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == BOS || id == EOS {
                continue;
            }
            words.push(self.token(id)?);
        }
        Ok(words.join(" "))
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.len()) {
            Some(&id) => Err(Error::Vocabulary {
                id,
                size: self.len(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionSource {
    Template,
    Lm,
}

/// One caption line of the corpus. `token_ids` hold content tokens only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caption {
    pub volume_id: String,
    pub text: String,
    pub token_ids: Vec<u32>,
    pub source: CaptionSource,
    pub dataset_name: String,
}

impl Caption {
    pub fn new(
        volume_id: impl Into<String>,
        dataset_name: impl Into<String>,
        text: impl Into<String>,
        source: CaptionSource,
        vocab: &Vocabulary,
    ) -> Self {
        let text = text.into();
        Caption {
            volume_id: volume_id.into(),
            token_ids: vocab.encode(&text),
            text,
            source,
            dataset_name: dataset_name.into(),
        }
    }

    /// Language-model target: content tokens followed by `<eos>`.
    pub fn lm_target(&self) -> Vec<u32> {
        let mut t = self.token_ids.clone();
        t.push(EOS);
        t
    }
}

pub fn modality_word(m: Modality) -> &'static str {
    match m {
        Modality::CtLike => "ct",
        Modality::MriLike => "mri",
        Modality::EmLike => "em",
    }
}

pub fn contrast_word(m: Modality, sign: ContrastSign) -> &'static str {
    match (m, sign) {
        (Modality::CtLike, ContrastSign::Hyper) => "hyperdense",
        (Modality::CtLike, ContrastSign::Hypo) => "hypodense",
        (Modality::MriLike, ContrastSign::Hyper) => "hyperintense",
        (Modality::MriLike, ContrastSign::Hypo) => "hypointense",
        (Modality::EmLike, ContrastSign::Hyper) => "bright",
        (Modality::EmLike, ContrastSign::Hypo) => "dark",
    }
}

/// Number word for `n`; counts past twelve fall back to digits.
pub fn count_word(n: u32) -> String {
    COUNT_WORDS
        .get(n as usize)
        .map_or_else(|| n.to_string(), |w| w.to_string())
}

fn noun(count: u32, singular: &str, plural: &str) -> String {
    if count == 1 { singular } else { plural }.to_string()
}

/// Deterministic caption text from the volume's attributes alone.
pub fn template_text(v: &Volume) -> String {
    let a = &v.attributes;
    let head = format!("{} {} scan with", v.dataset_name, modality_word(v.modality));
    let count = count_word(a.count);
    let contrast = contrast_word(v.modality, a.contrast_sign);
    match a.structure_kind {
        StructureKind::None => format!("{head} no focal finding"),
        StructureKind::EllipsoidLesion => {
            let size = if a.mean_radius_voxels >= LARGE_RADIUS_THRESHOLD {
                "large"
            } else {
                "small"
            };
            let n = noun(a.count, "lesion", "lesions");
            format!("{head} {count} {size} {contrast} {n}")
        }
        StructureKind::TubularVessel => {
            let n = noun(a.count, "vessel", "vessels");
            format!("{head} {count} {contrast} {n}")
        }
        StructureKind::DenseCells => {
            let n = noun(a.count, "cell", "cells");
            format!("{head} {count} densely packed {n}")
        }
    }
}

pub fn template_caption(v: &Volume, vocab: &Vocabulary) -> Caption {
    Caption::new(
        &v.id,
        &v.dataset_name,
        template_text(v),
        CaptionSource::Template,
        vocab,
    )
}

/// Compiled stop patterns; errors name the offending pattern index.
pub fn compile_patterns<S: AsRef<str>>(patterns: &[S]) -> Result<Vec<Regex>> {
    patterns
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Regex::new(p.as_ref())
                .map_err(|e| Error::config(format!("stop pattern {i} `{}` is invalid: {e}", p.as_ref())))
        })
        .collect()
}

/// Parse a stop-pattern file body: one regex per line, blank lines skipped.
/// Errors name the 1-based line number.
pub fn parse_stop_patterns(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        Regex::new(line)
            .map_err(|e| Error::config(format!("stop pattern on line {} is invalid: {e}", i + 1)))?;
        out.push(line.to_string());
    }
    Ok(out)
}

fn strip_patterns(body: &str, patterns: &[Regex]) -> String {
    let mut cur = body.split_whitespace().collect::<Vec<_>>().join(" ");
    // Removing a span can splice together a new match, so iterate to a fixed point.
    loop {
        let mut next = cur.clone();
        for re in patterns {
            next = re.replace_all(&next, " ").into_owned();
        }
        let next = next.split_whitespace().collect::<Vec<_>>().join(" ");
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Caption body with the leading dataset name removed.
pub fn caption_body(c: &Caption) -> &str {
    let t = c.text.trim_start();
    match t.strip_prefix(c.dataset_name.as_str()) {
        Some(rest) if rest.is_empty() || rest.starts_with(char::is_whitespace) => rest.trim_start(),
        _ => t,
    }
}

/// Remove stop-pattern spans, normalize whitespace, drop exact duplicates
/// (first occurrence wins) and re-apply the dataset-name prefix.
///
/// Patterns apply to the caption body only; the dataset prefix is added
/// afterwards and never filtered.
pub fn filter_captions<S: AsRef<str>>(
    captions: &[Caption],
    stop_patterns: &[S],
    vocab: &Vocabulary,
) -> Result<Vec<Caption>> {
    let patterns = compile_patterns(stop_patterns)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in captions {
        let body = strip_patterns(caption_body(c), &patterns);
        if !seen.insert(body.clone()) {
            continue;
        }
        let text = if body.is_empty() {
            c.dataset_name.clone()
        } else {
            format!("{} {body}", c.dataset_name)
        };
        out.push(Caption {
            token_ids: vocab.encode(&text),
            text,
            ..c.clone()
        });
    }
    Ok(out)
}

/// Index-based pairing of a volume with its caption.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextPair {
    pub volume_index: usize,
    pub caption: Caption,
}

/// Pair every captioned volume with its first caption, in volume order.
///
/// Volumes without a caption (for example after deduplication) are skipped.
pub fn build_pairs(volumes: &[Volume], captions: &[Caption]) -> Result<Vec<ImageTextPair>> {
    let known: HashMap<&str, usize> = volumes
        .iter()
        .enumerate()
        .map(|(i, v)| (v.id.as_str(), i))
        .collect();
    let mut by_volume: BTreeMap<usize, &Caption> = BTreeMap::new();
    for c in captions {
        let &i = known
            .get(c.volume_id.as_str())
            .ok_or_else(|| Error::Linkage(c.volume_id.clone()))?;
        by_volume.entry(i).or_insert(c);
    }
    Ok(by_volume
        .into_iter()
        .map(|(i, c)| ImageTextPair {
            volume_index: i,
            caption: c.clone(),
        })
        .collect())
}

pub fn write_captions(path: &Path, captions: &[Caption]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for c in captions {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_captions(path: &Path) -> Result<Vec<Caption>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Caption = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(c);
    }
    Ok(out)
}
