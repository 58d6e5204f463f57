//! Command-line front end. Every artifact-producing command writes its
//! outputs plus one `manifest.json` into `--out`.

pub mod config;
pub mod embed;
pub mod manifest;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::captioner::{
    build_pairs, caption_body, filter_captions, generate_captions, parse_stop_patterns, read_captions,
    template_caption, train_captioner, write_captions, Caption, CaptionTrainConfig, ImageTextPair,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, instances_from_argmax, EvalOptions, LogBase};
use crate::trainer::{
    ablate, config_hash, eval_patch, finetune, gradcheck, pretrain, sweep, AblateConfig, Checkpoint,
    FinetuneConfig, Suite, TrainConfig,
};
use crate::volumes::{
    crop_labels, read_dataset, synth_dataset, write_dataset, Dims3, LabelKind, LabelVolume, Modality,
    SynthSpec, Volume,
};

use self::config::resolve;
use self::embed::{embed_volumes, pca_2d, projection_svg};
use self::manifest::OutputDir;

#[derive(Debug, Parser)]
#[command(name = "synthvlp", version, about = "Synthetic 3D volumes, captions, pretraining and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Caption a dataset with templates or a trained captioner.
    Caption(CaptionArgs),
    /// Train the image-conditioned caption model.
    TrainCaptioner(TrainCaptionerArgs),
    /// Image-text pretraining of the image encoder.
    Pretrain(PretrainArgs),
    /// Finetune an encoder plus segmentation decoder and evaluate.
    Finetune(FinetuneArgs),
    /// Compare predicted label datasets against ground truth.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Finetune from several checkpoints of one pretraining run.
    Sweep(SweepArgs),
    /// Pretrain every objective combination and compare convergence.
    Ablate(AblateArgs),
    /// Export image embeddings and a 2D principal-component plot.
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the results of an earlier run in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of volumes.
    #[arg(long)]
    pub n: Option<usize>,
    /// Volume extent: `N` for a cube or `ZxYxX`.
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<Dims3>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CaptionMode {
    Template,
    Lm,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = CaptionMode::Template)]
    pub mode: CaptionMode,
    /// Captioner checkpoint (required in `lm` mode).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Stop-pattern file: one regex per line.
    #[arg(long)]
    pub filters: Option<PathBuf>,
    /// Longest generated caption in `lm` mode, in tokens.
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainCaptionerArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Caption corpus (JSON lines); template captions when omitted.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a checkpoint of the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps (resumable).
    #[arg(long)]
    pub stop_at: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Pretraining checkpoint; random encoder initialization when omitted.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated run seeds (default: the config seed).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub label_fraction: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Dataset whose labels are predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset with ground-truth labels; volumes are matched by id.
    #[arg(long)]
    pub gt: PathBuf,
    /// Report entropies in bits instead of nats.
    #[arg(long)]
    pub bits: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Output directory for `gradcheck.csv`; print only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Comma-separated suites: objectives, captioner, encoders, all.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub suite: Vec<Suite>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoints of one pretraining run.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Finetuning config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also finetune every combination and report Dice.
    #[arg(long)]
    pub with_finetune: bool,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
}

fn parse_dims(s: &str) -> std::result::Result<Dims3, String> {
    let parts: Vec<&str> = s.split('x').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match nums.as_slice() {
        [n] => Ok(Dims3::cube(*n)),
        [z, y, x] => Ok(Dims3::new(*z, *y, *x)),
        _ => Err("expected N or ZxYxX".into()),
    }
}

fn overrides<'a>(items: Vec<(&'a str, Option<Value>)>) -> Vec<(&'a str, Value)> {
    items.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect()
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn csv_file(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Run one command; `Ok` carries a non-error exit code (3 for a failed
/// gradient check).
pub fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Caption(a) => cmd_caption(a),
        Command::TrainCaptioner(a) => cmd_train_captioner(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Embed(a) => cmd_embed(a),
    }
    .map(|_| 0)
    .or_else(|e| match e {
        Error::Numeric { ref name, .. } if name == GRADCHECK_FAILED => {
            eprintln!("{e}");
            Ok(3)
        }
        e => Err(e),
    })
}

const GRADCHECK_FAILED: &str = "gradcheck";

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec: SynthSpec = resolve(
        &SynthSpec::default(),
        None,
        a.config.as_deref(),
        overrides(vec![
            ("n_volumes", a.n.map(Into::into)),
            ("dims", a.dims.map(|d| json!(d))),
            ("seed", a.seed.map(Into::into)),
        ]),
    )?;
    spec.validate()?;
    let mut out = OutputDir::open(&a.out.out, a.out.force)?;
    let (vols, labels) = synth_dataset(&spec)?;
    write_dataset(&out.path, &vols, Some(&labels))?;
    out.file("index.json");
    let m = out.finish(
        "synth",
        serde_json::to_value(&spec)?,
        config_hash(&spec)?,
        vec![spec.seed],
        vec![],
    )?;
    println!("wrote {} volumes to {} (content {})", vols.len(), display(&a.out.out), m.content_hash);
    Ok(())
}

fn with_dataset_prefix(c: Caption, vocab: &Vocabulary) -> Caption {
    let body = caption_body(&c).to_string();
    let text = if body.is_empty() {
        c.dataset_name.clone()
    } else {
        format!("{} {body}", c.dataset_name)
    };
    Caption {
        token_ids: vocab.encode(&text),
        text,
        ..c
    }
}

fn cmd_caption(a: CaptionArgs) -> Result<()> {
    let (vols, _) = read_dataset(&a.dataset)?;
    let patterns = match &a.filters {
        Some(p) => Some(parse_stop_patterns(
            &std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        )?),
        None => None,
    };
    let (captions, vocab) = match a.mode {
        CaptionMode::Template => {
            let vocab = Vocabulary::template();
            (vols.iter().map(|v| template_caption(v, &vocab)).collect::<Vec<_>>(), vocab)
        }
        CaptionMode::Lm => {
            let path = a
                .model
                .as_ref()
                .ok_or_else(|| Error::config("lm caption mode needs --model <captioner checkpoint>"))?;
            let (model, vocab) = Checkpoint::load(path)?.captioner()?;
            let caps = generate_captions(&model, &vols, &vocab, a.max_len, a.seed)?;
            (caps.into_iter().map(|c| with_dataset_prefix(c, &vocab)).collect(), vocab)
        }
    };
    let before = captions.len();
    let captions = match &patterns {
        Some(p) => {
            let kept = filter_captions(&captions, p, &vocab)?;
            eprintln!("filters dropped {} duplicate captions", before - kept.len());
            kept
        }
        None => captions,
    };
    let mut out = OutputDir::open(&a.out.out, a.out.force)?;
    write_captions(&out.file("captions.jsonl"), &captions)?;
    let mut inputs = vec![display(&a.dataset)];
    inputs.extend(a.model.as_deref().map(display));
    inputs.extend(a.filters.as_deref().map(display));
    let config = json!({
        "mode": format!("{:?}", a.mode).to_lowercase(),
        "stop_patterns": patterns,
        "max_len": a.max_len,
        "seed": a.seed,
    });
    let hash = config_hash(&config)?;
    out.finish("caption", config, hash, vec![a.seed], inputs)?;
    println!("wrote {} captions ({} volumes)", captions.len(), vols.len());
    Ok(())
}

fn cmd_train_captioner(a: TrainCaptionerArgs) -> Result<()> {
    let cfg: CaptionTrainConfig = resolve(
        &CaptionTrainConfig::default(),
        None,
        a.config.as_deref(),
        overrides(vec![("steps", a.steps.map(Into::into)), ("seed", a.seed.map(Into::into))]),
    )?;
    cfg.validate()?;
    let (vols, _) = read_dataset(&a.dataset)?;
    let mut out = OutputDir::open(&a.out.out, a.out.force)?;
    let vocab = Vocabulary::template();
    let (model, report) = train_captioner(&vols, &vocab, &cfg)?;
    Checkpoint::from_captioner(&model, &vocab, &cfg)?.save(&out.file("captioner.ckpt"))?;
    let rows = report.loss_curve.iter().enumerate().map(|(i, l)| format!("{i},{l:e}"));
    out.write("loss.csv", csv_file("step,loss", rows).as_bytes())?;
    out.write("report.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    out.finish(
        "train-captioner",
        serde_json::to_value(&cfg)?,
        config_hash(&cfg)?,
        vec![cfg.seed],
        vec![display(&a.dataset)],
    )?;
    println!(
        "held-out greedy token accuracy {:.4} ({} the {:.2} gate)",
        report.heldout_accuracy,
        if report.passed_gate { "meets" } else { "misses" },
        cfg.accuracy_gate
    );
    Ok(())
}

fn load_pairs(vols: &[Volume], captions: Option<&Path>) -> Result<Vec<ImageTextPair>> {
    let caps = match captions {
        Some(p) => read_captions(p)?,
        None => {
            let vocab = Vocabulary::template();
            vols.iter().map(|v| template_caption(v, &vocab)).collect()
        }
    };
    build_pairs(vols, &caps)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let cfg: TrainConfig = resolve(
        &TrainConfig::default(),
        None,
        a.config.as_deref(),
        overrides(vec![
            ("steps", a.steps.map(Into::into)),
            ("seed", a.seed.map(Into::into)),
            ("batch_size", a.batch_size.map(Into::into)),
            ("lr", a.lr.map(Into::into)),
        ]),
    )?;
    let flagged = a.config.is_some()
        || a.steps.is_some()
        || a.seed.is_some()
        || a.batch_size.is_some()
        || a.lr.is_some();
    let cfg = match &resume {
        Some(c) if !flagged => serde_json::from_value(c.config.clone())
            .map_err(|e| Error::config(format!("checkpoint config: {e}")))?,
        _ => cfg,
    };
    cfg.validate()?;
    let (vols, _) = read_dataset(&a.dataset)?;
    let pairs = load_pairs(&vols, a.captions.as_deref())?;
    let mut out = OutputDir::open(&a.out.out, a.out.force || resume.is_some())?;
    let ckpt_dir = out.path.join("checkpoints");
    let mut saved = Vec::new();
    let outcome = pretrain(&vols, &pairs, &cfg, resume.as_ref(), a.stop_at, |c| {
        let p = ckpt_dir.join(format!("step_{}.ckpt", c.iteration));
        saved.push(p.clone());
        c.save(&p)
    })?;
    out.file("checkpoints");
    outcome.checkpoint.save(&out.file("final.ckpt"))?;
    outcome.save_curve(&out.file("loss.csv"), resume.is_some())?;
    let mut inputs = vec![display(&a.dataset)];
    inputs.extend(a.captions.as_deref().map(display));
    inputs.extend(a.resume.as_deref().map(display));
    out.finish(
        "pretrain",
        serde_json::to_value(&cfg)?,
        cfg.hash()?,
        vec![cfg.seed],
        inputs,
    )?;
    if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
        println!(
            "steps {}..{}: loss {:.4} -> {:.4}; {} periodic checkpoints",
            first.step,
            last.step + 1,
            first.total,
            last.total,
            saved.len()
        );
    }
    Ok(())
}

/// Evaluated patch as a volume plus the prediction and matching ground truth.
fn prediction_volumes(
    out: &crate::trainer::FinetuneOutcome,
    vols: &[Volume],
    labels: &[Option<LabelVolume>],
    patch_dims: Dims3,
) -> Result<(Vec<Volume>, Vec<LabelVolume>, Vec<LabelVolume>)> {
    let mut pv = Vec::new();
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for id in &out.report.heldout_ids {
        let i = vols
            .iter()
            .position(|v| &v.id == id)
            .ok_or_else(|| Error::Linkage(id.clone()))?;
        let v = &vols[i];
        let raw = labels[i].as_ref().ok_or_else(|| Error::Linkage(id.clone()))?;
        let p = eval_patch(v, patch_dims)?;
        let semantic = out.model.predict(&p)?;
        let (pl, gl) = if v.modality == Modality::EmLike && raw.kind == LabelKind::Instance {
            (instances_from_argmax(&semantic), crop_labels(raw, p.origin, p.dims))
        } else {
            let target = raw.segmentation_target(v.modality);
            let mut s = semantic;
            s.classes = target.classes.clone();
            (s, crop_labels(&target, p.origin, p.dims))
        };
        pv.push(Volume::new(
            v.id.clone(),
            p.dims,
            v.spacing,
            v.modality,
            v.dataset_name.clone(),
            p.voxels,
            v.attributes.clone(),
        )?);
        pred.push(pl);
        gt.push(gl);
    }
    Ok((pv, pred, gt))
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let init = a.init.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg: FinetuneConfig = resolve(
        &FinetuneConfig::default(),
        None,
        a.config.as_deref(),
        overrides(vec![
            ("label_fraction", a.label_fraction.map(Into::into)),
            ("steps", a.steps.map(Into::into)),
        ]),
    )?;
    if let Some(c) = &init {
        if let Some(enc) = c.config.get("encoder") {
            cfg.encoder = serde_json::from_value(enc.clone())?;
        }
    }
    cfg.validate()?;
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
    let (vols, labels) = read_dataset(&a.dataset)?;
    let mut out = OutputDir::open(&a.out.out, a.out.force)?;
    let mut rows = Vec::new();
    for &s in &seeds {
        let run = FinetuneConfig { seed: s, ..cfg.clone() };
        let o = finetune(&vols, &labels, &run, init.as_ref())?;
        o.checkpoint.save(&out.file(&format!("checkpoints/seed_{s}.ckpt")))?;
        let (pv, pred, gt) = prediction_volumes(&o, &vols, &labels, run.patch_dims)?;
        let dir = out.file(&format!("predictions/seed_{s}"));
        write_dataset(&dir.join("pred"), &pv, Some(&pred))?;
        write_dataset(&dir.join("gt"), &pv, Some(&gt))?;
        println!(
            "seed {s}: held-out dice {:.4} ({} train, {} held out)",
            o.report.dice, o.report.train_volumes, o.report.heldout_volumes
        );
        rows.extend(o.report.csv_rows());
    }
    let body = csv_file(
        "run_seed,metric,value",
        rows.iter().map(|(s, m, v)| format!("{s},{m},{v:e}")),
    );
    out.write("eval.csv", body.as_bytes())?;
    let mut config = serde_json::to_value(&cfg)?;
    if let Some(c) = &init {
        config["pretrain_config_hash"] = c.config_hash.clone().into();
    }
    let hash = config_hash(&config)?;
    let mut inputs = vec![display(&a.dataset)];
    inputs.extend(a.init.as_deref().map(display));
    out.finish("finetune", config, hash, seeds, inputs)?;
    Ok(())
}

/// Mean of every `(metric, class_or_side)` over matched volumes. Instance
/// ground truth additionally gets foreground Dice.
pub fn evaluate_datasets(
    pred: &[(Volume, Option<LabelVolume>)],
    gt: &[(Volume, Option<LabelVolume>)],
    opts: &EvalOptions,
) -> Result<Vec<(String, String, f64)>> {
    let mut sums: std::collections::BTreeMap<(String, String), (f64, usize)> = Default::default();
    let mut matched = 0;
    for (gv, gl) in gt {
        let Some(gl) = gl else { continue };
        let Some((_, pl)) = pred.iter().find(|(pv, _)| pv.id == gv.id) else {
            continue;
        };
        let pl = pl
            .as_ref()
            .ok_or_else(|| Error::config(format!("prediction for `{}` has no labels", gv.id)))?;
        matched += 1;
        let mut rows = evaluate(pl, gl, opts)?.csv_rows();
        if gl.kind == LabelKind::Instance {
            rows.extend(evaluate(&pl.to_binary_semantic(), &gl.to_binary_semantic(), opts)?.csv_rows());
        }
        for (m, c, v) in rows {
            let e = sums.entry((m, c)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    if matched == 0 {
        return Err(Error::config("no labeled ground-truth volume has a matching prediction"));
    }
    Ok(sums
        .into_iter()
        .map(|((m, c), (s, n))| (m, c, s / n as f64))
        .collect())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (pv, pl) = read_dataset(&a.pred)?;
    let (gv, gl) = read_dataset(&a.gt)?;
    let opts = EvalOptions {
        log_base: if a.bits { LogBase::Bits } else { LogBase::Nats },
        ..EvalOptions::default()
    };
    let pred: Vec<_> = pv.into_iter().zip(pl).collect();
    let gt: Vec<_> = gv.into_iter().zip(gl).collect();
    let rows = evaluate_datasets(&pred, &gt, &opts)?;
    let mut out = OutputDir::open(&a.out.out, a.out.force)?;
    let body = csv_file(
        "metric,class_or_side,value",
        rows.iter().map(|(m, c, v)| format!("{m},{c},{v:e}")),
    );
    out.write("eval.csv", body.as_bytes())?;
    print!("{body}");
    let config = serde_json::to_value(opts)?;
    let hash = config_hash(&config)?;
    out.finish("eval", config, hash, vec![], vec![display(&a.pred), display(&a.gt)])?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let out = a.out.as_deref().map(|p| OutputDir::open(p, a.force)).transpose()?;
    let report = gradcheck(&a.suite, a.seed)?;
    let csv = report.to_csv();
    print!("{csv}");
    println!(
        "{} instances, {}",
        report.total_instances(),
        if report.passed() { "all passed" } else { "FAILED" }
    );
    if let Some(mut out) = out {
        out.write("gradcheck.csv", csv.as_bytes())?;
        let config = json!({ "suites": a.suite, "seed": a.seed });
        let hash = config_hash(&config)?;
        out.finish("gradcheck", config, hash, vec![a.seed], vec![])?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| e.operation.as_str())
            .collect();
        Err(Error::Numeric {
            name: GRADCHECK_FAILED.into(),
            message: format!("failed operations: {}", failed.join(", ")),
        })
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let ckpts = a
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg: FinetuneConfig = resolve(&FinetuneConfig::default(), None, a.config.as_deref(), vec![])?;
    if let Some(enc) = ckpts.first().and_then(|c| c.config.get("encoder")) {
        cfg.encoder = serde_json::from_value(enc.clone())?;
    }
    cfg.validate()?;
    let (vols, labels) = read_dataset(&a.dataset)?;
    let mut out = OutputDir::open(&a.out.out, a.out.force)?;
    let rows = sweep(&vols, &labels, &ckpts, &cfg, &a.seeds)?;
    let body = csv_file(
        "iteration,metric,mean,std,n_seeds",
        rows.iter()
            .map(|r| format!("{},{},{:e},{:e},{}", r.iteration, r.metric, r.mean, r.std, r.n_seeds)),
    );
    out.write("sweep.csv", body.as_bytes())?;
    print!("{body}");
    let mut inputs = vec![display(&a.dataset)];
    inputs.extend(a.checkpoints.iter().map(|p| display(p)));
    out.finish(
        "sweep",
        serde_json::to_value(&cfg)?,
        config_hash(&cfg)?,
        a.seeds.clone(),
        inputs,
    )?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let reference = serde_json::to_value(AblateConfig {
        finetune: Some(FinetuneConfig::default()),
        ..AblateConfig::default()
    })?;
    let mut cfg: AblateConfig = resolve(
        &AblateConfig::default(),
        Some(reference),
        a.config.as_deref(),
        overrides(vec![
            ("train.steps", a.steps.map(Into::into)),
            ("train.seed", a.seed.map(Into::into)),
        ]),
    )?;
    if a.with_finetune && cfg.finetune.is_none() {
        cfg.finetune = Some(FinetuneConfig::default());
    }
    if let Some(ft) = &mut cfg.finetune {
        ft.encoder = cfg.train.encoder.clone();
        ft.validate()?;
    }
    let (vols, labels) = read_dataset(&a.dataset)?;
    let pairs = load_pairs(&vols, a.captions.as_deref())?;
    let mut out = OutputDir::open(&a.out.out, a.out.force)?;
    let rows = ablate(&vols, &pairs, cfg.finetune.as_ref().map(|_| labels.as_slice()), &cfg)?;
    let body = csv_file(
        "combination,cap,vlp,vr,metric,value",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{:e}",
                r.combination, r.cap, r.vlp, r.vr, r.metric, r.value
            )
        }),
    );
    out.write("ablation.csv", body.as_bytes())?;
    print!("{body}");
    let mut inputs = vec![display(&a.dataset)];
    inputs.extend(a.captions.as_deref().map(display));
    out.finish(
        "ablate",
        serde_json::to_value(&cfg)?,
        config_hash(&cfg)?,
        vec![cfg.train.seed],
        inputs,
    )?;
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (vols, _) = read_dataset(&a.dataset)?;
    let rows = embed_volumes(&ckpt, &vols)?;
    let emb: Vec<Vec<f64>> = rows.iter().map(|r| r.embedding.clone()).collect();
    let proj = pca_2d(&emb)?;
    let mut out = OutputDir::open(&a.out.out, a.out.force)?;
    let d = emb[0].len();
    let mut header = String::from("volume_id,modality");
    for j in 0..d {
        let _ = write!(header, ",e{j}");
    }
    header.push_str(",pc1,pc2");
    let body = csv_file(
        &header,
        rows.iter().zip(&proj.points).map(|(r, p)| {
            let mut line = format!("{},{}", r.volume_id, r.modality.as_str());
            for x in &r.embedding {
                let _ = write!(line, ",{x:e}");
            }
            let _ = write!(line, ",{:e},{:e}", p[0], p[1]);
            line
        }),
    );
    out.write("embeddings.csv", body.as_bytes())?;
    let modalities: Vec<Modality> = rows.iter().map(|r| r.modality).collect();
    out.write(
        "projection.svg",
        projection_svg(&proj.points, &modalities, proj.variances).as_bytes(),
    )?;
    let config = json!({ "checkpoint_config_hash": ckpt.config_hash });
    let hash = config_hash(&config)?;
    out.finish(
        "embed",
        config,
        hash,
        vec![ckpt.rng.seed],
        vec![display(&a.checkpoint), display(&a.dataset)],
    )?;
    println!(
        "{} embeddings of width {d}; component variances {:.4e} >= {:.4e}",
        rows.len(),
        proj.variances[0],
        proj.variances[1]
    );
    Ok(())
}
