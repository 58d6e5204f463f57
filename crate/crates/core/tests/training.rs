use synthvlp::captioner::{build_pairs, template_caption, ImageTextPair, Vocabulary};
use synthvlp::encoders::EncoderConfig;
use synthvlp::trainer::{
    ablate, finetune, pretrain, sweep, AblateConfig, Checkpoint, FinetuneConfig, TermMask, TrainConfig,
};
use synthvlp::volumes::{synth_dataset, Dims3, LabelVolume, Patch, SynthSpec, Volume};

fn corpus(n: usize) -> (Vec<Volume>, Vec<Option<LabelVolume>>, Vec<ImageTextPair>) {
    let (vols, labels) = synth_dataset(&SynthSpec {
        n_volumes: n,
        dims: Dims3::cube(16),
        seed: 9,
        ..SynthSpec::default()
    })
    .unwrap();
    let vocab = Vocabulary::template();
    let caps: Vec<_> = vols.iter().map(|v| template_caption(v, &vocab)).collect();
    let pairs = build_pairs(&vols, &caps).unwrap();
    (vols, labels.into_iter().map(Some).collect(), pairs)
}

fn encoder() -> EncoderConfig {
    EncoderConfig {
        channels: vec![4, 8],
        bias: true,
    }
}

fn train_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        checkpoint_interval: 5,
        patch_dims: Dims3::cube(16),
        encoder: encoder(),
        ..TrainConfig::default()
    }
}

fn ft_cfg() -> FinetuneConfig {
    FinetuneConfig {
        steps: 6,
        batch_size: 2,
        label_fraction: 0.5,
        patch_dims: Dims3::cube(16),
        encoder: encoder(),
        ..FinetuneConfig::default()
    }
}

#[test]
fn reruns_are_bit_identical() {
    let (vols, _, pairs) = corpus(16);
    let mut seen_a = Vec::new();
    let a = pretrain(&vols, &pairs, &train_cfg(12), None, None, |c| {
        seen_a.push(c.to_bytes());
        Ok(())
    })
    .unwrap();
    let mut seen_b = Vec::new();
    let b = pretrain(&vols, &pairs, &train_cfg(12), None, None, |c| {
        seen_b.push(c.to_bytes());
        Ok(())
    })
    .unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.curve, b.curve);
    assert_eq!(seen_a, seen_b);
    assert_eq!(seen_a.len(), 2);
}

#[test]
fn resume_equals_uninterrupted_training() {
    let (vols, _, pairs) = corpus(16);
    let cfg = train_cfg(10);
    let full = pretrain(&vols, &pairs, &cfg, None, None, |_| Ok(())).unwrap();
    let half = pretrain(&vols, &pairs, &cfg, None, Some(5), |_| Ok(())).unwrap();
    let disk = Checkpoint::from_bytes(&half.checkpoint.to_bytes(), std::path::Path::new("half")).unwrap();
    let rest = pretrain(&vols, &pairs, &cfg, Some(&disk), None, |_| Ok(())).unwrap();
    assert_eq!(rest.checkpoint.to_bytes(), full.checkpoint.to_bytes());
    let joined: Vec<_> = half.curve.iter().chain(&rest.curve).cloned().collect();
    assert_eq!(joined, full.curve);
}

#[test]
fn resume_rejects_a_different_config() {
    let (vols, _, pairs) = corpus(16);
    let half = pretrain(&vols, &pairs, &train_cfg(10), None, Some(5), |_| Ok(())).unwrap();
    let other = TrainConfig {
        lr: 2e-3,
        ..train_cfg(10)
    };
    let err = pretrain(&vols, &pairs, &other, Some(&half.checkpoint), None, |_| Ok(())).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn text_encoder_is_frozen() {
    let (vols, _, pairs) = corpus(16);
    let cfg = train_cfg(6);
    let before = synthvlp::trainer::PretrainModel::new(&cfg).unwrap().text.to_bytes();
    let out = pretrain(&vols, &pairs, &cfg, None, None, |_| Ok(())).unwrap();
    assert_eq!(out.model.text.to_bytes(), before);
    assert_eq!(out.checkpoint.text_encoder.as_ref().unwrap().to_bytes(), before);
}

#[test]
fn zero_input_gives_finite_bias_path_output() {
    let (vols, _, pairs) = corpus(16);
    let out = pretrain(&vols, &pairs, &train_cfg(4), None, None, |_| Ok(())).unwrap();
    let zero = Patch {
        source_id: "zero".into(),
        origin: [0; 3],
        dims: Dims3::cube(16),
        voxels: vec![0.0; 16 * 16 * 16],
    };
    let e = out.model.encoder.encode(&zero).unwrap();
    assert!(e.iter().all(|x| x.is_finite()));
    let again = out.model.encoder.encode(&zero).unwrap();
    assert_eq!(e, again);
}

#[test]
fn invalid_term_sets_are_rejected() {
    let (vols, _, pairs) = corpus(16);
    for terms in [
        TermMask { cap: false, vlp: false, vr: false },
        TermMask { cap: true, vlp: false, vr: true },
    ] {
        let cfg = TrainConfig { terms, ..train_cfg(2) };
        let err = pretrain(&vols, &pairs, &cfg, None, None, |_| Ok(())).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}

#[test]
fn finetune_is_reproducible_and_reports_heldout_metrics() {
    let (vols, labels, pairs) = corpus(20);
    let pre = pretrain(&vols, &pairs, &train_cfg(4), None, None, |_| Ok(())).unwrap();
    let a = finetune(&vols, &labels, &ft_cfg(), Some(&pre.checkpoint)).unwrap();
    let b = finetune(&vols, &labels, &ft_cfg(), Some(&pre.checkpoint)).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.heldout_volumes, 4);
    assert_eq!(a.report.train_volumes, 8);
    assert!((0.0..=1.0).contains(&a.report.dice));
    let r = finetune(&vols, &labels, &ft_cfg(), None).unwrap();
    assert_eq!(r.report.heldout_ids, a.report.heldout_ids);
}

#[test]
fn sweep_needs_matching_checkpoints() {
    let (vols, labels, pairs) = corpus(20);
    let mut ckpts = Vec::new();
    let out = pretrain(&vols, &pairs, &train_cfg(10), None, None, |c| {
        ckpts.push(c.clone());
        Ok(())
    })
    .unwrap();
    ckpts.push(out.checkpoint);
    let rows = sweep(&vols, &labels, &ckpts, &ft_cfg(), &[0, 1]).unwrap();
    assert!(rows.iter().any(|r| r.iteration == 5 && r.metric == "dice" && r.n_seeds == 2));
    assert!(rows.iter().any(|r| r.iteration == 10 && r.metric == "dice"));

    let other = pretrain(&vols, &pairs, &TrainConfig { seed: 1, ..train_cfg(5) }, None, None, |_| Ok(())).unwrap();
    let err = sweep(&vols, &labels, &[ckpts[0].clone(), other.checkpoint], &ft_cfg(), &[0]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(sweep(&vols, &labels, &ckpts[..1], &ft_cfg(), &[0]).is_err());
}

#[test]
fn ablation_rows_cover_four_combinations() {
    let (vols, labels, pairs) = corpus(16);
    let cfg = AblateConfig {
        train: train_cfg(6),
        finetune: None,
        window: 2,
    };
    let rows = ablate(&vols, &pairs, None, &cfg).unwrap();
    assert_eq!(rows.len(), 4 * 3);
    let combos: std::collections::BTreeSet<_> = rows.iter().map(|r| r.combination.as_str()).collect();
    assert_eq!(combos.len(), 4);
    let with_ft = AblateConfig {
        finetune: Some(ft_cfg()),
        ..cfg
    };
    assert_eq!(ablate(&vols, &pairs, Some(&labels), &with_ft).unwrap().len(), 4 * 4);
}
