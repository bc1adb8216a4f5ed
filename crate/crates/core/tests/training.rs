use conceptdet::checkpoint::{self, checkpoint_meta, tensor_hash};
use conceptdet::config::ModelConfig;
use conceptdet::model::{Detector, PromptedScene};
use conceptdet::pipeline::{pretrain, split_vocabulary, train_visual_prompt};
use conceptdet::tensor::{ParamSet, Session};
use conceptdet::train::{is_trainable, pick_example_boxes, Regime, TrainConfig, Trainer};
use conceptdet::world::BenchmarkSplit;
use conceptdet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn split() -> BenchmarkSplit {
    BenchmarkSplit::overfit(8, 1000).unwrap()
}

fn dictionary(split: &BenchmarkSplit) -> Vec<String> {
    split.categories.iter().map(|&c| split.phrases[c].clone()).collect()
}

fn short(regime: Regime, steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_size: 2, ..TrainConfig::for_regime(regime) }
}

#[test]
fn lr_schedule() {
    let c = TrainConfig::for_regime(Regime::Pretrain);
    assert_eq!((c.lr_factor(0), c.lr_factor(1599)), (1.0, 1.0));
    assert!((c.lr_factor(1600) - 0.1).abs() < 1e-15);
    assert!((c.lr_factor(1800) - 0.01).abs() < 1e-15);
    let t = TrainConfig::for_regime(Regime::TunePrompt);
    assert_eq!(t.lr["default"], 5e-2);
    assert!((t.lr_factor(240) - 0.1).abs() < 1e-15);
    assert!((t.lr_factor(299) - 0.1).abs() < 1e-15);
    let mut grouped = c.clone();
    grouped.lr.insert("decoder".into(), 2e-3);
    grouped.lr.insert("decoder.layer0".into(), 3e-3);
    assert_eq!(grouped.base_lr("decoder.layer0.ffn.w"), 3e-3);
    assert_eq!(grouped.base_lr("decoder.score.bias"), 2e-3);
    assert_eq!(grouped.base_lr("backbone.stem.w"), 1e-3);
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    ok.validate().unwrap();
    for bad in [
        TrainConfig { milestones: vec![0.9, 0.8], ..ok.clone() },
        TrainConfig { milestones: vec![0.0, 0.5], ..ok.clone() },
        TrainConfig { steps: 0, ..ok.clone() },
        TrainConfig { lr: [("default".to_string(), 0.0)].into(), ..ok.clone() },
        TrainConfig { lr: [("backbone".to_string(), 1e-3)].into(), ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    let text = serde_json::to_string(&ok).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), ok);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stpes": 3}"#).is_err());
}

#[test]
fn regimes_freeze_structurally() {
    let obj = TrainConfig::default().objective();
    assert!(is_trainable(Regime::Pretrain, "backbone.stem.w", obj));
    assert!(!is_trainable(Regime::Pretrain, "visual.query.w", obj));
    assert!(is_trainable(Regime::VisualPrompt, "visual.query.w", obj));
    assert!(!is_trainable(Regime::VisualPrompt, "decoder.score.bias", obj));
    assert!(is_trainable(Regime::TunePrompt, "optimized.embed", obj));
    assert!(!is_trainable(Regime::TunePrompt, "text.embed", obj));

    // frozen tensors enter the graph as constants and receive no gradient
    let sp = split();
    let det = Detector::new(&ModelConfig::default(), split_vocabulary(&sp), 0).unwrap();
    let set = ParamSet::matching(&det.store, |n| is_trainable(Regime::VisualPrompt, n, obj));
    let mut s = Session::new(&det.store, &set);
    let scene = &sp.scenes[0];
    let prompted = PromptedScene::new(scene, &sp.phrases, &scene.present_classes()).unwrap();
    let (boxes, classes) = pick_example_boxes(scene, &mut ChaCha8Rng::seed_from_u64(0));
    let (loss, _, _) = det.model.visual_prompt_objective(&mut s, &det.vocab, &prompted, &boxes, &classes, None).unwrap();
    let grads = s.backward(loss).unwrap();
    assert!(grads.materialized() > 0);
    assert!(grads.iter().all(|(id, _)| det.store.name(id).starts_with("visual.")));
}

#[test]
fn repeated_steps_on_one_batch_reduce_loss() {
    let sp = split();
    let det = Detector::new(&ModelConfig::default(), split_vocabulary(&sp), 0).unwrap();
    let mut cfg = TrainConfig { negatives: 0, ..short(Regime::Pretrain, 100) };
    cfg.lr.insert("default".into(), 2e-4);
    let mut t = Trainer::new(det, cfg).unwrap();
    let batch = [&sp.scenes[0], &sp.scenes[1]];
    let dict = dictionary(&sp);
    let losses: Vec<f64> = (0..10).map(|_| t.pretrain_step(&batch, &sp.phrases, &dict).unwrap().total).collect();
    let rises = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rises <= 2, "{losses:?}");
    assert!(losses[9] < losses[0]);
}

#[test]
fn step_zero_losses_are_finite() {
    let sp = split();
    let det = Detector::new(&ModelConfig::default(), split_vocabulary(&sp), 1).unwrap();
    let mut t = Trainer::new(det, short(Regime::Pretrain, 10)).unwrap();
    let r = t.pretrain_step(&[&sp.scenes[2], &sp.scenes[3]], &sp.phrases, &dictionary(&sp)).unwrap();
    for v in [r.total, r.decoder, r.aux, r.prompt, r.decoder_parts.class, r.decoder_parts.l1, r.decoder_parts.giou, r.aux_parts.class, r.aux_parts.centerness, r.aux_parts.giou] {
        assert!(v.is_finite() && v >= 0.0);
    }
    assert!(r.aux_parts.positives > 0);
    assert!(!t.bank.is_empty());
    assert!(matches!(t.pretrain_step(&[], &sp.phrases, &[]), Err(Error::Input(_))));
}

#[test]
fn visual_prompt_training_keeps_base_bytes() {
    let sp = split();
    let (base, _) = pretrain(&short(Regime::Pretrain, 3), &sp, |_, _| {}).unwrap();
    let keep = |n: &str| !n.starts_with("visual.");
    let before = tensor_hash(&base.store, keep);
    let (det, run) = train_visual_prompt(base, &short(Regime::VisualPrompt, 3), &sp, |_, _| {}).unwrap();
    assert!(run.frozen_unchanged());
    assert_eq!(before, tensor_hash(&det.store, keep));
    assert!(run.first.mse > 0.0);
    assert!(matches!(checkpoint::load("/nonexistent/base.ckpt"), Err(Error::State(_))));
    assert!(matches!(Trainer::new(det.clone(), short(Regime::TunePrompt, 3)), Err(Error::State(_))));
    assert!(matches!(Trainer::new(det.without_training_heads().unwrap(), short(Regime::Pretrain, 3)), Err(Error::State(_))));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let sp = split();
    let mut det = Detector::new(&ModelConfig::compact(), split_vocabulary(&sp), 4).unwrap();
    det.attach_optimized(&[0, 4], 3, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let meta = checkpoint_meta(&det, 17, vec!["text.embed".into()], Some(TrainConfig::default()));
    checkpoint::save(&det, &meta, &a).unwrap();
    let (loaded, m2) = checkpoint::load(&a).unwrap();
    assert_eq!(m2, meta);
    checkpoint::save(&loaded, &m2, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.model.optimized.unwrap().map, det.model.optimized.unwrap().map);
}

#[test]
fn seeded_runs_give_identical_checkpoints() {
    let sp = split();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for i in 0..2 {
        let cfg = short(Regime::Pretrain, 4);
        let (det, run) = pretrain(&cfg, &sp, |_, _| {}).unwrap();
        let path = dir.path().join(format!("{i}.ckpt"));
        checkpoint::save(&det, &checkpoint_meta(&det, run.steps as u64, run.frozen, Some(cfg)), &path).unwrap();
        bytes.push(std::fs::read(path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn tuning_touches_only_prompt_rows() {
    let sp = split();
    let (base, _) = pretrain(&short(Regime::Pretrain, 2), &sp, |_, _| {}).unwrap();
    let shifted = sp.label_shifted();
    let cfg = TrainConfig { super_class: 2, ..short(Regime::TunePrompt, 3) };
    let (tuned, report) = conceptdet::pipeline::tune_prompts(&base, &cfg, &shifted, |_, _| {}).unwrap();
    assert!(report.run.frozen_unchanged());
    assert_eq!(tuned.model.optimized.as_ref().unwrap().map.rows(), 2 * report.classes.len());
    for (_, name, t) in tuned.store.iter() {
        match base.store.id(name) {
            Some(id) => assert_eq!(base.store.get(id), t, "{name}"),
            None => assert!(name.starts_with("optimized."), "{name}"),
        }
    }
}

#[test]
fn prompt_objectives_match_finite_differences() {
    use conceptdet::gradcheck::{check_objective, Target, DEFAULT_STEP};
    for target in [Target::VisualPrompt, Target::TunePrompt] {
        let r = check_objective(target, &ModelConfig::compact(), 0, DEFAULT_STEP).unwrap();
        assert!(r.coordinates > 0);
        assert!(r.max_rel_error <= 1e-5, "{target:?}: {r:?}");
    }
}

#[test]
fn jsonl_and_split_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sp = split();
    conceptdet::io::save_split(&sp, dir.path()).unwrap();
    let back = conceptdet::io::load_split(dir.path()).unwrap();
    assert_eq!((&back.name, &back.categories, &back.phrases, &back.held_out), (&sp.name, &sp.categories, &sp.phrases, &sp.held_out));
    assert_eq!(back.scenes.len(), sp.scenes.len());
    for (a, b) in back.scenes.iter().zip(&sp.scenes) {
        assert_eq!((&a.objects, &a.boxes, &a.class_ids), (&b.objects, &b.boxes, &b.class_ids));
        assert!(a.image() == b.image());
    }
    std::fs::remove_file(dir.path().join(conceptdet::io::IMAGES_FILE)).unwrap();
    let rerendered = conceptdet::io::load_split(dir.path()).unwrap();
    assert!(rerendered.scenes[3].image() == sp.scenes[3].image());

    let path = dir.path().join("rows.jsonl");
    let rows = vec![vec![1.5, -2.0], vec![], vec![3.25]];
    conceptdet::io::write_jsonl(&path, &rows).unwrap();
    std::fs::write(&path, std::fs::read_to_string(&path).unwrap() + "\n\n").unwrap();
    assert_eq!(conceptdet::io::read_jsonl::<Vec<f64>>(&path).unwrap(), rows);
    std::fs::write(&path, "[1]\n{oops\n").unwrap();
    match conceptdet::io::read_jsonl::<Vec<f64>>(&path) {
        Err(Error::Input(m)) => assert!(m.contains("line 2")),
        other => panic!("{other:?}"),
    }
}
