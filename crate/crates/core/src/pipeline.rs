//! End-to-end runs of the three regimes with their contract checks.

use conceptdet_tensor::{ParamSet, Session};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::{evaluate, PromptMode};
use crate::model::{Detector, LossReport};
use crate::train::{pick_example_boxes, Regime, TrainConfig, Trainer};
use crate::world::BenchmarkSplit;

/// Vocabulary over every phrase of the split.
pub fn split_vocabulary(split: &BenchmarkSplit) -> Vocabulary {
    Vocabulary::from_phrases(split.phrases.iter().map(String::as_str))
}

fn dictionary(split: &BenchmarkSplit) -> Vec<String> {
    split.categories.iter().map(|&c| split.phrases[c].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub first: LossReport,
    pub last: LossReport,
    pub frozen: Vec<String>,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
}

impl RunSummary {
    pub fn frozen_unchanged(&self) -> bool {
        self.frozen_hash_before == self.frozen_hash_after
    }
}

fn run(det: Detector, cfg: &TrainConfig, split: &BenchmarkSplit, mut on_step: impl FnMut(usize, &LossReport)) -> Result<(Detector, RunSummary)> {
    let mut t = Trainer::new(det, cfg.clone())?;
    let before = t.frozen_hash();
    let hist = t.run(&split.scenes, &split.phrases, &dictionary(split), &mut on_step)?;
    let summary = RunSummary {
        steps: t.step,
        first: hist.first().copied().unwrap_or_default(),
        last: hist.last().copied().unwrap_or_default(),
        frozen: t.frozen_names(),
        frozen_hash_before: before,
        frozen_hash_after: t.frozen_hash(),
    };
    Ok((t.det, summary))
}

/// Fresh detector pre-trained on `split` with text prompts.
pub fn pretrain(cfg: &TrainConfig, split: &BenchmarkSplit, on_step: impl FnMut(usize, &LossReport)) -> Result<(Detector, RunSummary)> {
    if cfg.regime != Regime::Pretrain {
        return Err(Error::Config("pretrain needs regime = pretrain".into()));
    }
    if !split.respects_held_out() {
        return Err(Error::input("training split contains held-out categories"));
    }
    let det = Detector::new(&cfg.model, split_vocabulary(split), cfg.seed)?;
    run(det, cfg, split, on_step)
}

/// Trains only the visual prompt encoder of `base`.
pub fn train_visual_prompt(base: Detector, cfg: &TrainConfig, split: &BenchmarkSplit, on_step: impl FnMut(usize, &LossReport)) -> Result<(Detector, RunSummary)> {
    if cfg.regime != Regime::VisualPrompt {
        return Err(Error::Config("visual-prompt training needs regime = visual-prompt".into()));
    }
    run(base, cfg, split, on_step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub super_class: usize,
    pub classes: Vec<usize>,
    pub skipped: Vec<usize>,
    pub zero_shot_ap: f64,
    pub tuned_ap: f64,
    pub run: RunSummary,
}

/// Attaches `M` prompt rows per category present in `split` and tunes
/// them with everything else frozen. Categories without any object are
/// skipped with a warning.
pub fn tune_prompts(base: &Detector, cfg: &TrainConfig, split: &BenchmarkSplit, on_step: impl FnMut(usize, &LossReport)) -> Result<(Detector, TuneReport)> {
    if cfg.regime != Regime::TunePrompt {
        return Err(Error::Config("prompt tuning needs regime = tune-prompt".into()));
    }
    let zero_shot_ap = evaluate(base, split, PromptMode::Text, cfg.seed)?.coco.mean;
    let (classes, skipped): (Vec<usize>, Vec<usize>) = split.categories.iter().partition(|c| split.scenes.iter().any(|s| s.class_ids.contains(c)));
    for c in &skipped {
        log::warn!("category {c} ({}) has no objects in {}; skipped", split.phrases[*c], split.name);
    }
    let mut det = base.rebuild(base.model.aux.is_some())?;
    det.attach_optimized(&classes, cfg.super_class, cfg.seed)?;
    let (det, run) = run(det, cfg, split, on_step)?;
    let tuned_ap = evaluate(&det, split, PromptMode::Optimized, cfg.seed)?.coco.mean;
    Ok((det, TuneReport { super_class: cfg.super_class, classes, skipped, zero_shot_ap, tuned_ap, run }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillStats {
    /// Mean cosine between visual and text prompts of the same class.
    pub cosine: f64,
    /// Mean squared difference per element.
    pub mse: f64,
    pub pairs: usize,
}

/// Compares visual prompts from one seeded example box per class with
/// the text prompts of `classes`.
pub fn distillation_stats(det: &Detector, split: &BenchmarkSplit, classes: &[usize], seed: u64) -> Result<DistillStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let none = ParamSet::none(&det.store);
    let (mut cos, mut mse, mut pairs) = (0.0, 0.0, 0usize);
    for scene in &split.scenes {
        if scene.class_ids.is_empty() {
            continue;
        }
        let (boxes, box_classes) = pick_example_boxes(scene, &mut rng);
        let mut s = Session::<f32>::new(&det.store, &none);
        let x = crate::encoders::image_var(&mut s, &scene.image());
        let feats = det.model.backbone.forward(&mut s, x)?;
        let tokens = feats.flatten(&mut s)?;
        let set = det.model.visual.forward(&mut s, &boxes, &box_classes, &feats, tokens)?;
        let phrases: Vec<String> = set.class_ids.iter().map(|&c| split.phrases[c].clone()).collect();
        let pt = det.model.text.encode(&mut s, &det.vocab, &phrases)?;
        let (pv, pt) = (s.value(set.p).clone(), s.value(pt).clone());
        let d = pv.shape()[1];
        for (k, c) in set.class_ids.iter().enumerate() {
            if !classes.contains(c) {
                continue;
            }
            let a = &pv.data()[k * d..(k + 1) * d];
            let b = &pt.data()[k * d..(k + 1) * d];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            cos += dot / (na * nb).max(1e-12);
            mse += a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / d as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::input("no scene holds an object of the requested classes"));
    }
    Ok(DistillStats { cosine: cos / pairs as f64, mse: mse / pairs as f64, pairs })
}
