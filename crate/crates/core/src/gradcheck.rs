//! Finite-difference checks of whole training objectives in 64-bit.
//!
//! Query selection, Hungarian matching and decoder reference boxes are
//! piecewise-constant in the weights; they are taken from one base
//! evaluation and replayed, so the checked function is smooth apart from
//! the kinks `grad_check` already steps around.

use conceptdet_tensor::{grad_check, GradCheckReport, ParamSet, ParamStore, Session};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Decisions, Detector, Objective, PromptedScene};
use crate::train::{is_trainable, pick_example_boxes, Regime};
use crate::world::{category, default_phrases, training_categories, ShapeObject, SyntheticScene};

pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// Decoder, dense head and prompt multi-label loss.
    Pretrain,
    /// Distillation MSE plus decoder loss, visual encoder only.
    VisualPrompt,
    /// Decoder loss of optimized prompts.
    TunePrompt,
}

/// Two well separated objects of different categories on a 64x64 canvas.
pub fn two_object_scene() -> SyntheticScene {
    let objects = vec![ShapeObject { class: category(0, 0), cx: 18.3, cy: 20.6, r: 9.2 }, ShapeObject { class: category(2, 2), cx: 44.7, cy: 41.1, r: 11.4 }];
    SyntheticScene::from_objects(0, 64, objects)
}

/// Moves the weights to a generic point: zero-initialized projections
/// would hide upstream gradients, and initial sampling offsets put
/// bilinear taps exactly on grid lines where the sampler has a kink.
pub fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for id in store.ids().collect::<Vec<_>>() {
        let amp = if store.name(id).ends_with("offsets.b") { 0.3 } else { 0.05 };
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
}

/// Checks one objective of a detector built from `cfg` and `seed`.
pub fn check_objective(target: Target, cfg: &ModelConfig, seed: u64, h: f64) -> Result<GradCheckReport> {
    let names = default_phrases();
    let vocab = Vocabulary::from_phrases(names.iter().map(String::as_str));
    let mut det = Detector::new(cfg, vocab, seed)?;
    let scene = two_object_scene();
    // positives plus two negatives
    let present = scene.present_classes();
    let mut classes = present.clone();
    classes.extend(training_categories().into_iter().filter(|c| !present.contains(c)).take(2));
    let prompted = PromptedScene::new(&scene, &names, &classes)?;
    let regime = match target {
        Target::Pretrain => Regime::Pretrain,
        Target::VisualPrompt => Regime::VisualPrompt,
        Target::TunePrompt => {
            det.attach_optimized(&classes, 2, seed)?;
            Regime::TunePrompt
        }
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (boxes, box_classes) = pick_example_boxes(&scene, &mut rng);
    let obj = Objective::default();
    let mut store = det.store.cast::<f64>();
    jitter(&mut store, seed);
    let trainable = ParamSet::matching(&store, |n| is_trainable(regime, n, obj));
    let model = &det.model;
    let vocab = &det.vocab;
    let eval = |s: &mut Session<f64>, fixed: Option<&Decisions>| -> Result<(conceptdet_tensor::Var, Decisions)> {
        let (l, _, d) = match target {
            Target::Pretrain => model.pretrain_loss(s, vocab, &prompted, obj, fixed)?,
            Target::VisualPrompt => model.visual_prompt_objective(s, vocab, &prompted, &boxes, &box_classes, fixed)?,
            Target::TunePrompt => model.tune_objective(s, vocab, &prompted, fixed)?,
        };
        Ok((l, d))
    };
    let decisions = {
        let mut s = Session::new(&store, &trainable);
        eval(&mut s, None)?.1
    };
    if decisions.matching.pairs.len() != scene.boxes.len() {
        return Err(Error::contract("base evaluation did not match every object"));
    }
    let report = grad_check(&mut store, &trainable, h, |s| {
        eval(s, Some(&decisions)).map(|r| r.0).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => conceptdet_tensor::TensorError::Contract(other.to_string()),
        })
    })?;
    Ok(report)
}
