//! Evaluation protocols over a benchmark split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Detector, PromptSpec};
use crate::train::pick_example_boxes;
use crate::world::{coco_thresholds, evaluate_ap, ApReport, BenchmarkSplit, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Phrases for every split category.
    Text,
    /// One example box per present category and nothing else.
    Visual,
    /// Example boxes for present categories, text for absent ones.
    Interactive,
    /// The attached optimized prompts.
    Optimized,
    /// Text phrases rotated by one column, a chance-level control.
    Shuffled,
}

/// AP over `.50:.05:.95` and at `.50`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub coco: ApReport,
    pub ap50: ApReport,
    pub predictions: Vec<Prediction>,
}

fn spec_for<R: rand::Rng>(split: &BenchmarkSplit, i: usize, mode: PromptMode, rng: &mut R) -> PromptSpec {
    let scene = &split.scenes[i];
    let cats = &split.categories;
    let phrases = |cs: &[usize]| cs.iter().map(|&c| split.phrases[c].clone()).collect::<Vec<_>>();
    match mode {
        PromptMode::Text => PromptSpec::Text { phrases: phrases(cats), classes: cats.clone() },
        PromptMode::Shuffled => {
            let mut p = phrases(cats);
            if !p.is_empty() {
                p.rotate_left(1);
            }
            PromptSpec::Text { phrases: p, classes: cats.clone() }
        }
        PromptMode::Optimized => PromptSpec::Optimized,
        PromptMode::Visual | PromptMode::Interactive => {
            let (boxes, box_classes) = pick_example_boxes(scene, rng);
            let text_classes: Vec<usize> = if mode == PromptMode::Interactive { cats.iter().copied().filter(|c| !box_classes.contains(c)).collect() } else { Vec::new() };
            PromptSpec::Interactive { boxes, box_classes, phrases: phrases(&text_classes), text_classes }
        }
    }
}

/// Runs the detector on every scene of the split. Example boxes are drawn
/// from `seed`.
pub fn evaluate(det: &Detector, split: &BenchmarkSplit, mode: PromptMode, seed: u64) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = Vec::new();
    for (i, scene) in split.scenes.iter().enumerate() {
        let spec = spec_for(split, i, mode, &mut rng);
        if let PromptSpec::Interactive { boxes, phrases, .. } = &spec {
            if boxes.is_empty() && phrases.is_empty() {
                continue;
            }
        }
        preds.extend(det.detect(&scene.image(), &spec, i)?.into_iter().filter(|p| split.categories.contains(&p.class_id)));
    }
    let gts: Vec<_> = split.ground_truth().into_iter().filter(|g| split.categories.contains(&g.class_id)).collect();
    Ok(EvalReport { coco: evaluate_ap(&preds, &gts, &coco_thresholds()), ap50: evaluate_ap(&preds, &gts, &[0.5]), predictions: preds })
}

/// Every present category prompted by one seeded-random GT box, absent
/// ones by text.
pub fn interactive_eval(det: &Detector, split: &BenchmarkSplit, seed: u64) -> Result<EvalReport> {
    evaluate(det, split, PromptMode::Interactive, seed)
}

/// AP restricted to the given categories.
pub fn subset_mean(report: &ApReport, classes: &[usize]) -> f64 {
    let v: Vec<f64> = classes.iter().filter_map(|c| report.per_class.get(c).copied()).collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
