//! Component ablations at toy scale: each toggle switched off against the
//! full model, with structural checks on every run.

use std::fmt;

use conceptdet_tensor::{ParamSet, Session};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{evaluate, PromptMode};
use crate::model::{Detector, PromptSpec};
use crate::pipeline::{pretrain, tune_prompts};
use crate::train::{is_trainable, Regime, TrainConfig};
use crate::world::BenchmarkSplit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Toggle {
    Mfg,
    Psf,
    AuxHead,
    PromptLoss,
    SuperClass,
}

impl Toggle {
    pub const ALL: [Toggle; 5] = [Toggle::Mfg, Toggle::Psf, Toggle::AuxHead, Toggle::PromptLoss, Toggle::SuperClass];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::Mfg => "mfg",
            Toggle::Psf => "psf",
            Toggle::AuxHead => "aux-head",
            Toggle::PromptLoss => "prompt-loss",
            Toggle::SuperClass => "super-class",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `full` or the disabled component.
    pub variant: String,
    pub ap: f64,
    pub ap50: f64,
    pub final_loss: f64,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub steps: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn all_checks_pass(&self) -> bool {
        self.rows.iter().all(|r| r.checks.iter().all(|c| c.passed))
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>8} {:>8} {:>10}  checks", "variant", "AP", "AP50", "loss")?;
        for r in &self.rows {
            let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            let status = if failed.is_empty() { format!("{} ok", r.checks.len()) } else { format!("FAILED: {}", failed.join(", ")) };
            writeln!(f, "{:<22} {:>8.4} {:>8.4} {:>10.4}  {status}", r.variant, r.ap, r.ap50, r.final_loss)?;
        }
        Ok(())
    }
}

fn check(name: &str, passed: bool) -> Check {
    Check { name: name.into(), passed }
}

/// Structural checks every pre-trained variant must pass.
fn model_checks(det: &Detector, cfg: &TrainConfig, split: &BenchmarkSplit, final_loss: f64) -> Result<Vec<Check>> {
    let scene = &split.scenes[0];
    let spec = PromptSpec::Text { phrases: split.categories.iter().map(|&c| split.phrases[c].clone()).collect(), classes: split.categories.clone() };
    let none = ParamSet::none(&det.store);
    let mut s = Session::<f32>::new(&det.store, &none);
    let f = det.model.forward(&mut s, &det.vocab, &scene.image(), &spec, None)?;
    let expected = 7 * usize::from(cfg.model.psf) + usize::from(cfg.model.mfg);
    let stripped = det.without_training_heads()?;
    let a = det.raw_outputs(&scene.image(), &spec)?;
    let b = stripped.raw_outputs(&scene.image(), &spec)?;
    let same_bits = |x: &conceptdet_tensor::Tensor<f32>, y: &conceptdet_tensor::Tensor<f32>| x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    let obj = cfg.objective();
    let heads_excluded = det.store.iter().all(|(_, n, _)| {
        let t = is_trainable(Regime::Pretrain, n, obj);
        !(n.starts_with("aux.") && !cfg.aux_head && t) && !(n.starts_with("prompt_head.") && !cfg.prompt_loss && t)
    });
    Ok(vec![
        check("finite-loss", final_loss.is_finite()),
        check("fusion-count", f.hybrid.trace.count() == expected),
        check("inference-without-training-heads", same_bits(&a.0, &b.0) && same_bits(&a.1, &b.1)),
        check("disabled-heads-frozen", heads_excluded),
    ])
}

/// Pre-trains the full model and one variant per model toggle, then tunes
/// prompts with `M = 1` and `M = 10` for the super-class toggle.
pub fn run_ablation(toggles: &[Toggle], base: &TrainConfig, tune: &TrainConfig, split: &BenchmarkSplit, shifted: &BenchmarkSplit) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut variants: Vec<(String, TrainConfig)> = vec![("full".into(), base.clone())];
    for &t in toggles {
        let mut c = base.clone();
        match t {
            Toggle::Mfg => c.model.mfg = false,
            Toggle::Psf => c.model.psf = false,
            Toggle::AuxHead => c.aux_head = false,
            Toggle::PromptLoss => c.prompt_loss = false,
            Toggle::SuperClass => continue,
        }
        variants.push((format!("without {}", t.name()), c));
    }
    let mut full: Option<Detector> = None;
    for (name, cfg) in variants {
        log::info!("ablation: {name}");
        let (det, summary) = pretrain(&cfg, split, |_, _| {})?;
        let report = evaluate(&det, split, PromptMode::Text, cfg.seed)?;
        let checks = model_checks(&det, &cfg, split, summary.last.total)?;
        rows.push(AblationRow { variant: name, ap: report.coco.mean, ap50: report.ap50.mean, final_loss: summary.last.total, checks });
        if full.is_none() {
            full = Some(det);
        }
    }
    if toggles.contains(&Toggle::SuperClass) {
        let base_det = full.expect("full model trained first");
        for m in [1, 10] {
            let cfg = TrainConfig { super_class: m, ..tune.clone() };
            let (det, r) = tune_prompts(&base_det, &cfg, shifted, |_, _| {})?;
            let map_ok = det.model.optimized.as_ref().is_some_and(|o| o.map.validate(o.map.rows()).is_ok() && o.map.rows() == m * r.classes.len());
            let ap50 = evaluate(&det, shifted, PromptMode::Optimized, cfg.seed)?.ap50.mean;
            rows.push(AblationRow {
                variant: format!("super-class M={m}"),
                ap: r.tuned_ap,
                ap50,
                final_loss: r.run.last.total,
                checks: vec![check("finite-loss", r.run.last.total.is_finite()), check("frozen-unchanged", r.run.frozen_unchanged()), check("super-class-map", map_ok)],
            });
        }
    }
    Ok(AblationReport { steps: base.steps, rows })
}
