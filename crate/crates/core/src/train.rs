//! Training loops for the three regimes: pre-training, visual-prompt
//! distillation and optimized-prompt tuning.

use std::collections::BTreeMap;

use conceptdet_tensor::optim::AdamW;
use conceptdet_tensor::{ParamGrads, ParamSet, Session};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::checkpoint::tensor_hash;
use crate::config::ModelConfig;
use crate::encoders::{normalize_phrase, sample_negatives, MemoryBank};
use crate::error::{Error, Result};
use crate::model::{Detector, LossReport, Objective, PromptedScene};
use crate::prompts::{OPTIMIZED_PREFIX, VISUAL_PREFIX};
use crate::world::SyntheticScene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    #[default]
    Pretrain,
    VisualPrompt,
    TunePrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Learning rate per parameter-name prefix; `default` covers the rest.
    pub lr: BTreeMap<String, f64>,
    pub steps: usize,
    /// Fractions of `steps` where the learning rate is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Negative phrases sampled per scene.
    pub negatives: usize,
    /// Training scenes and the seed of the first one.
    pub scenes: usize,
    pub data_seed: u64,
    /// Optimized prompt rows per class.
    pub super_class: usize,
    pub aux_head: bool,
    pub prompt_loss: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_regime(Regime::Pretrain)
    }
}

impl TrainConfig {
    pub fn for_regime(regime: Regime) -> Self {
        let (lr, steps, milestones) = match regime {
            Regime::Pretrain => (1e-3, 2000, vec![0.8, 0.9]),
            Regime::VisualPrompt => (1e-3, 600, vec![0.8, 0.9]),
            Regime::TunePrompt => (5e-2, 300, vec![0.8]),
        };
        Self {
            regime,
            lr: BTreeMap::from([("default".to_string(), lr)]),
            steps,
            milestones,
            gamma: 0.1,
            batch_size: 4,
            seed: 0,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            negatives: 80,
            scenes: 32,
            data_seed: 1000,
            super_class: 1,
            aux_head: true,
            prompt_loss: true,
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !self.lr.contains_key("default") {
            return Err(Error::Config("lr table needs a `default` entry".into()));
        }
        if let Some((k, v)) = self.lr.iter().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("lr for {k} must be positive, got {v}")));
        }
        let inside = self.milestones.iter().all(|&m| m > 0.0 && m < 1.0);
        let increasing = self.milestones.windows(2).all(|w| w[0] < w[1]);
        if !inside || !increasing {
            return Err(Error::Config(format!("milestones {:?} must be strictly increasing in (0, 1)", self.milestones)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.super_class == 0 {
            return Err(Error::Config("steps, batch_size and super_class must be positive".into()));
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("gamma must be positive; weight_decay and clip_norm nonnegative".into()));
        }
        Ok(())
    }

    /// Base rate of a parameter: longest matching prefix, else `default`.
    pub fn base_lr(&self, name: &str) -> f64 {
        self.lr.iter().filter(|(k, _)| k.as_str() != "default" && name.starts_with(k.as_str())).max_by_key(|(k, _)| k.len()).map_or(self.lr["default"], |(_, v)| *v)
    }

    /// `gamma^(milestones passed)` at `step` (0-based).
    pub fn lr_factor(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= (m * self.steps as f64).round() as usize).count();
        self.gamma.powi(passed as i32)
    }

    pub fn objective(&self) -> Objective {
        Objective { aux_head: self.aux_head, prompt_loss: self.prompt_loss }
    }
}

/// Whether a parameter is updated in a regime.
pub fn is_trainable(regime: Regime, name: &str, obj: Objective) -> bool {
    let visual = name.starts_with(&format!("{VISUAL_PREFIX}."));
    let optimized = name.starts_with(&format!("{OPTIMIZED_PREFIX}."));
    match regime {
        Regime::Pretrain => !visual && !optimized && (obj.aux_head || !name.starts_with("aux.")) && (obj.prompt_loss || !name.starts_with("prompt_head.")),
        Regime::VisualPrompt => visual,
        Regime::TunePrompt => optimized,
    }
}

fn accumulate_report(acc: &mut LossReport, r: &LossReport, w: f64) {
    acc.total += w * r.total;
    acc.decoder += w * r.decoder;
    acc.decoder_parts.class += w * r.decoder_parts.class;
    acc.decoder_parts.l1 += w * r.decoder_parts.l1;
    acc.decoder_parts.giou += w * r.decoder_parts.giou;
    acc.aux += w * r.aux;
    acc.aux_parts.class += w * r.aux_parts.class;
    acc.aux_parts.centerness += w * r.aux_parts.centerness;
    acc.aux_parts.giou += w * r.aux_parts.giou;
    acc.aux_parts.positives += r.aux_parts.positives;
    acc.prompt += w * r.prompt;
    acc.mse += w * r.mse;
}

/// Owns the detector during one regime.
pub struct Trainer {
    pub det: Detector,
    pub cfg: TrainConfig,
    pub trainable: ParamSet,
    pub bank: MemoryBank,
    pub step: usize,
    opt: AdamW<f32>,
    rng: ChaCha8Rng,
    base_lr: Vec<f64>,
}

impl Trainer {
    pub fn new(det: Detector, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.regime {
            Regime::Pretrain if (cfg.aux_head || cfg.prompt_loss) && det.model.aux.is_none() => {
                return Err(Error::State("pre-training needs the training heads".into()));
            }
            Regime::TunePrompt if det.model.optimized.is_none() => {
                return Err(Error::State("attach optimized prompts before tuning".into()));
            }
            _ => {}
        }
        let obj = cfg.objective();
        let trainable = ParamSet::matching(&det.store, |n| is_trainable(cfg.regime, n, obj));
        if trainable.is_empty() {
            return Err(Error::State("regime has no trainable parameters".into()));
        }
        let base_lr = det.store.iter().map(|(_, n, _)| cfg.base_lr(n)).collect();
        Ok(Self { opt: AdamW::new(cfg.weight_decay), rng: ChaCha8Rng::seed_from_u64(cfg.seed), bank: MemoryBank::new(MemoryBank::DEFAULT_CAPACITY), step: 0, base_lr, trainable, det, cfg })
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.det.store.iter().filter(|(id, _, _)| !self.trainable.contains(*id)).map(|(_, n, _)| n.to_string()).collect()
    }

    /// Hash of every tensor outside the trainable set.
    pub fn frozen_hash(&self) -> String {
        let frozen = self.frozen_names();
        tensor_hash(&self.det.store, |n| frozen.iter().any(|f| f == n))
    }

    pub fn current_lr_factor(&self) -> f64 {
        self.cfg.lr_factor(self.step)
    }

    fn apply(&mut self, mut grads: ParamGrads<f32>) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(id, _)| !self.trainable.contains(*id)) {
            return Err(Error::contract(format!("gradient materialized for frozen tensor {}", self.det.store.name(id))));
        }
        if self.cfg.clip_norm > 0.0 {
            let n = grads.global_norm();
            if n > self.cfg.clip_norm {
                grads.scale_all(self.cfg.clip_norm / n);
            }
        }
        let f = self.current_lr_factor();
        let base = &self.base_lr;
        self.opt.step(&mut self.det.store, &grads, |id| base[id.index()] * f);
        self.step += 1;
        Ok(())
    }

    /// One update from per-scene objectives averaged over the batch.
    fn batch_step<F>(&mut self, n: usize, mut objective: F) -> Result<LossReport>
    where
        F: FnMut(&Detector, &mut Session<f32>, usize) -> Result<Option<(conceptdet_tensor::Var, LossReport)>>,
    {
        let mut grads = ParamGrads::new(self.det.store.len());
        let mut report = LossReport::default();
        let mut items = Vec::new();
        for i in 0..n {
            let mut s = Session::new(&self.det.store, &self.trainable);
            if let Some((loss, r)) = objective(&self.det, &mut s, i)? {
                if !r.total.is_finite() {
                    return Err(Error::contract(format!("non-finite loss at step {}", self.step)));
                }
                items.push((s.backward(loss)?, r));
            }
        }
        if items.is_empty() {
            return Ok(report);
        }
        let w = 1.0 / items.len() as f64;
        for (g, r) in &items {
            grads.accumulate(g, w);
            accumulate_report(&mut report, r, w);
        }
        self.apply(grads)?;
        Ok(report)
    }

    /// Text prompts are the scene's positives plus sampled negatives; the
    /// memory bank then absorbs the batch phrases.
    pub fn pretrain_step(&mut self, batch: &[&SyntheticScene], names: &[String], dictionary: &[String]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        if self.cfg.regime != Regime::Pretrain {
            return Err(Error::State("trainer is not in the pre-training regime".into()));
        }
        let mut prompted = Vec::with_capacity(batch.len());
        for scene in batch {
            let positives: Vec<usize> = scene.present_classes();
            let pos_phrases: Vec<String> = positives.iter().map(|&c| names[c].clone()).collect();
            let neg = sample_negatives(&self.bank, dictionary, &pos_phrases, self.cfg.negatives, &mut self.rng);
            let mut classes = positives.clone();
            for p in &neg {
                if let Some(c) = names.iter().position(|n| normalize_phrase(n) == *p) {
                    classes.push(c);
                }
            }
            if classes.is_empty() {
                return Err(Error::input("scene has neither positive nor negative prompts"));
            }
            prompted.push(PromptedScene::new(scene, names, &classes)?);
        }
        let obj = self.cfg.objective();
        let report = self.batch_step(prompted.len(), |det, s, i| {
            let (loss, r, _) = det.model.pretrain_loss(s, &det.vocab, &prompted[i], obj, None)?;
            Ok(Some((loss, r)))
        })?;
        for scene in batch {
            for c in scene.present_classes() {
                self.bank.insert(&names[c]);
            }
        }
        Ok(report)
    }

    /// One seeded-random example box per present class; scenes without
    /// objects are skipped.
    pub fn visual_step(&mut self, batch: &[&SyntheticScene], names: &[String]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        if self.cfg.regime != Regime::VisualPrompt {
            return Err(Error::State("trainer is not in the visual-prompt regime".into()));
        }
        let mut work = Vec::new();
        for scene in batch {
            if scene.class_ids.is_empty() {
                continue;
            }
            let (boxes, classes) = pick_example_boxes(scene, &mut self.rng);
            work.push((PromptedScene::new(scene, names, &scene.present_classes())?, boxes, classes));
        }
        self.batch_step(work.len(), |det, s, i| {
            let (scene, boxes, classes) = &work[i];
            let (loss, r, _) = det.model.visual_prompt_objective(s, &det.vocab, scene, boxes, classes, None)?;
            Ok(Some((loss, r)))
        })
    }

    pub fn tune_step(&mut self, batch: &[&SyntheticScene], names: &[String]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        if self.cfg.regime != Regime::TunePrompt {
            return Err(Error::State("trainer is not in the prompt-tuning regime".into()));
        }
        let classes = self.det.model.optimized.as_ref().map(|o| o.map.classes()).unwrap_or_default();
        let mut work = Vec::new();
        for scene in batch {
            let mut present = classes.clone();
            present.extend(scene.present_classes().into_iter().filter(|c| !classes.contains(c)));
            work.push(PromptedScene::new(scene, names, &present)?);
        }
        self.batch_step(work.len(), |det, s, i| {
            let (loss, r, _) = det.model.tune_objective(s, &det.vocab, &work[i], None)?;
            Ok(Some((loss, r)))
        })
    }

    /// Runs the remaining steps of the regime over `scenes`, reshuffling
    /// each epoch. `on_step` sees the step index and its report.
    pub fn run(&mut self, scenes: &[SyntheticScene], names: &[String], dictionary: &[String], mut on_step: impl FnMut(usize, &LossReport)) -> Result<Vec<LossReport>> {
        if scenes.is_empty() {
            return Err(Error::input("no training scenes"));
        }
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut history = Vec::with_capacity(self.cfg.steps);
        while self.step < self.cfg.steps {
            let mut batch = Vec::with_capacity(self.cfg.batch_size);
            while batch.len() < self.cfg.batch_size.min(scenes.len()) {
                if cursor == order.len() {
                    order = (0..scenes.len()).collect();
                    order.shuffle(&mut self.rng);
                    cursor = 0;
                }
                batch.push(&scenes[order[cursor]]);
                cursor += 1;
            }
            let step = self.step;
            let r = match self.cfg.regime {
                Regime::Pretrain => self.pretrain_step(&batch, names, dictionary)?,
                Regime::VisualPrompt => self.visual_step(&batch, names)?,
                Regime::TunePrompt => self.tune_step(&batch, names)?,
            };
            if self.step == step {
                // nothing to learn from this batch
                self.step += 1;
            }
            on_step(step, &r);
            history.push(r);
        }
        Ok(history)
    }
}

/// One example box per distinct class, drawn uniformly among its boxes.
pub fn pick_example_boxes<R: Rng>(scene: &SyntheticScene, rng: &mut R) -> (Vec<BBox>, Vec<usize>) {
    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    for c in scene.present_classes() {
        let idx: Vec<usize> = (0..scene.class_ids.len()).filter(|&i| scene.class_ids[i] == c).collect();
        let pick = idx[rng.random_range(0..idx.len())];
        boxes.push(scene.boxes[pick]);
        classes.push(c);
    }
    (boxes, classes)
}
