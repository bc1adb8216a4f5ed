//! The assembled detector: toy encoders, hybrid encoder, decoder, the
//! training-only heads, and prompt assembly for every prompt source.

use conceptdet_tensor::{ParamSet, ParamStore, Scalar, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aux::{atss_assign, aux_loss, generate_anchors, prompt_multilabel_loss, AuxHead, AuxLossParts, PromptHead, PROMPT_LOSS_WEIGHT};
use crate::boxes::{boxes_from_tensor, BBox};
use crate::config::ModelConfig;
use crate::decoder::{decoder_loss, match_final, Decoder, DecoderLossParts, DetectionOutput, Pinned, Target};
use crate::encoders::{image_var, Backbone, MultiScaleFeatures, TextEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::hybrid::{HybridEncoder, HybridOutput};
use crate::matching::MatchResult;
use crate::nn::Init;
use crate::prompts::{init_optimized_prompts, superclass_scores, visual_prompt_loss, OptimizedPrompts, SuperClassMap, VisualPromptEncoder};
use crate::world::{Prediction, SyntheticScene};

/// Parameter prefixes of the heads used only for training.
pub const TRAINING_ONLY: [&str; 2] = ["aux.", "prompt_head."];

/// Module layout. Holds parameter ids only.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub text: TextEncoder,
    pub hybrid: HybridEncoder,
    pub decoder: Decoder,
    pub visual: VisualPromptEncoder,
    pub aux: Option<AuxHead>,
    pub prompt_head: Option<PromptHead>,
    pub optimized: Option<OptimizedPrompts>,
}

impl Model {
    pub fn build(cfg: &ModelConfig, vocab_size: usize, training_heads: bool, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut init = Init::new(store, rng);
        let backbone = Backbone::new(&mut init, d)?;
        let text = TextEncoder::new(&mut init, vocab_size, d)?;
        let hybrid = HybridEncoder::new(&mut init, cfg)?;
        let decoder = Decoder::new(&mut init, cfg)?;
        let visual = VisualPromptEncoder::new(&mut init, d, cfg.heads, cfg.points, cfg.visual_prompt_layers, cfg.ffn_mult)?;
        let (aux, prompt_head) = if training_heads { (Some(AuxHead::new(&mut init, d)?), Some(PromptHead::new(&mut init, d)?)) } else { (None, None) };
        Ok(Self { cfg: cfg.clone(), backbone, text, hybrid, decoder, visual, aux, prompt_head, optimized: None })
    }
}

/// What the detector is asked to find.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptSpec {
    /// One phrase per class column.
    Text { phrases: Vec<String>, classes: Vec<usize> },
    /// Example boxes with their class; one prompt per distinct class.
    Visual { boxes: Vec<BBox>, classes: Vec<usize> },
    /// Visual prompts for some classes, text for the rest.
    Interactive { boxes: Vec<BBox>, box_classes: Vec<usize>, phrases: Vec<String>, text_classes: Vec<usize> },
    /// The attached learned embeddings.
    Optimized,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct Forward {
    pub feats: MultiScaleFeatures,
    /// Prompt rows fed to the hybrid encoder.
    pub prompts: Var,
    pub hybrid: HybridOutput,
    pub det: DetectionOutput,
    /// Class id of every logit column.
    pub columns: Vec<usize>,
}

impl Model {
    fn assemble<T: Scalar>(&self, s: &mut Session<T>, vocab: &Vocabulary, feats: &MultiScaleFeatures, tokens: Var, spec: &PromptSpec) -> Result<(Var, Vec<usize>, Option<SuperClassMap>)> {
        match spec {
            PromptSpec::Text { phrases, classes } => {
                if phrases.len() != classes.len() {
                    return Err(Error::input("one class id per phrase"));
                }
                Ok((self.text.encode(s, vocab, phrases)?, classes.clone(), None))
            }
            PromptSpec::Visual { boxes, classes } => {
                let set = self.visual.forward(s, boxes, classes, feats, tokens)?;
                Ok((set.p, set.class_ids, None))
            }
            PromptSpec::Interactive { boxes, box_classes, phrases, text_classes } => {
                if phrases.len() != text_classes.len() {
                    return Err(Error::input("one class id per phrase"));
                }
                let mut rows = Vec::new();
                let mut cols = Vec::new();
                if !boxes.is_empty() {
                    let set = self.visual.forward(s, boxes, box_classes, feats, tokens)?;
                    rows.push(set.p);
                    cols.extend(set.class_ids);
                }
                if !phrases.is_empty() {
                    rows.push(self.text.encode(s, vocab, phrases)?);
                    cols.extend(text_classes.iter().copied());
                }
                if rows.is_empty() {
                    return Err(Error::input("interactive prompt set is empty"));
                }
                Ok((s.concat(&rows, 0)?, cols, None))
            }
            PromptSpec::Optimized => {
                let o = self.optimized.as_ref().ok_or_else(|| Error::State("no optimized prompts attached".into()))?;
                let set = o.prompt_set(s);
                Ok((set.p, o.map.classes(), Some(o.map.clone())))
            }
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, vocab: &Vocabulary, image: &Tensor<f32>, spec: &PromptSpec, pinned: Option<&Pinned>) -> Result<Forward> {
        let x = image_var(s, image);
        let feats = self.backbone.forward(s, x)?;
        let tokens = feats.flatten(s)?;
        let (prompts, columns, map) = self.assemble(s, vocab, &feats, tokens, spec)?;
        let hybrid = self.hybrid.forward(s, &feats, prompts, &self.cfg)?;
        let score = move |s: &mut Session<T>, raw: Var| -> Result<Var> {
            match &map {
                Some(m) => superclass_scores(s, raw, m),
                None => Ok(raw),
            }
        };
        let det = self.decoder.forward(s, hybrid.tokens, &feats.shapes, hybrid.p_end, self.cfg.image_size, pinned, &score)?;
        Ok(Forward { feats, prompts, hybrid, det, columns })
    }
}

/// Non-differentiable choices of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Decisions {
    pub pinned: Pinned,
    pub matching: MatchResult,
}

/// Which training-only terms enter the pre-training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub aux_head: bool,
    pub prompt_loss: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self { aux_head: true, prompt_loss: true }
    }
}

/// One scene with the text prompts used for it.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptedScene {
    pub image: Tensor<f32>,
    pub phrases: Vec<String>,
    pub classes: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub box_classes: Vec<usize>,
}

impl PromptedScene {
    /// `prompt_classes` must cover every class present in the scene.
    pub fn new(scene: &SyntheticScene, names: &[String], prompt_classes: &[usize]) -> Result<Self> {
        if let Some(c) = scene.class_ids.iter().find(|c| !prompt_classes.contains(c)) {
            return Err(Error::input(format!("class {c} present in scene but not prompted")));
        }
        Ok(Self {
            image: scene.image(),
            phrases: prompt_classes.iter().map(|&c| names[c].clone()).collect(),
            classes: prompt_classes.to_vec(),
            boxes: scene.boxes.clone(),
            box_classes: scene.class_ids.clone(),
        })
    }

    pub fn text_spec(&self) -> PromptSpec {
        PromptSpec::Text { phrases: self.phrases.clone(), classes: self.classes.clone() }
    }
}

/// GT boxes mapped to logit columns; objects whose class has no column
/// are dropped.
pub fn targets_for(boxes: &[BBox], classes: &[usize], columns: &[usize]) -> Vec<Target> {
    boxes.iter().zip(classes).filter_map(|(b, c)| columns.iter().position(|x| x == c).map(|column| Target { bbox: *b, column })).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub decoder: f64,
    pub decoder_parts: DecoderLossParts,
    pub aux: f64,
    pub aux_parts: AuxLossParts,
    pub prompt: f64,
    pub mse: f64,
}

fn decide<T: Scalar>(s: &Session<T>, det: &DetectionOutput, targets: &[Target], fixed: Option<&Decisions>) -> Result<Decisions> {
    Ok(match fixed {
        Some(d) => d.clone(),
        None => Decisions { pinned: det.pinned(), matching: match_final(s, det, targets)? },
    })
}

impl Model {
    /// Decoder loss, plus the dense head and the prompt multi-label loss
    /// when enabled.
    pub fn pretrain_loss<T: Scalar>(&self, s: &mut Session<T>, vocab: &Vocabulary, scene: &PromptedScene, obj: Objective, fixed: Option<&Decisions>) -> Result<(Var, LossReport, Decisions)> {
        let spec = scene.text_spec();
        let f = self.forward(s, vocab, &scene.image, &spec, fixed.map(|d| &d.pinned))?;
        let targets = targets_for(&scene.boxes, &scene.box_classes, &f.columns);
        let decisions = decide(s, &f.det, &targets, fixed)?;
        let (dl, dparts) = decoder_loss(s, &f.det, &targets, &decisions.matching)?;
        let mut report = LossReport { decoder: s.value(dl).item().f64(), decoder_parts: dparts, ..Default::default() };
        let mut total = dl;
        if obj.aux_head {
            let head = self.aux.as_ref().ok_or_else(|| Error::State("model was built without the dense head".into()))?;
            let out = head.forward(s, f.hybrid.tokens, f.feats.shapes, f.hybrid.p_end, self.cfg.image_size)?;
            let anchors = generate_anchors(&f.feats.shapes, self.cfg.image_size);
            let gt: Vec<BBox> = targets.iter().map(|t| t.bbox).collect();
            let assign = atss_assign(&anchors, &gt);
            let (al, aparts) = aux_loss(s, &out, &anchors, &assign, &targets)?;
            report.aux = s.value(al).item().f64();
            report.aux_parts = aparts;
            total = s.add(total, al)?;
        }
        if obj.prompt_loss {
            let head = self.prompt_head.as_ref().ok_or_else(|| Error::State("model was built without the prompt head".into()))?;
            let logits = head.logits(s, f.hybrid.p_end)?;
            let g: Vec<bool> = f.columns.iter().map(|c| scene.box_classes.contains(c)).collect();
            let pl = prompt_multilabel_loss(s, logits, &g)?;
            report.prompt = s.value(pl).item().f64();
            let w = s.scale(pl, PROMPT_LOSS_WEIGHT)?;
            total = s.add(total, w)?;
        }
        report.total = s.value(total).item().f64();
        Ok((total, report, decisions))
    }

    /// `mean((P_v - P_t)^2) + decoder loss` with one example box per class.
    pub fn visual_prompt_objective<T: Scalar>(
        &self,
        s: &mut Session<T>,
        vocab: &Vocabulary,
        scene: &PromptedScene,
        boxes: &[BBox],
        box_classes: &[usize],
        fixed: Option<&Decisions>,
    ) -> Result<(Var, LossReport, Decisions)> {
        let spec = PromptSpec::Visual { boxes: boxes.to_vec(), classes: box_classes.to_vec() };
        let f = self.forward(s, vocab, &scene.image, &spec, fixed.map(|d| &d.pinned))?;
        let phrases: Vec<String> = f
            .columns
            .iter()
            .map(|c| scene.classes.iter().position(|x| x == c).map(|i| scene.phrases[i].clone()).ok_or_else(|| Error::input(format!("no phrase for class {c}"))))
            .collect::<Result<_>>()?;
        let pt = self.text.encode(s, vocab, &phrases)?;
        let pt = s.detach(pt);
        let targets = targets_for(&scene.boxes, &scene.box_classes, &f.columns);
        let decisions = decide(s, &f.det, &targets, fixed)?;
        let (dl, dparts) = decoder_loss(s, &f.det, &targets, &decisions.matching)?;
        let (total, mse) = visual_prompt_loss(s, f.prompts, pt, dl)?;
        let report = LossReport { total: s.value(total).item().f64(), decoder: s.value(dl).item().f64(), decoder_parts: dparts, mse: s.value(mse).item().f64(), ..Default::default() };
        Ok((total, report, decisions))
    }

    /// Decoder loss of the attached optimized prompts.
    pub fn tune_objective<T: Scalar>(&self, s: &mut Session<T>, vocab: &Vocabulary, scene: &PromptedScene, fixed: Option<&Decisions>) -> Result<(Var, LossReport, Decisions)> {
        let f = self.forward(s, vocab, &scene.image, &PromptSpec::Optimized, fixed.map(|d| &d.pinned))?;
        let targets = targets_for(&scene.boxes, &scene.box_classes, &f.columns);
        let decisions = decide(s, &f.det, &targets, fixed)?;
        let (dl, dparts) = decoder_loss(s, &f.det, &targets, &decisions.matching)?;
        let report = LossReport { total: s.value(dl).item().f64(), decoder: s.value(dl).item().f64(), decoder_parts: dparts, ..Default::default() };
        Ok((dl, report, decisions))
    }
}

/// Weights plus layout plus vocabulary.
#[derive(Debug, Clone)]
pub struct Detector {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub vocab: Vocabulary,
}

/// Maximum detections kept per image.
pub const MAX_DETECTIONS: usize = 100;

impl Detector {
    pub fn new(cfg: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::build(cfg, vocab.len(), true, &mut store, &mut rng)?;
        Ok(Self { model, store, vocab })
    }

    /// Adds `M` learnable prompt rows per class, drawn from `seed`.
    pub fn attach_optimized(&mut self, classes: &[usize], m: usize, seed: u64) -> Result<()> {
        if self.model.optimized.is_some() {
            return Err(Error::State("optimized prompts already attached".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut self.store, &mut rng);
        self.model.optimized = Some(init_optimized_prompts(&mut init, classes, m, self.model.cfg.dim)?);
        Ok(())
    }

    /// Rebuilds the layout (optionally without the training-only heads)
    /// and copies every surviving tensor by name.
    pub fn rebuild(&self, training_heads: bool) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::build(&self.model.cfg, self.vocab.len(), training_heads, &mut store, &mut rng)?;
        if let Some(o) = &self.model.optimized {
            let classes = o.map.classes();
            let m = o.map.entries[0].1.len();
            let mut init = Init::new(&mut store, &mut rng);
            let mut fresh = init_optimized_prompts(&mut init, &classes, m, self.model.cfg.dim)?;
            fresh.map = o.map.clone();
            model.optimized = Some(fresh);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let src = self.store.id(&name).ok_or_else(|| Error::State(format!("missing tensor {name}")))?;
            store.set(id, self.store.get(src).clone())?;
        }
        Ok(Self { model, store, vocab: self.vocab.clone() })
    }

    /// The detector with the dense head and prompt head deleted.
    pub fn without_training_heads(&self) -> Result<Self> {
        self.rebuild(false)
    }

    /// Scored boxes for every (query, column) pair, best first, capped at
    /// [`MAX_DETECTIONS`].
    pub fn detect(&self, image: &Tensor<f32>, spec: &PromptSpec, image_index: usize) -> Result<Vec<Prediction>> {
        let none = ParamSet::none(&self.store);
        let mut s = Session::new(&self.store, &none);
        let f = self.model.forward(&mut s, &self.vocab, image, spec, None)?;
        Ok(predictions(&s, &f, image_index))
    }

    /// Raw final-stage outputs `(boxes, logits)` for bit-level comparisons.
    pub fn raw_outputs(&self, image: &Tensor<f32>, spec: &PromptSpec) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let none = ParamSet::none(&self.store);
        let mut s = Session::new(&self.store, &none);
        let f = self.model.forward(&mut s, &self.vocab, image, spec, None)?;
        let last = f.det.last();
        Ok((s.value(last.boxes).clone(), s.value(last.logits).clone()))
    }
}

pub fn predictions<T: Scalar>(s: &Session<T>, f: &Forward, image_index: usize) -> Vec<Prediction> {
    let last = f.det.last();
    let boxes = boxes_from_tensor(s.value(last.boxes));
    let logits = s.value(last.logits);
    let k = f.columns.len();
    let mut out = Vec::with_capacity(boxes.len() * k);
    for (q, b) in boxes.iter().enumerate() {
        for (j, &c) in f.columns.iter().enumerate() {
            let z = logits.data()[q * k + j].f64();
            out.push(Prediction { image: image_index, bbox: b.clamped_unit(), class_id: c, score: 1.0 / (1.0 + (-z).exp()) });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(MAX_DETECTIONS);
    out
}
