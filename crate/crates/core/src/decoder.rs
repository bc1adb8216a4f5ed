//! Language-guided query selection, the cross-modality decoder and its
//! set-prediction objective.

use conceptdet_tensor::{focal_value, ParamId, Scalar, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::boxes::{boxes_from_tensor, boxes_tensor, giou, giou_rows, BBox};
use crate::config::ModelConfig;
use crate::encoders::STRIDES;
use crate::error::{Error, Result};
use crate::matching::{hungarian_match, MatchResult};
use crate::nn::{Attention, DeformAttn, Fill, Init, LayerNorm, Mlp, OffsetInit, Reference};
use crate::prompts::{sincos_tensor, SINCOS_WIDTH};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const INV_SIGMOID_EPS: f64 = 1e-5;
/// Initial logit bias, sigmoid(-4.6) ~ 0.01.
pub const PRIOR_BIAS: f32 = -4.6;

/// `logits = x Linear(P)^T / sqrt(d) + bias` with a scalar learnable bias.
#[derive(Debug, Clone)]
pub struct SimilarityHead {
    pub proj: crate::nn::Linear,
    pub bias: ParamId,
}

impl SimilarityHead {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Result<Self> {
        let mut p = init.sub(name);
        Ok(Self { proj: crate::nn::Linear::new(&mut p, "proj", d, d, Fill::Xavier)?, bias: p.constant("bias", &[], PRIOR_BIAS)? })
    }

    /// `x: [N, D]`, `prompts: [K, D]` to `[N, K]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, prompts: Var) -> Result<Var> {
        let (xs, ps) = (s.shape(x).to_vec(), s.shape(prompts).to_vec());
        if xs.len() != 2 || ps.len() != 2 || xs[1] != ps[1] {
            return Err(Error::Tensor(conceptdet_tensor::TensorError::Shape(format!("similarity: {xs:?} vs {ps:?}"))));
        }
        let pk = self.proj.forward(s, prompts)?;
        let pt = s.transpose(pk)?;
        let l = s.matmul(x, pt)?;
        let l = s.scale(l, 1.0 / (xs[1] as f64).sqrt())?;
        let b = s.param(self.bias);
        Ok(s.add(l, b)?)
    }
}

/// Indices of the `q` rows with the largest row maximum, best first; ties
/// go to the lower index.
pub fn select_top(scores: &[Vec<f64>], q: usize) -> Result<Vec<usize>> {
    if q > scores.len() {
        return Err(Error::contract(format!("{q} queries requested from {} tokens", scores.len())));
    }
    let best: Vec<f64> = scores.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
    idx.truncate(q);
    Ok(idx)
}

/// Anchor box of every token for proposals: token center, side
/// `2 * stride` (capped at 0.95 of the image).
pub fn proposal_anchors(shapes: &[(usize, usize)], image_size: usize) -> Vec<BBox> {
    let mut out = Vec::new();
    for (l, &(h, w)) in shapes.iter().enumerate() {
        let side = (2.0 * STRIDES[l] as f64 / image_size as f64).min(0.95);
        for i in 0..h {
            for j in 0..w {
                out.push(BBox::new((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64, side, side));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross: DeformAttn,
    pub norm2: LayerNorm,
    pub prompt_attn: Attention,
    pub norm3: LayerNorm,
    pub ffn: Mlp,
    pub norm4: LayerNorm,
    pub box_head: Mlp,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub content: ParamId,
    pub query_pos: Mlp,
    pub proposal_head: Mlp,
    pub layers: Vec<DecoderLayer>,
    pub score: SimilarityHead,
    pub queries: usize,
}

/// Boxes `[Q, 4]` and logits `[Q, K]` of one prediction stage.
#[derive(Debug, Clone, Copy)]
pub struct StageOutput {
    pub boxes: Var,
    pub logits: Var,
}

/// Stage 0 is the selected proposals; stages 1.. are decoder layers.
#[derive(Debug, Clone)]
pub struct DetectionOutput {
    pub stages: Vec<StageOutput>,
    pub selected: Vec<usize>,
    /// Reference boxes each layer was conditioned on.
    pub references: Vec<Vec<BBox>>,
}

/// Non-differentiable decoder inputs replayed from an earlier pass: the
/// query selection and every layer's reference boxes. Pinning them makes
/// the forward a smooth function of the weights, for finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct Pinned {
    pub selection: Vec<usize>,
    pub references: Vec<Vec<BBox>>,
}

impl DetectionOutput {
    pub fn pinned(&self) -> Pinned {
        Pinned { selection: self.selected.clone(), references: self.references.clone() }
    }
}

impl DetectionOutput {
    pub fn last(&self) -> StageOutput {
        *self.stages.last().expect("at least one stage")
    }
}

impl Decoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        let mut p = init.sub("decoder");
        let mut layers = Vec::with_capacity(cfg.decoder_layers);
        for i in 0..cfg.decoder_layers {
            let mut q = p.sub(&format!("layer{i}"));
            layers.push(DecoderLayer {
                self_attn: Attention::new(&mut q, "self_attn", d, cfg.heads)?,
                norm1: LayerNorm::new(&mut q, "norm1", d)?,
                cross: DeformAttn::new(&mut q, "cross", d, cfg.heads, 4, cfg.points, OffsetInit::Ring)?,
                norm2: LayerNorm::new(&mut q, "norm2", d)?,
                prompt_attn: Attention::new(&mut q, "prompt_attn", d, cfg.heads)?,
                norm3: LayerNorm::new(&mut q, "norm3", d)?,
                ffn: Mlp::new(&mut q, "ffn", d, d * cfg.ffn_mult, d, Fill::Xavier)?,
                norm4: LayerNorm::new(&mut q, "norm4", d)?,
                box_head: Mlp::new(&mut q, "box_head", d, d, 4, Fill::Zero)?,
            });
        }
        Ok(Self {
            content: p.normal("content", &[cfg.queries, d], 1.0)?,
            query_pos: Mlp::new(&mut p, "query_pos", SINCOS_WIDTH, d, d, Fill::Xavier)?,
            proposal_head: Mlp::new(&mut p, "proposal_head", d, d, 4, Fill::Zero)?,
            score: SimilarityHead::new(&mut p, "score", d)?,
            layers,
            queries: cfg.queries,
        })
    }

    /// `sigmoid(delta + inverse_sigmoid(reference))`
    fn refine_boxes<T: Scalar>(s: &mut Session<T>, delta: Var, reference: Var) -> Result<Var> {
        let r = s.inverse_sigmoid(reference, INV_SIGMOID_EPS)?;
        let z = s.add(delta, r)?;
        Ok(s.sigmoid(z)?)
    }

    /// Runs selection and every decoder layer. `score_fn` maps raw
    /// per-prompt logits to class logits (identity or super-class max).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        tokens: Var,
        shapes: &[(usize, usize)],
        p_end: Var,
        image_size: usize,
        pinned: Option<&Pinned>,
        score_fn: &dyn Fn(&mut Session<T>, Var) -> Result<Var>,
    ) -> Result<DetectionOutput> {
        let n_tokens = s.shape(tokens)[0];
        let token_logits = self.score.forward(s, tokens, p_end)?;
        let selected = match pinned {
            Some(p) => p.selection.clone(),
            None => {
                let v = s.value(token_logits);
                let k = v.shape()[1];
                let rows: Vec<Vec<f64>> = v.data().chunks(k).map(|r| r.iter().map(|x| x.f64()).collect()).collect();
                let sel = select_top(&rows, self.queries)?;
                s.note_decision(&sel);
                sel
            }
        };
        if selected.len() != self.queries || selected.iter().any(|&i| i >= n_tokens) {
            return Err(Error::contract("query selection out of range"));
        }

        let anchors = proposal_anchors(shapes, image_size);
        let sel_anchors: Vec<BBox> = selected.iter().map(|&i| anchors[i]).collect();
        let sel_tokens = s.index_select(tokens, 0, &selected)?;
        let delta = self.proposal_head.forward(s, sel_tokens)?;
        let anchor_var = s.constant(boxes_tensor(&sel_anchors));
        let proposals = Self::refine_boxes(s, delta, anchor_var)?;
        let sel_logits = s.index_select(token_logits, 0, &selected)?;
        let mut stages = vec![StageOutput { boxes: proposals, logits: score_fn(s, sel_logits)? }];

        let mut x = s.param(self.content);
        // The first refinement keeps the gradient path into the proposal
        // head; later references are detached.
        let mut reference = proposals;
        let mut references = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let raw_ref = match pinned {
                Some(p) => {
                    let r = p.references.get(l).ok_or_else(|| Error::contract("pinned references shorter than decoder"))?.clone();
                    if l > 0 {
                        reference = s.constant(boxes_tensor(&r));
                    }
                    r
                }
                None => boxes_from_tensor(s.value(reference)),
            };
            let ref_boxes: Vec<BBox> = raw_ref.iter().map(|b| b.clamped_unit()).collect();
            references.push(raw_ref);
            let enc = s.constant(sincos_tensor(&ref_boxes)?);
            let pos = self.query_pos.forward(s, enc)?;

            let qk = s.add(x, pos)?;
            let h = layer.self_attn.forward(s, qk, qk, x)?;
            let y = s.add(x, h)?;
            x = layer.norm1.forward(s, y)?;

            let qp = s.add(x, pos)?;
            let refs = Reference::Boxes(ref_boxes.iter().map(BBox::to_array).collect());
            let h = layer.cross.forward(s, qp, &refs, tokens, shapes)?;
            let y = s.add(x, h)?;
            x = layer.norm2.forward(s, y)?;

            let h = layer.prompt_attn.forward(s, x, p_end, p_end)?;
            let y = s.add(x, h)?;
            x = layer.norm3.forward(s, y)?;

            let h = layer.ffn.forward(s, x)?;
            let y = s.add(x, h)?;
            x = layer.norm4.forward(s, y)?;

            let delta = layer.box_head.forward(s, x)?;
            let boxes = Self::refine_boxes(s, delta, reference)?;
            let raw = self.score.forward(s, x, p_end)?;
            stages.push(StageOutput { boxes, logits: score_fn(s, raw)? });
            reference = s.detach(boxes);
        }
        Ok(DetectionOutput { stages, selected, references })
    }
}

/// Weights of the three decoder terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

pub const MATCH_COST: DecoderWeights = DecoderWeights { class: 2.0, l1: 5.0, giou: 2.0 };
pub const DECODER_LOSS: DecoderWeights = DecoderWeights { class: 1.0, l1: 5.0, giou: 2.0 };

/// One ground-truth object in prompt-column terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub bbox: BBox,
    /// Column of the class in the `[Q, K]` score matrix.
    pub column: usize,
}

/// Focal-style alignment cost plus L1 and GIoU costs, `[G, Q]`.
pub fn matching_cost(boxes: &[BBox], logits: &[Vec<f64>], targets: &[Target], w: DecoderWeights) -> Result<Vec<Vec<f64>>> {
    let mut cost = Vec::with_capacity(targets.len());
    for t in targets {
        let mut row = Vec::with_capacity(boxes.len());
        for (b, l) in boxes.iter().zip(logits) {
            let z = l[t.column];
            let class = focal_value(z, 1.0, FOCAL_ALPHA, FOCAL_GAMMA) - focal_value(z, 0.0, FOCAL_ALPHA, FOCAL_GAMMA);
            let l1: f64 = b.to_array().iter().zip(t.bbox.to_array()).map(|(a, c)| (a - c).abs()).sum();
            let g = giou(&b.clamped_unit(), &t.bbox)?;
            row.push(w.class * class + w.l1 * l1 - w.giou * g);
        }
        cost.push(row);
    }
    Ok(cost)
}

/// Matches final-stage predictions to targets.
pub fn match_final<T: Scalar>(s: &Session<T>, out: &DetectionOutput, targets: &[Target]) -> Result<MatchResult> {
    let last = out.last();
    let boxes = boxes_from_tensor(s.value(last.boxes));
    let lv = s.value(last.logits);
    let k = lv.shape()[1];
    let logits: Vec<Vec<f64>> = lv.data().chunks(k).map(|r| r.iter().map(|x| x.f64()).collect()).collect();
    hungarian_match(&matching_cost(&boxes, &logits, targets, MATCH_COST)?)
}

/// Unweighted terms of one stage: focal sum, L1 sum and (1 - GIoU) sum,
/// each divided by `max(1, G)`.
pub struct StageTerms {
    pub class: Var,
    pub l1: Var,
    pub giou: Var,
}

pub fn stage_terms<T: Scalar>(s: &mut Session<T>, stage: StageOutput, targets: &[Target], m: &MatchResult) -> Result<StageTerms> {
    let sh = s.shape(stage.logits).to_vec();
    let norm = 1.0 / (targets.len().max(1) as f64);
    let mut tgt = Tensor::<T>::zeros(sh.clone());
    for &(g, q) in &m.pairs {
        tgt.data_mut()[q * sh[1] + targets[g].column] = T::one();
    }
    let f = s.sigmoid_focal(stage.logits, &tgt, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let f = s.sum(f)?;
    let class = s.scale(f, norm)?;
    if m.pairs.is_empty() {
        let zero = s.constant(Tensor::scalar(T::zero()));
        return Ok(StageTerms { class, l1: zero, giou: zero });
    }
    let queries: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
    let matched: Vec<BBox> = m.pairs.iter().map(|p| targets[p.0].bbox).collect();
    let pred = s.index_select(stage.boxes, 0, &queries)?;
    let gt = s.constant(boxes_tensor(&matched));
    let d = s.sub(pred, gt)?;
    let d = s.abs(d)?;
    let d = s.sum(d)?;
    let l1 = s.scale(d, norm)?;
    let g = giou_rows(s, pred, &matched)?;
    let g = s.neg(g)?;
    let g = s.add_scalar(g, 1.0)?;
    let g = s.sum(g)?;
    let giou = s.scale(g, norm)?;
    Ok(StageTerms { class, l1, giou })
}

/// `w_class * class + w_l1 * l1 + w_giou * giou`
pub fn combine<T: Scalar>(s: &mut Session<T>, terms: &StageTerms, w: DecoderWeights) -> Result<Var> {
    let a = s.scale(terms.class, w.class)?;
    let b = s.scale(terms.l1, w.l1)?;
    let c = s.scale(terms.giou, w.giou)?;
    let ab = s.add(a, b)?;
    Ok(s.add(ab, c)?)
}

/// Per-component totals over stages, for reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DecoderLossParts {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Deep-supervised decoder loss: the final-stage match applied to every
/// stage, weighted 1 / 5 / 2 and summed.
pub fn decoder_loss<T: Scalar>(s: &mut Session<T>, out: &DetectionOutput, targets: &[Target], m: &MatchResult) -> Result<(Var, DecoderLossParts)> {
    let mut total: Option<Var> = None;
    let mut parts = DecoderLossParts::default();
    for &stage in &out.stages {
        let t = stage_terms(s, stage, targets, m)?;
        parts.class += s.value(t.class).item().f64();
        parts.l1 += s.value(t.l1).item().f64();
        parts.giou += s.value(t.giou).item().f64();
        let l = combine(s, &t, DECODER_LOSS)?;
        total = Some(match total {
            Some(acc) => s.add(acc, l)?,
            None => l,
        });
    }
    Ok((total.ok_or_else(|| Error::contract("no decoder stages"))?, parts))
}
