//! Concept-prompt sources: visual examples and learned embeddings. Text
//! prompts come from [`crate::encoders::TextEncoder`].

use std::collections::BTreeMap;

use conceptdet_tensor::{ParamId, Scalar, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::encoders::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::nn::{DeformAttn, Fill, Init, LayerNorm, Linear, Mlp, OffsetInit, Reference};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Text,
    Visual,
    Optimized,
}

/// `K` prompt rows of width `D` in canonical class order.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub p: Var,
    pub class_ids: Vec<usize>,
    pub sources: Vec<PromptSource>,
    /// Positivity bit per prompt; `None` at inference.
    pub positive: Option<Vec<bool>>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

pub const SINCOS_WIDTH: usize = 128;
const FREQS: usize = 16;
const TEMPERATURE: f64 = 20.0;

/// Sine-cosine encoding of normalized cxcywh boxes, `[N, 128]`.
///
/// Each coordinate c gives `sin(w_i c)` for i in 0..16 followed by
/// `cos(w_i c)`, with `w_i = 2 pi / 20^(i / 16)`.
pub fn encode_boxes_sincos(boxes: &[BBox]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(boxes.len() * SINCOS_WIDTH);
    for b in boxes {
        for c in b.to_array() {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::input(format!("box coordinate {c} outside [0, 1]")));
            }
            let phases: Vec<f64> = (0..FREQS).map(|i| c * std::f64::consts::TAU / TEMPERATURE.powf(i as f64 / FREQS as f64)).collect();
            out.extend(phases.iter().map(|p| p.sin()));
            out.extend(phases.iter().map(|p| p.cos()));
        }
    }
    Ok(out)
}

pub fn sincos_tensor<T: Scalar>(boxes: &[BBox]) -> Result<Tensor<T>> {
    let v = encode_boxes_sincos(boxes)?;
    Ok(Tensor::new(vec![boxes.len(), SINCOS_WIDTH], v.into_iter().map(T::of).collect())?)
}

#[derive(Debug, Clone)]
pub struct VisualPromptLayer {
    pub attn: DeformAttn,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

/// Boxes to one prompt per class: sincos encoding, stacked deformable
/// cross-attention over the image features, channel concat of every
/// layer's output, then linear + layer norm + mean over the class's boxes.
#[derive(Debug, Clone)]
pub struct VisualPromptEncoder {
    pub query: Linear,
    pub query_pos: Linear,
    pub layers: Vec<VisualPromptLayer>,
    pub aggregate: Linear,
    pub norm: LayerNorm,
}

pub const VISUAL_PREFIX: &str = "visual";

impl VisualPromptEncoder {
    pub fn new(init: &mut Init, d: usize, heads: usize, points: usize, layers: usize, ffn_mult: usize) -> Result<Self> {
        let mut p = init.sub(VISUAL_PREFIX);
        let mut ls = Vec::with_capacity(layers);
        for i in 0..layers {
            let mut q = p.sub(&format!("layer{i}"));
            ls.push(VisualPromptLayer {
                attn: DeformAttn::new(&mut q, "attn", d, heads, 4, points, OffsetInit::Ring)?,
                norm1: LayerNorm::new(&mut q, "norm1", d)?,
                ffn: Mlp::new(&mut q, "ffn", d, d * ffn_mult, d, Fill::Xavier)?,
                norm2: LayerNorm::new(&mut q, "norm2", d)?,
            });
        }
        Ok(Self {
            query: Linear::new(&mut p, "query", SINCOS_WIDTH, d, Fill::Xavier)?,
            query_pos: Linear::new(&mut p, "query_pos", SINCOS_WIDTH, d, Fill::Xavier)?,
            aggregate: Linear::new(&mut p, "aggregate", d * layers, d, Fill::Xavier)?,
            norm: LayerNorm::new(&mut p, "norm", d)?,
            layers: ls,
        })
    }

    /// Per-box features `[N, D]` before class pooling.
    pub fn box_features<T: Scalar>(&self, s: &mut Session<T>, boxes: &[BBox], feats: &MultiScaleFeatures, tokens: Var) -> Result<Var> {
        if boxes.is_empty() {
            return Err(Error::input("visual prompt needs at least one box"));
        }
        let r = s.constant(sincos_tensor(boxes)?);
        let mut x = self.query.forward(s, r)?;
        let pos = self.query_pos.forward(s, r)?;
        let reference = Reference::Boxes(boxes.iter().map(BBox::to_array).collect());
        let mut outs = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let qp = s.add(x, pos)?;
            let h = l.attn.forward(s, qp, &reference, tokens, &feats.shapes)?;
            let y = s.add(x, h)?;
            x = l.norm1.forward(s, y)?;
            let h = l.ffn.forward(s, x)?;
            let y = s.add(x, h)?;
            x = l.norm2.forward(s, y)?;
            outs.push(x);
        }
        let cat = s.concat(&outs, 1)?;
        let y = self.aggregate.forward(s, cat)?;
        self.norm.forward(s, y)
    }

    /// One prompt per distinct class in ascending class order.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, boxes: &[BBox], classes: &[usize], feats: &MultiScaleFeatures, tokens: Var) -> Result<PromptSet> {
        if boxes.len() != classes.len() {
            return Err(Error::input(format!("{} boxes but {} class labels", boxes.len(), classes.len())));
        }
        let per_box = self.box_features(s, boxes, feats, tokens)?;
        let d = s.shape(per_box)[1];
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in classes.iter().enumerate() {
            groups.entry(c).or_default().push(i);
        }
        let mut rows = Vec::with_capacity(groups.len());
        for idx in groups.values() {
            let g = s.index_select(per_box, 0, idx)?;
            let m = s.mean_axis(g, 0)?;
            rows.push(s.reshape(m, &[1, d])?);
        }
        let p = s.concat(&rows, 0)?;
        let class_ids: Vec<usize> = groups.keys().copied().collect();
        Ok(PromptSet { p, sources: vec![PromptSource::Visual; class_ids.len()], class_ids, positive: None })
    }
}

/// `mean((P_v - P_t)^2)` over rows and channels, plus the decoder loss.
/// Returns `(total, mse)`.
pub fn visual_prompt_loss<T: Scalar>(s: &mut Session<T>, pv: Var, pt: Var, decoder_loss: Var) -> Result<(Var, Var)> {
    if s.shape(pv) != s.shape(pt) || s.shape(pv).len() != 2 {
        return Err(Error::Tensor(conceptdet_tensor::TensorError::Shape(format!("visual prompt loss: {:?} vs {:?}", s.shape(pv), s.shape(pt)))));
    }
    let diff = s.sub(pv, pt)?;
    let sq = s.mul(diff, diff)?;
    let mse = s.mean(sq)?;
    let total = s.add(mse, decoder_loss)?;
    Ok((total, mse))
}

/// Class id to the prompt rows that represent it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperClassMap {
    pub entries: Vec<(usize, Vec<usize>)>,
}

impl SuperClassMap {
    /// `M` consecutive rows per class, classes in the given order.
    pub fn contiguous(classes: &[usize], m: usize) -> Self {
        Self { entries: classes.iter().enumerate().map(|(i, &c)| (c, (i * m..(i + 1) * m).collect())).collect() }
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn rows(&self) -> usize {
        self.entries.iter().map(|e| e.1.len()).sum()
    }

    /// Row lists are non-empty, disjoint, and cover exactly `0..columns`.
    pub fn validate(&self, columns: usize) -> Result<()> {
        let mut seen = vec![false; columns];
        for (c, rows) in &self.entries {
            if rows.is_empty() {
                return Err(Error::contract(format!("class {c} has no prompt rows")));
            }
            for &r in rows {
                if r >= columns || std::mem::replace(&mut seen[r], true) {
                    return Err(Error::contract(format!("class {c}: row {r} missing or shared")));
                }
            }
        }
        if let Some(r) = seen.iter().position(|x| !x) {
            return Err(Error::contract(format!("prompt column {r} is not mapped to any class")));
        }
        Ok(())
    }
}

/// Per class, the element-wise max over its prompt columns: `[Q, R] -> [Q, K]`.
pub fn superclass_scores<T: Scalar>(s: &mut Session<T>, raw: Var, map: &SuperClassMap) -> Result<Var> {
    let sh = s.shape(raw).to_vec();
    if sh.len() != 2 {
        return Err(Error::contract(format!("superclass scores expect [Q, R], got {sh:?}")));
    }
    map.validate(sh[1])?;
    let q = sh[0];
    let k = map.entries.len();
    let m = map.entries[0].1.len();
    if map.entries.iter().all(|e| e.1.len() == m) {
        let order: Vec<usize> = map.entries.iter().flat_map(|e| e.1.iter().copied()).collect();
        let g = s.index_select(raw, 1, &order)?;
        let g = s.reshape(g, &[q * k, m])?;
        let mx = s.max_last(g)?;
        return Ok(s.reshape(mx, &[q, k])?);
    }
    let mut cols = Vec::with_capacity(k);
    for (_, rows) in &map.entries {
        let g = s.index_select(raw, 1, rows)?;
        let mx = s.max_last(g)?;
        cols.push(s.reshape(mx, &[q, 1])?);
    }
    Ok(s.concat(&cols, 1)?)
}

pub const OPTIMIZED_PREFIX: &str = "optimized";

/// Learnable prompt rows with their class mapping.
#[derive(Debug, Clone)]
pub struct OptimizedPrompts {
    pub embed: ParamId,
    pub map: SuperClassMap,
}

/// `|classes| * M` rows from N(0, 0.02).
pub fn init_optimized_prompts(init: &mut Init, classes: &[usize], m: usize, d: usize) -> Result<OptimizedPrompts> {
    if m == 0 || classes.is_empty() {
        return Err(Error::input("optimized prompts need M >= 1 and at least one class"));
    }
    let mut p = init.sub(OPTIMIZED_PREFIX);
    let embed = p.normal("embed", &[classes.len() * m, d], 0.02)?;
    Ok(OptimizedPrompts { embed, map: SuperClassMap::contiguous(classes, m) })
}

impl OptimizedPrompts {
    pub fn prompt_set<T: Scalar>(&self, s: &mut Session<T>) -> PromptSet {
        let p = s.param(self.embed);
        let mut class_ids = vec![0; self.map.rows()];
        for (c, rows) in &self.map.entries {
            for &r in rows {
                class_ids[r] = *c;
            }
        }
        PromptSet { p, sources: vec![PromptSource::Optimized; class_ids.len()], class_ids, positive: None }
    }
}
