//! Training-only supervision: anchor-based dense head with a contrastive
//! classification layer, ATSS-style assignment, and the prompt
//! multi-label loss.

use conceptdet_tensor::{ParamId, Scalar, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::boxes::{giou_rows, iou, BBox};
use crate::decoder::{Target, FOCAL_ALPHA, FOCAL_GAMMA, PRIOR_BIAS};
use crate::encoders::{MultiScaleFeatures, STRIDES};
use crate::error::{Error, Result};
use crate::nn::{Conv, Fill, Init, Linear, Mlp};

pub const ANCHOR_SCALE: f64 = 4.0;
pub const ATSS_TOPK: usize = 9;

/// One square anchor per token, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub stride: usize,
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl Anchor {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.side, self.side)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub image_size: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Anchors sorted by (scale, row, col): center at the token center, side
/// `4 * stride`.
pub fn generate_anchors(shapes: &[(usize, usize)], image_size: usize) -> AnchorSet {
    let mut anchors = Vec::new();
    for (level, &(h, w)) in shapes.iter().enumerate() {
        let stride = STRIDES[level];
        for row in 0..h {
            for col in 0..w {
                anchors.push(Anchor { level, row, col, stride, cx: (col as f64 + 0.5) * stride as f64, cy: (row as f64 + 0.5) * stride as f64, side: ANCHOR_SCALE * stride as f64 });
            }
        }
    }
    AnchorSet { anchors, image_size }
}

/// Per-anchor assignment: the matched GT index (None = background) and the
/// centerness target for positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub gt: Vec<Option<usize>>,
    pub centerness: Vec<f64>,
}

impl Assignment {
    pub fn positives(&self) -> Vec<usize> {
        self.gt.iter().enumerate().filter_map(|(i, g)| g.map(|_| i)).collect()
    }
}

/// `sqrt(min(l, r) / max(l, r) * min(t, b) / max(t, b))` for a point inside a box.
pub fn centerness_target(px: f64, py: f64, b: &BBox) -> f64 {
    let [x0, y0, x1, y1] = b.corners();
    let (l, r, t, bt) = (px - x0, x1 - px, py - y0, y1 - py);
    ((l.min(r) / l.max(r)) * (t.min(bt) / t.max(bt))).sqrt()
}

const INSIDE_EPS: f64 = 0.01;

/// Adaptive training-sample selection. `gt_boxes` are normalized.
///
/// Per GT: the `k` anchors nearest the GT center on every level (ties to the
/// lower index) form the candidates; the IoU threshold is mean + standard
/// deviation (n - 1 denominator, 0 for one candidate) of their IoUs;
/// candidates at or above it whose center lies strictly inside the GT are
/// positive. An anchor positive for several GTs takes the highest-IoU GT,
/// ties to the lower GT index.
pub fn atss_assign(anchors: &AnchorSet, gt_boxes: &[BBox]) -> Assignment {
    let n = anchors.len();
    let scale = anchors.image_size as f64;
    let mut best: Vec<Option<(usize, f64)>> = vec![None; n];
    let levels = anchors.anchors.iter().map(|a| a.level).max().map_or(0, |m| m + 1);
    for (g, gb) in gt_boxes.iter().enumerate() {
        let gp = gb.scaled(scale);
        let mut cand = Vec::new();
        for l in 0..levels {
            let mut idx: Vec<(f64, usize)> = anchors.anchors.iter().enumerate().filter(|(_, a)| a.level == l).map(|(i, a)| ((a.cx - gp.cx).hypot(a.cy - gp.cy), i)).collect();
            idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.extend(idx.into_iter().take(ATSS_TOPK).map(|p| p.1));
        }
        let ious: Vec<f64> = cand.iter().map(|&i| iou(&anchors.anchors[i].bbox(), &gp)).collect();
        let m = ious.len() as f64;
        let mean = ious.iter().sum::<f64>() / m;
        let std = if ious.len() > 1 { (ious.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt() } else { 0.0 };
        let thr = mean + std;
        let [x0, y0, x1, y1] = gp.corners();
        for (&i, &v) in cand.iter().zip(&ious) {
            let a = &anchors.anchors[i];
            let inside = (a.cx - x0).min(a.cy - y0).min(x1 - a.cx).min(y1 - a.cy) > INSIDE_EPS;
            if v >= thr && inside && best[i].is_none_or(|(_, bv)| v > bv) {
                best[i] = Some((g, v));
            }
        }
    }
    let gt: Vec<Option<usize>> = best.iter().map(|b| b.map(|p| p.0)).collect();
    let centerness = gt.iter().zip(&anchors.anchors).map(|(g, a)| g.map_or(0.0, |g| centerness_target(a.cx, a.cy, &gt_boxes[g].scaled(scale)))).collect();
    Assignment { gt, centerness }
}

/// Dense head: contrastive classification over `C_all''` tokens and
/// per-scale conv towers for distances and centerness.
#[derive(Debug, Clone)]
pub struct AuxHead {
    pub contrast: Linear,
    pub bias: ParamId,
    pub tower: Conv,
    pub reg: Conv,
    pub ctr: Conv,
}

pub const AUX_PREFIX: &str = "aux";

/// Raw outputs for every anchor.
#[derive(Debug, Clone, Copy)]
pub struct AuxOutput {
    /// `[A, K]`
    pub logits: Var,
    /// `[A, 4]` left/top/right/bottom distances, normalized.
    pub ltrb: Var,
    /// `[A]`
    pub centerness: Var,
}

impl AuxHead {
    pub fn new(init: &mut Init, d: usize) -> Result<Self> {
        let mut p = init.sub(AUX_PREFIX);
        Ok(Self {
            contrast: Linear::new(&mut p, "contrast", d, d, Fill::Xavier)?,
            bias: p.constant("bias", &[], PRIOR_BIAS)?,
            tower: Conv::new(&mut p, "tower", d, d, 3, 1)?,
            reg: Conv::new(&mut p, "reg", d, 4, 3, 1)?,
            ctr: Conv::new(&mut p, "ctr", d, 1, 3, 1)?,
        })
    }

    /// `s_mn = a^m Linear(P^n) / sqrt(d) + bias`
    pub fn contrastive<T: Scalar>(&self, s: &mut Session<T>, anchors_feat: Var, prompts: Var) -> Result<Var> {
        let d = s.shape(anchors_feat)[1];
        if s.shape(prompts).len() != 2 || s.shape(prompts)[1] != d {
            return Err(Error::Tensor(conceptdet_tensor::TensorError::Shape(format!("contrastive head: {:?} vs {:?}", s.shape(anchors_feat), s.shape(prompts)))));
        }
        let pk = self.contrast.forward(s, prompts)?;
        let pt = s.transpose(pk)?;
        let l = s.matmul(anchors_feat, pt)?;
        let l = s.scale(l, 1.0 / (d as f64).sqrt())?;
        let b = s.param(self.bias);
        Ok(s.add(l, b)?)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, tokens: Var, shapes: [(usize, usize); 4], p_end: Var, image_size: usize) -> Result<AuxOutput> {
        let logits = self.contrastive(s, tokens, p_end)?;
        let maps = MultiScaleFeatures::unflatten(s, tokens, shapes)?;
        let mut regs = Vec::with_capacity(4);
        let mut ctrs = Vec::with_capacity(4);
        let mut scale = Vec::new();
        for (l, &m) in maps.maps.iter().enumerate() {
            let t = self.tower.forward(s, m)?;
            let t = s.relu(t)?;
            let r = self.reg.forward(s, t)?;
            regs.push(crate::encoders::map_to_tokens(s, r)?);
            let c = self.ctr.forward(s, t)?;
            ctrs.push(crate::encoders::map_to_tokens(s, c)?);
            let (h, w) = shapes[l];
            let f = T::of(STRIDES[l] as f64 / image_size as f64);
            scale.extend(std::iter::repeat_n(f, h * w * 4));
        }
        let reg = s.concat(&regs, 0)?;
        let a = s.shape(reg)[0];
        let e = s.exp(reg)?;
        let sc = s.constant(Tensor::new(vec![a, 4], scale)?);
        let ltrb = s.mul(e, sc)?;
        let c = s.concat(&ctrs, 0)?;
        let centerness = s.reshape(c, &[a])?;
        Ok(AuxOutput { logits, ltrb, centerness })
    }
}

/// Weights of the three dense-head terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxWeights {
    pub class: f64,
    pub centerness: f64,
    pub giou: f64,
}

pub const AUX_LOSS: AuxWeights = AuxWeights { class: 6.0, centerness: 6.0, giou: 12.0 };
pub const PROMPT_LOSS_WEIGHT: f64 = 6.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxLossParts {
    pub class: f64,
    pub centerness: f64,
    pub giou: f64,
    pub positives: usize,
}

/// Unweighted dense-head terms: focal sum over all anchors and prompts
/// divided by `max(1, #positives)`, then mean BCE of centerness and mean
/// `1 - GIoU` over positives.
pub struct AuxTerms {
    pub class: Var,
    pub centerness: Var,
    pub giou: Var,
}

pub fn aux_terms<T: Scalar>(s: &mut Session<T>, out: &AuxOutput, anchors: &AnchorSet, assign: &Assignment, targets: &[Target]) -> Result<AuxTerms> {
    let sh = s.shape(out.logits).to_vec();
    let pos = assign.positives();
    let mut tgt = Tensor::<T>::zeros(sh.clone());
    for &i in &pos {
        let g = assign.gt[i].expect("positive");
        tgt.data_mut()[i * sh[1] + targets[g].column] = T::one();
    }
    let f = s.sigmoid_focal(out.logits, &tgt, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let f = s.sum(f)?;
    let class = s.scale(f, 1.0 / pos.len().max(1) as f64)?;
    if pos.is_empty() {
        let zero = s.constant(Tensor::scalar(T::zero()));
        return Ok(AuxTerms { class, centerness: zero, giou: zero });
    }
    let np = pos.len();
    let c = s.index_select(out.centerness, 0, &pos)?;
    let ct = Tensor::new(vec![np], pos.iter().map(|&i| T::of(assign.centerness[i])).collect())?;
    let bce = s.bce_with_logits(c, &ct)?;
    let centerness = s.mean(bce)?;

    let d = s.index_select(out.ltrb, 0, &pos)?;
    let col = |s: &mut Session<T>, j: usize| -> Result<Var> { Ok(s.narrow(d, 1, j, 1)?) };
    let (l, t, r, b) = (col(s, 0)?, col(s, 1)?, col(s, 2)?, col(s, 3)?);
    let size = anchors.image_size as f64;
    let ax = s.constant(Tensor::new(vec![np, 1], pos.iter().map(|&i| T::of(anchors.anchors[i].cx / size)).collect())?);
    let ay = s.constant(Tensor::new(vec![np, 1], pos.iter().map(|&i| T::of(anchors.anchors[i].cy / size)).collect())?);
    let rl = s.sub(r, l)?;
    let rl = s.scale(rl, 0.5)?;
    let cx = s.add(ax, rl)?;
    let bt = s.sub(b, t)?;
    let bt = s.scale(bt, 0.5)?;
    let cy = s.add(ay, bt)?;
    let w = s.add(l, r)?;
    let h = s.add(t, b)?;
    let pred = s.concat(&[cx, cy, w, h], 1)?;
    let gts: Vec<BBox> = pos.iter().map(|&i| targets[assign.gt[i].expect("positive")].bbox).collect();
    let g = giou_rows(s, pred, &gts)?;
    let g = s.neg(g)?;
    let g = s.add_scalar(g, 1.0)?;
    let giou = s.mean(g)?;
    Ok(AuxTerms { class, centerness, giou })
}

pub fn combine_aux<T: Scalar>(s: &mut Session<T>, t: &AuxTerms, w: AuxWeights) -> Result<Var> {
    let a = s.scale(t.class, w.class)?;
    let b = s.scale(t.centerness, w.centerness)?;
    let c = s.scale(t.giou, w.giou)?;
    let ab = s.add(a, b)?;
    Ok(s.add(ab, c)?)
}

pub fn aux_loss<T: Scalar>(s: &mut Session<T>, out: &AuxOutput, anchors: &AnchorSet, assign: &Assignment, targets: &[Target]) -> Result<(Var, AuxLossParts)> {
    let t = aux_terms(s, out, anchors, assign, targets)?;
    let parts = AuxLossParts { class: s.value(t.class).item().f64(), centerness: s.value(t.centerness).item().f64(), giou: s.value(t.giou).item().f64(), positives: assign.positives().len() };
    Ok((combine_aux(s, &t, AUX_LOSS)?, parts))
}

/// MLP over fused prompts predicting whether each prompt is present.
#[derive(Debug, Clone)]
pub struct PromptHead {
    pub mlp: Mlp,
}

impl PromptHead {
    pub fn new(init: &mut Init, d: usize) -> Result<Self> {
        let mut p = init.sub("prompt_head");
        Ok(Self { mlp: Mlp::new(&mut p, "mlp", d, d, 1, Fill::Xavier)? })
    }

    pub fn logits<T: Scalar>(&self, s: &mut Session<T>, p_end: Var) -> Result<Var> {
        let k = s.shape(p_end)[0];
        let l = self.mlp.forward(s, p_end)?;
        Ok(s.reshape(l, &[k])?)
    }
}

/// Mean binary cross-entropy of prompt logits against positivity bits.
pub fn prompt_multilabel_loss<T: Scalar>(s: &mut Session<T>, logits: Var, g: &[bool]) -> Result<Var> {
    if s.shape(logits) != [g.len()] {
        return Err(Error::contract(format!("prompt loss: logits {:?} vs {} labels", s.shape(logits), g.len())));
    }
    let t = Tensor::new(vec![g.len()], g.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())?;
    let l = s.bce_with_logits(logits, &t)?;
    Ok(s.mean(l)?)
}
