//! Prompt-visual hybrid encoder: cross-modality attention, the progressive
//! single-scale pyramid and the full-scale fusion gate.

use conceptdet_tensor::{Scalar, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{GateOrder, ModelConfig};
use crate::encoders::{map_to_tokens, tokens_to_map, MultiScaleFeatures};
use crate::error::{Error, Result};
use crate::nn::{merge_heads, split_heads, Conv, DeformAttn, Fill, Init, LayerNorm, Linear, Mlp, OffsetInit, Reference};

/// Bidirectional image/prompt attention sharing one logit matrix per head.
#[derive(Debug, Clone)]
pub struct XMha {
    pub img_q: Linear,
    pub prompt_k: Linear,
    pub img_v: Linear,
    pub prompt_v: Linear,
    pub img_out: Linear,
    pub prompt_out: Linear,
    pub heads: usize,
}

impl XMha {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        let mut p = init.sub(name);
        Ok(Self {
            img_q: Linear::new(&mut p, "img_q", d, d, Fill::Xavier)?,
            prompt_k: Linear::new(&mut p, "prompt_k", d, d, Fill::Xavier)?,
            img_v: Linear::new(&mut p, "img_v", d, d, Fill::Xavier)?,
            prompt_v: Linear::new(&mut p, "prompt_v", d, d, Fill::Xavier)?,
            img_out: Linear::new(&mut p, "img_out", d, d, Fill::Zero)?,
            prompt_out: Linear::new(&mut p, "prompt_out", d, d, Fill::Zero)?,
            heads,
        })
    }

    /// `img: [S, D]`, `prompts: [K, D]` to updated copies of both.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, img: Var, prompts: Var) -> Result<(Var, Var)> {
        let (si, sp) = (s.shape(img).to_vec(), s.shape(prompts).to_vec());
        if si.len() != 2 || sp.len() != 2 || si[1] != sp[1] {
            return Err(Error::Tensor(conceptdet_tensor::TensorError::Shape(format!("x-mha: image {si:?} vs prompts {sp:?}"))));
        }
        let dh = si[1] / self.heads;
        let q = self.img_q.forward(s, img)?;
        let k = self.prompt_k.forward(s, prompts)?;
        let vi = self.img_v.forward(s, img)?;
        let vp = self.prompt_v.forward(s, prompts)?;
        let q = split_heads(s, q, self.heads)?;
        let k = split_heads(s, k, self.heads)?;
        let vi = split_heads(s, vi, self.heads)?;
        let vp = split_heads(s, vp, self.heads)?;
        let kt = s.permute(k, &[0, 2, 1])?;
        let a = s.bmm(q, kt)?;
        let a = s.scale(a, 1.0 / (dh as f64).sqrt())?;

        let to_img = s.softmax_last(a)?;
        let di = s.bmm(to_img, vp)?;
        let di = merge_heads(s, di)?;
        let di = self.img_out.forward(s, di)?;

        let at = s.permute(a, &[0, 2, 1])?;
        let to_prompt = s.softmax_last(at)?;
        let dp = s.bmm(to_prompt, vi)?;
        let dp = merge_heads(s, dp)?;
        let dp = self.prompt_out.forward(s, dp)?;

        Ok((s.add(img, di)?, s.add(prompts, dp)?))
    }
}

/// One recorded X-MHA application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionStep {
    /// 1 top-down (including the first C6 fusion), 2 bottom-up, 3 full-scale.
    pub stage: u8,
    /// Pyramid level 3..=6; 0 for the full-scale token set.
    pub scale: u8,
    /// Prompt fusion counter after this step.
    pub l: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionTrace {
    pub steps: Vec<FusionStep>,
}

impl FusionTrace {
    fn record(&mut self, stage: u8, scale: u8) {
        let l = self.steps.len() + 1;
        self.steps.push(FusionStep { stage, scale, l });
    }

    pub fn count(&self) -> usize {
        self.steps.len()
    }
}

/// `ReLU(conv3x3(x) + conv1x1(x) + x)`
#[derive(Debug, Clone)]
pub struct Block {
    pub c3: Conv,
    pub c1: Conv,
}

impl Block {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Result<Self> {
        let mut p = init.sub(name);
        Ok(Self { c3: Conv::new(&mut p, "c3", d, d, 3, 1)?, c1: Conv::new(&mut p, "c1", d, d, 1, 1)? })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let a = self.c3.forward(s, x)?;
        let b = self.c1.forward(s, x)?;
        let y = s.add(a, b)?;
        let y = s.add(y, x)?;
        Ok(s.relu(y)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    TopDown,
    BottomUp,
}

/// Fuses a neighbouring map into `low` and updates the prompts:
/// `C_ij = concat(resize(high), low)`,
/// `(dC, P') = XMHA(Block(Linear(C_ij)), P)`, `out = dC + Linear'(C_ij)`.
#[derive(Debug, Clone)]
pub struct SingleFusionLayer {
    pub down: Option<Conv>,
    pub reduce: Conv,
    pub block: Block,
    pub xmha: XMha,
    pub skip: Conv,
}

impl SingleFusionLayer {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize, dir: Direction) -> Result<Self> {
        let mut p = init.sub(name);
        Ok(Self {
            down: match dir {
                Direction::TopDown => None,
                Direction::BottomUp => Some(Conv::new(&mut p, "down", d, d, 3, 2)?),
            },
            reduce: Conv::new(&mut p, "reduce", 2 * d, d, 1, 1)?,
            block: Block::new(&mut p, "block", d)?,
            xmha: XMha::new(&mut p, "xmha", d, heads)?,
            skip: Conv::new(&mut p, "skip", 2 * d, d, 1, 1)?,
        })
    }

    /// Returns `(C_j^t, P^{l+1})`. With `fuse == false` the X-MHA step is
    /// skipped and the prompts pass through.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, high: Var, low: Var, prompts: Var, fuse: bool) -> Result<(Var, Var)> {
        let (hs, ls) = (s.shape(high).to_vec(), s.shape(low).to_vec());
        let resized = match &self.down {
            None => {
                if hs[1] * 2 != ls[1] || hs[2] * 2 != ls[2] {
                    return Err(Error::contract(format!("top-down fusion needs adjacent strides: {hs:?} -> {ls:?}")));
                }
                s.upsample_nearest(high, 2)?
            }
            Some(conv) => {
                if ls[1] * 2 != hs[1] || ls[2] * 2 != hs[2] {
                    return Err(Error::contract(format!("bottom-up fusion needs adjacent strides: {hs:?} -> {ls:?}")));
                }
                conv.forward(s, high)?
            }
        };
        let cij = s.concat(&[resized, low], 0)?;
        let a = self.reduce.forward(s, cij)?;
        let a = self.block.forward(s, a)?;
        let tokens = map_to_tokens(s, a)?;
        let (dc, p) = if fuse { self.xmha.forward(s, tokens, prompts)? } else { (tokens, prompts) };
        let skip = self.skip.forward(s, cij)?;
        let skip = map_to_tokens(s, skip)?;
        let out = s.add(dc, skip)?;
        Ok((tokens_to_map(s, out, ls[1], ls[2])?, p))
    }
}

/// Progressive single-scale fusion: C6 first, then top-down to C3 and
/// bottom-up back to C6.
#[derive(Debug, Clone)]
pub struct Psf {
    pub c6: XMha,
    pub top_down: Vec<SingleFusionLayer>,
    pub bottom_up: Vec<SingleFusionLayer>,
}

impl Psf {
    pub fn new(init: &mut Init, d: usize, heads: usize) -> Result<Self> {
        let mut p = init.sub("psf");
        let c6 = XMha::new(&mut p, "c6", d, heads)?;
        let top_down = (0..3).map(|i| SingleFusionLayer::new(&mut p, &format!("td{i}"), d, heads, Direction::TopDown)).collect::<Result<_>>()?;
        let bottom_up = (0..3).map(|i| SingleFusionLayer::new(&mut p, &format!("bu{i}"), d, heads, Direction::BottomUp)).collect::<Result<_>>()?;
        Ok(Self { c6, top_down, bottom_up })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, feats: &MultiScaleFeatures, prompts: Var, fuse: bool, trace: &mut FusionTrace) -> Result<(MultiScaleFeatures, Var)> {
        let [c3, c4, c5, c6] = feats.maps;
        let (h6, w6) = feats.shapes[3];
        let (c6_1, mut p) = if fuse {
            let t = map_to_tokens(s, c6)?;
            let (t, p) = self.c6.forward(s, t, prompts)?;
            trace.record(1, 6);
            (tokens_to_map(s, t, h6, w6)?, p)
        } else {
            (c6, prompts)
        };
        let mut step = |s: &mut Session<T>, layer: &SingleFusionLayer, high: Var, low: Var, stage: u8, scale: u8, p: &mut Var| -> Result<Var> {
            let (out, np) = layer.forward(s, high, low, *p, fuse)?;
            if fuse {
                trace.record(stage, scale);
            }
            *p = np;
            Ok(out)
        };
        let c5_1 = step(s, &self.top_down[0], c6_1, c5, 1, 5, &mut p)?;
        let c4_1 = step(s, &self.top_down[1], c5_1, c4, 1, 4, &mut p)?;
        let c3_1 = step(s, &self.top_down[2], c4_1, c3, 1, 3, &mut p)?;
        let c4_2 = step(s, &self.bottom_up[0], c3_1, c4_1, 2, 4, &mut p)?;
        let c5_2 = step(s, &self.bottom_up[1], c4_2, c5_1, 2, 5, &mut p)?;
        let c6_2 = step(s, &self.bottom_up[2], c5_2, c6_1, 2, 6, &mut p)?;
        Ok((MultiScaleFeatures { maps: [c3_1, c4_2, c5_2, c6_2], shapes: feats.shapes }, p))
    }
}

/// Full-scale fusion, the prompt gate, and deformable self-attention over
/// all tokens.
#[derive(Debug, Clone)]
pub struct Mfg {
    pub xmha: XMha,
    pub gate_in: Linear,
    pub gate_out: Linear,
    pub gate_norm: LayerNorm,
    pub attn: DeformAttn,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

/// Normalized centers of every token, scale by scale, row-major.
pub fn token_centers(shapes: &[(usize, usize)]) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for &(h, w) in shapes {
        for i in 0..h {
            for j in 0..w {
                out.push([(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64]);
            }
        }
    }
    out
}

impl Mfg {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        let mut p = init.sub("mfg");
        Ok(Self {
            xmha: XMha::new(&mut p, "xmha", d, cfg.heads)?,
            gate_in: Linear::new(&mut p, "gate_in", d, d, Fill::Xavier)?,
            gate_out: Linear::new(&mut p, "gate_out", d, d, Fill::Xavier)?,
            gate_norm: LayerNorm::new(&mut p, "gate_norm", d)?,
            attn: DeformAttn::new(&mut p, "attn", d, cfg.heads, 4, cfg.points, OffsetInit::Zero)?,
            norm1: LayerNorm::new(&mut p, "norm1", d)?,
            ffn: Mlp::new(&mut p, "ffn", d, d * cfg.ffn_mult, d, Fill::Xavier)?,
            norm2: LayerNorm::new(&mut p, "norm2", d)?,
        })
    }

    /// `LN(Linear(ReLU(Linear(P') * P)))` or the alternative ordering.
    pub fn gate<T: Scalar>(&self, s: &mut Session<T>, fused: Var, prev: Var, order: GateOrder) -> Result<Var> {
        let a = self.gate_in.forward(s, fused)?;
        let g = match order {
            GateOrder::ProductThenRelu => {
                let m = s.mul(a, prev)?;
                s.relu(m)?
            }
            GateOrder::ReluThenProduct => {
                let r = s.relu(a)?;
                s.mul(r, prev)?
            }
        };
        let y = self.gate_out.forward(s, g)?;
        self.gate_norm.forward(s, y)
    }

    /// Deformable self-attention block over `[S, D]` tokens.
    pub fn refine<T: Scalar>(&self, s: &mut Session<T>, tokens: Var, shapes: &[(usize, usize)]) -> Result<Var> {
        let refs = Reference::Points(token_centers(shapes));
        let h = self.attn.forward(s, tokens, &refs, tokens, shapes)?;
        let y = s.add(tokens, h)?;
        let x = self.norm1.forward(s, y)?;
        let h = self.ffn.forward(s, x)?;
        let y = s.add(x, h)?;
        self.norm2.forward(s, y)
    }

    /// Returns `(C_all'', P_end)`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, feats: &MultiScaleFeatures, prompts: Var, cfg: &ModelConfig, trace: &mut FusionTrace) -> Result<(Var, Var)> {
        let c_all = feats.flatten(s)?;
        let (c1, p_end) = if cfg.mfg {
            let (c1, p1) = self.xmha.forward(s, c_all, prompts)?;
            trace.record(3, 0);
            (c1, self.gate(s, p1, prompts, cfg.gate_order)?)
        } else {
            (c_all, prompts)
        };
        Ok((self.refine(s, c1, &feats.shapes)?, p_end))
    }
}

#[derive(Debug, Clone)]
pub struct HybridEncoder {
    pub psf: Psf,
    pub mfg: Mfg,
}

#[derive(Debug, Clone)]
pub struct HybridOutput {
    /// `C_all''`, `[S, D]`.
    pub tokens: Var,
    pub p_end: Var,
    /// Pyramid after PSF, before flattening.
    pub pyramid: MultiScaleFeatures,
    pub trace: FusionTrace,
}

impl HybridEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { psf: Psf::new(init, cfg.dim, cfg.heads)?, mfg: Mfg::new(init, cfg)? })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, feats: &MultiScaleFeatures, prompts: Var, cfg: &ModelConfig) -> Result<HybridOutput> {
        let mut trace = FusionTrace::default();
        let (pyramid, p) = self.psf.forward(s, feats, prompts, cfg.psf, &mut trace)?;
        let (tokens, p_end) = self.mfg.forward(s, &pyramid, p, cfg, &mut trace)?;
        Ok(HybridOutput { tokens, p_end, pyramid, trace })
    }
}

/// Constant `[S, 2]` tensor of token centers, handy for tests.
pub fn token_center_tensor<T: Scalar>(shapes: &[(usize, usize)]) -> Tensor<T> {
    let c = token_centers(shapes);
    Tensor::new(vec![c.len(), 2], c.iter().flatten().map(|&v| T::of(v)).collect()).expect("two per token")
}
