//! Parameterized layers. Layers own only [`ParamId`]s; values live in a
//! [`ParamStore`] so the same model runs at 32 or 64 bits.

use conceptdet_tensor::{ParamId, ParamStore, Scalar, Session, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Parameter initializer scoped to a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        Init { store: self.store, rng: self.rng, prefix: format!("{}{}.", self.prefix, name) }
    }

    fn insert(&mut self, name: &str, t: Tensor<f32>) -> Result<ParamId> {
        Ok(self.store.insert(format!("{}{}", self.prefix, name), t)?)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound) as f32).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(self.rng) as f32).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape.to_vec(), value))
    }

    pub fn values(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<ParamId> {
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fill {
    Xavier,
    Zero,
}

/// `y = x W + b` over the last axis of a 2-D input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, din: usize, dout: usize, fill: Fill) -> Result<Self> {
        let mut p = init.sub(name);
        let w = match fill {
            Fill::Xavier => p.uniform("w", &[din, dout], (6.0 / (din + dout) as f64).sqrt())?,
            Fill::Zero => p.constant("w", &[din, dout], 0.0)?,
        };
        let b = p.constant("b", &[dout], 0.0)?;
        Ok(Self { w, b, din, dout })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        let y = s.matmul(x, w)?;
        Ok(s.add(y, b)?)
    }
}

/// Square convolution with bias, padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub k: usize,
}

impl Conv {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let mut p = init.sub(name);
        let w = p.uniform("w", &[cout, cin, k, k], (6.0 / (cin * k * k) as f64).sqrt())?;
        let b = p.constant("b", &[cout], 0.0)?;
        Ok(Self { w, b, stride, k })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        Ok(s.conv2d(x, w, Some(b), self.stride, self.k / 2)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Result<Self> {
        let mut p = init.sub(name);
        Ok(Self { gamma: p.constant("gamma", &[d], 1.0)?, beta: p.constant("beta", &[d], 0.0)? })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        let y = s.layer_norm_last(x, LN_EPS)?;
        let y = s.mul(y, g)?;
        Ok(s.add(y, b)?)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, din: usize, hidden: usize, dout: usize, last: Fill) -> Result<Self> {
        let mut p = init.sub(name);
        Ok(Self { fc1: Linear::new(&mut p, "fc1", din, hidden, Fill::Xavier)?, fc2: Linear::new(&mut p, "fc2", hidden, dout, last)? })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.relu(h)?;
        self.fc2.forward(s, h)
    }
}

/// `[N, D] -> [H, N, D/H]`
pub fn split_heads<T: Scalar>(s: &mut Session<T>, x: Var, heads: usize) -> Result<Var> {
    let (n, d) = (s.shape(x)[0], s.shape(x)[1]);
    let y = s.reshape(x, &[n, heads, d / heads])?;
    Ok(s.permute(y, &[1, 0, 2])?)
}

/// `[H, N, D/H] -> [N, D]`
pub fn merge_heads<T: Scalar>(s: &mut Session<T>, x: Var) -> Result<Var> {
    let (h, n, dh) = (s.shape(x)[0], s.shape(x)[1], s.shape(x)[2]);
    let y = s.permute(x, &[1, 0, 2])?;
    Ok(s.reshape(y, &[n, h * dh])?)
}

/// Scaled dot-product multi-head attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        let mut p = init.sub(name);
        Ok(Self {
            q: Linear::new(&mut p, "q", d, d, Fill::Xavier)?,
            k: Linear::new(&mut p, "k", d, d, Fill::Xavier)?,
            v: Linear::new(&mut p, "v", d, d, Fill::Xavier)?,
            out: Linear::new(&mut p, "out", d, d, Fill::Xavier)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, query: Var, key: Var, value: Var) -> Result<Var> {
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, key)?;
        let v = self.v.forward(s, value)?;
        let dh = s.shape(q)[1] / self.heads;
        let q = split_heads(s, q, self.heads)?;
        let k = split_heads(s, k, self.heads)?;
        let v = split_heads(s, v, self.heads)?;
        let kt = s.permute(k, &[0, 2, 1])?;
        let logits = s.bmm(q, kt)?;
        let logits = s.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let attn = s.softmax_last(logits)?;
        let o = s.bmm(attn, v)?;
        let o = merge_heads(s, o)?;
        self.out.forward(s, o)
    }
}

/// Initial pattern of the sampling-offset bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetInit {
    /// All points start at the reference.
    Zero,
    /// Points start on a ring around the reference, one direction per
    /// (head, point) pair.
    Ring,
}

/// How reference points scale the predicted offsets.
#[derive(Debug, Clone)]
pub enum Reference {
    /// Normalized centers; offsets are in pixels of each level.
    Points(Vec<[f64; 2]>),
    /// Normalized `cxcywh` boxes; offsets are fractions of the half box size.
    Boxes(Vec<[f64; 4]>),
}

impl Reference {
    fn len(&self) -> usize {
        match self {
            Reference::Points(p) => p.len(),
            Reference::Boxes(b) => b.len(),
        }
    }
}

/// Multi-scale deformable attention over a flattened token set.
#[derive(Debug, Clone)]
pub struct DeformAttn {
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformAttn {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize, levels: usize, points: usize, start: OffsetInit) -> Result<Self> {
        let mut p = init.sub(name);
        let offsets = Linear::new(&mut p, "offsets", d, heads * levels * points * 2, Fill::Zero)?;
        if start == OffsetInit::Ring {
            let mut bias = Vec::with_capacity(heads * levels * points * 2);
            for h in 0..heads {
                for _ in 0..levels {
                    for k in 0..points {
                        let theta = std::f64::consts::TAU * (h * points + k) as f64 / (heads * points) as f64;
                        bias.push((0.5 * theta.cos()) as f32);
                        bias.push((0.5 * theta.sin()) as f32);
                    }
                }
            }
            p.store.set(offsets.b, Tensor::new(vec![bias.len()], bias)?)?;
        }
        Ok(Self {
            offsets,
            weights: Linear::new(&mut p, "weights", d, heads * levels * points, Fill::Zero)?,
            value: Linear::new(&mut p, "value", d, d, Fill::Xavier)?,
            out: Linear::new(&mut p, "out", d, d, Fill::Xavier)?,
            heads,
            levels,
            points,
        })
    }

    /// `query: [N, D]`, `source: [S, D]` tokens of `levels` maps flattened
    /// row-major and concatenated in level order, `shapes[l] = (h, w)`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, query: Var, reference: &Reference, source: Var, shapes: &[(usize, usize)]) -> Result<Var> {
        let n = s.shape(query)[0];
        let d = s.shape(source)[1];
        let (nh, nl, np) = (self.heads, self.levels, self.points);
        let dh = d / nh;
        if reference.len() != n || shapes.len() != nl {
            return Err(crate::Error::contract(format!("deformable attention: {} queries vs {} references, {} levels vs {} maps", n, reference.len(), nl, shapes.len())));
        }

        // Pixel coordinates: base + offset * scale, both laid out [N, H, L, P, 2].
        let total = n * nh * nl * np * 2;
        let mut base = Vec::with_capacity(total);
        let mut scale = Vec::with_capacity(total);
        for i in 0..n {
            for _ in 0..nh {
                for &(hl, wl) in shapes {
                    let (cx, cy, sx, sy) = match reference {
                        Reference::Points(p) => (p[i][0], p[i][1], 1.0, 1.0),
                        Reference::Boxes(b) => (b[i][0], b[i][1], 0.5 * b[i][2] * wl as f64, 0.5 * b[i][3] * hl as f64),
                    };
                    for _ in 0..np {
                        base.push(T::of(cx * wl as f64 - 0.5));
                        base.push(T::of(cy * hl as f64 - 0.5));
                        scale.push(T::of(sx));
                        scale.push(T::of(sy));
                    }
                }
            }
        }
        let shape5 = vec![n, nh, nl, np, 2];
        let base = s.constant(Tensor::new(shape5.clone(), base)?);
        let scale = s.constant(Tensor::new(shape5.clone(), scale)?);
        let off = self.offsets.forward(s, query)?;
        let off = s.reshape(off, &shape5)?;
        let off = s.mul(off, scale)?;
        let pts = s.add(off, base)?;
        let pts = s.permute(pts, &[1, 2, 0, 3, 4])?;
        let pts = s.reshape(pts, &[nh * nl, n * np, 2])?;

        let w = self.weights.forward(s, query)?;
        let w = s.reshape(w, &[n * nh, nl * np])?;
        let w = s.softmax_last(w)?;
        let w = s.reshape(w, &[n, nh, nl, np])?;
        let w = s.permute(w, &[1, 2, 0, 3])?;
        let w = s.reshape(w, &[nh * nl, n, 1, np])?;

        let value = self.value.forward(s, source)?;
        let mut maps = Vec::with_capacity(nl);
        let mut start = 0;
        for &(hl, wl) in shapes {
            let v = s.narrow(value, 0, start, hl * wl)?;
            maps.push(s.reshape(v, &[hl, wl, d])?);
            start += hl * wl;
        }

        let mut heads = Vec::with_capacity(nh);
        for h in 0..nh {
            let mut acc: Option<Var> = None;
            for (l, &map) in maps.iter().enumerate() {
                let slot = h * nl + l;
                let mh = s.narrow(map, 2, h * dh, dh)?;
                let p = s.narrow(pts, 0, slot, 1)?;
                let p = s.reshape(p, &[n * np, 2])?;
                let sampled = s.bilinear_sample_hwc(mh, p)?;
                let sampled = s.reshape(sampled, &[n, np, dh])?;
                let wl = s.narrow(w, 0, slot, 1)?;
                let wl = s.reshape(wl, &[n, 1, np])?;
                let o = s.bmm(wl, sampled)?;
                let o = s.reshape(o, &[n, dh])?;
                acc = Some(match acc {
                    Some(a) => s.add(a, o)?,
                    None => o,
                });
            }
            heads.push(acc.expect("at least one level"));
        }
        let o = s.concat(&heads, 1)?;
        self.out.forward(s, o)
    }
}

/// Uniform [-bound, bound] helper used by tests and generators.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect()).expect("consistent shape")
}
