use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Split `shape` around `axis` into (outer, dim, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != xv.numel() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", xv.shape()));
        }
        let t = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        let needs = self.needs_grad(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err!("concat mismatch {s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                let data = self.value(v).data();
                out.extend_from_slice(&data[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let needs = self.any_grad(xs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec(), axis }, needs))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let (outer, d, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Narrow { x, axis, start }, needs))
    }

    /// Gather entries along `axis`; indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(shape_err!("index_select on axis {axis} of {shape:?} with {} indices", indices.len()));
        }
        let (outer, d, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * d + i) * inner;
                out.extend_from_slice(&data[base..base + inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = indices.len();
        let needs = self.needs_grad(x);
        let op = Op::IndexSelect { x, axis, indices: indices.to_vec() };
        Ok(self.push(Tensor::from_parts(oshape, out), op, needs))
    }

    /// Nearest-neighbour upsampling of a `[C,H,W]` map by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(shape_err!("upsample_nearest needs [C,H,W], got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                let row = &data[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
                for xo in 0..ow {
                    out.push(row[xo / factor]);
                }
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::from_parts(vec![c, oh, ow], out), Op::Upsample { x, factor }, needs))
    }
}

pub(crate) fn concat_backward<T: Scalar>(g: &Tensor<T>, shapes: &[&[usize]], axis: usize) -> Vec<Tensor<T>> {
    let (outer, total, inner) = split_axis(g.shape(), axis);
    let data = g.data();
    let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
    for o in 0..outer {
        let mut off = o * total * inner;
        for (part, s) in parts.iter_mut().zip(shapes) {
            let n = s[axis] * inner;
            part.extend_from_slice(&data[off..off + n]);
            off += n;
        }
    }
    parts.into_iter().zip(shapes).map(|(p, s)| Tensor::from_parts(s.to_vec(), p)).collect()
}

pub(crate) fn narrow_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let (outer, d, inner) = split_axis(in_shape, axis);
    let len = g.shape()[axis];
    let mut out = vec![T::zero(); numel(in_shape)];
    let gd = g.data();
    for o in 0..outer {
        let dst = o * d * inner + start * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

pub(crate) fn index_select_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], axis: usize, indices: &[usize]) -> Tensor<T> {
    let (outer, d, inner) = split_axis(in_shape, axis);
    let mut out = vec![T::zero(); numel(in_shape)];
    let gd = g.data();
    let k = indices.len();
    for o in 0..outer {
        for (j, &i) in indices.iter().enumerate() {
            let dst = (o * d + i) * inner;
            let src = (o * k + j) * inner;
            for t in 0..inner {
                out[dst + t] += gd[src + t];
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

pub(crate) fn upsample_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], factor: usize) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); c * h * w];
    let gd = g.data();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * h + y / factor) * w + x / factor] += gd[(ch * oh + y) * ow + x];
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}
