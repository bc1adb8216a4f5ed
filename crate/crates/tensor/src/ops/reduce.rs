use crate::error::{shape_err, Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::ops::shape::split_axis;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

impl<T: Scalar> Graph<T> {
    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, needs))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("sum_axis {axis} out of range for {shape:?}"));
        }
        let (outer, d, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..d {
                let src = &data[(o * d + i) * inner..(o * d + i + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::SumAxis { x, axis }, needs))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let d = *self.shape(x).get(axis).ok_or_else(|| shape_err!("mean_axis {axis} out of range"))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / d as f64)
    }

    /// Maximum over the last dimension; ties resolve to the lowest index.
    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| shape_err!("max_last of a scalar"))?;
        let data = self.value(x).data();
        let rows = data.len() / last;
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &data[r * last..(r + 1) * last];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(row[best]);
            argmax.push(best);
        }
        if self.tracking() {
            for &a in &argmax {
                self.note_branch(a as u64);
            }
        }
        let oshape = shape[..shape.len() - 1].to_vec();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::MaxLast { x, argmax }, needs))
    }

    /// Max-stabilised softmax over the last dimension.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let last = *xv.shape().last().ok_or_else(|| shape_err!("softmax of a scalar"))?;
        if !xv.all_finite() {
            return Err(TensorError::NumericDomain("softmax input contains NaN/Inf".into()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(last) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x }, needs))
    }

    /// Normalise each last-dimension slice to zero mean and unit variance
    /// (biased variance); no affine transform.
    pub fn layer_norm_last(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let last = *xv.shape().last().ok_or_else(|| shape_err!("layer norm of a scalar"))?;
        let e = T::of(eps);
        let n = T::of(last as f64);
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / last);
        for row in out.chunks_mut(last) {
            let mut mean = T::zero();
            for &v in row.iter() {
                mean += v;
            }
            mean = mean / n;
            let mut var = T::zero();
            for &v in row.iter() {
                var += (v - mean) * (v - mean);
            }
            var = var / n;
            let is = T::one() / (var + e).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, inv_std }, needs))
    }
}

pub(crate) fn sum_axis_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], axis: usize) -> Tensor<T> {
    let (outer, d, inner) = split_axis(in_shape, axis);
    let gd = g.data();
    let mut out = Vec::with_capacity(numel(in_shape));
    for o in 0..outer {
        for _ in 0..d {
            out.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

pub(crate) fn max_last_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], argmax: &[usize]) -> Tensor<T> {
    let last = *in_shape.last().expect("non-scalar");
    let mut out = vec![T::zero(); numel(in_shape)];
    for (r, (&a, &gv)) in argmax.iter().zip(g.data()).enumerate() {
        out[r * last + a] = gv;
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let last = *y.shape().last().expect("non-scalar");
    let mut out = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(last).zip(g.data().chunks(last)) {
        let mut dot = T::zero();
        for (&a, &b) in yr.iter().zip(gr) {
            dot += a * b;
        }
        for (&a, &b) in yr.iter().zip(gr) {
            out.push(a * (b - dot));
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

pub(crate) fn layer_norm_backward<T: Scalar>(y: &Tensor<T>, inv_std: &[T], g: &Tensor<T>) -> Tensor<T> {
    let last = *y.shape().last().expect("non-scalar");
    let n = T::of(last as f64);
    let mut out = Vec::with_capacity(y.numel());
    for ((yr, gr), &is) in y.data().chunks(last).zip(g.data().chunks(last)).zip(inv_std) {
        let mut mg = T::zero();
        let mut mgy = T::zero();
        for (&a, &b) in yr.iter().zip(gr) {
            mg += b;
            mgy += a * b;
        }
        mg = mg / n;
        mgy = mgy / n;
        for (&a, &b) in yr.iter().zip(gr) {
            out.push(is * (b - mg - a * mgy));
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}
