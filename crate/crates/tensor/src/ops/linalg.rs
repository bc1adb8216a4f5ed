use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, needs))
    }

    /// Batched matmul `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err!("bmm {sa:?} x {sb:?}"));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            gemm_nn(&av[i * m * k..(i + 1) * m * k], &bv[i * k * n..(i + 1) * k * n], m, k, n, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![bt, m, n], out), Op::Bmm { a, b }, needs))
    }

    /// Reorder axes; `axes[i]` is the input axis placed at output position `i`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("invalid permutation {axes:?} for shape {shape:?}"));
        }
        let out = permute_data(self.value(x), axes);
        let needs = self.needs_grad(x);
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, needs))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(shape_err!("transpose needs 2-D, got {:?}", self.shape(x)));
        }
        self.permute(x, &[1, 0])
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_data<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let data = x.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn permute_backward<T: Scalar>(g: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let mut inverse = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    permute_data(g, &inverse)
}

pub(crate) fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>, need_a: bool, need_b: bool) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let ga = need_a.then(|| {
        let mut out = vec![T::zero(); m * k];
        gemm_nt(g.data(), b.data(), m, n, k, &mut out);
        Tensor::from_parts(vec![m, k], out)
    });
    let gb = need_b.then(|| {
        let mut out = vec![T::zero(); k * n];
        gemm_tn(a.data(), g.data(), m, k, n, &mut out);
        Tensor::from_parts(vec![k, n], out)
    });
    (ga, gb)
}

pub(crate) fn bmm_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>, need_a: bool, need_b: bool) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (bt, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let (av, bv, gv) = (a.data(), b.data(), g.data());
    let ga = need_a.then(|| {
        let mut out = vec![T::zero(); bt * m * k];
        for i in 0..bt {
            gemm_nt(&gv[i * m * n..(i + 1) * m * n], &bv[i * k * n..(i + 1) * k * n], m, n, k, &mut out[i * m * k..(i + 1) * m * k]);
        }
        Tensor::from_parts(a.shape().to_vec(), out)
    });
    let gb = need_b.then(|| {
        let mut out = vec![T::zero(); bt * k * n];
        for i in 0..bt {
            gemm_tn(&av[i * m * k..(i + 1) * m * k], &gv[i * m * n..(i + 1) * m * n], m, k, n, &mut out[i * k * n..(i + 1) * k * n]);
        }
        Tensor::from_parts(b.shape().to_vec(), out)
    });
    (ga, gb)
}
