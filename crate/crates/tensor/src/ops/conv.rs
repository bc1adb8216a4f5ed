use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::ops::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

/// Unfold `[C,H,W]` into columns `[C*k*k, OH*OW]`.
fn im2col<T: Scalar>(x: &[T], g: &Geom) -> Vec<T> {
    let cols = g.oh * g.ow;
    let mut out = vec![T::zero(); g.c * g.k * g.k * cols];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(cols_data: &[T], g: &Geom) -> Vec<T> {
    let cols = g.oh * g.ow;
    let mut out = vec![T::zero(); g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            out[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn geometry(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Geom> {
    if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
        return Err(shape_err!("conv2d input {xs:?} with kernel {ws:?}"));
    }
    let k = ws[2];
    if k.is_multiple_of(2) {
        return Err(shape_err!("conv2d kernel size must be odd, got {k}"));
    }
    if !(1..=2).contains(&stride) {
        return Err(shape_err!("conv2d stride must be 1 or 2, got {stride}"));
    }
    let oh = out_size(xs[1], k, stride, pad).ok_or_else(|| shape_err!("conv2d kernel larger than input"))?;
    let ow = out_size(xs[2], k, stride, pad).ok_or_else(|| shape_err!("conv2d kernel larger than input"))?;
    Ok(Geom { c: xs[0], h: xs[1], w: xs[2], k, oh, ow, stride, pad })
}

impl<T: Scalar> Graph<T> {
    /// 2-D cross-correlation of `x: [C_in,H,W]` with `w: [C_out,C_in,k,k]`,
    /// zero padding `pad`, optional per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let g = geometry(self.shape(x), self.shape(w), stride, pad)?;
        let co = self.shape(w)[0];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err!("conv2d bias {:?}, expected [{co}]", self.shape(b)));
            }
        }
        let cols = im2col(self.value(x).data(), &g);
        let n = g.oh * g.ow;
        let mut out = vec![T::zero(); co * n];
        if let Some(b) = b {
            for (o, &bv) in self.value(b).data().iter().enumerate() {
                out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = bv);
            }
        }
        gemm_nn(self.value(w).data(), &cols, co, g.c * g.k * g.k, n, &mut out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let needs = self.any_grad(&inputs);
        let t = Tensor::from_parts(vec![co, g.oh, g.ow], out);
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, needs))
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, gout: &Tensor<T>, stride: usize, pad: usize, need_x: bool, need_w: bool) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = geometry(x.shape(), w.shape(), stride, pad).expect("validated in forward");
    let co = w.shape()[0];
    let kk = g.c * g.k * g.k;
    let n = g.oh * g.ow;
    let gw = need_w.then(|| {
        let cols = im2col(x.data(), &g);
        let mut out = vec![T::zero(); co * kk];
        gemm_nt(gout.data(), &cols, co, n, kk, &mut out);
        Tensor::from_parts(w.shape().to_vec(), out)
    });
    let gx = need_x.then(|| {
        let mut dcols = vec![T::zero(); kk * n];
        gemm_tn(w.data(), gout.data(), co, kk, n, &mut dcols);
        Tensor::from_parts(x.shape().to_vec(), col2im(&dcols, &g))
    });
    (gx, gw)
}

pub(crate) fn bias_backward<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let co = g.shape()[0];
    let n = g.numel() / co;
    let data = g
        .data()
        .chunks(n)
        .map(|c| {
            let mut s = T::zero();
            for &v in c {
                s += v;
            }
            s
        })
        .collect();
    Tensor::from_parts(vec![co], data)
}
