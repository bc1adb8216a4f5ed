use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// `[C,H,W]`
    ChannelsFirst,
    /// `[H,W,C]`
    ChannelsLast,
}

struct MapView {
    c: usize,
    h: usize,
    w: usize,
    layout: Layout,
}

impl MapView {
    fn new(shape: &[usize], layout: Layout) -> Result<Self> {
        if shape.len() != 3 {
            return Err(shape_err!("bilinear sampling needs a 3-D map, got {shape:?}"));
        }
        Ok(match layout {
            Layout::ChannelsFirst => Self { c: shape[0], h: shape[1], w: shape[2], layout },
            Layout::ChannelsLast => Self { c: shape[2], h: shape[0], w: shape[1], layout },
        })
    }

    /// (offset of channel 0, channel stride) for pixel (row, col).
    #[inline]
    fn base(&self, row: usize, col: usize) -> (usize, usize) {
        match self.layout {
            Layout::ChannelsFirst => (row * self.w + col, self.h * self.w),
            Layout::ChannelsLast => ((row * self.w + col) * self.c, 1),
        }
    }
}

/// The up-to-four in-range neighbours of a point with their weights and the
/// derivatives of those weights with respect to x and y.
struct Corners {
    items: [(usize, usize, f64, f64, f64); 4],
    len: usize,
}

fn corners(x: f64, y: f64, h: usize, w: usize) -> Corners {
    let mut out = Corners { items: [(0, 0, 0.0, 0.0, 0.0); 4], len: 0 };
    if !x.is_finite() || !y.is_finite() {
        return out;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let cand = [(0.0, 0.0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)), (1.0, 0.0, fx * (1.0 - fy), 1.0 - fy, -fx), (0.0, 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx), (1.0, 1.0, fx * fy, fy, fx)];
    for (dx, dy, wt, dwx, dwy) in cand {
        let (cx, cy) = (x0 + dx, y0 + dy);
        if cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 {
            out.items[out.len] = (cy as usize, cx as usize, wt, dwx, dwy);
            out.len += 1;
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Bilinear interpolation of `map: [C,H,W]` at continuous pixel
    /// coordinates `points: [N,2]` given as `(x, y)`; pixel `(i, j)` sits at
    /// `x = j, y = i`. Neighbours outside the map contribute zero.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        self.bilinear(map, points, Layout::ChannelsFirst)
    }

    /// As [`Graph::bilinear_sample`] for a channels-last `[H,W,C]` map.
    pub fn bilinear_sample_hwc(&mut self, map: Var, points: Var) -> Result<Var> {
        self.bilinear(map, points, Layout::ChannelsLast)
    }

    fn bilinear(&mut self, map: Var, points: Var, layout: Layout) -> Result<Var> {
        let view = MapView::new(self.shape(map), layout)?;
        let ps = self.shape(points);
        if ps.len() != 2 || ps[1] != 2 {
            return Err(shape_err!("sample points must be [N,2], got {ps:?}"));
        }
        let n = ps[0];
        let md = self.value(map).data();
        let pd = self.value(points).data();
        let mut out = vec![T::zero(); n * view.c];
        let mut tokens = Vec::new();
        for i in 0..n {
            let (x, y) = (pd[2 * i].f64(), pd[2 * i + 1].f64());
            let cs = corners(x, y, view.h, view.w);
            let dst = &mut out[i * view.c..(i + 1) * view.c];
            for &(row, col, wt, _, _) in &cs.items[..cs.len] {
                let (b, st) = view.base(row, col);
                let wt = T::of(wt);
                for (ch, d) in dst.iter_mut().enumerate() {
                    *d += wt * md[b + ch * st];
                }
            }
            if self.tracking() {
                tokens.push((x.floor() as i64 as u64) ^ ((y.floor() as i64 as u64) << 32));
            }
        }
        for t in tokens {
            self.note_branch(t);
        }
        let needs = self.any_grad(&[map, points]);
        let t = Tensor::from_parts(vec![n, view.c], out);
        Ok(self.push(t, Op::Bilinear { map, points, layout }, needs))
    }
}

pub(crate) fn bilinear_backward<T: Scalar>(map: &Tensor<T>, points: &Tensor<T>, g: &Tensor<T>, layout: Layout, need_map: bool, need_points: bool) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let view = MapView::new(map.shape(), layout).expect("validated in forward");
    let n = points.shape()[0];
    let (md, pd, gd) = (map.data(), points.data(), g.data());
    let mut gm = need_map.then(|| vec![T::zero(); map.numel()]);
    let mut gp = need_points.then(|| vec![T::zero(); points.numel()]);
    for i in 0..n {
        let cs = corners(pd[2 * i].f64(), pd[2 * i + 1].f64(), view.h, view.w);
        let grow = &gd[i * view.c..(i + 1) * view.c];
        for &(row, col, wt, dwx, dwy) in &cs.items[..cs.len] {
            let (b, st) = view.base(row, col);
            if let Some(gm) = gm.as_mut() {
                let wt = T::of(wt);
                for (ch, &gv) in grow.iter().enumerate() {
                    gm[b + ch * st] += wt * gv;
                }
            }
            if let Some(gp) = gp.as_mut() {
                let mut dot = T::zero();
                for (ch, &gv) in grow.iter().enumerate() {
                    dot += gv * md[b + ch * st];
                }
                gp[2 * i] += T::of(dwx) * dot;
                gp[2 * i + 1] += T::of(dwy) * dot;
            }
        }
    }
    (gm.map(|d| Tensor::from_parts(map.shape().to_vec(), d)), gp.map(|d| Tensor::from_parts(points.shape().to_vec(), d)))
}
