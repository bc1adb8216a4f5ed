//! Axis-aligned boxes, IoU and GIoU, on plain floats and on graph values.

use conceptdet_tensor::{Scalar, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Center-size box. Normalized to the unit square unless stated otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { cx: 0.5 * (x0 + x1), cy: 0.5 * (y0 + y1), w: x1 - x0, h: y1 - y0 }
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self { cx: self.cx * f, cy: self.cy * f, w: self.w * f, h: self.h * f }
    }

    /// Center and size clamped to [0, 1]; size kept above 1e-4.
    pub fn clamped_unit(&self) -> BBox {
        let c = |v: f64| v.clamp(0.0, 1.0);
        BBox::new(c(self.cx), c(self.cy), self.w.clamp(1e-4, 1.0), self.h.clamp(1e-4, 1.0))
    }

    /// Intersect with the unit square.
    pub fn clamped(&self) -> Self {
        let [x0, y0, x1, y1] = self.corners();
        Self::from_corners(x0.clamp(0.0, 1.0), y0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0))
    }
}

fn overlap(a: &BBox, b: &BBox) -> (f64, f64, f64) {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosure = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    (inter, union, enclosure)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union, _) = overlap(a, b);
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU, in (-1, 1].
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    if !(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0) {
        return Err(Error::input(format!("degenerate box in giou: {a:?} {b:?}")));
    }
    let (inter, union, enclosure) = overlap(a, b);
    Ok(inter / union - (enclosure - union) / enclosure)
}

/// Per-row GIoU between predicted `[N, 4]` cxcywh boxes and constant targets.
pub fn giou_rows<T: Scalar>(s: &mut Session<T>, pred: Var, targets: &[BBox]) -> Result<Var> {
    let n = targets.len();
    if s.shape(pred) != [n, 4] {
        return Err(Error::contract(format!("giou_rows: pred {:?} vs {} targets", s.shape(pred), n)));
    }
    let col = |s: &mut Session<T>, j: usize| -> Result<Var> {
        let c = s.narrow(pred, 1, j, 1)?;
        Ok(s.reshape(c, &[n])?)
    };
    let (cx, cy, w, h) = (col(s, 0)?, col(s, 1)?, col(s, 2)?, col(s, 3)?);
    let hw = s.scale(w, 0.5)?;
    let hh = s.scale(h, 0.5)?;
    let px0 = s.sub(cx, hw)?;
    let px1 = s.add(cx, hw)?;
    let py0 = s.sub(cy, hh)?;
    let py1 = s.add(cy, hh)?;
    let tc: Vec<[f64; 4]> = targets.iter().map(BBox::corners).collect();
    let mut tcol = |j: usize| s.constant(vector(tc.iter().map(|c| c[j])));
    let (tx0, ty0, tx1, ty1) = (tcol(0), tcol(1), tcol(2), tcol(3));
    let tarea = s.constant(vector(targets.iter().map(BBox::area)));

    let ix1 = s.minimum(px1, tx1)?;
    let ix0 = s.maximum(px0, tx0)?;
    let iw = s.sub(ix1, ix0)?;
    let iw = s.relu(iw)?;
    let iy1 = s.minimum(py1, ty1)?;
    let iy0 = s.maximum(py0, ty0)?;
    let ih = s.sub(iy1, iy0)?;
    let ih = s.relu(ih)?;
    let inter = s.mul(iw, ih)?;
    let parea = s.mul(w, h)?;
    let union = s.add(parea, tarea)?;
    let union = s.sub(union, inter)?;
    let iou = s.div(inter, union)?;

    let ex1 = s.maximum(px1, tx1)?;
    let ex0 = s.minimum(px0, tx0)?;
    let ew = s.sub(ex1, ex0)?;
    let ey1 = s.maximum(py1, ty1)?;
    let ey0 = s.minimum(py0, ty0)?;
    let eh = s.sub(ey1, ey0)?;
    let enc = s.mul(ew, eh)?;
    let gap = s.sub(enc, union)?;
    let frac = s.div(gap, enc)?;
    Ok(s.sub(iou, frac)?)
}

/// 1-D constant from float values.
pub fn vector<T: Scalar>(values: impl IntoIterator<Item = f64>) -> Tensor<T> {
    let data: Vec<T> = values.into_iter().map(T::of).collect();
    Tensor::new(vec![data.len()], data).expect("non-empty vector")
}

/// Constant `[N, 4]` cxcywh tensor.
pub fn boxes_tensor<T: Scalar>(boxes: &[BBox]) -> Tensor<T> {
    let data = boxes.iter().flat_map(|b| b.to_array()).map(T::of).collect();
    Tensor::new(vec![boxes.len(), 4], data).expect("4 per box")
}

/// Read `[N, 4]` cxcywh values back into boxes.
pub fn boxes_from_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<BBox> {
    t.data().chunks(4).map(|c| BBox::new(c[0].f64(), c[1].f64(), c[2].f64(), c[3].f64())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_examples() {
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let b = BBox::from_corners(2.0, 2.0, 3.0, 3.0);
        assert!((giou(&a, &b).unwrap() + 7.0 / 9.0).abs() < 1e-15);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        let big = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        assert!((giou(&big, &a).unwrap() - 0.25).abs() < 1e-15);
        assert!((iou(&big, &a) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let a = BBox::new(0.5, 0.5, 0.0, 0.2);
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert!(matches!(giou(&a, &b), Err(Error::Input(_))));
    }

    #[test]
    fn graph_giou_matches_scalar() {
        let preds = [BBox::new(0.3, 0.4, 0.2, 0.3), BBox::new(0.5, 0.5, 0.1, 0.1), BBox::new(0.2, 0.2, 0.3, 0.1)];
        let tgts = [BBox::new(0.35, 0.4, 0.25, 0.2), BBox::new(0.9, 0.9, 0.1, 0.1), BBox::new(0.2, 0.2, 0.3, 0.1)];
        let store = conceptdet_tensor::ParamStore::<f64>::new();
        let set = conceptdet_tensor::ParamSet::none(&store);
        let mut s = Session::new(&store, &set);
        let p = s.constant(boxes_tensor(&preds));
        let g = giou_rows(&mut s, p, &tgts).unwrap();
        for (i, v) in s.value(g).data().iter().enumerate() {
            assert!((v - giou(&preds[i], &tgts[i]).unwrap()).abs() < 1e-12);
        }
    }
}
