use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::ops::elementwise::sigmoid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `log(sigmoid(z))` without overflow.
#[inline]
fn log_sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

impl<T: Scalar> Graph<T> {
    /// Element-wise sigmoid focal loss
    /// `-alpha_t * (1 - p_t)^gamma * log(p_t)` with `p = sigmoid(logit)`.
    /// Targets are constants in `{0, 1}`.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: &Tensor<T>, alpha: f64, gamma: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(shape_err!("focal logits {:?} vs targets {:?}", lv.shape(), targets.shape()));
        }
        let data = lv.data().iter().zip(targets.data()).map(|(&z, &t)| focal_value(z, t, alpha, gamma)).collect();
        let shape = lv.shape().to_vec();
        let needs = self.needs_grad(logits);
        let op = Op::Focal { logits, targets: targets.data().to_vec(), alpha, gamma };
        Ok(self.push(Tensor::from_parts(shape, data), op, needs))
    }

    /// Element-wise binary cross-entropy on logits with constant targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(shape_err!("bce logits {:?} vs targets {:?}", lv.shape(), targets.shape()));
        }
        let data = lv.data().iter().zip(targets.data()).map(|(&z, &t)| -(t * log_sigmoid(z) + (T::one() - t) * log_sigmoid(-z))).collect();
        let shape = lv.shape().to_vec();
        let needs = self.needs_grad(logits);
        let op = Op::BceLogits { logits, targets: targets.data().to_vec() };
        Ok(self.push(Tensor::from_parts(shape, data), op, needs))
    }
}

/// Per-element focal value; also used by matching costs.
pub fn focal_value<T: Scalar>(z: T, t: T, alpha: f64, gamma: f64) -> T {
    let a = T::of(alpha);
    let gm = T::of(gamma);
    // Written with s = +-z so that p_t = sigmoid(s).
    let (s, at) = if t > T::of(0.5) { (z, a) } else { (-z, T::one() - a) };
    let pt = sigmoid(s);
    let q = T::one() - pt;
    -at * q.powf(gm) * log_sigmoid(s)
}

pub(crate) fn focal_backward<T: Scalar>(logits: &Tensor<T>, targets: &[T], alpha: f64, gamma: f64, g: &Tensor<T>) -> Tensor<T> {
    let a = T::of(alpha);
    let gm = T::of(gamma);
    let data = logits
        .data()
        .iter()
        .zip(targets)
        .zip(g.data())
        .map(|((&z, &t), &go)| {
            let (s, at, sign) = if t > T::of(0.5) { (z, a, T::one()) } else { (-z, T::one() - a, -T::one()) };
            let pt = sigmoid(s);
            let q = T::one() - pt;
            // d/ds [-(1-p)^g log p] = g (1-p)^g p log p - (1-p)^(g+1)
            let d = at * (gm * q.powf(gm) * pt * log_sigmoid(s) - q.powf(gm + T::one()));
            go * sign * d
        })
        .collect();
    Tensor::from_parts(logits.shape().to_vec(), data)
}

pub(crate) fn bce_backward<T: Scalar>(logits: &Tensor<T>, targets: &[T], g: &Tensor<T>) -> Tensor<T> {
    let data = logits.data().iter().zip(targets).zip(g.data()).map(|((&z, &t), &go)| go * (sigmoid(z) - t)).collect();
    Tensor::from_parts(logits.shape().to_vec(), data)
}
