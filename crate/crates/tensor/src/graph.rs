use crate::error::{Result, TensorError};
use crate::ops::{conv, elementwise, linalg, loss, reduce, sample, shape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Constant,
    Binary { kind: elementwise::BinaryKind, a: Var, b: Var },
    Unary { kind: elementwise::UnaryKind, x: Var },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Upsample { x: Var, factor: usize },
    Sum { x: Var },
    SumAxis { x: Var, axis: usize },
    MaxLast { x: Var, argmax: Vec<usize> },
    Softmax { x: Var },
    LayerNorm { x: Var, inv_std: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Bilinear { map: Var, points: Var, layout: sample::Layout },
    Focal { logits: Var, targets: Vec<T>, alpha: f64, gamma: f64 },
    BceLogits { logits: Var, targets: Vec<T> },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Tape of primitive applications in creation (topological) order.
///
/// Values are computed eagerly; [`Graph::backward`] replays the tape in
/// reverse. Every kernel reduces in a fixed left-to-right order, so forward
/// replays on identical inputs are bit-identical.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    branch_sig: Option<u64>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), branch_sig: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; gradients are reported for it by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copy of `x`'s value cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index()].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].needs_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.index()].op, Op::Leaf)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node { value, op, needs_grad });
        id
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.needs_grad(v))
    }

    /// Start recording a signature of every data-dependent branch taken by
    /// piecewise kernels (ReLU sign, bilinear cell, argmax, ...).
    pub fn track_branches(&mut self) {
        self.branch_sig = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branch_sig
    }

    #[inline]
    pub(crate) fn tracking(&self) -> bool {
        self.branch_sig.is_some()
    }

    #[inline]
    pub(crate) fn note_branch(&mut self, token: u64) {
        if let Some(h) = self.branch_sig.as_mut() {
            *h = (*h ^ token).wrapping_mul(0x0100_0000_01b3);
        }
    }

    /// Record an externally made discrete decision (top-k selection, matching)
    /// in the branch signature.
    pub fn note_decision(&mut self, tokens: &[usize]) {
        if self.tracking() {
            for &t in tokens {
                self.note_branch(t as u64);
            }
            self.note_branch(u64::MAX);
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs_grad(loss) {
            grads[loss.index()] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        }
        let mut leaves = Vec::new();
        for idx in (0..=loss.index()).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                leaves.push((Var(idx as u32), gout));
                continue;
            }
            self.propagate(idx, &gout, &mut grads);
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.needs_grad(v) {
                return;
            }
            match &mut grads[v.index()] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Binary { kind, a, b } => {
                let (ga, gb) = elementwise::binary_backward(*kind, self.value(*a), self.value(*b), g, self.needs_grad(*a), self.needs_grad(*b));
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Unary { kind, x } => acc(*x, elementwise::unary_backward(*kind, self.value(*x), out, g)),
            Op::Scale { x, factor } => {
                let f = T::of(*factor);
                let data = g.data().iter().map(|&v| v * f).collect();
                acc(*x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::AddScalar { x } => acc(*x, g.clone()),
            Op::MatMul { a, b } => {
                let (ga, gb) = linalg::matmul_backward(self.value(*a), self.value(*b), g, self.needs_grad(*a), self.needs_grad(*b));
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Bmm { a, b } => {
                let (ga, gb) = linalg::bmm_backward(self.value(*a), self.value(*b), g, self.needs_grad(*a), self.needs_grad(*b));
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Permute { x, axes } => acc(*x, linalg::permute_backward(g, axes)),
            Op::Reshape { x } => {
                let shape = self.shape(*x).to_vec();
                acc(*x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Concat { xs, axis } => {
                let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
                let parts = shape::concat_backward(g, &shapes, *axis);
                for (&v, part) in xs.iter().zip(parts) {
                    acc(v, part);
                }
            }
            Op::Narrow { x, axis, start } => acc(*x, shape::narrow_backward(g, self.shape(*x), *axis, *start)),
            Op::IndexSelect { x, axis, indices } => acc(*x, shape::index_select_backward(g, self.shape(*x), *axis, indices)),
            Op::Upsample { x, factor } => acc(*x, shape::upsample_backward(g, self.shape(*x), *factor)),
            Op::Sum { x } => {
                let gv = g.item();
                acc(*x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::SumAxis { x, axis } => acc(*x, reduce::sum_axis_backward(g, self.shape(*x), *axis)),
            Op::MaxLast { x, argmax } => acc(*x, reduce::max_last_backward(g, self.shape(*x), argmax)),
            Op::Softmax { x } => acc(*x, reduce::softmax_backward(out, g)),
            Op::LayerNorm { x, inv_std } => acc(*x, reduce::layer_norm_backward(out, inv_std, g)),
            Op::Conv2d { x, w, b, stride, pad } => {
                let grads_c = conv::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, self.needs_grad(*x), self.needs_grad(*w));
                if let Some(gx) = grads_c.0 {
                    acc(*x, gx);
                }
                if let Some(gw) = grads_c.1 {
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        acc(*b, conv::bias_backward(g));
                    }
                }
            }
            Op::Bilinear { map, points, layout } => {
                let (gm, gp) = sample::bilinear_backward(self.value(*map), self.value(*points), g, *layout, self.needs_grad(*map), self.needs_grad(*points));
                if let Some(gm) = gm {
                    acc(*map, gm);
                }
                if let Some(gp) = gp {
                    acc(*points, gp);
                }
            }
            Op::Focal { logits, targets, alpha, gamma } => acc(*logits, loss::focal_backward(self.value(*logits), targets, *alpha, *gamma, g)),
            Op::BceLogits { logits, targets } => acc(*logits, loss::bce_backward(self.value(*logits), targets, g)),
        }
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `leaf`, or `None` when the loss does not depend on it.
    pub fn get(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(v, _)| *v == leaf).map(|(_, t)| t)
    }

    /// Gradient of `leaf`; exact zeros when it was not reached.
    pub fn wrt(&self, graph: &Graph<T>, leaf: Var) -> Tensor<T> {
        self.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(leaf).to_vec()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.leaves.iter().map(|(v, t)| (*v, t))
    }
}
