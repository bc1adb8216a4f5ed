use crate::error::{shape_err, Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sin,
    Cos,
    Abs,
    /// `ln(x / (1 - x))` with both arguments clamped below at `eps`.
    InvSigmoid(f64),
}

/// Which operand (if any) is broadcast along leading dimensions.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(shape_err!("cannot broadcast {a:?} with {b:?} (only trailing-dimension expansion)"))
}

#[inline]
fn apply<T: Scalar>(kind: BinaryKind, x: T, y: T) -> T {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
        BinaryKind::Max => {
            if x >= y {
                x
            } else {
                y
            }
        }
        BinaryKind::Min => {
            if x <= y {
                x
            } else {
                y
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (na, nb) = (av.len(), bv.len());
        let n = na.max(nb);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(apply(kind, av[i % na], bv[i % nb]));
        }
        let tokens: Vec<u64> = if matches!(kind, BinaryKind::Max | BinaryKind::Min) && self.tracking() { (0..n).map(|i| (av[i % na] >= bv[i % nb]) as u64).collect() } else { Vec::new() };
        for t in tokens {
            self.note_branch(t);
        }
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary { kind, a, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Element-wise maximum; ties pick `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    /// Element-wise minimum; ties pick `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Min, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<T> = xv
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(T::zero()),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Sin => v.sin(),
                UnaryKind::Cos => v.cos(),
                UnaryKind::Abs => v.abs(),
                UnaryKind::InvSigmoid(eps) => {
                    let e = T::of(eps);
                    let c = v.max(T::zero()).min(T::one());
                    (c.max(e) / (T::one() - c).max(e)).ln()
                }
            })
            .collect();
        if matches!(kind, UnaryKind::Log) && xv.data().iter().any(|&v| v <= T::zero()) {
            return Err(TensorError::NumericDomain("log of non-positive value".into()));
        }
        let shape = xv.shape().to_vec();
        if self.tracking() {
            let tokens: Vec<u64> = match kind {
                UnaryKind::Relu | UnaryKind::Abs => xv.data().iter().map(|&v| (v > T::zero()) as u64).collect(),
                UnaryKind::InvSigmoid(eps) => {
                    let e = T::of(eps);
                    xv.data().iter().map(|&v| (v < e) as u64 | (((T::one() - v) < e) as u64) << 1).collect()
                }
                _ => Vec::new(),
            };
            for t in tokens {
                self.note_branch(t);
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Unary { kind, x }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    /// Natural log; non-positive entries are a numeric-domain error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Cos, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }

    /// Logit of a probability, clamped to `[eps, 1 - eps]` before the log.
    pub fn inverse_sigmoid(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.unary(UnaryKind::InvSigmoid(eps), x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * f).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let needs = self.needs_grad(x);
        Ok(self.push(t, Op::Scale { x, factor }, needs))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v + c).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let needs = self.needs_grad(x);
        Ok(self.push(t, Op::AddScalar { x }, needs))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn reduce_to<T: Scalar>(full: Vec<T>, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    if full.len() == n {
        return Tensor::from_parts(shape.to_vec(), full);
    }
    let mut out = vec![T::zero(); n];
    for (i, v) in full.into_iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn binary_backward<T: Scalar>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>, need_a: bool, need_b: bool) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (av, bv, gv) = (a.data(), b.data(), g.data());
    let (na, nb, n) = (av.len(), bv.len(), gv.len());
    let mut ga = need_a.then(|| Vec::with_capacity(n));
    let mut gb = need_b.then(|| Vec::with_capacity(n));
    for i in 0..n {
        let (x, y, go) = (av[i % na], bv[i % nb], gv[i]);
        let (da, db) = match kind {
            BinaryKind::Add => (go, go),
            BinaryKind::Sub => (go, -go),
            BinaryKind::Mul => (go * y, go * x),
            BinaryKind::Div => (go / y, -go * x / (y * y)),
            BinaryKind::Max => {
                if x >= y {
                    (go, T::zero())
                } else {
                    (T::zero(), go)
                }
            }
            BinaryKind::Min => {
                if x <= y {
                    (go, T::zero())
                } else {
                    (T::zero(), go)
                }
            }
        };
        if let Some(ga) = ga.as_mut() {
            ga.push(da);
        }
        if let Some(gb) = gb.as_mut() {
            gb.push(db);
        }
    }
    (ga.map(|v| reduce_to(v, a.shape())), gb.map(|v| reduce_to(v, b.shape())))
}

pub(crate) fn unary_backward<T: Scalar>(kind: UnaryKind, x: &Tensor<T>, out: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(out.data())
        .zip(g.data())
        .map(|((&xv, &yv), &go)| match kind {
            UnaryKind::Relu => {
                if xv > T::zero() {
                    go
                } else {
                    T::zero()
                }
            }
            UnaryKind::Sigmoid => go * yv * (T::one() - yv),
            UnaryKind::Exp => go * yv,
            UnaryKind::Log => go / xv,
            UnaryKind::Sin => go * xv.cos(),
            UnaryKind::Cos => -go * xv.sin(),
            UnaryKind::Abs => {
                if xv > T::zero() {
                    go
                } else if xv < T::zero() {
                    -go
                } else {
                    T::zero()
                }
            }
            UnaryKind::InvSigmoid(eps) => {
                let e = T::of(eps);
                let mut d = T::zero();
                if xv >= e && xv <= T::one() {
                    d += T::one() / xv;
                }
                let r = T::one() - xv;
                if r >= e && r <= T::one() {
                    d += T::one() / r;
                }
                go * d
            }
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}
