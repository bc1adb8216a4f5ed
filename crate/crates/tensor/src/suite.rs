//! Finite-difference sweep over every differentiable primitive on random
//! shapes and values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::Var;
use crate::params::{ParamSet, ParamStore, Session};
use crate::tensor::Tensor;

/// Worst relative error of one primitive over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub coordinates: usize,
    pub skipped: usize,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("nonzero dims")
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn shape2(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![dim(rng, 1, 4), dim(rng, 1, 5)]
}

type OpFn = Box<dyn Fn(&mut Session<f64>, &[Var]) -> Result<Var>>;

/// Inputs and the operation for one random case.
struct Case {
    inputs: Vec<Tensor<f64>>,
    op: OpFn,
}

/// Runs grad_check on `sum(op(inputs) * w)` with a fixed random `w`.
/// Returns `(max_rel_error, coordinates, skipped)`.
pub fn check_case<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, h: f64, op: F) -> Result<(f64, usize, usize)>
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs.into_iter().enumerate().map(|(i, t)| store.insert(format!("x{i}"), t)).collect::<Result<_>>()?;
    let trainable = ParamSet::all(&store);
    let out_shape = {
        let mut s = Session::new(&store, &trainable);
        let vars: Vec<_> = ids.iter().map(|&id| s.param(id)).collect();
        let y = op(&mut s, &vars)?;
        s.shape(y).to_vec()
    };
    let w = randn(rng, &out_shape, -1.0, 1.0);
    let report = grad_check(&mut store, &trainable, h, |s| {
        let vars: Vec<_> = ids.iter().map(|&id| s.param(id)).collect();
        let y = op(s, &vars)?;
        let wv = s.constant(w.clone());
        let p = s.mul(y, wv)?;
        s.sum(p)
    })?;
    Ok((report.max_rel_error, report.coordinates, report.skipped))
}

fn unary(lo: f64, hi: f64, f: fn(&mut Session<f64>, Var) -> Result<Var>) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let shape = shape2(rng);
        Case { inputs: vec![randn(rng, &shape, lo, hi)], op: Box::new(move |s, v| f(s, v[0])) }
    }
}

fn binary(positive_rhs: bool, f: fn(&mut Session<f64>, Var, Var) -> Result<Var>) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let sa = shape2(rng);
        // half the cases broadcast a trailing suffix
        let sb = if rng.random_bool(0.5) { sa[1..].to_vec() } else { sa.clone() };
        let a = randn(rng, &sa, -2.0, 2.0);
        let b = if positive_rhs { randn(rng, &sb, 0.5, 2.0) } else { randn(rng, &sb, -2.0, 2.0) };
        Case { inputs: vec![a, b], op: Box::new(move |s, v| f(s, v[0], v[1])) }
    }
}

type CaseGen = Box<dyn Fn(&mut ChaCha8Rng) -> Case>;

fn cases() -> Vec<(&'static str, CaseGen)> {
    let mut out: Vec<(&'static str, CaseGen)> = vec![
        ("add", Box::new(binary(false, |s, a, b| s.add(a, b)))),
        ("sub", Box::new(binary(false, |s, a, b| s.sub(a, b)))),
        ("mul", Box::new(binary(false, |s, a, b| s.mul(a, b)))),
        ("div", Box::new(binary(true, |s, a, b| s.div(a, b)))),
        ("maximum", Box::new(binary(false, |s, a, b| s.maximum(a, b)))),
        ("minimum", Box::new(binary(false, |s, a, b| s.minimum(a, b)))),
        ("relu", Box::new(unary(-2.0, 2.0, |s, x| s.relu(x)))),
        ("sigmoid", Box::new(unary(-4.0, 4.0, |s, x| s.sigmoid(x)))),
        ("exp", Box::new(unary(-2.0, 2.0, |s, x| s.exp(x)))),
        ("log", Box::new(unary(0.2, 3.0, |s, x| s.log(x)))),
        ("sin", Box::new(unary(-3.0, 3.0, |s, x| s.sin(x)))),
        ("cos", Box::new(unary(-3.0, 3.0, |s, x| s.cos(x)))),
        ("abs", Box::new(unary(-2.0, 2.0, |s, x| s.abs(x)))),
        ("inverse_sigmoid", Box::new(unary(0.05, 0.95, |s, x| s.inverse_sigmoid(x, 1e-5)))),
        ("scale", Box::new(unary(-2.0, 2.0, |s, x| s.scale(x, -1.7)))),
        ("neg", Box::new(unary(-2.0, 2.0, |s, x| s.neg(x)))),
        ("add_scalar", Box::new(unary(-2.0, 2.0, |s, x| s.add_scalar(x, 0.3)))),
        ("sum", Box::new(unary(-1.0, 1.0, |s, x| s.sum(x)))),
        ("mean", Box::new(unary(-1.0, 1.0, |s, x| s.mean(x)))),
        ("max_last", Box::new(unary(-2.0, 2.0, |s, x| s.max_last(x)))),
        ("softmax_last", Box::new(unary(-3.0, 3.0, |s, x| s.softmax_last(x)))),
    ];
    out.push((
        "matmul",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            Case { inputs: vec![randn(rng, &[m, k], -1.0, 1.0), randn(rng, &[k, n], -1.0, 1.0)], op: Box::new(|s, v| s.matmul(v[0], v[1])) }
        }),
    ));
    out.push((
        "bmm",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            Case { inputs: vec![randn(rng, &[b, m, k], -1.0, 1.0), randn(rng, &[b, k, n], -1.0, 1.0)], op: Box::new(|s, v| s.bmm(v[0], v[1])) }
        }),
    ));
    out.push((
        "permute",
        Box::new(|rng: &mut ChaCha8Rng| {
            let shape = vec![dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            let mut axes = vec![0, 1, 2];
            axes.rotate_left(dim(rng, 0, 2));
            if rng.random_bool(0.5) {
                axes.swap(0, 1);
            }
            Case { inputs: vec![randn(rng, &shape, -1.0, 1.0)], op: Box::new(move |s, v| s.permute(v[0], &axes)) }
        }),
    ));
    out.push((
        "reshape",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
            Case { inputs: vec![randn(rng, &[a, b], -1.0, 1.0)], op: Box::new(move |s, v| s.reshape(v[0], &[b, a])) }
        }),
    ));
    out.push((
        "concat",
        Box::new(|rng: &mut ChaCha8Rng| {
            let axis = dim(rng, 0, 1);
            let mut sa = shape2(rng);
            let mut sb = sa.clone();
            sb[axis] = dim(rng, 1, 3);
            sa[axis] = dim(rng, 1, 3);
            Case { inputs: vec![randn(rng, &sa, -1.0, 1.0), randn(rng, &sb, -1.0, 1.0)], op: Box::new(move |s, v| s.concat(&[v[0], v[1]], axis)) }
        }),
    ));
    out.push((
        "narrow",
        Box::new(|rng: &mut ChaCha8Rng| {
            let shape = vec![dim(rng, 2, 4), dim(rng, 2, 5)];
            let axis = dim(rng, 0, 1);
            let start = dim(rng, 0, shape[axis] - 1);
            let len = dim(rng, 1, shape[axis] - start);
            Case { inputs: vec![randn(rng, &shape, -1.0, 1.0)], op: Box::new(move |s, v| s.narrow(v[0], axis, start, len)) }
        }),
    ));
    out.push((
        "index_select",
        Box::new(|rng: &mut ChaCha8Rng| {
            let shape = vec![dim(rng, 2, 5), dim(rng, 1, 3)];
            let idx: Vec<usize> = (0..dim(rng, 1, 6)).map(|_| dim(rng, 0, shape[0] - 1)).collect();
            Case { inputs: vec![randn(rng, &shape, -1.0, 1.0)], op: Box::new(move |s, v| s.index_select(v[0], 0, &idx)) }
        }),
    ));
    out.push((
        "upsample_nearest",
        Box::new(|rng: &mut ChaCha8Rng| {
            let shape = vec![dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3)];
            Case { inputs: vec![randn(rng, &shape, -1.0, 1.0)], op: Box::new(|s, v| s.upsample_nearest(v[0], 2)) }
        }),
    ));
    out.push((
        "sum_axis",
        Box::new(|rng: &mut ChaCha8Rng| {
            let shape = vec![dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            let axis = dim(rng, 0, 2);
            Case { inputs: vec![randn(rng, &shape, -1.0, 1.0)], op: Box::new(move |s, v| s.sum_axis(v[0], axis)) }
        }),
    ));
    out.push((
        "mean_axis",
        Box::new(|rng: &mut ChaCha8Rng| {
            let shape = vec![dim(rng, 1, 3), dim(rng, 1, 4)];
            let axis = dim(rng, 0, 1);
            Case { inputs: vec![randn(rng, &shape, -1.0, 1.0)], op: Box::new(move |s, v| s.mean_axis(v[0], axis)) }
        }),
    ));
    out.push((
        "layer_norm_last",
        Box::new(|rng: &mut ChaCha8Rng| {
            let shape = vec![dim(rng, 1, 4), dim(rng, 2, 6)];
            Case { inputs: vec![randn(rng, &shape, -2.0, 2.0)], op: Box::new(|s, v| s.layer_norm_last(v[0], 1e-5)) }
        }),
    ));
    out.push((
        "conv2d",
        Box::new(|rng: &mut ChaCha8Rng| {
            let (ci, co) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let (h, w) = (dim(rng, 2, 6), dim(rng, 2, 6));
            let k = [1, 3][dim(rng, 0, 1)];
            let stride = dim(rng, 1, 2);
            let inputs = vec![randn(rng, &[ci, h, w], -1.0, 1.0), randn(rng, &[co, ci, k, k], -1.0, 1.0), randn(rng, &[co], -1.0, 1.0)];
            Case { inputs, op: Box::new(move |s, v| s.conv2d(v[0], v[1], Some(v[2]), stride, k / 2)) }
        }),
    ));
    for hwc in [false, true] {
        out.push((
            if hwc { "bilinear_sample_hwc" } else { "bilinear_sample" },
            Box::new(move |rng: &mut ChaCha8Rng| {
                let (c, h, w) = (dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 2, 5));
                let n = dim(rng, 1, 5);
                let map = if hwc { randn(rng, &[h, w, c], -1.0, 1.0) } else { randn(rng, &[c, h, w], -1.0, 1.0) };
                // points reach slightly outside the map to exercise the zero border
                let pts: Vec<f64> = (0..n).flat_map(|_| [rng.random_range(-0.8..w as f64 - 0.2), rng.random_range(-0.8..h as f64 - 0.2)]).collect();
                let pts = Tensor::new(vec![n, 2], pts).expect("n points");
                Case { inputs: vec![map, pts], op: Box::new(move |s, v| if hwc { s.bilinear_sample_hwc(v[0], v[1]) } else { s.bilinear_sample(v[0], v[1]) }) }
            }),
        ));
    }
    out.push((
        "sigmoid_focal",
        Box::new(|rng: &mut ChaCha8Rng| {
            let shape = shape2(rng);
            let z = randn(rng, &shape, -3.0, 3.0);
            let n: usize = shape.iter().product();
            let t: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            let t = Tensor::new(shape, t).expect("same shape");
            Case { inputs: vec![z], op: Box::new(move |s, v| s.sigmoid_focal(v[0], &t, 0.25, 2.0)) }
        }),
    ));
    out.push((
        "bce_with_logits",
        Box::new(|rng: &mut ChaCha8Rng| {
            let shape = shape2(rng);
            let z = randn(rng, &shape, -3.0, 3.0);
            let t = randn(rng, &shape, 0.0, 1.0);
            Case { inputs: vec![z], op: Box::new(move |s, v| s.bce_with_logits(v[0], &t)) }
        }),
    ));
    out
}

/// Names of every primitive covered by [`op_suite`].
pub fn op_names() -> Vec<&'static str> {
    cases().into_iter().map(|c| c.0).collect()
}

/// Checks each primitive (or only `only`) on `seeds` random cases with
/// step `h`.
pub fn op_suite(seeds: u64, h: f64, only: Option<&str>) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for (op, gen) in cases() {
        if only.is_some_and(|o| o != op) {
            continue;
        }
        let mut r = OpReport { op, max_rel_error: 0.0, worst_seed: 0, coordinates: 0, skipped: 0 };
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let case = gen(&mut rng);
            let (e, n, sk) = check_case(&mut rng, case.inputs, h, case.op)?;
            r.coordinates += n;
            r.skipped += sk;
            if e > r.max_rel_error {
                r.max_rel_error = e;
                r.worst_seed = seed;
            }
        }
        out.push(r);
    }
    Ok(out)
}
