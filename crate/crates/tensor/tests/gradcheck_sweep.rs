//! Every differentiable primitive against central differences on 100 random
//! shapes and seeds, 64-bit.

use conceptdet_tensor::suite::{check_case, op_names, op_suite};
use conceptdet_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

#[test]
fn every_primitive_within_tolerance() {
    let reports = op_suite(100, 1e-6, None).unwrap();
    assert_eq!(reports.len(), op_names().len());
    for r in &reports {
        eprintln!("{}: worst {:e} (seed {})", r.op, r.max_rel_error, r.worst_seed);
        assert!(r.max_rel_error <= TOL, "{r:?}");
        assert!(r.skipped * 10 <= r.coordinates.max(10), "too many skipped: {r:?}");
    }
}

#[test]
fn suite_covers_the_differentiable_surface() {
    let names = op_names();
    for op in [
        "add",
        "sub",
        "mul",
        "div",
        "maximum",
        "minimum",
        "relu",
        "sigmoid",
        "exp",
        "log",
        "sin",
        "cos",
        "abs",
        "inverse_sigmoid",
        "matmul",
        "bmm",
        "permute",
        "reshape",
        "concat",
        "narrow",
        "index_select",
        "upsample_nearest",
        "sum",
        "mean",
        "sum_axis",
        "mean_axis",
        "max_last",
        "softmax_last",
        "layer_norm_last",
        "conv2d",
        "bilinear_sample",
        "bilinear_sample_hwc",
        "sigmoid_focal",
        "bce_with_logits",
    ] {
        assert!(names.contains(&op), "{op} missing");
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn linear_map_is_near_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[4, 2])];
    let (e, _, _) = check_case(&mut rng, inputs, 1e-6, |s, v| s.matmul(v[0], v[1])).unwrap();
    assert!(e <= 1e-8, "{e:e}");
}

#[test]
fn softmax_of_matmul_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[4, 5])];
    let (e, _, _) = check_case(&mut rng, inputs, 1e-6, |s, v| {
        let y = s.matmul(v[0], v[1])?;
        s.softmax_last(y)
    })
    .unwrap();
    assert!(e <= 1e-6, "{e:e}");
}
