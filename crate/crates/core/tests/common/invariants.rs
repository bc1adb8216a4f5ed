//! Structural invariants of the hybrid encoder, the prompt head and the
//! inference path, evaluated on jittered weights.

use conceptdet::config::ModelConfig;
use conceptdet::encoders::{image_var, Vocabulary};
use conceptdet::gradcheck::{jitter, two_object_scene};
use conceptdet::model::{Detector, PromptSpec};
use conceptdet::prompts::{superclass_scores, SuperClassMap};
use conceptdet::tensor::{ParamSet, ParamStore, Session, Tensor};
use conceptdet::world::{default_phrases, training_categories};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn detector(cfg: &ModelConfig, seed: u64) -> Detector {
    let names = default_phrases();
    Detector::new(cfg, Vocabulary::from_phrases(names.iter().map(String::as_str)), seed).unwrap()
}

pub fn random_rows(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Tensor<f64> {
    Tensor::new(vec![k, d], (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Hybrid encoder on the two-object scene: `(C_all'', P_end)` values.
pub fn hybrid_outputs(det: &Detector, store: &ParamStore<f64>, prompts: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let none = ParamSet::none(store);
    let mut s = Session::new(store, &none);
    let x = image_var(&mut s, &two_object_scene().image());
    let feats = det.model.backbone.forward(&mut s, x).unwrap();
    let p = s.constant(prompts.clone());
    let out = det.model.hybrid.forward(&mut s, &feats, p, &det.model.cfg).unwrap();
    (s.value(out.tokens).data().to_vec(), s.value(out.p_end).data().to_vec())
}

/// Largest deviation of image outputs and of (re-permuted) prompt outputs
/// when the prompt rows are reversed.
pub fn permutation_gaps(seed: u64) -> (f64, f64) {
    let det = detector(&ModelConfig::default(), seed);
    let mut store = det.store.cast::<f64>();
    jitter(&mut store, seed);
    let d = det.model.cfg.dim;
    let k = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_rows(&mut rng, k, d);
    let order: Vec<usize> = (0..k).rev().collect();
    let permuted = Tensor::new(vec![k, d], order.iter().flat_map(|&r| p.data()[r * d..(r + 1) * d].to_vec()).collect()).unwrap();
    let (img_a, pr_a) = hybrid_outputs(&det, &store, &p);
    let (img_b, pr_b) = hybrid_outputs(&det, &store, &permuted);
    let img_gap = img_a.iter().zip(&img_b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut prompt_gap: f64 = 0.0;
    for (i, &r) in order.iter().enumerate() {
        for j in 0..d {
            prompt_gap = prompt_gap.max((pr_b[i * d + j] - pr_a[r * d + j]).abs());
        }
    }
    (img_gap, prompt_gap)
}

/// Every X-MHA with zero output projections returns its inputs bit for bit.
pub fn xmha_zero_identity(seed: u64) -> bool {
    let det = detector(&ModelConfig::default(), seed);
    let store = det.store.cast::<f64>();
    let none = ParamSet::none(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psf = &det.model.hybrid.psf;
    let blocks = std::iter::once(&psf.c6).chain(psf.top_down.iter().chain(&psf.bottom_up).map(|l| &l.xmha)).chain(std::iter::once(&det.model.hybrid.mfg.xmha));
    let mut all = true;
    for x in blocks {
        let zero = |id| store.get(id).data().iter().all(|v| *v == 0.0);
        all &= zero(x.img_out.w) && zero(x.img_out.b) && zero(x.prompt_out.w) && zero(x.prompt_out.b);
        let mut s = Session::new(&store, &none);
        let (img, pr) = (random_rows(&mut rng, 17, 32), random_rows(&mut rng, 3, 32));
        let (vi, vp) = (s.constant(img.clone()), s.constant(pr.clone()));
        let (a, b) = x.forward(&mut s, vi, vp).unwrap();
        all &= s.value(a) == &img && s.value(b) == &pr;
    }
    all
}

/// Final-stage outputs of a detector whose training heads carry non-trivial
/// weights equal those of the same detector with the heads deleted.
pub fn stripped_inference_identical(seed: u64) -> bool {
    let mut det = detector(&ModelConfig::default(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in det.store.ids().collect::<Vec<_>>() {
        if det.store.name(id).starts_with("aux.") || det.store.name(id).starts_with("prompt_head.") {
            det.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    let stripped = det.without_training_heads().unwrap();
    if stripped.store.iter().any(|(_, n, _)| n.starts_with("aux.") || n.starts_with("prompt_head.")) {
        return false;
    }
    let names = default_phrases();
    let cats = training_categories();
    let spec = PromptSpec::Text { phrases: cats.iter().map(|&c| names[c].clone()).collect(), classes: cats };
    let img = two_object_scene().image();
    let (a, b) = (det.raw_outputs(&img, &spec).unwrap(), stripped.raw_outputs(&img, &spec).unwrap());
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    bits(&a.0) == bits(&b.0) && bits(&a.1) == bits(&b.1) && det.detect(&img, &spec, 0).unwrap() == stripped.detect(&img, &spec, 0).unwrap()
}

fn class_scores(raw: &[f64], q: usize, map: &SuperClassMap) -> Vec<f64> {
    let store = ParamStore::<f64>::new();
    let none = ParamSet::none(&store);
    let mut s = Session::new(&store, &none);
    let r = s.constant(Tensor::new(vec![q, raw.len() / q], raw.to_vec()).unwrap());
    let out = superclass_scores(&mut s, r, map).unwrap();
    s.value(out).data().to_vec()
}

/// Random maps and scores: raising one raw score never lowers a class
/// score, and duplicating a prompt column never changes any.
pub fn superclass_exact(seed: u64, cases: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let k = rng.random_range(1..=4);
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..=4)).collect();
        let r: usize = sizes.iter().sum();
        let mut cols: Vec<usize> = (0..r).collect();
        for i in (1..r).rev() {
            cols.swap(i, rng.random_range(0..=i));
        }
        let mut start = 0;
        let map = SuperClassMap {
            entries: sizes
                .iter()
                .enumerate()
                .map(|(c, &m)| {
                    let e = (c, cols[start..start + m].to_vec());
                    start += m;
                    e
                })
                .collect(),
        };
        let q = rng.random_range(1..=3);
        let raw: Vec<f64> = (0..q * r).map(|_| rng.random_range(-3.0..3.0)).collect();
        let base = class_scores(&raw, q, &map);
        let mut up = raw.clone();
        up[rng.random_range(0..q * r)] += rng.random_range(0.0..2.0);
        if class_scores(&up, q, &map).iter().zip(&base).any(|(b, a)| b < a) {
            return false;
        }
        let dup = rng.random_range(0..r);
        let wider: Vec<f64> = raw.chunks(r).flat_map(|row| row.iter().copied().chain(std::iter::once(row[dup]))).collect();
        let mut m2 = map.clone();
        m2.entries.iter_mut().find(|e| e.1.contains(&dup)).unwrap().1.push(r);
        if class_scores(&wider, q, &m2) != base {
            return false;
        }
    }
    true
}
