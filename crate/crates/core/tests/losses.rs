use conceptdet::aux::{combine_aux, prompt_multilabel_loss, AuxHead, AuxTerms, AUX_LOSS, PROMPT_LOSS_WEIGHT};
use conceptdet::boxes::{boxes_tensor, giou, iou, BBox};
use conceptdet::decoder::{combine, stage_terms, SimilarityHead, StageOutput, StageTerms, Target, DECODER_LOSS, MATCH_COST};
use conceptdet::matching::MatchResult;
use conceptdet::nn::Init;
use conceptdet::prompts::visual_prompt_loss;
use conceptdet::tensor::{ParamId, ParamSet, ParamStore, Session, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn with_session<R>(f: impl FnOnce(&mut Session<f64>) -> R) -> R {
    let store = ParamStore::<f64>::new();
    let none = ParamSet::none(&store);
    let mut s = Session::new(&store, &none);
    f(&mut s)
}

#[test]
fn decoder_weight_ledger() {
    assert_eq!((DECODER_LOSS.class, DECODER_LOSS.l1, DECODER_LOSS.giou), (1.0, 5.0, 2.0));
    assert_eq!((MATCH_COST.class, MATCH_COST.l1, MATCH_COST.giou), (2.0, 5.0, 2.0));
    let total = with_session(|s| {
        let one = s.constant(Tensor::scalar(1.0));
        let l = combine(s, &StageTerms { class: one, l1: one, giou: one }, DECODER_LOSS).unwrap();
        s.value(l).item()
    });
    assert_eq!(total, 8.0);
}

#[test]
fn aux_weight_ledger() {
    let total = with_session(|s| {
        let one = s.constant(Tensor::scalar(1.0));
        let l = combine_aux(s, &AuxTerms { class: one, centerness: one, giou: one }, AUX_LOSS).unwrap();
        s.value(l).item()
    });
    assert_eq!(total, 24.0);
    assert_eq!(PROMPT_LOSS_WEIGHT, 6.0);
}

#[test]
fn focal_examples() {
    with_session(|s| {
        let z = s.constant(t(&[3], &[0.0, 0.0, 40.0]));
        let f = s.sigmoid_focal(z, &t(&[3], &[1.0, 0.0, 1.0]), 0.25, 2.0).unwrap();
        let v = s.value(f).data().to_vec();
        let ln2 = std::f64::consts::LN_2;
        assert!((v[0] - 0.25 * 0.25 * ln2).abs() < 1e-15);
        assert!((v[1] - 0.75 * 0.25 * ln2).abs() < 1e-15);
        assert!(v[2] < 1e-30);
    });
}

#[test]
fn stage_terms_zero_for_perfect_predictions() {
    let gt = [BBox::new(0.3, 0.3, 0.2, 0.2), BBox::new(0.7, 0.6, 0.3, 0.2)];
    let targets = [Target { bbox: gt[0], column: 1 }, Target { bbox: gt[1], column: 0 }];
    let m = MatchResult { pairs: vec![(0, 2), (1, 0)], cost: 0.0 };
    let (q, k) = (3, 2);
    let mut boxes = vec![BBox::new(0.5, 0.5, 0.1, 0.1); q];
    boxes[2] = gt[0];
    boxes[0] = gt[1];
    let mut logits = vec![-60.0; q * k];
    logits[2 * k + 1] = 60.0;
    logits[0] = 60.0;
    with_session(|s| {
        let stage = StageOutput { boxes: s.constant(boxes_tensor(&boxes)), logits: s.constant(t(&[q, k], &logits)) };
        let terms = stage_terms(s, stage, &targets, &m).unwrap();
        let l = combine(s, &terms, DECODER_LOSS).unwrap();
        assert!(s.value(l).item() < 1e-12);
    });
}

#[test]
fn stage_terms_without_objects() {
    with_session(|s| {
        let stage = StageOutput { boxes: s.constant(boxes_tensor(&[BBox::new(0.5, 0.5, 0.2, 0.2); 2])), logits: s.constant(t(&[2, 2], &[0.0; 4])) };
        let terms = stage_terms(s, stage, &[], &MatchResult { pairs: vec![], cost: 0.0 }).unwrap();
        assert_eq!(s.value(terms.l1).item(), 0.0);
        assert_eq!(s.value(terms.giou).item(), 0.0);
        let expected = 4.0 * 0.75 * 0.25 * std::f64::consts::LN_2;
        assert!((s.value(terms.class).item() - expected).abs() < 1e-12);
    });
}

#[test]
fn prompt_multilabel_examples() {
    with_session(|s| {
        let z = s.constant(t(&[1], &[20.0]));
        let l = prompt_multilabel_loss(s, z, &[true]).unwrap();
        assert!(s.value(l).item() < 1e-8);
        let z = s.constant(t(&[2], &[0.0, 0.0]));
        let l = prompt_multilabel_loss(s, z, &[true, false]).unwrap();
        assert!((s.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let z = s.constant(t(&[3], &[-20.0; 3]));
        let l = prompt_multilabel_loss(s, z, &[false; 3]).unwrap();
        assert!(s.value(l).item() < 1e-8);
        assert!(prompt_multilabel_loss(s, z, &[false; 2]).is_err());
    });
}

fn mse_of(pv: &[f64], pt: &[f64], k: usize) -> f64 {
    with_session(|s| {
        let d = pv.len() / k;
        let a = s.constant(t(&[k, d], pv));
        let b = s.constant(t(&[k, d], pt));
        let zero = s.constant(Tensor::scalar(0.0));
        let (_, mse) = visual_prompt_loss(s, a, b, zero).unwrap();
        s.value(mse).item()
    })
}

#[test]
fn visual_prompt_mse_examples() {
    let d = 32;
    let mut pv = vec![0.0; d];
    pv[0] = 1.0;
    assert_eq!(mse_of(&pv, &pv, 1), 0.0);
    assert_eq!(mse_of(&pv, &vec![0.0; d], 1), 1.0 / d as f64);
    let doubled: Vec<f64> = pv.iter().chain(&pv).copied().collect();
    assert_eq!(mse_of(&doubled, &vec![0.0; 2 * d], 2), 1.0 / d as f64);
    with_session(|s| {
        let a = s.constant(t(&[1, 3], &[0.0; 3]));
        let b = s.constant(t(&[1, 4], &[0.0; 4]));
        let z = s.constant(Tensor::scalar(0.0));
        assert!(visual_prompt_loss(s, a, b, z).is_err());
    });
}

proptest! {
    #[test]
    fn visual_prompt_mse_permutation_equivariant(v in prop::collection::vec(-2.0f64..2.0, 24), shift in 1usize..3) {
        let (k, d) = (3, 4);
        let (pv, pt) = v.split_at(k * d);
        let rot = |x: &[f64]| { let mut y = x.to_vec(); y.rotate_left(shift * d); y };
        let (a, b) = (mse_of(pv, pt, k), mse_of(&rot(pv), &rot(pt), k));
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn focal_reduces_to_half_bce(z in -8.0f64..8.0, target in 0usize..2) {
        with_session(|s| {
            let x = s.constant(t(&[1], &[z]));
            let tt = t(&[1], &[target as f64]);
            let f = s.sigmoid_focal(x, &tt, 0.5, 0.0).unwrap();
            let b = s.bce_with_logits(x, &tt).unwrap();
            prop_assert!((s.value(f).item() - 0.5 * s.value(b).item()).abs() < 1e-12);
            Ok(())
        })?;
    }

    #[test]
    fn giou_symmetric_and_below_iou(a in (0.1f64..0.9, 0.1f64..0.9, 0.01f64..0.5, 0.01f64..0.5), b in (0.1f64..0.9, 0.1f64..0.9, 0.01f64..0.5, 0.01f64..0.5)) {
        let a = BBox::new(a.0, a.1, a.2, a.3);
        let b = BBox::new(b.0, b.1, b.2, b.3);
        let g = giou(&a, &b).unwrap();
        prop_assert_eq!(g, giou(&b, &a).unwrap());
        prop_assert!(g <= iou(&a, &b) + 1e-15);
        prop_assert!(g > -1.0 && g <= 1.0);
    }

    #[test]
    fn giou_term_never_rises_with_iou(w in 0.05f64..0.4, d1 in 0.0f64..0.3, d2 in 0.0f64..0.3) {
        // sliding a box toward its target along one axis
        let gt = BBox::new(0.5, 0.5, w, w);
        let (near, far) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        let a = BBox::new(0.5 + near, 0.5, w, w);
        let b = BBox::new(0.5 + far, 0.5, w, w);
        prop_assert!(iou(&a, &gt) >= iou(&b, &gt));
        prop_assert!(1.0 - giou(&a, &gt).unwrap() <= 1.0 - giou(&b, &gt).unwrap() + 1e-15);
    }
}

/// Store holding one head with identity projection and zero bias.
fn identity_head<H>(d: usize, build: impl FnOnce(&mut Init, usize) -> H, proj: impl Fn(&H) -> (ParamId, ParamId), bias: impl Fn(&H) -> ParamId) -> (ParamStore<f64>, H) {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = build(&mut Init::new(&mut store, &mut rng), d);
    let mut store = store.cast::<f64>();
    let eye: Vec<f64> = (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect();
    let (w, b) = proj(&h);
    store.set(w, t(&[d, d], &eye)).unwrap();
    store.set(b, Tensor::zeros(vec![d])).unwrap();
    store.set(bias(&h), Tensor::scalar(0.0)).unwrap();
    (store, h)
}

fn unit(d: usize, i: usize) -> Tensor<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    t(&[1, d], &v)
}

#[test]
fn similarity_examples() {
    let d = 16;
    let (mut store, head) = identity_head(d, |i, d| SimilarityHead::new(i, "score", d).unwrap(), |h| (h.proj.w, h.proj.b), |h| h.bias);
    let score = |store: &ParamStore<f64>, x: Tensor<f64>, p: Tensor<f64>| {
        let none = ParamSet::none(store);
        let mut s = Session::new(store, &none);
        let (x, p) = (s.constant(x), s.constant(p));
        let l = head.forward(&mut s, x, p).unwrap();
        s.value(l).data().to_vec()
    };
    assert_eq!(score(&store, unit(d, 0), unit(d, 0)), vec![1.0 / 4.0]);
    store.set(head.bias, Tensor::scalar(-1.5)).unwrap();
    assert_eq!(score(&store, unit(d, 0), unit(d, 3)), vec![-1.5]);
    // scaling one prompt row moves only its column
    let x = t(&[2, d], &(0..2 * d).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
    let p = t(&[2, d], &(0..2 * d).map(|i| (i as f64 * 0.11).cos()).collect::<Vec<_>>());
    let mut p2 = p.clone();
    p2.data_mut()[d..].iter_mut().for_each(|v| *v *= 3.0);
    let (a, b) = (score(&store, x.clone(), p), score(&store, x, p2));
    for q in 0..2 {
        assert_eq!(a[q * 2], b[q * 2]);
        assert!(((b[q * 2 + 1] + 1.5) - 3.0 * (a[q * 2 + 1] + 1.5)).abs() < 1e-12);
    }
}

#[test]
fn contrastive_examples() {
    let run = |d: usize, bias: f64, pi: usize| {
        let (mut store, head) = identity_head(d, |i, d| AuxHead::new(i, d).unwrap(), |h| (h.contrast.w, h.contrast.b), |h| h.bias);
        store.set(head.bias, Tensor::scalar(bias)).unwrap();
        let none = ParamSet::none(&store);
        let mut s = Session::new(&store, &none);
        let (a, p) = (s.constant(unit(d, 0)), s.constant(unit(d, pi)));
        let l = head.contrastive(&mut s, a, p).unwrap();
        s.value(l).item()
    };
    assert_eq!(run(16, 0.0, 0), 0.25);
    assert_eq!(run(16, 0.7, 1), 0.7);
    assert!((run(32, 0.0, 0) - run(16, 0.0, 0) / 2f64.sqrt()).abs() < 1e-15);
}
