use std::collections::VecDeque;

use conceptdet::config::ModelConfig;
use conceptdet::encoders::{image_var, normalize_phrase, sample_negatives, MemoryBank, Vocabulary, UNK};
use conceptdet::model::Detector;
use conceptdet::tensor::{ParamSet, Session, Tensor};
use conceptdet::world::default_phrases;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn detector(cfg: &ModelConfig) -> Detector {
    let names = default_phrases();
    Detector::new(cfg, Vocabulary::from_phrases(names.iter().map(String::as_str)), 0).unwrap()
}

fn random_image(seed: u64, size: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![3, size, size], (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn features(det: &Detector, image: &Tensor<f32>) -> conceptdet::Result<Vec<Tensor<f32>>> {
    let none = ParamSet::none(&det.store);
    let mut s = Session::new(&det.store, &none);
    let x = image_var(&mut s, image);
    let f = det.model.backbone.forward(&mut s, x)?;
    Ok(f.maps.iter().map(|&m| s.value(m).clone()).collect())
}

#[test]
fn backbone_scales() {
    let det = detector(&ModelConfig::default());
    let img = random_image(1, 64);
    let maps = features(&det, &img).unwrap();
    let shapes: Vec<&[usize]> = maps.iter().map(|m| m.shape()).collect();
    assert_eq!(shapes, vec![&[32, 8, 8][..], &[32, 4, 4], &[32, 2, 2], &[32, 1, 1]]);
    assert_eq!(maps, features(&det, &img).unwrap());
    let big = features(&det, &random_image(2, 128)).unwrap();
    assert_eq!(big[3].shape(), &[32, 2, 2]);
    assert!(features(&det, &random_image(3, 96)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn backbone_outputs_finite(seed in 0u64..1000) {
        let det = detector(&ModelConfig::compact());
        for m in features(&det, &random_image(seed, 64)).unwrap() {
            prop_assert!(m.all_finite());
        }
    }
}

fn encode(det: &Detector, phrases: &[&str]) -> conceptdet::Result<Vec<f32>> {
    let none = ParamSet::none(&det.store);
    let mut s = Session::new(&det.store, &none);
    let p: Vec<String> = phrases.iter().map(|p| p.to_string()).collect();
    let v = det.model.text.encode(&mut s, &det.vocab, &p)?;
    Ok(s.value(v).data().to_vec())
}

#[test]
fn text_prompts_pool_tokens() {
    let det = detector(&ModelConfig::default());
    assert_eq!(encode(&det, &["red circle"]).unwrap(), encode(&det, &["circle red"]).unwrap());
    assert_eq!(encode(&det, &["red"]).unwrap(), encode(&det, &["red red"]).unwrap());
    assert_eq!(encode(&det, &["  Red   CIRCLE "]).unwrap(), encode(&det, &["red circle"]).unwrap());
    assert_ne!(encode(&det, &["red circle"]).unwrap(), encode(&det, &["red square"]).unwrap());
    let two = encode(&det, &["red circle", "blue square"]).unwrap();
    assert_eq!(two.len(), 64);
    assert_eq!(&two[32..], &encode(&det, &["blue square"]).unwrap()[..]);
    assert!(matches!(encode(&det, &[""]), Err(conceptdet::Error::Input(_))));
    assert!(encode(&det, &[]).is_err());
}

#[test]
fn text_pooling_is_mean_of_embeddings() {
    // an unknown token whose embedding is the mean of "red" and "circle"
    let det = detector(&ModelConfig::default());
    let store = det.store.cast::<f64>();
    let e = store.get(det.model.text.embed);
    let d = e.shape()[1];
    let (r, c) = (det.vocab.id("red"), det.vocab.id("circle"));
    let mean: Vec<f64> = (0..d).map(|j| (e.data()[r * d + j] + e.data()[c * d + j]) / 2.0).collect();
    let mut store2 = store.clone();
    let unk = det.vocab.id(UNK);
    store2.get_mut(det.model.text.embed).data_mut()[unk * d..(unk + 1) * d].copy_from_slice(&mean);
    let run = |st: &conceptdet::tensor::ParamStore<f64>, phrase: &str| {
        let none = ParamSet::none(st);
        let mut s = Session::new(st, &none);
        let v = det.model.text.encode(&mut s, &det.vocab, &[phrase.to_string()]).unwrap();
        s.value(v).data().to_vec()
    };
    let pooled = run(&store, "red circle");
    let direct = run(&store2, "zebra");
    for (a, b) in pooled.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn vocabulary_round_trip_and_unknowns() {
    let v = Vocabulary::from_phrases(["red circle", "blue circle"]);
    assert_eq!(v.tokens(), &[UNK, "red", "circle", "blue"]);
    assert_eq!(v.id("green"), 0);
    assert_eq!(v.tokenize("Blue  RED").unwrap(), vec![3, 1]);
    assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
    assert!(Vocabulary::parse("red\n<unk>\n").is_err());
    assert!(Vocabulary::parse("<unk>\nred\nred\n").is_err());
}

#[test]
fn memory_bank_survives_many_insertions() {
    let mut bank = MemoryBank::new(MemoryBank::DEFAULT_CAPACITY);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100_000 {
        bank.insert(&format!("thing {}", rng.random_range(0..5000)));
        assert!(bank.len() <= 1000);
    }
    assert_eq!(bank.len(), 1000);
}

proptest! {
    #[test]
    fn memory_bank_matches_list_oracle(cap in 0usize..8, ops in prop::collection::vec(0u8..12, 0..200)) {
        let mut bank = MemoryBank::new(cap);
        let mut list: VecDeque<String> = VecDeque::new();
        for o in ops {
            let p = format!("p{o}");
            let fresh = !list.contains(&p) && cap > 0;
            if fresh {
                if list.len() == cap {
                    list.pop_front();
                }
                list.push_back(p.clone());
            }
            prop_assert_eq!(bank.insert(&p), fresh);
            prop_assert_eq!(bank.iter().collect::<Vec<_>>(), list.iter().map(String::as_str).collect::<Vec<_>>());
        }
    }

    #[test]
    fn negatives_exclude_positives(seed in 0u64..1000, n in 0usize..120) {
        let mut bank = MemoryBank::new(1000);
        for i in 0..150 {
            bank.insert(&format!("word{i} thing"));
        }
        let dict = default_phrases();
        let positives = vec!["word3 thing".to_string(), dict[0].clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let neg = sample_negatives(&bank, &dict, &positives, n, &mut rng);
        prop_assert_eq!(neg.len(), n);
        prop_assert!(neg.iter().all(|p| !positives.contains(p)));
        let mut uniq = neg.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), n);
        let mut again = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(neg, sample_negatives(&bank, &dict, &positives, n, &mut again));
    }
}

#[test]
fn negatives_examples() {
    let mut bank = MemoryBank::new(1000);
    for i in 0..200 {
        bank.insert(&format!("color{i} shape"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pos = vec!["color1 shape".to_string()];
    assert_eq!(sample_negatives(&bank, &[], &pos, 80, &mut rng).len(), 80);
    assert!(sample_negatives(&bank, &[], &pos, 0, &mut rng).is_empty());
    let mut only = MemoryBank::new(4);
    only.insert("red circle");
    assert!(sample_negatives(&only, &["Red Circle".into()], &["red circle".into()], 5, &mut rng).is_empty());
    assert_eq!(normalize_phrase("  A  b "), "a b");
}
