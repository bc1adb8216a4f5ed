use conceptdet_tensor::container::{AnyTensor, Container};
use conceptdet_tensor::{ParamStore, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn round_trip_is_bit_exact(
        a in prop::collection::vec(any::<f32>(), 1..40),
        b in prop::collection::vec(any::<f64>(), 1..40),
        step in any::<u32>(),
    ) {
        let mut c = Container::new(serde_json::json!({ "step": step, "note": "x" }));
        c.push("a", AnyTensor::from_tensor(&Tensor::new(vec![a.len()], a.clone()).unwrap()));
        c.push("b.c", AnyTensor::from_tensor(&Tensor::new(vec![1, b.len()], b.clone()).unwrap()));
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.meta, &c.meta);
        let a2 = back.get("a").unwrap().to::<f32>();
        let b2 = back.get("b.c").unwrap().to::<f64>();
        prop_assert_eq!(a2.shape(), &[a.len()]);
        prop_assert_eq!(b2.shape(), &[1, b.len()]);
        prop_assert!(a2.data().iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(b2.data().iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn store_round_trip_through_file() {
    let mut store = ParamStore::<f32>::new();
    store.insert("w", Tensor::new(vec![2, 2], vec![1.0, -0.5, 3.25, f32::MIN_POSITIVE]).unwrap()).unwrap();
    store.insert("b", Tensor::new(vec![2], vec![0.1, 0.2]).unwrap()).unwrap();
    let mut c = Container::new(serde_json::json!({}));
    c.push_store("model.", &store);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    c.save(&path).unwrap();

    let mut other = ParamStore::<f32>::new();
    other.insert("w", Tensor::zeros(vec![2, 2])).unwrap();
    other.insert("b", Tensor::zeros(vec![2])).unwrap();
    Container::load(&path).unwrap().fill_store("model.", &mut other).unwrap();
    for ((_, _, x), (_, _, y)) in store.iter().zip(other.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn truncated_or_mismatched_input_is_rejected() {
    let mut c = Container::new(serde_json::json!({}));
    c.push("w", AnyTensor::from_tensor(&Tensor::<f64>::zeros(vec![3])));
    let bytes = c.to_bytes().unwrap();
    assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Container::from_bytes(&bytes[..4]).is_err());

    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::zeros(vec![4])).unwrap();
    assert!(c.fill_store("", &mut store).is_err());
}
