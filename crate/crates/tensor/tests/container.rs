use fairtrain_tensor::{Container, Optimizer, ParamStore, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn round_trip_preserves_entries(vals in proptest::collection::vec(-1e6f32..1e6, 0..40),
                                    bytes in proptest::collection::vec(any::<u8>(), 0..40)) {
        let mut c = Container::new("arch:test");
        c.meta = serde_json::json!({"epoch": 3});
        c.insert_tensor("w", &Tensor::new(&[vals.len()], vals.clone()).unwrap());
        c.insert_bytes("img", &[bytes.len()], bytes.clone());
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back, &c);
        let w = back.tensor::<f32>("w").unwrap();
        prop_assert_eq!(w.data(), &vals[..]);
    }
}

#[test]
fn truncated_or_flipped_bytes_are_rejected() {
    let mut c = Container::new("fp");
    c.insert_tensor("w", &Tensor::<f64>::full(&[3, 3], 0.25));
    let bytes = c.to_bytes().unwrap();
    for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(Container::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[20] ^= 1;
    assert!(Container::from_bytes(&flipped).is_err());
}

#[test]
fn dtype_mismatch_is_an_error() {
    let mut c = Container::new("fp");
    c.insert_tensor("w", &Tensor::<f32>::full(&[2], 1.0));
    assert!(c.tensor::<f64>("w").is_err());
    assert!(c.tensor::<f32>("missing").is_err());
}

#[test]
fn sgd_and_adam_descend_a_quadratic() {
    for mut opt in [Optimizer::<f64>::sgd(0.1, 0.9, 0.0), Optimizer::adam(0.1, 0.0)] {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::full(&[2], 3.0), true);
        for _ in 0..300 {
            let x = store.get("x").unwrap().clone();
            let grad = x.map(|v| 2.0 * v);
            let grads = [("x".to_string(), grad)].into_iter().collect();
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }
}

#[test]
fn buffers_are_not_optimized() {
    let mut store = ParamStore::<f32>::new();
    store.insert("running", Tensor::full(&[1], 1.0), false);
    let mut opt = Optimizer::sgd(1.0, 0.0, 0.0);
    let grads = [("running".to_string(), Tensor::full(&[1], 5.0))].into_iter().collect();
    opt.step(&mut store, &grads).unwrap();
    assert_eq!(store.get("running").unwrap().data(), &[1.0]);
}
