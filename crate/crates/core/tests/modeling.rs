mod common;

use fairtrain_core::config::ModelName;
use fairtrain_core::experiment::build_dataset;
use fairtrain_core::mitigation::losses::erm_loss;
use fairtrain_core::modeling::train::{predict_split, OptimSettings};
use fairtrain_core::modeling::{build_model, per_head, train_bias_capturing_model, Mode, Network};
use fairtrain_core::seed::{named_rng, seed_all};
use fairtrain_tensor::{Binding, Graph, Tensor};

fn simple(heads: usize, seed: u64) -> Network<f32> {
    build_model(ModelName::SimpleConvNet, 10, heads, 3, &mut named_rng(seed, "model_init")).unwrap()
}

fn images(n: usize, seed: u64) -> Tensor<f32> {
    common::uniform(&[n, 3, 28, 28], -2.0, 2.0, &mut common::rng(seed)).cast()
}

#[test]
fn output_shapes() {
    let x = images(4, 0);
    let (z, logits) = simple(1, 0).infer(&x).unwrap();
    assert_eq!((z.shape(), logits.shape()), (&[4, 128][..], &[4, 10][..]));
    let (_, multi) = simple(10, 0).infer(&x).unwrap();
    assert_eq!(multi.shape(), &[4, 100]);
    let heads = per_head(&multi, 10);
    assert_eq!((heads.len(), heads[0].len(), heads[0][0].len()), (4, 10, 10));
}

#[test]
fn same_seed_same_initialization() {
    let a = simple(1, 3);
    let b = simple(1, 3);
    let c = simple(1, 4);
    assert_eq!(a.to_container(), b.to_container());
    assert_ne!(a.to_container(), c.to_container());
}

#[test]
fn empty_batch_gives_empty_features() {
    let x = Tensor::<f32>::zeros(&[0, 3, 28, 28]);
    let (z, logits) = simple(1, 0).infer(&x).unwrap();
    assert_eq!((z.shape(), logits.shape()), (&[0, 128][..], &[0, 10][..]));
}

#[test]
fn eval_forward_is_pure() {
    let net = simple(1, 0);
    let x = images(6, 1);
    let mut dup = x.data()[..x.len() / 6].to_vec();
    dup.extend_from_within(..);
    let dup = Tensor::new(&[2, 3, 28, 28], dup).unwrap();
    let (zd, _) = net.infer(&dup).unwrap();
    assert_eq!(zd.row(0), zd.row(1));
    let first = net.infer(&x).unwrap();
    // a training-mode pass without a parameter update must not leak into eval
    let mut g = Graph::new();
    let mut bind = Binding::new(&net.params);
    let xv = g.constant(x.clone());
    net.forward(&mut g, &mut bind, xv, Mode::Train).unwrap();
    assert_eq!(net.infer(&x).unwrap(), first);
    // the same sample alone or inside a batch gets the same features
    let (z_single, _) = net.infer(&x.select_rows(&[2])).unwrap();
    assert_eq!(z_single.row(0), first.0.row(2));
}

#[test]
fn features_are_finite_over_many_draws() {
    let net = simple(1, 5);
    let (z, logits) = net.infer(&images(1000, 9)).unwrap();
    assert!(z.all_finite() && logits.all_finite());
}

#[test]
fn every_trainable_parameter_gets_a_gradient() {
    let net = simple(3, 2);
    let x = images(8, 2);
    let y: Vec<usize> = (0..8).map(|i| i % 10).collect();
    let mut g = Graph::new();
    let mut bind = Binding::new(&net.params);
    let xv = g.constant(x);
    let out = net.forward(&mut g, &mut bind, xv, Mode::Train).unwrap();
    let loss = erm_loss(&mut g, out.logits, &y).unwrap().total;
    let grads = g.backward(loss).unwrap();
    let pg = bind.grads(&g, &grads);
    for (name, p) in net.params.iter() {
        if !net.params.is_trainable(name) {
            continue;
        }
        let grad = pg.get(name).unwrap_or_else(|| panic!("{name} got no gradient"));
        assert_eq!(grad.shape(), p.value.shape());
        assert!(grad.data().iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn parameter_container_round_trip_checks_architecture() {
    let a = simple(1, 0);
    let mut b = simple(1, 1);
    b.load_container(&a.to_container()).unwrap();
    assert_eq!(b.to_container(), a.to_container());
    let mut other = simple(2, 0);
    assert!(other.load_container(&a.to_container()).is_err());
}

#[test]
fn resnets_build_and_run_on_small_inputs() {
    for (arch, d) in [(ModelName::ResNet18, 512), (ModelName::ResNet50, 2048)] {
        let net: Network<f32> = build_model(arch, 2, 1, 3, &mut named_rng(0, "m")).unwrap();
        assert_eq!(net.feature_dim(), d);
        let x: Tensor<f32> = common::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut common::rng(0)).cast();
        let (z, logits) = net.infer(&x).unwrap();
        assert_eq!((z.shape(), logits.shape()), (&[2, d][..], &[2, 2][..]));
        assert!(logits.all_finite());
    }
    assert!(build_model::<f32, _>(ModelName::VitB16, 2, 1, 3, &mut named_rng(0, "m")).is_err());
}

#[test]
fn bias_capturing_model_learns_background_colour() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path(), "erm", &["dataset.train_size=1500", "dataset.test_size=300", "dataset.bias_levels=[0.99]"]);
    let bundle = build_dataset(&cfg, &mut seed_all(0)).unwrap();
    let settings = OptimSettings::from(&cfg.train);
    let model = train_bias_capturing_model(
        &bundle,
        0,
        2,
        ModelName::SimpleConvNet,
        &settings,
        &mut named_rng(0, "init"),
        &mut named_rng(0, "shuffle"),
    )
    .unwrap();
    let (_, logits) = predict_split(&model.net, &bundle, "test").unwrap();
    let test = bundle.split("test").unwrap();
    let pred = logits.argmax_rows();
    let correct = (0..test.len()).filter(|&i| pred[i] == test.bias_row(i)[0]).count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.95, "bias accuracy {acc}");
}

#[test]
fn constant_attribute_cannot_train_a_bias_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path(), "erm", &["dataset.bias_levels=[1.0]"]);
    let mut bundle = build_dataset(&cfg, &mut seed_all(0)).unwrap();
    let train = bundle.splits.get_mut("train").unwrap();
    train.biases.iter_mut().for_each(|a| *a = 4);
    let e = train_bias_capturing_model(
        &bundle,
        0,
        1,
        ModelName::SimpleConvNet,
        &OptimSettings::from(&cfg.train),
        &mut named_rng(0, "init"),
        &mut named_rng(0, "shuffle"),
    )
    .unwrap_err();
    assert!(e.to_string().contains("attribute has one value"), "{e}");
}
