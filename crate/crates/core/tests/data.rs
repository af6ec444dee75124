mod common;

use std::collections::BTreeSet;

use fairtrain_core::config::DatasetName;
use fairtrain_core::data::digits::{synthetic_digits, DigitSet, PIXELS};
use fairtrain_core::data::mnist::{
    build_generated_bundle, carve_validation, colorize, generated_splits, BiasSpec, BIASED_MNIST_PRESETS,
    FB_BIASED_MNIST_PRESETS, FOREGROUND_THRESHOLD, PALETTE,
};
use fairtrain_core::data::{generate_biased_mnist, generate_fb_biased_mnist, GroupLayout, Sampler, SplitKind};
use fairtrain_core::load_config_str;
use fairtrain_core::seed::named_rng;

/// Digits with blank images; colour draws depend only on labels.
fn label_only(n: usize) -> DigitSet {
    DigitSet { images: vec![0; n * PIXELS], labels: (0..n).map(|i| (i % 10) as u8).collect() }
}

fn within_binomial(count: usize, n: usize, p: f64, sigmas: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= sigmas * sd
}

#[test]
fn full_correlation_aligns_every_sample() {
    let mut rng = named_rng(0, "t");
    let set = generate_biased_mnist(&label_only(500), 1.0, &mut rng, SplitKind::Train, 0).unwrap();
    assert!(set.iter().all(|s| s.biases[0] == s.target));
    let fb = generate_fb_biased_mnist(&label_only(500), 1.0, 1.0, &mut rng, SplitKind::Train, 0).unwrap();
    assert!(fb.iter().all(|s| s.biases == [s.target, s.target]));
}

#[test]
fn aligned_count_matches_binomial() {
    let n = 60_000;
    let mut rng = named_rng(3, "t");
    let set = generate_biased_mnist(&label_only(n), 0.99, &mut rng, SplitKind::Train, 0).unwrap();
    let aligned = set.iter().filter(|s| s.biases[0] == s.target).count();
    assert!(within_binomial(aligned, n, 0.99, 3.0), "{aligned}");
}

#[test]
fn fb_attributes_are_independent_binomials() {
    let n = 10_000;
    let mut rng = named_rng(4, "t");
    let set = generate_fb_biased_mnist(&label_only(n), 0.9, 0.99, &mut rng, SplitKind::Train, 0).unwrap();
    let fg = set.iter().filter(|s| s.biases[0] == s.target).count();
    let bg = set.iter().filter(|s| s.biases[1] == s.target).count();
    let both = set.iter().filter(|s| s.biases[0] == s.target && s.biases[1] == s.target).count();
    assert!(within_binomial(fg, n, 0.9, 3.0), "fg {fg}");
    assert!(within_binomial(bg, n, 0.99, 3.0), "bg {bg}");
    assert!(within_binomial(both, n, 0.9 * 0.99, 3.0), "joint {both}");
}

#[test]
fn presets_are_selectable() {
    assert_eq!(BIASED_MNIST_PRESETS, [0.99, 0.995, 0.997, 0.999]);
    assert_eq!(FB_BIASED_MNIST_PRESETS, [0.90, 0.95, 0.99]);
    for rho in BIASED_MNIST_PRESETS {
        BiasSpec::background(rho).check_preset(&BIASED_MNIST_PRESETS).unwrap();
        let c = load_config_str("", &[format!("dataset.bias_levels=[{rho}]")]).unwrap();
        assert_eq!(c.dataset.bias_levels, vec![rho]);
    }
    for rho in FB_BIASED_MNIST_PRESETS {
        BiasSpec::foreground(rho).check_preset(&FB_BIASED_MNIST_PRESETS).unwrap();
    }
    assert!(BiasSpec::background(0.98).check_preset(&BIASED_MNIST_PRESETS).is_err());
}

#[test]
fn colouring_follows_palette_and_mask() {
    let base = synthetic_digits(20, 0).train;
    let mut rng = named_rng(0, "t");
    let set = colorize(&base, &[BiasSpec::background(1.0)], &mut rng, SplitKind::Train, 0, 0).unwrap();
    for (i, s) in set.iter().enumerate() {
        for (px, &v) in base.image(i).iter().enumerate() {
            let rgb = &s.image[px * 3..px * 3 + 3];
            if v > FOREGROUND_THRESHOLD {
                assert_eq!(rgb, [v, v, v]);
            } else {
                assert_eq!(rgb, PALETTE[s.target]);
            }
        }
    }
    let fb = colorize(&base, &[BiasSpec::foreground(1.0)], &mut rng, SplitKind::Train, 0, 0).unwrap();
    let s = fb.sample(0);
    let px = base.image(0).iter().position(|&v| v > FOREGROUND_THRESHOLD).unwrap();
    let half = PALETTE[s.target].map(|c| c / 2);
    assert_eq!(&s.image[px * 3..px * 3 + 3], half);
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let base = synthetic_digits(300, 0).train;
    let gen = |seed| {
        let mut rng = named_rng(seed, "data");
        generate_biased_mnist(&base, 0.9, &mut rng, SplitKind::Train, 0).unwrap()
    };
    assert_eq!(gen(1), gen(1));
    assert_ne!(gen(1).biases, gen(2).biases);
}

#[test]
fn validation_is_the_disjoint_tail_of_train() {
    let mut rng = named_rng(0, "t");
    let set = generate_biased_mnist(&label_only(1000), 0.9, &mut rng, SplitKind::Train, 0).unwrap();
    let (train, val) = carve_validation(set);
    assert_eq!((train.len(), val.len()), (900, 100));
    assert_eq!(val.indices, (900..1000).collect::<Vec<_>>());
    let t: BTreeSet<_> = train.indices.iter().collect();
    assert!(val.indices.iter().all(|i| !t.contains(i)));
}

#[test]
fn group_index_is_a_bijection() {
    let layouts = [
        GroupLayout::new(10, vec![10]),
        GroupLayout::new(10, vec![10, 10]),
        GroupLayout::new(2, vec![2, 2]),
        GroupLayout::new(3, vec![4, 1, 5]),
        GroupLayout::new(7, vec![]),
    ];
    for layout in layouts {
        let mut seen = vec![false; layout.num_groups()];
        for y in 0..layout.num_classes {
            for c in 0..layout.num_combinations() {
                let a = layout.combination(c);
                let g = layout.group_index(y, &a).unwrap();
                assert!(!seen[g], "{layout:?} repeats {g}");
                seen[g] = true;
                assert_eq!(layout.group_parts(g).unwrap(), (y, a));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}

#[test]
fn group_index_examples() {
    let mnist = GroupLayout::new(10, vec![10]);
    assert_eq!(mnist.group_index(0, &[0]).unwrap(), 0);
    assert_eq!(mnist.group_index(3, &[7]).unwrap(), 37);
    assert_eq!(GroupLayout::new(2, vec![2, 2]).group_index(1, &[0, 1]).unwrap(), 5);
    assert!(mnist.group_index(10, &[0]).is_err());
    assert!(mnist.group_index(0, &[10]).is_err());
    assert!(mnist.group_index(0, &[0, 0]).is_err());
}

#[test]
fn generated_bundles_have_documented_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().display();
    for (name, levels, g) in [("biased_mnist", "[0.99]", 100), ("fb_biased_mnist", "[0.9, 0.99]", 1000)] {
        let c = load_config_str(
            &format!("dataset:\n  name: {name}\n  root: {root}\n  bias_levels: {levels}\n  train_size: 100\n  test_size: 50\n"),
            &[],
        )
        .unwrap();
        let mut rng = named_rng(0, "data");
        let b = build_generated_bundle(&c.dataset, 0, &mut rng).unwrap();
        assert_eq!(b.num_classes(), 10);
        assert_eq!(b.num_groups(), g);
        assert_eq!(b.image_shape(), (3, 28, 28));
        assert_eq!(b.splits.keys().collect::<Vec<_>>(), ["test", "train", "val"]);
    }
}

#[test]
fn cache_is_reused_and_keyed_by_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().display();
    let cfg = |size: usize| {
        load_config_str(
            &format!("dataset:\n  root: {root}\n  train_size: {size}\n  test_size: 40\n  bias_levels: [0.95]\n"),
            &[],
        )
        .unwrap()
    };
    let c = cfg(80);
    let first = generated_splits(&c.dataset, 7, &mut named_rng(7, "data")).unwrap();
    assert!(dir.path().join("generated").read_dir().unwrap().count() > 0);
    // a different rng proves the second call was served from the cache
    let cached = generated_splits(&c.dataset, 7, &mut named_rng(99, "other")).unwrap();
    assert_eq!(first, cached);
    let resized = generated_splits(&cfg(60).dataset, 7, &mut named_rng(7, "data")).unwrap();
    assert_eq!(resized["train"].len() + resized["val"].len(), 60);
}

#[test]
fn generated_split_is_stable_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let c = load_config_str(
        &format!("dataset:\n  root: {}\n  train_size: 60\n  test_size: 20\n  cache: false\n", dir.path().display()),
        &[],
    )
    .unwrap();
    let a = generated_splits(&c.dataset, 1, &mut named_rng(1, "data")).unwrap();
    let b = generated_splits(&c.dataset, 1, &mut named_rng(1, "data")).unwrap();
    assert_eq!(a, b);
    assert_eq!(c.dataset.name, DatasetName::BiasedMnist);
}

#[test]
fn weighted_sampler_rejects_bad_weights() {
    let mut rng = common::rng(0);
    assert!(Sampler::Weighted(vec![1.0; 3]).epoch_order(4, &mut rng).is_err());
    assert!(Sampler::Weighted(vec![0.0; 3]).epoch_order(3, &mut rng).is_err());
    let order = Sampler::Shuffle.epoch_order(50, &mut rng).unwrap();
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
}
