mod common;

use std::path::Path;

use fairtrain_core::config::DatasetName;
use fairtrain_core::data::{build_bundle, load_attribute_dataset, BundleMeta, ImageOptions};
use fairtrain_core::evaluation::ConflictReference;
use fairtrain_core::experiment::build_dataset;
use fairtrain_core::seed::seed_all;
use fairtrain_core::{load_config, Error};

const OPTS: ImageOptions = ImageOptions { image_size: 8, crop_size: 0 };

fn write_rows(dir: &Path, header: &str, rows: &[String]) {
    image::RgbImage::from_pixel(5, 5, image::Rgb([9, 9, 9])).save(dir.join("x.png")).unwrap();
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(dir.join("metadata.csv"), text).unwrap();
}

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn four_rows_two_classes_one_bias() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<String> = [(0, 0), (0, 1), (1, 0), (1, 1)].iter().map(|(y, a)| format!("x.png,train,{y},{a}")).collect();
    write_rows(dir.path(), "filepath,split,target,bias_0", &rows);
    let splits = load_attribute_dataset(dir.path(), Path::new("metadata.csv"), OPTS, true).unwrap();
    let b = build_bundle("toy", splits, BundleMeta::default()).unwrap();
    assert_eq!((b.num_classes(), b.layout.num_attributes(), b.num_groups()), (2, 1, 4));
    assert_eq!(b.image_shape(), (3, 8, 8));
}

#[test]
fn missing_bias_column_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    write_rows(dir.path(), "filepath,split,target", &["x.png,train,0".to_string()]);
    let e = load_attribute_dataset(dir.path(), Path::new("metadata.csv"), OPTS, true).unwrap_err();
    assert!(matches!(e, Error::Schema(_)));
    assert!(e.to_string().contains("bias_0"), "{e}");
    for col in ["filepath", "split", "target"] {
        let header = ["filepath", "split", "target", "bias_0"].iter().filter(|c| **c != col).copied().collect::<Vec<_>>();
        write_rows(dir.path(), &header.join(","), &[]);
        let e = load_attribute_dataset(dir.path(), Path::new("metadata.csv"), OPTS, true).unwrap_err();
        assert!(e.to_string().contains(col), "{e}");
    }
}

#[test]
fn gapped_bias_columns_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_rows(dir.path(), "filepath,split,target,bias_0,bias_2", &["x.png,train,0,0,0".to_string()]);
    let e = load_attribute_dataset(dir.path(), Path::new("metadata.csv"), OPTS, true).unwrap_err();
    assert!(e.to_string().contains("bias_1"), "{e}");
}

#[test]
fn measured_co_occurrence_on_a_hand_built_csv() {
    let dir = tempfile::tempdir().unwrap();
    // 20 rows, 19 of which carry the bias value equal to their class
    let rows: Vec<String> = (0..20)
        .map(|i| {
            let y = i % 2;
            let a = if i == 7 { 1 - y } else { y };
            format!("x.png,train,{y},{a}")
        })
        .collect();
    write_rows(dir.path(), "filepath,split,target,bias_0", &rows);
    let splits = load_attribute_dataset(dir.path(), Path::new("metadata.csv"), OPTS, true).unwrap();
    let b = build_bundle("toy", splits, BundleMeta::default()).unwrap();
    let train = b.train();
    let reference = ConflictReference::from_labels(&b.layout, (0..train.len()).map(|i| (train.targets[i], train.bias_row(i)))).unwrap();
    let aligned = (0..train.len()).filter(|&i| !reference.is_conflicting(train.targets[i], train.bias_row(i))).count();
    assert_eq!(aligned as f64 / train.len() as f64, 0.95);
}

#[test]
fn bad_split_token_and_bad_label_name_their_row() {
    let dir = tempfile::tempdir().unwrap();
    write_rows(dir.path(), "filepath,split,target,bias_0", &["x.png,train,0,0".into(), "x.png,holdout,0,0".into()]);
    let e = load_attribute_dataset(dir.path(), Path::new("metadata.csv"), OPTS, true).unwrap_err();
    assert!(e.to_string().contains("row 3") && e.to_string().contains("holdout"), "{e}");
    write_rows(dir.path(), "filepath,split,target,bias_0", &["x.png,train,-1,0".into()]);
    let e = load_attribute_dataset(dir.path(), Path::new("metadata.csv"), OPTS, true).unwrap_err();
    assert!(e.to_string().contains("row 2"), "{e}");
}

#[test]
fn named_test_splits_are_kept_apart() {
    let dir = tempfile::tempdir().unwrap();
    common::write_standin(dir.path(), 3, &[], &["train", "val", "test_original", "test_mixed_rand"], 6);
    let splits = load_attribute_dataset(dir.path(), Path::new("metadata.csv"), OPTS, false).unwrap();
    assert_eq!(splits.keys().collect::<Vec<_>>(), ["test_mixed_rand", "test_original", "train", "val"]);
    let b = build_bundle("in9", splits, BundleMeta::default()).unwrap();
    assert_eq!((b.num_classes(), b.num_groups()), (3, 3));
}

#[test]
fn preset_configs_load_through_the_csv_path() {
    let cases = [
        ("biased_celeba", DatasetName::BiasedCelebA, 2, vec![2], vec!["train", "val", "test"]),
        ("biased_utkface", DatasetName::BiasedUtkface, 2, vec![2], vec!["train", "val", "test"]),
        ("waterbirds", DatasetName::Waterbirds, 2, vec![2], vec!["train", "val", "test"]),
        ("urbancars", DatasetName::UrbanCars, 2, vec![2, 2], vec!["train", "val", "test"]),
        (
            "imagenet9",
            DatasetName::ImageNet9,
            9,
            vec![],
            vec!["train", "val", "test_original", "test_mixed_same", "test_mixed_rand", "test_only_fg", "test_no_fg", "test_only_bg_b", "test_only_bg_t"],
        ),
    ];
    for (file, name, classes, cards, splits) in cases {
        let dir = tempfile::tempdir().unwrap();
        common::write_standin(dir.path(), classes, &cards, &splits, 2 * classes * cards.iter().product::<usize>());
        let root = format!("dataset.root={}", dir.path().display());
        let cfg = load_config(&configs_dir().join(format!("{file}.yaml")), &[root, "dataset.image_size=16".into(), "dataset.crop_size=12".into()])
            .unwrap_or_else(|e| panic!("{file}: {e}"));
        assert_eq!(cfg.dataset.name, name);
        let bundle = build_dataset(&cfg, &mut seed_all(0)).unwrap_or_else(|e| panic!("{file}: {e}"));
        assert_eq!(bundle.num_classes(), classes, "{file}");
        assert_eq!(bundle.layout.cardinalities, cards, "{file}");
        assert_eq!(bundle.image_shape(), (3, 12, 12), "{file}");
        for split in &cfg.eval.splits {
            assert!(bundle.splits.contains_key(split), "{file}: {split}");
        }
    }
}
