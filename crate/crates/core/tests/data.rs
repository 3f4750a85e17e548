mod common;

use std::fs;
use std::path::Path;

use gim::data::{holdout_split, load_mnist_dir, load_mnist_idx, noise_dataset, NoiseKind, SplitSpec};
use gim::{Dataset, GimError, IdxError, Tensor};
use proptest::prelude::*;

fn write_idx(dir: &Path, stem: &str, images: &[[u8; 4]], labels: &[u8]) {
    let mut img = 0x0803u32.to_be_bytes().to_vec();
    for v in [images.len() as u32, 2, 2] {
        img.extend(v.to_be_bytes());
    }
    img.extend(images.iter().flatten());
    fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), img).unwrap();
    let mut lab = 0x0801u32.to_be_bytes().to_vec();
    lab.extend((labels.len() as u32).to_be_bytes());
    lab.extend(labels);
    fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), lab).unwrap();
}

#[test]
fn mnist_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "train", &[[0, 255, 51, 0], [255; 4], [0; 4]], &[7, 0, 9]);
    write_idx(dir.path(), "t10k", &[[0; 4]], &[3]);
    let (train, test) = load_mnist_dir(dir.path()).unwrap();
    assert_eq!((train.len(), train.feature_dim(), train.num_classes()), (3, 4, 10));
    assert_eq!(train.labels(), &[7, 0, 9]);
    assert_eq!(train.features().row(0), &[0.0, 1.0, 0.2, 0.0]);
    assert!(test.features().data().iter().all(|&v| v == 0.0));
}

#[test]
fn idx_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "a", &[[1; 4], [2; 4]], &[1, 2]);
    let img = dir.path().join("a-images-idx3-ubyte");
    let lab = dir.path().join("a-labels-idx1-ubyte");
    let idx_err = |r: gim::Result<Dataset>| match r {
        Err(GimError::Idx(e)) => e,
        other => panic!("expected an IDX error, got {other:?}"),
    };
    assert!(matches!(idx_err(load_mnist_idx(&img, &img)), IdxError::BadMagic { .. }));

    let short = dir.path().join("short");
    let bytes = fs::read(&img).unwrap();
    fs::write(&short, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(idx_err(load_mnist_idx(&short, &lab)), IdxError::Truncated { .. }));

    write_idx(dir.path(), "b", &[[1; 4]], &[1, 2]);
    let err = idx_err(load_mnist_idx(&dir.path().join("b-images-idx3-ubyte"), &dir.path().join("b-labels-idx1-ubyte")));
    assert!(matches!(err, IdxError::CountMismatch { images: 1, labels: 2 }));

    assert!(matches!(load_mnist_idx(&dir.path().join("missing"), &lab), Err(GimError::Io { .. })));
}

#[test]
fn official_mnist_headers() {
    let dir = common::mnist_dir();
    if !dir.join("train-images-idx3-ubyte").exists() {
        eprintln!("MNIST not found at {}; skipping", dir.display());
        return;
    }
    let (train, test) = load_mnist_dir(&dir).unwrap();
    assert_eq!((train.len(), train.feature_dim(), train.num_classes()), (60_000, 784, 10));
    assert_eq!(test.len(), 10_000);
    assert!(train.features().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn noise_sets_are_flat_and_bounded() {
    for kind in [NoiseKind::Gaussian, NoiseKind::Uniform] {
        let d = noise_dataset(kind, 5, 28, 28, 3).unwrap();
        assert_eq!((d.len(), d.feature_dim(), d.num_classes()), (5, 784, 1));
        assert!(d.labels().iter().all(|&l| l == 0));
        assert!(d.features().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(d, noise_dataset(kind, 5, 28, 28, 3).unwrap());
    }
    assert!(noise_dataset(NoiseKind::Uniform, 0, 2, 2, 1).is_err());
}

#[test]
fn csv_export() {
    let d = common::scene(2, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.csv");
    d.write_csv(&path).unwrap();
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("f0,f1,label"));
    assert_eq!(lines.count(), 6);
}

fn ten_class_data(per_class: usize) -> Dataset {
    let n = 10 * per_class;
    let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let labels = (0..n).map(|i| i % 10).collect();
    Dataset::new(Tensor::matrix(n, 1, x).unwrap(), labels, 10, "ten").unwrap()
}

proptest! {
    #[test]
    fn holdout_conserves_and_relabels(mask in 1u16..1023, out_mask in 1u16..1023, frac in 0.2f64..0.8, seed in any::<u64>()) {
        let ins: Vec<usize> = (0..10).filter(|c| mask >> c & 1 == 1).collect();
        let outs: Vec<usize> = (0..10).filter(|c| out_mask >> c & 1 == 1 && !ins.contains(c)).collect();
        prop_assume!(!outs.is_empty());
        let data = ten_class_data(8);
        let spec = SplitSpec { in_class_ids: ins.clone(), out_class_ids: outs.clone(), train_fraction: frac, seed };
        let split = holdout_split(&data, &spec).unwrap();
        let union = data.labels().iter().filter(|l| ins.contains(l) || outs.contains(l)).count();
        prop_assert_eq!(split.train.len() + split.test_in.len() + split.test_out.len(), union);
        prop_assert_eq!(split.train.num_classes(), ins.len());
        prop_assert_eq!(&split.in_classes, &ins);
        // Row i holds value i, so original labels are recoverable as value mod 10.
        for d in [&split.train, &split.test_in] {
            for (row, &l) in d.features().row_iter().zip(d.labels()) {
                prop_assert_eq!(ins[l], row[0] as usize % 10);
            }
        }
        for row in split.test_out.features().row_iter() {
            prop_assert!(outs.contains(&(row[0] as usize % 10)));
        }
        prop_assert_eq!(holdout_split(&data, &spec).unwrap().train, split.train);
    }
}

#[test]
fn holdout_needs_an_out_set() {
    let spec = SplitSpec {
        in_class_ids: (0..10).collect(),
        out_class_ids: vec![],
        train_fraction: 0.5,
        seed: 0,
    };
    assert!(matches!(holdout_split(&ten_class_data(4), &spec), Err(GimError::Contract(_))));
}
