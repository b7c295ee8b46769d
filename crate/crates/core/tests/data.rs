mod common;

use std::fs;
use std::io::Write;
use std::path::Path;

use asp_vision::data::{
    augment, load_cifar10, load_mnist_dir, load_mnist_idx, shift_image, to_gray, Augmentation, DataError, Dataset,
    Split,
};
use asp_vision::sensor::Image;
use flate2::write::GzEncoder;
use flate2::Compression;
use proptest::prelude::*;

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [2051, n, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [2049, labels.len() as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(labels);
    b
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, bytes).unwrap();
    p
}

fn gz(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::default());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

#[test]
fn parses_small_idx_pair() {
    let dir = tempfile::tempdir().unwrap();
    let px: Vec<u8> = (0..12).map(|i| i * 20).collect();
    let i = write(dir.path(), "img", &idx_images(2, 2, 3, &px));
    let l = write(dir.path(), "lbl", &idx_labels(&[3, 9]));
    let d = load_mnist_idx(&i, &l).unwrap();
    assert_eq!((d.len(), d.image_size()), (2, (2, 3)));
    assert_eq!(d.labels, vec![3, 9]);
    assert_eq!(d.images[1].at(1, 2), 220.0 / 255.0);

    let gi = write(dir.path(), "img.gz", &gz(&idx_images(2, 2, 3, &px)));
    let gl = write(dir.path(), "lbl.gz", &gz(&idx_labels(&[3, 9])));
    let from_gz = load_mnist_idx(&gi, &gl).unwrap();
    assert_eq!(from_gz.images, d.images);
    assert_eq!(from_gz.fingerprint(), d.fingerprint());
}

#[test]
fn rejects_malformed_idx() {
    let dir = tempfile::tempdir().unwrap();
    let px = [0u8; 8];
    let good_i = write(dir.path(), "i", &idx_images(2, 2, 2, &px));
    let good_l = write(dir.path(), "l", &idx_labels(&[0, 1]));

    let mut bad = idx_labels(&[0, 1]);
    bad[3] = 0x02; // 2050
    let bad_l = write(dir.path(), "bad_l", &bad);
    let err = load_mnist_idx(&good_i, &bad_l).unwrap_err();
    assert!(matches!(err, DataError::Format { .. }) && err.to_string().contains("magic"), "{err}");

    let short = write(dir.path(), "short", &idx_images(2, 2, 2, &px[..7]));
    assert!(load_mnist_idx(&short, &good_l).unwrap_err().to_string().contains("truncated"));

    let three = write(dir.path(), "three", &idx_labels(&[0, 1, 2]));
    assert!(matches!(load_mnist_idx(&good_i, &three), Err(DataError::CountMismatch { images: 2, labels: 3 })));

    let mut label_out_of_range = idx_labels(&[0, 10]);
    label_out_of_range[9] = 10;
    let oor = write(dir.path(), "oor", &label_out_of_range);
    assert!(load_mnist_idx(&good_i, &oor).is_err());

    assert!(matches!(load_mnist_idx(dir.path().join("missing"), &good_l), Err(DataError::Io { .. })));
}

#[test]
fn mnist_files_on_disk() {
    let Some(dir) = common::mnist_dir() else { return };
    let train = load_mnist_dir(&dir, Split::Train).unwrap();
    let test = load_mnist_dir(&dir, Split::Test).unwrap();
    assert_eq!((train.len(), train.image_size()), (60_000, (28, 28)));
    assert_eq!((test.len(), test.image_size()), (10_000, (28, 28)));

    // reference values read straight from the raw files with a separate parser
    let bytes = |img: &Image| img.values().iter().map(|v| (v * 255.0).round() as u64).sum::<u64>();
    assert_eq!((bytes(&train.images[0]), train.labels[0]), (27_525, 5));
    assert_eq!((bytes(&test.images[0]), test.labels[0]), (18_454, 7));
    let raw = fs::read(dir.join("train-images-idx3-ubyte")).unwrap_or_default();
    if !raw.is_empty() {
        let first: Vec<f64> = raw[16..16 + 784].iter().map(|&b| b as f64 / 255.0).collect();
        assert_eq!(train.images[0].values(), first.as_slice());
    }
}

fn cifar_record(label: u8, rgb: (u8, u8, u8)) -> Vec<u8> {
    let mut rec = vec![label];
    for c in [rgb.0, rgb.1, rgb.2] {
        rec.extend(std::iter::repeat_n(c, 1024));
    }
    rec
}

#[test]
fn cifar_batches_to_grayscale() {
    let dir = tempfile::tempdir().unwrap();
    for i in 1..=5u8 {
        let mut batch = cifar_record(i, (255, 0, 0));
        batch.extend(cifar_record(0, (77, 77, 77)));
        write(dir.path(), &format!("data_batch_{i}.bin"), &batch);
    }
    write(dir.path(), "test_batch.bin", &cifar_record(9, (0, 0, 255)));
    let train = load_cifar10(dir.path(), Split::Train).unwrap();
    assert_eq!((train.len(), train.image_size(), train.n_classes), (10, (32, 32), 10));
    assert!((train.images[0].at(5, 5) - 0.299).abs() < 1e-12);
    assert!((train.images[1].at(0, 0) - 77.0 / 255.0).abs() < 1e-12);
    assert_eq!(train.labels[..4], [1, 0, 2, 0]);
    let test = load_cifar10(dir.path(), Split::Test).unwrap();
    assert!((test.images[0].at(31, 31) - 0.114).abs() < 1e-12);

    let truncated = write(dir.path(), "short.bin", &cifar_record(1, (1, 2, 3))[..3000]);
    assert!(load_cifar10(&truncated, Split::Train).unwrap_err().to_string().contains("3073"));
}

fn digits(n: usize) -> Dataset {
    let images = (0..n)
        .map(|i| Image::new(28, 28, (0..784).map(|p| ((p * 7 + i * 13) % 256) as f64 / 255.0).collect()).unwrap())
        .collect();
    Dataset::new(images, (0..n).map(|i| i % 10).collect(), 10, "digits").unwrap()
}

#[test]
fn identity_combination_duplicates_exactly() {
    let d = digits(5);
    let out = augment(&d, &Augmentation { shifts: vec![(0, 0)], rotations: vec![0.0] }).unwrap();
    assert_eq!(out.len(), 10);
    assert_eq!(out.images[..5], out.images[5..]);
    assert_eq!(out.images[..5], d.images[..]);
}

#[test]
fn three_hundred_images_expand_to_about_2946() {
    let d = digits(300);
    let aug = Augmentation { shifts: vec![(-2, 0), (2, 0), (0, 2)], rotations: vec![-10.0, 0.0, 10.0] };
    let out = augment(&d, &aug).unwrap();
    assert_eq!(out.len(), aug.output_len(300));
    assert!((out.len() as f64 - 2946.0).abs() / 2946.0 < 0.02, "{}", out.len());
    for block in out.labels.chunks(300) {
        assert_eq!(block, d.labels.as_slice());
    }
}

#[test]
fn shifted_copy_lands_two_columns_right() {
    let d = digits(1);
    let out = augment(&d, &Augmentation { shifts: vec![(2, 0)], rotations: vec![0.0] }).unwrap();
    let (src, dst) = (&out.images[0], &out.images[1]);
    for r in 0..28 {
        assert_eq!(dst.at(r, 0), 0.0);
        assert_eq!(dst.at(r, 1), 0.0);
        for c in 0..26 {
            assert_eq!(dst.at(r, c + 2), src.at(r, c));
        }
    }
    assert_eq!(*dst, shift_image(src, 2, 0));
}

#[test]
fn oversized_shift_is_rejected() {
    assert!(augment(&digits(1), &Augmentation { shifts: vec![(28, 0)], rotations: vec![0.0] }).is_err());
}

proptest! {
    #[test]
    fn gray_of_gray_is_identity(v in any::<u8>()) {
        prop_assert!((to_gray(v, v, v) - v as f64 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn augmented_size_and_labels(n in 1usize..6, shifts in proptest::collection::vec((-3i64..=3, -3i64..=3), 0..4), rotations in proptest::collection::vec(-30.0f64..30.0, 0..3)) {
        let d = digits(n);
        let aug = Augmentation { shifts, rotations };
        let out = augment(&d, &aug).unwrap();
        prop_assert_eq!(out.len(), n * (1 + aug.shifts.len() * aug.rotations.len()));
        prop_assert!(out.images.iter().all(|i| i.values().iter().all(|v| (0.0..=1.0).contains(v))));
        for (i, l) in out.labels.iter().enumerate() {
            prop_assert_eq!(*l, d.labels[i % n]);
        }
    }
}
