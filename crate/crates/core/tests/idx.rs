use std::io::Write;
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use sensprune::data::{load_idx, load_mnist, MNIST_FILES};
use sensprune::error::IdxError;
use sensprune::Error;

fn images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0803, count, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn labels(ls: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0801, ls.len() as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(ls);
    b
}

fn gz(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::default());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn two_by_two_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "img", &images(1, 2, 2, &[0, 255, 128, 64]));
    let lab = write(dir.path(), "lab", &labels(&[7]));
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!(ds.x.shape(), &[1, 4]);
    assert_eq!(ds.x.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    assert!((ds.x.data()[2] - 0.50196).abs() < 1e-5);
    assert_eq!(ds.labels, vec![7]);
}

#[test]
fn gzip_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let raw_img = images(3, 2, 2, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]);
    let raw_lab = labels(&[0, 1, 2]);
    let a = load_idx(&write(dir.path(), "i", &raw_img), &write(dir.path(), "l", &raw_lab)).unwrap();
    let b = load_idx(&write(dir.path(), "i.gz", &gz(&raw_img)), &write(dir.path(), "l.gz", &gz(&raw_lab))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bad_magic_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "img", &labels(&[1]));
    let lab = write(dir.path(), "lab", &labels(&[1]));
    match load_idx(&img, &lab) {
        Err(Error::Idx(e @ IdxError::BadMagic { .. })) => {
            assert!(e.to_string().contains("img"), "{e}");
            assert!(e.to_string().contains("0x00000801"), "{e}");
        }
        other => panic!("expected bad magic, got {other:?}"),
    }
}

#[test]
fn truncation_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "img", &images(2, 2, 2, &[0; 7]));
    let lab = write(dir.path(), "lab", &labels(&[1, 2]));
    assert!(matches!(load_idx(&img, &lab), Err(Error::Idx(IdxError::Truncated { expected: 24, found: 23, .. }))));
    let short = write(dir.path(), "short", &[0, 0, 8]);
    assert!(matches!(load_idx(&short, &lab), Err(Error::Idx(IdxError::Truncated { .. }))));
}

#[test]
fn count_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "img", &images(2, 1, 1, &[0, 0]));
    let lab = write(dir.path(), "lab", &labels(&[1, 2, 3]));
    assert!(matches!(
        load_idx(&img, &lab),
        Err(Error::Idx(IdxError::CountMismatch { image_count: 2, label_count: 3, .. }))
    ));
}

#[test]
fn out_of_range_label() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "img", &images(1, 1, 1, &[0]));
    let lab = write(dir.path(), "lab", &labels(&[10]));
    assert!(matches!(load_idx(&img, &lab), Err(Error::Idx(IdxError::BadLabel { label: 10, .. }))));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_mnist(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn mnist_directory_with_mixed_compression() {
    let dir = tempfile::tempdir().unwrap();
    let px: Vec<u8> = (0..2 * 784).map(|i| (i % 256) as u8).collect();
    write(dir.path(), &format!("{}.gz", MNIST_FILES[0]), &gz(&images(2, 28, 28, &px)));
    write(dir.path(), MNIST_FILES[1], &labels(&[3, 4]));
    write(dir.path(), MNIST_FILES[2], &images(1, 28, 28, &px[..784]));
    write(dir.path(), &format!("{}.gz", MNIST_FILES[3]), &gz(&labels(&[9])));
    let (train, test) = load_mnist(dir.path()).unwrap();
    assert_eq!((train.len(), test.len()), (2, 1));
    assert_eq!(train.x.shape(), &[2, 784]);
    assert_eq!(test.labels, vec![9]);
}
