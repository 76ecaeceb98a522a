use std::io::Write;
use std::path::Path;

use commlearn::data::{
    load_cifar_binary, load_cifar_file, load_fmnist, load_idx_pair, parse_cifar_records, parse_idx_images,
    parse_idx_labels, sample_minibatch, Split, CIFAR_RECORD_BYTES,
};
use commlearn::RngStream;
use flate2::write::GzEncoder;
use flate2::Compression;
use proptest::prelude::*;

fn idx_images(n: usize, rows: usize, cols: usize, pixel: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0x0000_0803u32, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend((0..n * rows * cols).map(pixel));
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

fn cifar_record(label: u8, seed: usize) -> Vec<u8> {
    let mut rec = vec![label];
    rec.extend((0..3072).map(|i| ((i * 7 + seed * 13) % 256) as u8));
    rec
}

fn write(path: &Path, bytes: &[u8]) {
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn idx_pair_round_trips_plain_and_gzip() {
    let dir = tempfile::tempdir().unwrap();
    let labels: Vec<u8> = (0..20).map(|i| (i % 10) as u8).collect();
    let images = idx_images(20, 3, 2, |i| (i * 11 % 256) as u8);
    write(&dir.path().join("img"), &images);
    write(&dir.path().join("lbl"), &idx_labels(&labels));
    write(&dir.path().join("img.gz"), &gzip(&images));
    write(&dir.path().join("lbl.gz"), &gzip(&idx_labels(&labels)));

    let plain = load_idx_pair(dir.path().join("img"), dir.path().join("lbl")).unwrap();
    let gz = load_idx_pair(dir.path().join("img.gz"), dir.path().join("lbl.gz")).unwrap();
    assert_eq!(plain.inputs, gz.inputs);
    assert_eq!(plain.inputs.shape(), &[20, 3, 2, 1]);
    assert_eq!(plain.labels, labels.iter().map(|&y| y as usize).collect::<Vec<_>>());
    for (i, &x) in plain.inputs.data().iter().enumerate() {
        assert_eq!(x, f64::from((i * 11 % 256) as u8) / 255.0);
    }
    assert_eq!(plain.split(Split::Train).len(), 18);
    assert_eq!(plain.split(Split::Validation).len(), 2);
}

#[test]
fn idx_count_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("img"), &idx_images(5, 2, 2, |_| 0));
    write(&dir.path().join("lbl"), &idx_labels(&[1, 2, 3, 4]));
    let err = load_idx_pair(dir.path().join("img"), dir.path().join("lbl")).unwrap_err();
    assert!(err.to_string().contains("mismatch"), "{err}");
}

#[test]
fn idx_bad_magic_is_an_error() {
    let mut bytes = idx_images(1, 1, 1, |_| 0);
    bytes[3] = 0x01;
    assert!(parse_idx_images(&bytes).unwrap_err().contains("magic"));
}

#[test]
fn fmnist_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let tr: Vec<u8> = (0..30).map(|i| (i % 10) as u8).collect();
    let te: Vec<u8> = (0..6).map(|i| (i % 10) as u8).collect();
    write(&dir.path().join("train-images-idx3-ubyte.gz"), &gzip(&idx_images(30, 4, 4, |i| i as u8)));
    write(&dir.path().join("train-labels-idx1-ubyte.gz"), &gzip(&idx_labels(&tr)));
    write(&dir.path().join("t10k-images-idx3-ubyte"), &idx_images(6, 4, 4, |_| 9));
    write(&dir.path().join("t10k-labels-idx1-ubyte"), &idx_labels(&te));
    let ds = load_fmnist(dir.path()).unwrap();
    assert_eq!(ds.inputs.shape(), &[36, 4, 4, 1]);
    assert_eq!(ds.split(Split::Train).len(), 27);
    assert_eq!(ds.split(Split::Validation).len(), 3);
    assert_eq!(ds.split(Split::Test).len(), 6);
    assert!(load_fmnist(tempfile::tempdir().unwrap().path()).is_err());
}

#[test]
fn cifar_two_records_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = cifar_record(3, 0);
    bytes.extend(cifar_record(7, 1));
    let path = dir.path().join("batch.bin");
    write(&path, &bytes);
    let ds = load_cifar_file(&path).unwrap();
    assert_eq!(ds.labels, vec![3, 7]);
    assert_eq!(ds.inputs.shape(), &[2, 32, 32, 3]);
    // HWC: pixel p channel c comes from plane c at offset p
    let rec = cifar_record(7, 1);
    let x = &ds.inputs.data()[3072..];
    for p in [0usize, 5, 1023] {
        for c in 0..3 {
            assert_eq!(x[p * 3 + c], f64::from(rec[1 + c * 1024 + p]) / 255.0);
        }
    }
}

#[test]
fn cifar_directory_needs_all_batches() {
    let dir = tempfile::tempdir().unwrap();
    for i in 1..=5 {
        let mut b = cifar_record(i as u8, i);
        b.extend(cifar_record(0, i + 10));
        write(&dir.path().join(format!("data_batch_{i}.bin")), &b);
    }
    let ds = load_cifar_binary(dir.path()).unwrap();
    assert_eq!(ds.len(), 10);
    assert_eq!(ds.split(Split::Test).len(), 0);
    write(&dir.path().join("test_batch.bin"), &cifar_record(9, 0));
    let ds = load_cifar_binary(dir.path()).unwrap();
    assert_eq!(ds.split(Split::Test).len(), 1);
    std::fs::remove_file(dir.path().join("data_batch_3.bin")).unwrap();
    assert!(load_cifar_binary(dir.path()).is_err());
}

#[test]
fn minibatch_from_loaded_data() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("img"), &idx_images(10, 2, 2, |i| i as u8));
    write(&dir.path().join("lbl"), &idx_labels(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]));
    let ds = load_idx_pair(dir.path().join("img"), dir.path().join("lbl")).unwrap();
    let a = sample_minibatch(&ds, Split::Train, 16, &mut RngStream::new(1)).unwrap();
    let b = sample_minibatch(&ds, Split::Train, 16, &mut RngStream::new(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 16);
    assert!(sample_minibatch(&ds, Split::Test, 4, &mut RngStream::new(1)).is_err());
}

proptest! {
    #[test]
    fn corrupt_idx_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64), magic in any::<bool>()) {
        let mut b = bytes.clone();
        if magic && b.len() >= 4 {
            b[..4].copy_from_slice(&0x0000_0803u32.to_be_bytes());
        }
        let _ = parse_idx_images(&b);
        let _ = parse_idx_labels(&b);
    }

    #[test]
    fn corrupt_cifar_never_panics(len in 0usize..3 * CIFAR_RECORD_BYTES, fill in any::<u8>()) {
        let _ = parse_cifar_records(&vec![fill; len]);
    }

    #[test]
    fn truncated_files_are_errors(cut in 0usize..40) {
        let full = idx_images(2, 3, 3, |i| i as u8);
        prop_assume!(cut < full.len());
        prop_assert!(parse_idx_images(&full[..cut]).is_err());
    }
}
