//! Datasets: IDX (Fashion-MNIST) and CIFAR-10 binary loaders, synthetic
//! Gaussian-cluster tasks, and reproducible minibatch sampling.

use std::fs;
use std::io::Read;
use std::ops::Range;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::{purpose, RngStream};
use crate::tensor::Tensor;

pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const CIFAR_RECORD_BYTES: usize = 1 + 32 * 32 * 3;
pub const DATA_DIR_ENV: &str = "COMMLEARN_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x sample dims`, values in `[0, 1]` for image data.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample_size(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn split(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Validation => self.validation.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// Checks split ranges are in bounds and pairwise disjoint, and labels are in range.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.inputs.shape().first() != Some(&n) {
            return Err(Error::Shape(format!(
                "{} labels for inputs of shape {:?}",
                n,
                self.inputs.shape()
            )));
        }
        let ranges = [&self.train, &self.validation, &self.test];
        for r in ranges {
            if r.start > r.end || r.end > n {
                return Err(Error::Invalid(format!("split {r:?} outside [0, {n})")));
            }
        }
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a.start < b.end && b.start < a.end {
                    return Err(Error::Invalid(format!("splits {a:?} and {b:?} overlap")));
                }
            }
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Invalid(format!("label {y} >= {} classes", self.num_classes)));
        }
        Ok(())
    }

    /// Splits `[0, n_train)` into train and a trailing validation block of
    /// `frac` of its size; everything after `n_train` becomes test.
    fn with_carved_validation(mut self, n_train: usize, frac: f64) -> Self {
        let n_valid = (n_train as f64 * frac).floor() as usize;
        self.train = 0..n_train - n_valid;
        self.validation = n_train - n_valid..n_train;
        self.test = n_train..self.len();
        self
    }
}

/// Gaussian-cluster classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dims: usize,
    pub samples_per_class: usize,
    pub cluster_std: f64,
    pub seed: u64,
}

/// One cluster per class with means drawn from `N(0, I)`; samples are
/// shuffled and split 80/10/10 into train/validation/test.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.dims == 0 || spec.samples_per_class == 0 {
        return Err(Error::Invalid(format!("degenerate synthetic spec {spec:?}")));
    }
    if !(spec.cluster_std >= 0.0 && spec.cluster_std.is_finite()) {
        return Err(Error::Invalid("cluster_std must be finite and non-negative".into()));
    }
    let root = RngStream::new(spec.seed).derive(purpose::DATA);
    let mut ms = root.derive(0);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dims).map(|_| StandardNormal.sample(&mut ms)).collect())
        .collect();

    let n = spec.num_classes * spec.samples_per_class;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut root.derive(purpose::SHUFFLE));

    let mut xs = root.derive(1);
    let mut samples = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let x: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut xs);
                    m + spec.cluster_std * z
                })
                .collect();
            samples.push((x, c));
        }
    }
    let mut data = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    for &i in &order {
        data.extend_from_slice(&samples[i].0);
        labels.push(samples[i].1);
    }
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    Ok(Dataset {
        inputs: Tensor::new(vec![n, spec.dims], data)?,
        labels,
        num_classes: spec.num_classes,
        train: 0..n_train,
        validation: n_train..n_train + n_valid,
        test: n_train + n_valid..n,
    })
}

/// Draws `size` samples with replacement from `split`.
pub fn sample_minibatch(ds: &Dataset, split: Split, size: usize, stream: &mut RngStream) -> Result<Batch> {
    let range = ds.split(split);
    if range.is_empty() {
        return Err(Error::EmptySplit(split.name()));
    }
    if size == 0 {
        return Err(Error::Invalid("minibatch size must be positive".into()));
    }
    let d = ds.sample_size();
    let src = ds.inputs.data();
    let mut data = Vec::with_capacity(size * d);
    let mut labels = Vec::with_capacity(size);
    for _ in 0..size {
        let i = range.start + stream.below(range.len());
        data.extend_from_slice(&src[i * d..(i + 1) * d]);
        labels.push(ds.labels[i]);
    }
    let mut shape = vec![size];
    shape.extend_from_slice(ds.sample_shape());
    Ok(Batch {
        inputs: Tensor::new(shape, data)?,
        labels,
    })
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parsed IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, &[u8]), String> {
    let magic = be_u32(bytes, 0).ok_or("truncated header")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(format!("bad magic number {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"));
    }
    let n = be_u32(bytes, 4).ok_or("truncated header")? as usize;
    let rows = be_u32(bytes, 8).ok_or("truncated header")? as usize;
    let cols = be_u32(bytes, 12).ok_or("truncated header")? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or("dimension overflow")?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(format!("truncated file: {} pixel bytes, expected {need}", body.len()));
    }
    if rows == 0 || cols == 0 {
        return Err("zero image dimension".into());
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<&[u8], String> {
    let magic = be_u32(bytes, 0).ok_or("truncated header")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(format!("bad magic number {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"));
    }
    let n = be_u32(bytes, 4).ok_or("truncated header")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(format!("truncated file: {} label bytes, expected {n}", body.len()));
    }
    Ok(&body[..n])
}

/// Loads an IDX image/label pair (optionally gzip-wrapped). The last 10% of
/// samples become the validation split; there is no test split.
pub fn load_idx_pair(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (inputs, labels) = read_idx_pair(images_path.as_ref(), labels_path.as_ref())?;
    let n = labels.len();
    let ds = Dataset {
        inputs,
        labels,
        num_classes: 10,
        train: 0..n,
        validation: n..n,
        test: n..n,
    };
    Ok(ds.with_carved_validation(n, 0.1))
}

fn read_idx_pair(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let img_bytes = read_maybe_gz(images_path)?;
    let lbl_bytes = read_maybe_gz(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes).map_err(|m| Error::format(images_path, m))?;
    let lbls = parse_idx_labels(&lbl_bytes).map_err(|m| Error::format(labels_path, m))?;
    if lbls.len() != n {
        return Err(Error::format(
            labels_path,
            format!("count mismatch: {n} images but {} labels", lbls.len()),
        ));
    }
    if let Some(&y) = lbls.iter().find(|&&y| y > 9) {
        return Err(Error::format(labels_path, format!("label {y} outside 0..=9")));
    }
    if n == 0 {
        return Err(Error::format(images_path, "no images"));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok((
        Tensor::new(vec![n, rows, cols, 1], data)?,
        lbls.iter().map(|&y| y as usize).collect(),
    ))
}

/// Fashion-MNIST from its four standard files (plain or `.gz`). Training data
/// is split 90/10 into train/validation; `t10k` becomes the test split.
pub fn load_fmnist(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let find = |stem: &str| -> Result<PathBuf> {
        [stem.to_string(), format!("{stem}.gz")]
            .iter()
            .map(|f| dir.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| Error::format(dir.join(stem), "missing file"))
    };
    let (tr_x, tr_y) = read_idx_pair(&find("train-images-idx3-ubyte")?, &find("train-labels-idx1-ubyte")?)?;
    let (te_x, te_y) = read_idx_pair(&find("t10k-images-idx3-ubyte")?, &find("t10k-labels-idx1-ubyte")?)?;
    if tr_x.shape()[1..] != te_x.shape()[1..] {
        return Err(Error::format(dir, "train/test image sizes differ"));
    }
    let n_train = tr_y.len();
    let mut shape = tr_x.shape().to_vec();
    shape[0] += te_y.len();
    let mut data = tr_x.into_data();
    data.extend(te_x.into_data());
    let mut labels = tr_y;
    labels.extend(te_y);
    let ds = Dataset {
        inputs: Tensor::new(shape, data)?,
        labels,
        num_classes: 10,
        train: 0..0,
        validation: 0..0,
        test: 0..0,
    };
    Ok(ds.with_carved_validation(n_train, 0.1))
}

/// Decodes CIFAR-10 binary records into `(HWC pixels in [0,1], labels)`.
pub fn parse_cifar_records(bytes: &[u8]) -> std::result::Result<(Vec<f64>, Vec<usize>), String> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(format!(
            "file size {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let y = rec[0];
        if y > 9 {
            return Err(format!("label {y} outside 0..=9"));
        }
        labels.push(y as usize);
        let planes = &rec[1..];
        for pix in 0..1024 {
            for ch in 0..3 {
                data.push(f64::from(planes[ch * 1024 + pix]) / 255.0);
            }
        }
    }
    Ok((data, labels))
}

/// Loads a single CIFAR-10 binary batch file; everything is train data.
pub fn load_cifar_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (data, labels) = parse_cifar_records(&bytes).map_err(|m| Error::format(path, m))?;
    let n = labels.len();
    Ok(Dataset {
        inputs: Tensor::new(vec![n, 32, 32, 3], data)?,
        labels,
        num_classes: 10,
        train: 0..n,
        validation: n..n,
        test: n..n,
    })
}

/// Loads the CIFAR-10 binary distribution: `data_batch_1..5.bin` (all five
/// required) and `test_batch.bin` (optional). The last 10% of training
/// records become the validation split.
pub fn load_cifar_binary(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (d, l) = parse_cifar_records(&bytes).map_err(|m| Error::format(&path, m))?;
        data.extend(d);
        labels.extend(l);
    }
    let n_train = labels.len();
    let test_path = dir.join("test_batch.bin");
    if test_path.exists() {
        let bytes = fs::read(&test_path).map_err(|e| Error::io(&test_path, e))?;
        let (d, l) = parse_cifar_records(&bytes).map_err(|m| Error::format(&test_path, m))?;
        data.extend(d);
        labels.extend(l);
    }
    let n = labels.len();
    let ds = Dataset {
        inputs: Tensor::new(vec![n, 32, 32, 3], data)?,
        labels,
        num_classes: 10,
        train: 0..0,
        validation: 0..0,
        test: 0..0,
    };
    Ok(ds.with_carved_validation(n_train, 0.1))
}

/// Data directory from an explicit flag, falling back to `COMMLEARN_DATA_DIR`.
pub fn resolve_data_dir(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 2,
            dims: 3,
            samples_per_class: 100,
            cluster_std: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(make_synthetic(&spec()).unwrap(), make_synthetic(&spec()).unwrap());
        let ds = make_synthetic(&spec()).unwrap();
        assert_eq!(ds.len(), 200);
        assert_eq!(ds.train, 0..160);
        assert_eq!(ds.validation, 160..180);
        assert_eq!(ds.test, 180..200);
        ds.validate().unwrap();
    }

    #[test]
    fn zero_std_clusters_collapse() {
        let ds = make_synthetic(&SyntheticSpec {
            cluster_std: 0.0,
            ..spec()
        })
        .unwrap();
        let d = ds.sample_size();
        let x = ds.inputs.data();
        for c in 0..2 {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == c)
                .map(|i| &x[i * d..(i + 1) * d])
                .collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn minibatch_reproducible_and_in_split() {
        let ds = make_synthetic(&spec()).unwrap();
        let s = RngStream::new(5);
        let a = sample_minibatch(&ds, Split::Validation, 128, &mut s.clone()).unwrap();
        let b = sample_minibatch(&ds, Split::Validation, 128, &mut s.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 128);
        assert_eq!(a.inputs.shape(), &[128, 3]);
        // every row must be one of the validation rows
        let d = ds.sample_size();
        let x = ds.inputs.data();
        for row in a.inputs.data().chunks(d) {
            assert!(ds.validation.clone().any(|i| &x[i * d..(i + 1) * d] == row));
        }
    }

    #[test]
    fn empty_split_is_an_error() {
        let mut ds = make_synthetic(&spec()).unwrap();
        ds.test = 200..200;
        assert!(matches!(
            sample_minibatch(&ds, Split::Test, 4, &mut RngStream::new(0)),
            Err(Error::EmptySplit("test"))
        ));
    }

    #[test]
    fn overlapping_splits_fail_validation() {
        let mut ds = make_synthetic(&spec()).unwrap();
        ds.validation = 150..170;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn cifar_record_layout() {
        let mut rec = vec![9u8];
        rec.extend((0..3072).map(|i| (i / 1024) as u8 * 100));
        let (data, labels) = parse_cifar_records(&rec).unwrap();
        assert_eq!(labels, vec![9]);
        // first pixel: R plane 0, G plane 100, B plane 200
        assert_eq!(&data[..3], &[0.0, 100.0 / 255.0, 200.0 / 255.0]);
        assert!(parse_cifar_records(&rec[..3000]).is_err());
    }

    #[test]
    fn idx_rejects_bad_magic() {
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 7];
        assert!(parse_idx_images(&bytes).unwrap_err().contains("magic"));
        bytes[3] = 3;
        assert!(parse_idx_images(&bytes).is_ok());
        assert!(parse_idx_images(&bytes[..16]).unwrap_err().contains("truncated"));
    }
}
