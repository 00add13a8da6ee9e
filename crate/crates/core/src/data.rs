//! Datasets, two-view augmentation and batch assembly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Labelled feature vectors with dense labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    /// Checks shapes, label range, finiteness, and that every class occurs.
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            num_classes,
            class_names: None,
        };
        ds.check(true)?;
        Ok(ds)
    }

    fn check(&self, require_every_class: bool) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidBatch(format!(
                "label {l} outside [0, {})",
                self.num_classes
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("dataset contains non-finite features".into()));
        }
        if require_every_class {
            let counts = self.class_counts();
            if let Some(c) = counts.iter().position(|&n| n == 0) {
                return Err(Error::InsufficientData(format!("class {c} has no samples")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Root-mean-square feature value, the reference scale for noise.
    pub fn feature_scale(&self) -> f64 {
        let n = self.features.len().max(1) as f64;
        (self.features.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
    }

    /// Keeps only samples of `classes`, relabelled `0..classes.len()` in the
    /// given order.
    pub fn restrict_to_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let remap: HashMap<usize, usize> = classes.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let keep: Vec<usize> = (0..self.len()).filter(|&i| remap.contains_key(&self.labels[i])).collect();
        let features = self.features.select(ndarray::Axis(0), &keep);
        let labels = keep.iter().map(|&i| remap[&self.labels[i]]).collect();
        let mut ds = Dataset::new(features, labels, classes.len())?;
        ds.class_names = self
            .class_names
            .as_ref()
            .map(|names| classes.iter().map(|&c| names[c].clone()).collect());
        Ok(ds)
    }

    /// Splits each class's samples in index order: the first
    /// `ceil(fraction · n)` go to the first dataset.
    pub fn split_per_class(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("split fraction {fraction} outside [0, 1]")));
        }
        let counts = self.class_counts();
        let mut seen = vec![0; self.num_classes];
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            let cut = (fraction * counts[l] as f64).ceil() as usize;
            if seen[l] < cut {
                first.push(i);
            } else {
                second.push(i);
            }
            seen[l] += 1;
        }
        Ok((self.subset(&first)?, self.subset(&second)?))
    }

    fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let ds = Dataset {
            features: self.features.select(ndarray::Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        };
        ds.check(true)?;
        Ok(ds)
    }
}

/// Gaussian clusters around centers drawn uniformly on the unit sphere.
///
/// Samples are stored class by class: rows `c·per_class .. (c+1)·per_class`
/// belong to class `c`.
pub fn generate_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class < 1 || dim < 2 {
        return Err(Error::Config(format!(
            "blobs need classes >= 2, per_class >= 1, dim >= 2 (got {classes}, {per_class}, {dim})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!("spread must be non-negative, got {spread}")));
    }
    let mut rng = rng_for(seed, &[]);
    let mut centers = Array2::<f64>::zeros((classes, dim));
    for mut row in centers.outer_iter_mut() {
        loop {
            row.mapv_inplace(|_| rng.sample(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-6 {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    let mut features = Array2::zeros((classes * per_class, dim));
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for s in 0..per_class {
            let mut row = features.row_mut(c * per_class + s);
            for (d, v) in row.iter_mut().enumerate() {
                let noise: f64 = if spread > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                *v = centers[[c, d]] + spread * noise;
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, classes)
}

/// Reads a numeric CSV with a header row. Every column except
/// `label_column` is a feature; labels are arbitrary strings re-indexed by
/// first appearance.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Config(format!("{}: no column named {label_column:?}", path.display())))?;
    let width = headers.len();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut index_of: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(Error::Parse {
                path: path.into(),
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (col, field) in record.iter().enumerate() {
            if col == label_idx {
                let next = names.len();
                let id = *index_of.entry(field.to_string()).or_insert_with(|| {
                    names.push(field.to_string());
                    next
                });
                labels.push(id);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    path: path.into(),
                    line,
                    message: format!("column {:?}: {field:?} is not a number", &headers[col]),
                })?;
                values.push(v);
            }
        }
    }
    let features = Array2::from_shape_vec((labels.len(), width - 1), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mut ds = Dataset::new(features, labels, names.len())?;
    ds.class_names = Some(names);
    Ok(ds)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            path: path.into(),
            line,
            message: format!("{other:?}"),
        },
    }
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD_BYTES: usize = CIFAR_PIXELS + 1;
pub const CIFAR_CLASSES: usize = 10;

/// Decodes CIFAR-10 binary records. Features are `byte / 255` in plane
/// order (all red, then green, then blue, each row-major).
pub fn parse_cifar10_records(bytes: &[u8]) -> Result<(Array2<f64>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Format(format!(
            "CIFAR-10 data length {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut features = Array2::zeros((n, CIFAR_PIXELS));
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {i} has label {label}")));
        }
        labels.push(label);
        for (dst, &b) in features.row_mut(i).iter_mut().zip(&record[1..]) {
            *dst = f64::from(b) / 255.0;
        }
    }
    Ok((features, labels))
}

/// Loads every `*.bin` file in `directory`, in file-name order.
///
/// The label space is always the ten CIFAR-10 classes, even when a partial
/// file does not contain all of them.
pub fn load_cifar10_binary(directory: impl AsRef<Path>) -> Result<Dataset> {
    let directory = directory.as_ref();
    let mut files: Vec<_> = fs::read_dir(directory)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .bin files in {}", directory.display())));
    }
    let mut blocks = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = fs::read(file)?;
        let (f, l) = parse_cifar10_records(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
        blocks.push(f);
        labels.extend(l);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let features = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let ds = Dataset {
        features,
        labels,
        num_classes: CIFAR_CLASSES,
        class_names: Some(
            [
                "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
            ]
            .map(String::from)
            .to_vec(),
        ),
    };
    ds.check(false)?;
    Ok(ds)
}

/// Stochastic transformation producing one view of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentationPolicy {
    GaussianNoise {
        sigma: f64,
    },
    /// Zeroes each coordinate independently.
    CoordinateDropout {
        probability: f64,
    },
    /// Applies each step in order.
    Compose {
        steps: Vec<AugmentationPolicy>,
    },
    /// Random crop from a reflect-padded image plus horizontal flip, on
    /// channel-planar features.
    ImageCropFlip {
        padding: usize,
        flip_probability: f64,
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy::Compose { steps: Vec::new() }
    }

    /// Noise at 5% of `feature_scale` followed by 10% coordinate dropout.
    pub fn vector_default(feature_scale: f64) -> Self {
        AugmentationPolicy::Compose {
            steps: vec![
                AugmentationPolicy::GaussianNoise {
                    sigma: 0.05 * feature_scale,
                },
                AugmentationPolicy::CoordinateDropout { probability: 0.1 },
            ],
        }
    }

    pub fn cifar_default() -> Self {
        AugmentationPolicy::ImageCropFlip {
            padding: 4,
            flip_probability: 0.5,
            height: CIFAR_SIDE,
            width: CIFAR_SIDE,
            channels: CIFAR_CHANNELS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} {p} outside [0, 1]")))
            }
        };
        match self {
            AugmentationPolicy::GaussianNoise { sigma } => {
                if *sigma >= 0.0 && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")))
                }
            }
            AugmentationPolicy::CoordinateDropout { probability } => prob(*probability, "dropout probability"),
            AugmentationPolicy::Compose { steps } => steps.iter().try_for_each(|s| s.validate()),
            AugmentationPolicy::ImageCropFlip {
                padding,
                flip_probability,
                height,
                width,
                ..
            } => {
                if *padding >= *height || *padding >= *width {
                    return Err(Error::Config("crop padding must be smaller than the image".into()));
                }
                prob(*flip_probability, "flip probability")
            }
        }
    }

    fn check_input(&self, dim: usize) -> Result<()> {
        match self {
            AugmentationPolicy::ImageCropFlip {
                height,
                width,
                channels,
                ..
            } if height * width * channels != dim => Err(Error::Shape(format!(
                "image policy expects {}x{}x{} = {} features, dataset has {dim}",
                channels,
                height,
                width,
                height * width * channels
            ))),
            AugmentationPolicy::Compose { steps } => steps.iter().try_for_each(|s| s.check_input(dim)),
            _ => Ok(()),
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, sample: ArrayView1<f64>, rng: &mut R) -> Array1<f64> {
        let mut out = sample.to_owned();
        self.apply_in_place(&mut out, rng);
        out
    }

    fn apply_in_place<R: Rng + ?Sized>(&self, v: &mut Array1<f64>, rng: &mut R) {
        match self {
            AugmentationPolicy::GaussianNoise { sigma } => {
                if *sigma > 0.0 {
                    let normal = Normal::new(0.0, *sigma).expect("validated sigma");
                    v.mapv_inplace(|x| x + normal.sample(rng));
                }
            }
            AugmentationPolicy::CoordinateDropout { probability } => {
                if *probability > 0.0 {
                    v.mapv_inplace(|x| if rng.random::<f64>() < *probability { 0.0 } else { x });
                }
            }
            AugmentationPolicy::Compose { steps } => {
                for step in steps {
                    step.apply_in_place(v, rng);
                }
            }
            AugmentationPolicy::ImageCropFlip {
                padding,
                flip_probability,
                height,
                width,
                channels,
            } => {
                let (p, h, w) = (*padding as i64, *height, *width);
                let dy = rng.random_range(0..=2 * p) - p;
                let dx = rng.random_range(0..=2 * p) - p;
                let flip = rng.random::<f64>() < *flip_probability;
                let src = v.clone();
                for c in 0..*channels {
                    let plane = c * h * w;
                    for y in 0..h {
                        let sy = reflect(y as i64 + dy, h);
                        for x in 0..w {
                            let xx = if flip { w - 1 - x } else { x };
                            let sx = reflect(xx as i64 + dx, w);
                            v[plane + y * w + x] = src[plane + sy * w + sx];
                        }
                    }
                }
            }
        }
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Augmented views ready for a training step. Rows `2i` and `2i + 1` are the
/// two views of the `i`-th requested sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewBatch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    /// Dataset index of the sample each view came from.
    pub sample_ids: Vec<usize>,
}

impl TwoViewBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn make_two_view_batch(
    dataset: &Dataset,
    indices: &[usize],
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<TwoViewBatch> {
    if indices.is_empty() {
        return Err(Error::BatchTooSmall { rows: 0 });
    }
    policy.validate()?;
    policy.check_input(dataset.input_dim())?;
    if let Some(&index) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::Index {
            index,
            len: dataset.len(),
        });
    }
    let mut rng = rng_for(seed, &[]);
    let mut inputs = Array2::zeros((2 * indices.len(), dataset.input_dim()));
    let mut labels = Vec::with_capacity(2 * indices.len());
    let mut sample_ids = Vec::with_capacity(2 * indices.len());
    for (i, &idx) in indices.iter().enumerate() {
        let sample = dataset.features.row(idx);
        for view in 0..2 {
            inputs.row_mut(2 * i + view).assign(&policy.apply(sample, &mut rng));
            labels.push(dataset.labels[idx]);
            sample_ids.push(idx);
        }
    }
    Ok(TwoViewBatch {
        inputs,
        labels,
        sample_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blobs_are_deterministic_and_counted() {
        let a = generate_blobs(10, 50, 8, 0.3, 42).unwrap();
        let b = generate_blobs(10, 50, 8, 0.3, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.features.dim(), (500, 8));
        assert!(a.class_counts().iter().all(|&c| c == 50));
        assert_ne!(a, generate_blobs(10, 50, 8, 0.3, 43).unwrap());
    }

    #[test]
    fn zero_spread_blobs_sit_on_centers() {
        let ds = generate_blobs(3, 4, 5, 0.0, 1).unwrap();
        for c in 0..3 {
            let first = ds.features.row(c * 4);
            assert!((first.dot(&first) - 1.0).abs() < 1e-12);
            for s in 1..4 {
                assert_eq!(ds.features.row(c * 4 + s), first);
            }
        }
    }

    #[test]
    fn blob_arguments_are_checked() {
        assert!(generate_blobs(1, 5, 4, 0.1, 0).is_err());
        assert!(generate_blobs(2, 0, 4, 0.1, 0).is_err());
        assert!(generate_blobs(2, 5, 1, 0.1, 0).is_err());
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_labels_by_first_appearance() {
        let f = write_tmp("w,animal,h\n1.0,cat,2\n3,dog,4.5\n-1,cat,0\n");
        let ds = load_csv(f.path(), "animal").unwrap();
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.class_names.as_deref(), Some(&["cat".to_string(), "dog".to_string()][..]));
        assert_eq!(ds.features.row(1).to_vec(), vec![3.0, 4.5]);
    }

    #[test]
    fn csv_errors() {
        let f = write_tmp("a,label\n1,x\n");
        assert!(matches!(load_csv(f.path(), "species"), Err(Error::Config(_))));

        let f = write_tmp("a,b,label\n1,2,x\n3,y\n");
        match load_csv(f.path(), "label") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let f = write_tmp("a,b,label\n1,2,x\n3,oops,y\n");
        match load_csv(f.path(), "label") {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("oops"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar_records_decode_exactly() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[2] = 51;
        bytes[CIFAR_RECORD_BYTES] = 9;
        bytes[CIFAR_RECORD_BYTES + 1 + 1024] = 17; // first green byte
        bytes[2 * CIFAR_RECORD_BYTES - 1] = 128; // last blue byte
        let (f, l) = parse_cifar10_records(&bytes).unwrap();
        assert_eq!(l, vec![3, 9]);
        assert_eq!(f[[0, 0]], 1.0);
        assert_eq!(f[[0, 1]], 51.0 / 255.0);
        assert_eq!(f[[0, 2]], 0.0);
        assert_eq!(f[[1, 1024]], 17.0 / 255.0);
        assert_eq!(f[[1, CIFAR_PIXELS - 1]], 128.0 / 255.0);
    }

    #[test]
    fn cifar_rejects_bad_lengths() {
        assert!(matches!(parse_cifar10_records(&[]), Err(Error::Format(_))));
        assert!(matches!(parse_cifar10_records(&[0u8; 3074]), Err(Error::Format(_))));
        let mut bad = vec![0u8; CIFAR_RECORD_BYTES];
        bad[0] = 10;
        assert!(matches!(parse_cifar10_records(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn identity_views_equal_samples() {
        let ds = generate_blobs(3, 4, 5, 0.5, 2).unwrap();
        let noise0 = AugmentationPolicy::Compose {
            steps: vec![
                AugmentationPolicy::GaussianNoise { sigma: 0.0 },
                AugmentationPolicy::CoordinateDropout { probability: 0.0 },
            ],
        };
        let batch = make_two_view_batch(&ds, &[0, 5, 11, 7], &noise0, 9).unwrap();
        assert_eq!(batch.inputs.nrows(), 8);
        for (i, &idx) in [0usize, 5, 11, 7].iter().enumerate() {
            assert_eq!(batch.inputs.row(2 * i), ds.features.row(idx));
            assert_eq!(batch.inputs.row(2 * i + 1), ds.features.row(idx));
            assert_eq!(batch.sample_ids[2 * i], idx);
            assert_eq!(batch.sample_ids[2 * i + 1], idx);
            assert_eq!(batch.labels[2 * i], ds.labels[idx]);
        }
    }

    #[test]
    fn noisy_views_are_reproducible_and_distinct() {
        let ds = generate_blobs(3, 4, 5, 0.5, 2).unwrap();
        let policy = AugmentationPolicy::GaussianNoise { sigma: 0.1 };
        let a = make_two_view_batch(&ds, &[1, 2], &policy, 77).unwrap();
        let b = make_two_view_batch(&ds, &[1, 2], &policy, 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.inputs.row(0), a.inputs.row(1));
    }

    #[test]
    fn batch_index_out_of_range() {
        let ds = generate_blobs(2, 2, 3, 0.1, 0).unwrap();
        assert!(matches!(
            make_two_view_batch(&ds, &[0, 4], &AugmentationPolicy::identity(), 0),
            Err(Error::Index { index: 4, len: 4 })
        ));
    }

    #[test]
    fn crop_flip_without_shift_is_a_mirror() {
        let policy = AugmentationPolicy::ImageCropFlip {
            padding: 0,
            flip_probability: 1.0,
            height: 2,
            width: 3,
            channels: 1,
        };
        let mut rng = rng_for(0, &[]);
        let out = policy.apply(Array1::from(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).view(), &mut rng);
        assert_eq!(out.to_vec(), vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
    }

    #[test]
    fn crop_keeps_pixel_multiset_on_constant_rows() {
        // rows are constant, so any horizontal shift or flip leaves each row intact
        let policy = AugmentationPolicy::cifar_default();
        let img: Array1<f64> = (0..CIFAR_PIXELS).map(|i| ((i / 32) % 32) as f64).collect();
        let mut rng = rng_for(3, &[]);
        let out = policy.apply(img.view(), &mut rng);
        for y in 0..32 {
            let row = &out.as_slice().unwrap()[y * 32..(y + 1) * 32];
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn per_class_split() {
        let ds = generate_blobs(2, 5, 3, 0.1, 0).unwrap();
        let (a, b) = ds.split_per_class(0.6).unwrap();
        assert_eq!(a.class_counts(), vec![3, 3]);
        assert_eq!(b.class_counts(), vec![2, 2]);
        let r = ds.restrict_to_classes(&[1]).unwrap();
        assert_eq!(r.len(), 5);
        assert!(r.labels.iter().all(|&l| l == 0));
    }
}
