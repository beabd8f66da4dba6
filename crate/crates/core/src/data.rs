//! MNIST ingestion and the positive/negative sample construction used for FF training.
//!
//! Images are 28x28 grayscale scaled to `[0, 1]`. A class label is written into the
//! first ten pixels (the top row of the black border) as a one-hot code: positive
//! samples carry their true label, negative samples a uniformly drawn wrong one.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::nn::Matrix;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;
/// Intensity written into the label pixel.
pub const LABEL_PIXEL_VALUE: f64 = 1.0;
/// Value written into all ten label pixels when no label should be visible.
pub const NEUTRAL_PIXEL_VALUE: f64 = 0.1;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{source_name}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        source_name: String,
        found: u32,
        expected: u32,
    },
    #[error("{source_name}: truncated, header promises {expected} bytes but only {found} present")]
    Truncated {
        source_name: String,
        expected: usize,
        found: usize,
    },
    #[error("{source_name}: image dimensions {rows}x{cols}, expected 28x28")]
    BadDimensions {
        source_name: String,
        rows: u32,
        cols: u32,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0} is outside 0..=9")]
    LabelOutOfRange(u8),
    #[error("image vector has {0} values, expected 784")]
    BadImageLength(usize),
    #[error("pixel {index} has value {value}, outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f64 },
    #[error("dataset split is empty")]
    EmptySplit,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn check_label(label: u8) -> Result<(), DataError> {
    if usize::from(label) < NUM_CLASSES {
        Ok(())
    } else {
        Err(DataError::LabelOutOfRange(label))
    }
}

/// A 784-value image with every pixel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVector(Vec<f64>);

impl ImageVector {
    pub fn new(pixels: Vec<f64>) -> Result<Self, DataError> {
        if pixels.len() != IMAGE_PIXELS {
            return Err(DataError::BadImageLength(pixels.len()));
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::PixelOutOfRange { index, value });
        }
        Ok(ImageVector(pixels))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() != IMAGE_PIXELS {
            return Err(DataError::BadImageLength(bytes.len()));
        }
        Ok(ImageVector(
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        ))
    }

    pub fn pixels(&self) -> &[f64] {
        &self.0
    }

    /// The byte each pixel was decoded from.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.iter().map(|&p| (p * 255.0).round() as u8).collect()
    }
}

impl AsRef<[f64]> for ImageVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn write_label(pixels: &mut [f64], label: u8) {
    pixels[..NUM_CLASSES].fill(0.0);
    pixels[usize::from(label)] = LABEL_PIXEL_VALUE;
}

fn write_neutral(pixels: &mut [f64]) {
    pixels[..NUM_CLASSES].fill(NEUTRAL_PIXEL_VALUE);
}

/// Zeroes the ten label pixels, then lights the one for `label`.
pub fn embed_label(image: &ImageVector, label: u8) -> Result<ImageVector, DataError> {
    check_label(label)?;
    let mut out = image.clone();
    write_label(&mut out.0, label);
    Ok(out)
}

/// Sets all ten label pixels to 0.1 so no class is favoured.
pub fn embed_neutral(image: &ImageVector) -> ImageVector {
    let mut out = image.clone();
    write_neutral(&mut out.0);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// Binary target used by the goodness loss.
    pub fn target(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => 0.0,
        }
    }
}

/// An image with a label embedded, tagged positive or negative.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pixels: ImageVector,
    embedded_label: u8,
    true_label: u8,
    polarity: Polarity,
}

impl Sample {
    pub fn positive(image: &ImageVector, true_label: u8) -> Result<Self, DataError> {
        Ok(Sample {
            pixels: embed_label(image, true_label)?,
            embedded_label: true_label,
            true_label,
            polarity: Polarity::Positive,
        })
    }

    pub fn pixels(&self) -> &ImageVector {
        &self.pixels
    }

    pub fn embedded_label(&self) -> u8 {
        self.embedded_label
    }

    pub fn true_label(&self) -> u8 {
        self.true_label
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }
}

/// Uniform draw from the nine classes other than `true_label`.
pub fn draw_wrong_label<R: Rng + ?Sized>(true_label: u8, rng: &mut R) -> u8 {
    let k: u8 = rng.random_range(0..(NUM_CLASSES as u8 - 1));
    if k >= true_label {
        k + 1
    } else {
        k
    }
}

pub fn make_negative<R: Rng + ?Sized>(
    image: &ImageVector,
    true_label: u8,
    rng: &mut R,
) -> Result<Sample, DataError> {
    check_label(true_label)?;
    let wrong = draw_wrong_label(true_label, rng);
    Ok(Sample {
        pixels: embed_label(image, wrong)?,
        embedded_label: wrong,
        true_label,
        polarity: Polarity::Negative,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    images: Vec<ImageVector>,
    labels: Vec<u8>,
    kind: SplitKind,
}

impl DatasetSplit {
    pub fn new(
        images: Vec<ImageVector>,
        labels: Vec<u8>,
        kind: SplitKind,
    ) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        for &l in &labels {
            check_label(l)?;
        }
        Ok(DatasetSplit {
            images,
            labels,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn kind(&self) -> SplitKind {
        self.kind
    }

    pub fn images(&self) -> &[ImageVector] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// The first `n` entries (or all, if fewer).
    pub fn head(&self, n: usize) -> DatasetSplit {
        let n = n.min(self.len());
        DatasetSplit {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            kind: self.kind,
        }
    }

    /// Images stacked as rows of an `n x 784` matrix, in split order.
    pub fn image_matrix(&self, indices: impl IntoIterator<Item = usize>) -> Matrix {
        let mut data = Vec::new();
        let mut rows = 0;
        for i in indices {
            data.extend_from_slice(self.images[i].pixels());
            rows += 1;
        }
        Matrix::from_vec(rows, IMAGE_PIXELS, data).expect("rows are 784 wide")
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn check_header(
    bytes: &[u8],
    header_len: usize,
    expected_magic: u32,
    source_name: &str,
) -> Result<(), DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            source_name: source_name.to_string(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let magic = read_u32(bytes, 0);
    if magic != expected_magic {
        return Err(DataError::BadMagic {
            source_name: source_name.to_string(),
            found: magic,
            expected: expected_magic,
        });
    }
    if bytes.len() < header_len {
        return Err(DataError::Truncated {
            source_name: source_name.to_string(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Parses an IDX3 image file held in memory.
pub fn parse_idx_images(bytes: &[u8], source_name: &str) -> Result<Vec<ImageVector>, DataError> {
    check_header(bytes, 16, IMAGES_MAGIC, source_name)?;
    let count = read_u32(bytes, 4) as usize;
    let rows = read_u32(bytes, 8);
    let cols = read_u32(bytes, 12);
    if rows as usize != IMAGE_SIDE || cols as usize != IMAGE_SIDE {
        return Err(DataError::BadDimensions {
            source_name: source_name.to_string(),
            rows,
            cols,
        });
    }
    let expected = 16 + count * IMAGE_PIXELS;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            source_name: source_name.to_string(),
            expected,
            found: bytes.len(),
        });
    }
    bytes[16..expected]
        .chunks_exact(IMAGE_PIXELS)
        .map(ImageVector::from_bytes)
        .collect()
}

/// Parses an IDX1 label file held in memory.
pub fn parse_idx_labels(bytes: &[u8], source_name: &str) -> Result<Vec<u8>, DataError> {
    check_header(bytes, 8, LABELS_MAGIC, source_name)?;
    let count = read_u32(bytes, 4) as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            source_name: source_name.to_string(),
            expected,
            found: bytes.len(),
        });
    }
    let labels = bytes[8..expected].to_vec();
    for &l in &labels {
        check_label(l)?;
    }
    Ok(labels)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an image/label file pair in IDX format.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    kind: SplitKind,
) -> Result<DatasetSplit, DataError> {
    let images = parse_idx_images(&read_file(images_path)?, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&read_file(labels_path)?, &labels_path.display().to_string())?;
    DatasetSplit::new(images, labels, kind)
}

/// Train and test splits from a directory holding the four conventionally named files.
pub fn load_mnist(dir: &Path) -> Result<(DatasetSplit, DatasetSplit), DataError> {
    let train = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS), SplitKind::Train)?;
    let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS), SplitKind::Test)?;
    Ok((train, test))
}

/// IDX3 encoding of the split's images.
pub fn encode_idx_images(split: &DatasetSplit) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + split.len() * IMAGE_PIXELS);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(split.len() as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    for img in &split.images {
        out.extend(img.to_bytes());
    }
    out
}

/// IDX1 encoding of the split's labels.
pub fn encode_idx_labels(split: &DatasetSplit) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + split.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(split.len() as u32).to_be_bytes());
    out.extend_from_slice(&split.labels);
    out
}

/// One batch of index-aligned positive and negative samples.
///
/// Row `i` of `positive` and of `negative` come from the same source image.
#[derive(Clone, Debug)]
pub struct PairedBatch {
    pub positive: Matrix,
    pub negative: Matrix,
    pub source_indices: Vec<usize>,
    pub true_labels: Vec<u8>,
    pub negative_labels: Vec<u8>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    /// Positives stacked above negatives, with matching polarity tags.
    pub fn stacked(&self) -> (Matrix, Vec<Polarity>) {
        let x = self
            .positive
            .vstack(&self.negative)
            .expect("both halves are 784 wide");
        let mut polarities = vec![Polarity::Positive; self.len()];
        polarities.resize(2 * self.len(), Polarity::Negative);
        (x, polarities)
    }

    pub fn positive_sample(&self, i: usize) -> Sample {
        Sample {
            pixels: ImageVector(self.positive.row(i).to_vec()),
            embedded_label: self.true_labels[i],
            true_label: self.true_labels[i],
            polarity: Polarity::Positive,
        }
    }

    pub fn negative_sample(&self, i: usize) -> Sample {
        Sample {
            pixels: ImageVector(self.negative.row(i).to_vec()),
            embedded_label: self.negative_labels[i],
            true_label: self.true_labels[i],
            polarity: Polarity::Negative,
        }
    }
}

/// Lazily assembled batches over one shuffled pass of a split.
pub struct EpochBatches<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    negative_labels: Vec<u8>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for EpochBatches<'_> {
    type Item = PairedBatch;

    fn next(&mut self) -> Option<PairedBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        let neg_labels = &self.negative_labels[self.cursor..end];
        self.cursor = end;

        let mut positive = self.split.image_matrix(idx.iter().copied());
        let mut negative = positive.clone();
        let true_labels: Vec<u8> = idx.iter().map(|&i| self.split.labels[i]).collect();
        for (r, (&t, &n)) in true_labels.iter().zip(neg_labels).enumerate() {
            write_label(positive.row_mut(r), t);
            write_label(negative.row_mut(r), n);
        }
        Some(PairedBatch {
            positive,
            negative,
            source_indices: idx.to_vec(),
            true_labels,
            negative_labels: neg_labels.to_vec(),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for EpochBatches<'_> {}

/// Shuffles the split and pairs every image with one positive and one negative sample.
///
/// The permutation is drawn first, then one wrong label per position, both from `rng`.
/// The final partial batch is kept.
pub fn make_batches<'a, R: Rng + ?Sized>(
    split: &'a DatasetSplit,
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochBatches<'a>, DataError> {
    check_batching(split, batch_size)?;
    let order = shuffled_order(split.len(), rng);
    Ok(batches_from_order(split, batch_size, order, rng))
}

/// As [`make_batches`], with the permutation and the wrong labels drawn from separate streams.
pub fn make_batches_with<'a, S: Rng + ?Sized, N: Rng + ?Sized>(
    split: &'a DatasetSplit,
    batch_size: usize,
    shuffle_rng: &mut S,
    negative_rng: &mut N,
) -> Result<EpochBatches<'a>, DataError> {
    check_batching(split, batch_size)?;
    let order = shuffled_order(split.len(), shuffle_rng);
    Ok(batches_from_order(split, batch_size, order, negative_rng))
}

fn check_batching(split: &DatasetSplit, batch_size: usize) -> Result<(), DataError> {
    if split.is_empty() {
        return Err(DataError::EmptySplit);
    }
    if batch_size == 0 {
        return Err(DataError::ZeroBatchSize);
    }
    Ok(())
}

fn shuffled_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn batches_from_order<'a, R: Rng + ?Sized>(
    split: &'a DatasetSplit,
    batch_size: usize,
    order: Vec<usize>,
    rng: &mut R,
) -> EpochBatches<'a> {
    let negative_labels = order
        .iter()
        .map(|&i| draw_wrong_label(split.labels[i], rng))
        .collect();
    EpochBatches {
        split,
        order,
        negative_labels,
        batch_size,
        cursor: 0,
    }
}

/// Split images in their stored order, with the neutral label written in.
pub fn neutral_matrix(split: &DatasetSplit, indices: impl IntoIterator<Item = usize>) -> Matrix {
    let mut m = split.image_matrix(indices);
    for r in 0..m.rows() {
        write_neutral(m.row_mut(r));
    }
    m
}

/// Every image of `images` with `label` embedded.
pub fn labelled_matrix(images: &Matrix, label: u8) -> Result<Matrix, DataError> {
    check_label(label)?;
    let mut m = images.clone();
    for r in 0..m.rows() {
        write_label(m.row_mut(r), label);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(n: usize, seed: u64) -> DatasetSplit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|_| {
                let bytes: Vec<u8> = (0..IMAGE_PIXELS).map(|_| rng.random()).collect();
                ImageVector::from_bytes(&bytes).unwrap()
            })
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..10u8)).collect();
        DatasetSplit::new(images, labels, SplitKind::Train).unwrap()
    }

    fn assert_one_hot(pixels: &[f64], label: u8) {
        for (i, &p) in pixels[..NUM_CLASSES].iter().enumerate() {
            assert_eq!(p, if i == usize::from(label) { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn embed_label_sets_single_pixel() {
        let img = ImageVector::new(vec![0.5; IMAGE_PIXELS]).unwrap();
        let e = embed_label(&img, 3).unwrap();
        assert_one_hot(e.pixels(), 3);
        assert_eq!(&e.pixels()[10..], &img.pixels()[10..]);
        assert_one_hot(embed_label(&img, 0).unwrap().pixels(), 0);
        let twice = embed_label(&embed_label(&img, 8).unwrap(), 2).unwrap();
        assert_one_hot(twice.pixels(), 2);
        assert!(matches!(
            embed_label(&img, 10),
            Err(DataError::LabelOutOfRange(10))
        ));
    }

    #[test]
    fn embed_neutral_spreads_unit_mass() {
        let img = synthetic(1, 1).images()[0].clone();
        let n = embed_neutral(&img);
        assert!(n.pixels()[..10].iter().all(|&p| p == 0.1));
        let s: f64 = n.pixels()[..10].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(&n.pixels()[10..], &img.pixels()[10..]);
    }

    #[test]
    fn image_vector_validates() {
        assert!(matches!(
            ImageVector::new(vec![0.0; 783]),
            Err(DataError::BadImageLength(783))
        ));
        let mut v = vec![0.0; IMAGE_PIXELS];
        v[5] = 1.5;
        assert!(matches!(
            ImageVector::new(v),
            Err(DataError::PixelOutOfRange { index: 5, .. })
        ));
    }

    #[test]
    fn negatives_never_carry_true_label() {
        let img = synthetic(1, 2).images()[0].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let s = make_negative(&img, 7, &mut rng).unwrap();
            assert_ne!(s.embedded_label(), 7);
            assert_eq!(s.polarity(), Polarity::Negative);
            assert_one_hot(s.pixels().pixels(), s.embedded_label());
        }
    }

    #[test]
    fn negatives_are_uniform_over_wrong_classes() {
        const DRAWS: usize = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 10];
        for _ in 0..DRAWS {
            counts[usize::from(draw_wrong_label(7, &mut rng))] += 1;
        }
        assert_eq!(counts[7], 0);
        let p = 1.0 / 9.0;
        let mean = DRAWS as f64 * p;
        let sigma = (DRAWS as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for (c, &n) in counts.iter().enumerate().filter(|(c, _)| *c != 7) {
            assert!((n as f64 - mean).abs() < 3.0 * sigma, "class {c}: {n}");
            chi2 += (n as f64 - mean).powi(2) / mean;
        }
        // 99.9th percentile of chi-square with 8 degrees of freedom
        assert!(chi2 < 26.12, "chi2 {chi2}");
    }

    #[test]
    fn negatives_are_seed_deterministic() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| draw_wrong_label(4, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn batches_cover_split_with_partial_tail() {
        let split = synthetic(2500, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches: Vec<_> = make_batches(&split, 1000, &mut rng).unwrap().collect();
        assert_eq!(
            batches.iter().map(PairedBatch::len).collect::<Vec<_>>(),
            vec![1000, 1000, 500]
        );
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.source_indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..2500).collect::<Vec<_>>());

        let single: Vec<_> = make_batches(&split, 10_000, &mut rng).unwrap().collect();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), 2500);
    }

    #[test]
    fn batches_are_index_aligned() {
        let split = synthetic(64, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for b in make_batches(&split, 16, &mut rng).unwrap() {
            for i in 0..b.len() {
                let src = &split.images()[b.source_indices[i]];
                let pos = b.positive_sample(i);
                let neg = b.negative_sample(i);
                assert_eq!(&pos.pixels().pixels()[10..], &src.pixels()[10..]);
                assert_eq!(&neg.pixels().pixels()[10..], &src.pixels()[10..]);
                assert_eq!(pos.true_label(), split.labels()[b.source_indices[i]]);
                assert_eq!(neg.true_label(), pos.true_label());
            }
            let (x, pol) = b.stacked();
            assert_eq!(x.rows(), 2 * b.len());
            assert_eq!(pol[0], Polarity::Positive);
            assert_eq!(pol[pol.len() - 1], Polarity::Negative);
        }
    }

    #[test]
    fn shuffles_differ_per_epoch_but_replay_per_seed() {
        let split = synthetic(200, 5);
        let order = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            make_batches(&split, 50, rng)
                .unwrap()
                .flat_map(|b| b.source_indices)
                .collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let e1 = order(&mut rng);
        let e2 = order(&mut rng);
        assert_ne!(e1, e2);
        let mut again = ChaCha8Rng::seed_from_u64(77);
        assert_eq!(order(&mut again), e1);
        assert_eq!(order(&mut again), e2);
    }

    #[test]
    fn separate_streams_decouple_order_from_negatives() {
        let split = synthetic(120, 6);
        let run = |neg_seed: u64| -> (Vec<usize>, Vec<u8>) {
            let mut s = ChaCha8Rng::seed_from_u64(1);
            let mut n = ChaCha8Rng::seed_from_u64(neg_seed);
            let batches: Vec<PairedBatch> =
                make_batches_with(&split, 32, &mut s, &mut n).unwrap().collect();
            (
                batches.iter().flat_map(|b| b.source_indices.clone()).collect(),
                batches.iter().flat_map(|b| b.negative_labels.clone()).collect(),
            )
        };
        let (o1, n1) = run(10);
        let (o2, n2) = run(11);
        assert_eq!(o1, o2);
        assert_ne!(n1, n2);
        for (&i, &l) in o1.iter().zip(&n1) {
            assert_ne!(split.labels()[i], l);
        }
    }

    #[test]
    fn batching_rejects_degenerate_input() {
        let empty = DatasetSplit::new(vec![], vec![], SplitKind::Test).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_batches(&empty, 10, &mut rng),
            Err(DataError::EmptySplit)
        ));
        let one = synthetic(1, 0);
        assert!(matches!(
            make_batches(&one, 0, &mut rng),
            Err(DataError::ZeroBatchSize)
        ));
    }

    #[test]
    fn idx_round_trip_is_byte_exact() {
        let split = synthetic(100, 6);
        let img_bytes = encode_idx_images(&split);
        let lbl_bytes = encode_idx_labels(&split);
        let images = parse_idx_images(&img_bytes, "images").unwrap();
        let labels = parse_idx_labels(&lbl_bytes, "labels").unwrap();
        let back = DatasetSplit::new(images, labels, SplitKind::Train).unwrap();
        assert_eq!(back, split);
        assert_eq!(encode_idx_images(&back), img_bytes);
        assert_eq!(encode_idx_labels(&back), lbl_bytes);
    }

    #[test]
    fn idx_header_errors() {
        let split = synthetic(3, 7);
        let mut bad = encode_idx_images(&split);
        bad[..4].copy_from_slice(&0u32.to_be_bytes());
        assert!(matches!(
            parse_idx_images(&bad, "x"),
            Err(DataError::BadMagic { found: 0, expected: IMAGES_MAGIC, .. })
        ));
        // label magic on an image file is also rejected
        let labels = encode_idx_labels(&split);
        assert!(matches!(
            parse_idx_images(&labels, "x"),
            Err(DataError::BadMagic { .. })
        ));
        let short = &labels[..labels.len() - 1];
        assert!(matches!(
            parse_idx_labels(short, "x"),
            Err(DataError::Truncated { expected: 11, found: 10, .. })
        ));
        let imgs = encode_idx_images(&split);
        assert!(matches!(
            parse_idx_images(&imgs[..100], "x"),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(
            parse_idx_images(&imgs[..2], "x"),
            Err(DataError::Truncated { .. })
        ));
        let mut dims = imgs.clone();
        dims[8..12].copy_from_slice(&27u32.to_be_bytes());
        assert!(matches!(
            parse_idx_images(&dims, "x"),
            Err(DataError::BadDimensions { rows: 27, .. })
        ));
        let mut lbl = labels.clone();
        lbl[8] = 12;
        assert!(matches!(
            parse_idx_labels(&lbl, "x"),
            Err(DataError::LabelOutOfRange(12))
        ));
    }

    #[test]
    fn count_mismatch_is_reported() {
        let split = synthetic(4, 8);
        let err = DatasetSplit::new(split.images().to_vec(), vec![1, 2, 3], SplitKind::Train)
            .unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { images: 4, labels: 3 }));
    }

    proptest! {
        #[test]
        fn samples_respect_polarity_invariant(
            bytes in prop::collection::vec(any::<u8>(), IMAGE_PIXELS),
            label in 0u8..10,
            seed in any::<u64>(),
        ) {
            let img = ImageVector::from_bytes(&bytes).unwrap();
            let pos = Sample::positive(&img, label).unwrap();
            prop_assert_eq!(pos.embedded_label(), pos.true_label());
            let neg = make_negative(&img, label, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_ne!(neg.embedded_label(), neg.true_label());
            for s in [&pos, &neg] {
                let head = &s.pixels().pixels()[..NUM_CLASSES];
                prop_assert_eq!(head.iter().filter(|&&p| p != 0.0).count(), 1);
                prop_assert_eq!(head[usize::from(s.embedded_label())], 1.0);
            }
        }
    }
}
