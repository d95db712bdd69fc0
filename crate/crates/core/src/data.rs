//! Datasets, federated partitioning and input perturbations.
//!
//! Unlabeled clients carry their ground truth only inside [`HiddenTargets`],
//! which has no public accessor. Training code therefore cannot read it; the
//! only consumer is held-out evaluation in [`crate::metrics`].

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labeled pool of samples (the source for a federation split).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// `(height, width)` when features are a flattened grayscale image.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        classes: usize,
        image_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::CountMismatch {
                images: features.nrows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature"));
        }
        if let Some((h, w)) = image_shape {
            if h * w != features.ncols() {
                return Err(Error::invalid(format!(
                    "image shape {h}x{w} does not match dimension {}",
                    features.ncols()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            classes,
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            image_shape: self.image_shape,
        }
    }

    /// Writes `f0..f{d-1},label` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for (row, y) in self.features.outer_iter().zip(&self.labels) {
            for v in row.iter() {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{y}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Gaussian class clusters centred on the vertices of a simplex.
///
/// With `dim >= classes` the class-`c` mean is the unit vector `e_c`; for
/// fewer dimensions the means are seeded random unit vectors.
pub fn generate_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || per_class < 1 || dim < 2 || !(spread > 0.0) {
        return Err(Error::invalid(format!(
            "generate_blobs needs C>=2, n>=1, d>=2, spread>0 (got {classes}, {per_class}, {dim}, {spread})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Array1<f64>> = (0..classes)
        .map(|c| {
            if dim >= classes {
                let mut m = Array1::zeros(dim);
                m[c] = 1.0;
                m
            } else {
                let v: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0));
                let norm = v.dot(&v).sqrt().max(1e-12);
                v / norm
            }
        })
        .collect();
    let noise = Normal::new(0.0, spread).expect("spread checked positive");
    let total = classes * per_class;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut features = Array2::zeros((total, dim));
    let mut labels = vec![0; total];
    for (slot, &k) in order.iter().enumerate() {
        let class = k / per_class;
        labels[slot] = class;
        for j in 0..dim {
            features[[slot, j]] = means[class][j] + noise.sample(&mut rng);
        }
    }
    Dataset::new(features, labels, classes, None)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("truncated {what} header")))
}

/// Parses an IDX image file and label file pair. Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8], standardize: bool) -> Result<Dataset> {
    let magic = be_u32(images, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "expected image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"
        )));
    }
    let magic = be_u32(labels, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "expected label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"
        )));
    }
    let n_images = be_u32(images, 4, "image")? as usize;
    let rows = be_u32(images, 8, "image")? as usize;
    let cols = be_u32(images, 12, "image")? as usize;
    let n_labels = be_u32(labels, 4, "label")? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() < n_images * dim {
        return Err(Error::Format(format!(
            "truncated image data: expected {} bytes, found {}",
            n_images * dim,
            pixels.len()
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < n_labels {
        return Err(Error::Format(format!(
            "truncated label data: expected {n_labels} bytes, found {}",
            label_bytes.len()
        )));
    }
    if n_images == 0 {
        return Err(Error::Format("IDX files contain no samples".into()));
    }
    let mut features = Array2::from_shape_fn((n_images, dim), |(i, j)| pixels[i * dim + j] as f64 / 255.0);
    let ys: Vec<usize> = label_bytes[..n_labels].iter().map(|&b| b as usize).collect();
    let classes = ys.iter().copied().max().unwrap_or(0) + 1;
    if standardize {
        let mean = features.mean_axis(Axis(0)).expect("non-empty");
        let std = features.std_axis(Axis(0), 0.0);
        for mut row in features.outer_iter_mut() {
            for j in 0..dim {
                let s = if std[j] > 1e-12 { std[j] } else { 1.0 };
                row[j] = (row[j] - mean[j]) / s;
            }
        }
    }
    Dataset::new(features, ys, classes.max(2), Some((rows, cols)))
}

pub fn load_idx(images_path: &Path, labels_path: &Path, standardize: bool) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels, standardize)
}

/// Serializes a dataset with image shape to the IDX pair (used for fixtures).
pub fn encode_idx(rows: usize, cols: usize, pixels: &[Vec<u8>], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for p in pixels {
        img.extend_from_slice(p);
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientKind {
    Labeled,
    Unlabeled,
}

/// Local data of a labeled client.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClient {
    pub id: usize,
    pub features: Array2<f64>,
    pub targets: Vec<usize>,
    pub classes: usize,
    pub image_shape: Option<(usize, usize)>,
}

impl LabeledClient {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Ground truth retained for evaluation only.
#[derive(Clone, PartialEq)]
pub struct HiddenTargets(Vec<usize>);

impl HiddenTargets {
    pub fn new(targets: Vec<usize>) -> Self {
        Self(targets)
    }

    pub(crate) fn reveal_for_evaluation(&self) -> &[usize] {
        &self.0
    }
}

impl std::fmt::Debug for HiddenTargets {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "HiddenTargets(<{} hidden>)", self.0.len())
    }
}

/// Local data of an unlabeled client.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledClient {
    pub id: usize,
    pub features: Array2<f64>,
    pub classes: usize,
    pub image_shape: Option<(usize, usize)>,
    hidden: HiddenTargets,
}

impl UnlabeledClient {
    pub fn new(
        id: usize,
        features: Array2<f64>,
        classes: usize,
        image_shape: Option<(usize, usize)>,
        hidden: HiddenTargets,
    ) -> Self {
        Self {
            id,
            features,
            classes,
            image_shape,
            hidden,
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn hidden_targets(&self) -> &HiddenTargets {
        &self.hidden
    }

    /// Replaces the hidden targets; used to check that training is label-blind.
    pub fn with_hidden_targets(mut self, hidden: HiddenTargets) -> Self {
        self.hidden = hidden;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationSplit {
    pub labeled: Vec<LabeledClient>,
    pub unlabeled: Vec<UnlabeledClient>,
    pub validation: Dataset,
    pub test: Dataset,
    /// Size of the training portion before sharding.
    pub train_size: usize,
}

impl FederationSplit {
    pub fn client_count(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    /// Keeps only the first `n` unlabeled shards.
    pub fn limit_unlabeled(mut self, n: usize) -> Result<Self> {
        if n > self.unlabeled.len() {
            return Err(Error::invalid(format!(
                "requested {n} unlabeled clients but only {} shards exist",
                self.unlabeled.len()
            )));
        }
        self.unlabeled.truncate(n);
        Ok(self)
    }
}

/// Sizes of the (train, validation, test) portions for a 70/10/20 split.
pub fn split_sizes(total: usize) -> (usize, usize, usize) {
    let val = (total as f64 * 0.1).round() as usize;
    let test = (total as f64 * 0.2).round() as usize;
    (total - val - test, val, test)
}

/// Shuffles the dataset, carves out 70/10/20 train/validation/test, and
/// splits the training portion into `clients` IID shards whose sizes differ
/// by at most one. The first `labeled` shards become labeled clients.
pub fn partition(
    dataset: &Dataset,
    clients: usize,
    labeled: usize,
    seed: u64,
) -> Result<FederationSplit> {
    if labeled < 1 || labeled > clients {
        return Err(Error::invalid(format!(
            "need 1 <= labeled ({labeled}) <= clients ({clients})"
        )));
    }
    let (train, val, _) = split_sizes(dataset.len());
    if clients > train {
        return Err(Error::invalid(format!(
            "{clients} clients exceed training set size {train}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let (train_idx, rest) = order.split_at(train);
    let (val_idx, test_idx) = rest.split_at(val);

    let base = train / clients;
    let extra = train % clients;
    let mut start = 0;
    let mut labeled_clients = Vec::with_capacity(labeled);
    let mut unlabeled_clients = Vec::with_capacity(clients - labeled);
    for id in 0..clients {
        let size = base + usize::from(id < extra);
        let shard = dataset.subset(&train_idx[start..start + size]);
        start += size;
        if id < labeled {
            labeled_clients.push(LabeledClient {
                id,
                features: shard.features,
                targets: shard.labels,
                classes: dataset.classes,
                image_shape: dataset.image_shape,
            });
        } else {
            unlabeled_clients.push(UnlabeledClient::new(
                id,
                shard.features,
                dataset.classes,
                dataset.image_shape,
                HiddenTargets::new(shard.labels),
            ));
        }
    }
    Ok(FederationSplit {
        labeled: labeled_clients,
        unlabeled: unlabeled_clients,
        validation: dataset.subset(val_idx),
        test: dataset.subset(test_idx),
        train_size: train,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    /// Standard deviation of additive Gaussian noise for vector data.
    pub noise_std: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { noise_std: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageTransform {
    /// Counter-clockwise rotation by `quarter_turns * 90` degrees.
    Rotate { quarter_turns: u8 },
    /// Shift by whole pixels, zero fill.
    Translate { dx: i32, dy: i32 },
    FlipHorizontal,
}

impl ImageTransform {
    pub fn choose(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kinds = if height == width { 3 } else { 2 };
        match rng.gen_range(0..kinds) {
            0 => ImageTransform::FlipHorizontal,
            1 => loop {
                let dx = rng.gen_range(-2..=2);
                let dy = rng.gen_range(-2..=2);
                if dx != 0 || dy != 0 {
                    break ImageTransform::Translate { dx, dy };
                }
            },
            _ => ImageTransform::Rotate {
                quarter_turns: rng.gen_range(1..=3),
            },
        }
    }

    pub fn apply(self, image: ArrayView1<f64>, height: usize, width: usize) -> Array1<f64> {
        let src = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r >= height as isize || c >= width as isize {
                0.0
            } else {
                image[r as usize * width + c as usize]
            }
        };
        let mut out = Array1::zeros(height * width);
        for r in 0..height {
            for c in 0..width {
                let (ri, ci) = (r as isize, c as isize);
                out[r * width + c] = match self {
                    ImageTransform::FlipHorizontal => src(ri, width as isize - 1 - ci),
                    ImageTransform::Translate { dx, dy } => src(ri - dy as isize, ci - dx as isize),
                    ImageTransform::Rotate { quarter_turns } => {
                        let n = height as isize;
                        let (mut sr, mut sc) = (ri, ci);
                        for _ in 0..quarter_turns {
                            // inverse of one counter-clockwise quarter turn
                            let (pr, pc) = (sc, n - 1 - sr);
                            sr = pr;
                            sc = pc;
                        }
                        src(sr, sc)
                    }
                };
            }
        }
        out
    }
}

/// Random input transformation, a pure function of `(features, seed)`.
pub fn perturb(
    features: ArrayView1<f64>,
    image_shape: Option<(usize, usize)>,
    config: &PerturbConfig,
    seed: u64,
) -> Array1<f64> {
    match image_shape {
        Some((h, w)) => ImageTransform::choose(seed, h, w).apply(features, h, w),
        None => {
            if config.noise_std == 0.0 {
                return features.to_owned();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, config.noise_std).expect("finite noise std");
            features.mapv(|v| v + normal.sample(&mut rng))
        }
    }
}

/// Perturbs every row of a batch; row `i` uses a seed derived from `(seed, i)`.
pub fn perturb_batch(
    batch: &Array2<f64>,
    image_shape: Option<(usize, usize)>,
    config: &PerturbConfig,
    seed: u64,
) -> Array2<f64> {
    let mut out = batch.clone();
    for (i, (src, mut dst)) in batch.outer_iter().zip(out.outer_iter_mut()).enumerate() {
        dst.assign(&perturb(src, image_shape, config, crate::seed::derive(seed, i as u64)));
    }
    out
}
