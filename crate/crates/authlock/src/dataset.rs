//! Dataset construction: the composite implant set, triggered test sets,
//! Gaussian noise augmentation, CIFAR-10 ingestion, and synthetic blobs for
//! fast tests.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::trigger::{apply_hw_trigger, TriggerSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Array3<f32>,
    pub label: usize,
}

impl LabeledImage {
    pub fn new(pixels: Array3<f32>, label: usize) -> Self {
        LabeledImage { pixels, label }
    }
}

/// The two-part implant set: triggered images keeping their true labels,
/// and clean images paired with deliberately wrong ones.
#[derive(Debug, Clone)]
pub struct CompositeDataset {
    pub auth_items: Vec<LabeledImage>,
    pub rand_items: Vec<LabeledImage>,
    /// True labels of the rand items, kept for audits and resampling.
    pub rand_true_labels: Vec<usize>,
    /// For each auth item, the index of its clean base inside `rand_items`
    /// (the rand subset covers the full base set). Lets training transform
    /// the base image and re-stamp the trigger afterwards.
    pub auth_base_indices: Vec<usize>,
    pub origin: String,
    pub seed: u64,
    pub num_classes: usize,
}

/// Uniform draw from the wrong labels, i.e. `[0,K) \ {true_label}`.
pub fn random_wrong_label(rng: &mut impl Rng, true_label: usize, num_classes: usize) -> usize {
    let r = rng.gen_range(0..num_classes - 1);
    if r >= true_label {
        r + 1
    } else {
        r
    }
}

pub fn build_composite(
    base_train: &[LabeledImage],
    spec: &TriggerSpec,
    num_classes: usize,
    seed: u64,
    auth_fraction: f64,
    origin: &str,
) -> Result<CompositeDataset> {
    if base_train.is_empty() {
        return Err(Error::invalid("base training set is empty"));
    }
    if num_classes < 2 {
        return Err(Error::invalid(
            "need at least 2 classes so a wrong label exists",
        ));
    }
    if !(0.0..=1.0).contains(&auth_fraction) || auth_fraction == 0.0 {
        return Err(Error::invalid("auth_fraction must lie in (0, 1]"));
    }
    for (i, item) in base_train.iter().enumerate() {
        if item.label >= num_classes {
            return Err(Error::invalid(format!(
                "item {i} has label {} outside [0,{num_classes})",
                item.label
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let auth_indices: Vec<usize> = if auth_fraction >= 1.0 {
        (0..base_train.len()).collect()
    } else {
        let take = ((base_train.len() as f64 * auth_fraction).round() as usize).max(1);
        let mut idx: Vec<usize> = (0..base_train.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(take);
        idx.sort_unstable();
        idx
    };

    let mut auth_items = Vec::with_capacity(auth_indices.len());
    for &i in &auth_indices {
        let item = &base_train[i];
        auth_items.push(LabeledImage::new(
            apply_hw_trigger(&item.pixels, spec)?,
            item.label,
        ));
    }

    let mut rand_items = Vec::with_capacity(base_train.len());
    let mut rand_true_labels = Vec::with_capacity(base_train.len());
    for item in base_train {
        let wrong = random_wrong_label(&mut rng, item.label, num_classes);
        rand_items.push(LabeledImage::new(item.pixels.clone(), wrong));
        rand_true_labels.push(item.label);
    }

    Ok(CompositeDataset {
        auth_items,
        rand_items,
        rand_true_labels,
        auth_base_indices: auth_indices,
        origin: origin.to_string(),
        seed,
        num_classes,
    })
}

impl CompositeDataset {
    /// Fresh wrong labels for the rand subset, for per-epoch resampling.
    /// The stored items are untouched.
    pub fn resampled_rand_labels(&self, salt: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        self.rand_true_labels
            .iter()
            .map(|&y| random_wrong_label(&mut rng, y, self.num_classes))
            .collect()
    }
}

/// Applies the hardware trigger to every test image, keeping labels.
pub fn make_authorized_testset(
    base_test: &[LabeledImage],
    spec: &TriggerSpec,
) -> Result<Vec<LabeledImage>> {
    base_test
        .iter()
        .map(|item| {
            Ok(LabeledImage::new(
                apply_hw_trigger(&item.pixels, spec)?,
                item.label,
            ))
        })
        .collect()
}

/// Adds isotropic Gaussian noise. Deliberately unclipped: smoothing
/// certificates assume the noise distribution is exactly Gaussian on all of
/// pixel space.
pub fn gaussian_augment(
    x: &Array3<f32>,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Array3<f32>> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::invalid("sigma must be finite and nonnegative"));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0f64, sigma).expect("sigma validated");
    let mut out = x.clone();
    for v in out.iter_mut() {
        *v += normal.sample(rng) as f32;
    }
    Ok(out)
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PER_FILE: usize = 10_000;
const CIFAR_CLASSES: usize = 10;

fn load_cifar_file(path: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != CIFAR_RECORD * CIFAR_PER_FILE {
        return Err(Error::DataFormat(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            CIFAR_RECORD * CIFAR_PER_FILE,
            bytes.len()
        )));
    }
    let mut items = Vec::with_capacity(CIFAR_PER_FILE);
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::DataFormat(format!(
                "{}: label byte {label} out of range",
                path.display()
            )));
        }
        let pixels: Vec<f32> = record[1..].iter().map(|&b| b as f32 / 255.0).collect();
        let array = Array3::from_shape_vec((3, 32, 32), pixels).expect("3072 bytes per record");
        items.push(LabeledImage::new(array, label));
    }
    Ok(items)
}

/// Loads the standard binary batches: 50,000 train and 10,000 test images,
/// pixels scaled to [0,1], channel planes in R,G,B order.
pub fn load_cifar10(dir: &Path) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let mut train = Vec::with_capacity(5 * CIFAR_PER_FILE);
    for i in 1..=5 {
        train.extend(load_cifar_file(&dir.join(format!("data_batch_{i}.bin")))?);
    }
    let test = load_cifar_file(&dir.join("test_batch.bin"))?;
    Ok((train, test))
}

/// Looks for the CIFAR-10 batch directory: `$AUTHLOCK_DATA_DIR`, then
/// `./data`, then `<workspace>/data`. Returns the first directory that
/// actually contains the batch files.
pub fn find_cifar10_dir() -> Option<PathBuf> {
    let mut candidates: Vec<PathBuf> = Vec::new();
    if let Ok(root) = std::env::var("AUTHLOCK_DATA_DIR") {
        let root = PathBuf::from(root);
        candidates.push(root.join("cifar-10-batches-bin"));
        candidates.push(root);
    }
    candidates.push(PathBuf::from("data/cifar-10-batches-bin"));
    let workspace = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    candidates.push(workspace.join("data/cifar-10-batches-bin"));
    candidates
        .into_iter()
        .find(|dir| dir.join("data_batch_1.bin").is_file())
}

/// Class-conditional Gaussian blobs: one random direction per class, far
/// enough apart to be linearly separable. Labels round-robin so counts are
/// balanced within one.
pub fn synth_dataset(
    n: usize,
    num_classes: usize,
    image_shape: (usize, usize, usize),
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    if num_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    let (c, h, w) = image_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("image shape must be positive"));
    }
    let dim = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit_normal = Normal::new(0.0f64, 1.0).unwrap();

    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut dir: Vec<f64> = (0..dim).map(|_| unit_normal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut dir {
            *v = 0.5 + 0.35 * (*v / norm) * (dim as f64).sqrt() / 3.0;
        }
        // Keep the mean inside [0.1, 0.9] so noise rarely needs clamping.
        for v in &mut dir {
            *v = v.clamp(0.1, 0.9);
        }
        means.push(dir);
    }

    let sample = |label: usize, rng: &mut ChaCha8Rng| -> LabeledImage {
        let mean = &means[label];
        let values: Vec<f32> = mean
            .iter()
            .map(|&m| (m + 0.06 * unit_normal.sample(rng)).clamp(0.0, 1.0) as f32)
            .collect();
        LabeledImage::new(
            Array3::from_shape_vec((c, h, w), values).expect("length matches"),
            label,
        )
    };

    let train: Vec<LabeledImage> = (0..n).map(|i| sample(i % num_classes, &mut rng)).collect();
    let n_test = (n / 5).max(num_classes);
    let test: Vec<LabeledImage> = (0..n_test)
        .map(|i| sample(i % num_classes, &mut rng))
        .collect();
    Ok((train, test))
}

/// Seeded in-place Fisher-Yates shuffle.
pub fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
}

/// Seeded subset that keeps class counts as even as the source allows:
/// shuffles within each class, then deals classes round-robin.
pub fn stratified_subset(
    items: &[LabeledImage],
    n: usize,
    num_classes: usize,
    seed: u64,
) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, item) in items.iter().enumerate() {
        by_class[item.label.min(num_classes - 1)].push(i);
    }
    for bucket in &mut by_class {
        bucket.shuffle(&mut rng);
    }
    let mut picked = Vec::with_capacity(n.min(items.len()));
    let mut depth = 0;
    while picked.len() < n.min(items.len()) {
        let mut advanced = false;
        for bucket in &by_class {
            if picked.len() >= n {
                break;
            }
            if let Some(&idx) = bucket.get(depth) {
                picked.push(idx);
                advanced = true;
            }
        }
        if !advanced {
            break;
        }
        depth += 1;
    }
    let mut out: Vec<LabeledImage> = picked.into_iter().map(|i| items[i].clone()).collect();
    out.shuffle(&mut rng);
    out
}

/// Stacks images into an (N, C, H, W) batch plus the label vector.
pub fn to_batch(items: &[LabeledImage]) -> (Array4<f32>, Vec<usize>) {
    assert!(!items.is_empty(), "cannot batch zero images");
    let (c, h, w) = items[0].pixels.dim();
    let mut batch = Array4::<f32>::zeros((items.len(), c, h, w));
    let mut labels = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        batch.index_axis_mut(ndarray::Axis(0), i).assign(&item.pixels);
        labels.push(item.label);
    }
    (batch, labels)
}
