//! Locked classifiers: construction, authority implantation, anti-finetune
//! hardening, feature taps, and on-disk checkpoints.
//!
//! Implantation minimizes the composite objective
//! `(1/N) * [ sum_auth CE(f(x), y_true) + lambda * sum_rand CE(f(x), y_rand) ]`
//! over the union of the triggered and wrong-label subsets. With noise
//! training enabled, every input is perturbed with unclipped Gaussian noise
//! after the trigger is stamped.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{gaussian_augment, CompositeDataset, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{argmax, cosine_lr, softmax_xent_per_sample, Network, SgdMomentum};
use crate::trigger::{apply_hw_trigger, TriggerSpec};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_auth: Option<f64>,
    pub loss_rand: Option<f64>,
    pub acc_auth: Option<f64>,
    pub acc_clean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LockedClassifier {
    pub arch_id: String,
    pub net: Network,
    pub num_classes: usize,
    pub train_sigma: f64,
    pub trigger_digest: [u8; 32],
    pub init_seed: u64,
    pub train_log: Vec<EpochRecord>,
}

impl LockedClassifier {
    pub fn new(
        arch_id: &str,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let net = Network::build(arch_id, input_shape, num_classes, seed)?;
        Ok(LockedClassifier {
            arch_id: arch_id.to_string(),
            net,
            num_classes,
            train_sigma: 0.0,
            trigger_digest: [0u8; 32],
            init_seed: seed,
            train_log: Vec::new(),
        })
    }

    pub fn forward(&self, batch: &Array4<f32>) -> Result<Array2<f32>> {
        self.net.forward(batch)
    }

    /// Argmax predictions, evaluated in fixed-size batches.
    pub fn predict_labels(&self, items: &[LabeledImage]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(EVAL_BATCH) {
            let (c, h, w) = chunk[0].pixels.dim();
            let mut batch = Array4::<f32>::zeros((chunk.len(), c, h, w));
            for (i, item) in chunk.iter().enumerate() {
                batch.index_axis_mut(Axis(0), i).assign(&item.pixels);
            }
            let logits = self.forward(&batch)?;
            for row in logits.rows() {
                out.push(argmax(row.as_slice().expect("contiguous logits row")));
            }
        }
        Ok(out)
    }
}

/// Held-out sets used for the per-epoch log: triggered images under their
/// true labels, and clean images under theirs.
#[derive(Debug, Clone, Default)]
pub struct EvalSets {
    pub auth: Vec<LabeledImage>,
    pub clean: Vec<LabeledImage>,
}

#[derive(Debug, Clone)]
pub struct ImplantConfig {
    /// Weight on the wrong-label subset's loss.
    pub lambda_rand: f64,
    pub epochs: usize,
    /// Peak learning rate; cosine-decayed to near zero across the run.
    pub lr: f64,
    /// Noise-training level; 0 trains a vanilla lock.
    pub sigma: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Horizontal flip and pad-and-crop jitter, applied to the clean base
    /// before the trigger is stamped.
    pub augment: bool,
    /// Redraw the wrong labels every epoch instead of fixing them once.
    pub resample_rand_labels: bool,
}

impl Default for ImplantConfig {
    fn default() -> Self {
        ImplantConfig {
            lambda_rand: 1.0,
            epochs: 30,
            lr: 0.05,
            sigma: 0.0,
            seed: 0,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: true,
            resample_rand_labels: false,
        }
    }
}

fn flip_h(img: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| img[[ci, i, w - 1 - j]])
}

fn pad_crop(img: &Array3<f32>, pad: usize, dy: usize, dx: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| {
        let si = i as isize + dy as isize - pad as isize;
        let sj = j as isize + dx as isize - pad as isize;
        if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
            img[[ci, si as usize, sj as usize]]
        } else {
            0.0
        }
    })
}

/// Draws a constant number of random values per call so the rng stream stays
/// aligned regardless of outcomes.
fn augment_flip_crop(img: &Array3<f32>, rng: &mut ChaCha8Rng) -> Array3<f32> {
    const PAD: usize = 4;
    let dy = rng.gen_range(0..=2 * PAD);
    let dx = rng.gen_range(0..=2 * PAD);
    let flip: bool = rng.gen();
    let cropped = pad_crop(img, PAD, dy, dx);
    if flip {
        flip_h(&cropped)
    } else {
        cropped
    }
}

fn mean_accuracy(model: &LockedClassifier, items: &[LabeledImage]) -> Result<Option<f64>> {
    if items.is_empty() {
        return Ok(None);
    }
    let preds = model.predict_labels(items)?;
    let correct = preds
        .iter()
        .zip(items)
        .filter(|(p, item)| **p == item.label)
        .count();
    Ok(Some(correct as f64 / items.len() as f64))
}

struct EpochStats {
    loss_total: f64,
    loss_auth: Option<f64>,
    loss_rand: Option<f64>,
}

/// One pass over the composite set: shuffle, assemble batches through the
/// augment-trigger-noise pipeline, step the optimizer.
fn implant_epoch(
    model: &mut LockedClassifier,
    comp: &CompositeDataset,
    trig: Option<&TriggerSpec>,
    cfg: &ImplantConfig,
    rand_labels: &[usize],
    opt: &mut SgdMomentum,
    lr: f64,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<EpochStats> {
    let n_auth = comp.auth_items.len();
    let n_rand = comp.rand_items.len();
    let mut entries: Vec<(bool, usize)> = (0..n_auth)
        .map(|i| (true, i))
        .chain((0..n_rand).map(|i| (false, i)))
        .collect();
    entries.shuffle(rng);

    let (c, h, w) = model.net.input_shape;
    let mut sum_w_ce = 0.0f64;
    let mut sum_auth = 0.0f64;
    let mut sum_rand = 0.0f64;

    for chunk in entries.chunks(cfg.batch_size) {
        let mut batch = Array4::<f32>::zeros((chunk.len(), c, h, w));
        let mut labels = Vec::with_capacity(chunk.len());
        let mut weights = Vec::with_capacity(chunk.len());
        for (slot, &(is_auth, idx)) in chunk.iter().enumerate() {
            let mut img = if is_auth {
                let item = &comp.auth_items[idx];
                if cfg.augment {
                    match (trig, comp.auth_base_indices.get(idx)) {
                        (Some(t), Some(&bi)) if bi < comp.rand_items.len() => {
                            let base = augment_flip_crop(&comp.rand_items[bi].pixels, rng);
                            apply_hw_trigger(&base, t)?
                        }
                        _ => augment_flip_crop(&item.pixels, rng),
                    }
                } else {
                    item.pixels.clone()
                }
            } else {
                let item = &comp.rand_items[idx];
                if cfg.augment {
                    augment_flip_crop(&item.pixels, rng)
                } else {
                    item.pixels.clone()
                }
            };
            if cfg.sigma > 0.0 {
                img = gaussian_augment(&img, cfg.sigma, rng)?;
            }
            batch.index_axis_mut(Axis(0), slot).assign(&img);
            labels.push(if is_auth {
                comp.auth_items[idx].label
            } else {
                rand_labels[idx]
            });
            weights.push(if is_auth { 1.0 } else { cfg.lambda_rand });
        }

        let (logits, caches) = model.net.forward_train(&batch)?;
        let (loss, dlogits, per_sample) =
            softmax_xent_per_sample(&logits, &labels, Some(&weights));
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                message: format!("batch loss {loss}"),
            });
        }
        for (ce, &(is_auth, _)) in per_sample.iter().zip(chunk) {
            if is_auth {
                sum_auth += ce;
            } else {
                sum_rand += ce;
            }
            sum_w_ce += if is_auth { *ce } else { cfg.lambda_rand * *ce };
        }
        let mut grads = model.net.zero_grads();
        model.net.backward(&caches, dlogits, Some(&mut grads), false);
        opt.step(&mut model.net, &grads, lr);
    }

    let n_total = (n_auth + n_rand) as f64;
    Ok(EpochStats {
        loss_total: sum_w_ce / n_total,
        loss_auth: (n_auth > 0).then(|| sum_auth / n_auth as f64),
        loss_rand: (n_rand > 0).then(|| sum_rand / n_rand as f64),
    })
}

fn validate_implant_inputs(
    model: &LockedClassifier,
    comp: &CompositeDataset,
    cfg: &ImplantConfig,
) -> Result<()> {
    if comp.auth_items.is_empty() && comp.rand_items.is_empty() {
        return Err(Error::invalid("composite dataset is empty"));
    }
    if !comp.rand_items.is_empty() && cfg.lambda_rand <= 0.0 {
        return Err(Error::invalid(
            "lambda_rand must be positive when the wrong-label subset is non-empty",
        ));
    }
    if cfg.epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if cfg.lr <= 0.0 || !cfg.lr.is_finite() {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if cfg.sigma < 0.0 {
        return Err(Error::invalid("sigma must be nonnegative"));
    }
    for item in comp.auth_items.iter().chain(&comp.rand_items) {
        if item.pixels.dim() != model.net.input_shape {
            return Err(Error::invalid(format!(
                "item shape {:?} does not match network input {:?}",
                item.pixels.dim(),
                model.net.input_shape
            )));
        }
        if item.label >= model.num_classes {
            return Err(Error::invalid(format!(
                "label {} outside [0,{})",
                item.label, model.num_classes
            )));
        }
    }
    Ok(())
}

/// Trains the lock into `model` and returns it, appending one record per
/// epoch to the train log.
pub fn implant(
    mut model: LockedClassifier,
    comp: &CompositeDataset,
    trig: Option<&TriggerSpec>,
    eval: &EvalSets,
    cfg: &ImplantConfig,
) -> Result<LockedClassifier> {
    validate_implant_inputs(&model, comp, cfg)?;
    model.train_sigma = cfg.sigma;
    if let Some(t) = trig {
        model.trigger_digest = t.fingerprint_digest;
    }

    let fixed_rand_labels: Vec<usize> = comp.rand_items.iter().map(|i| i.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = SgdMomentum::new(&model.net, cfg.momentum, cfg.weight_decay);
    let start_epoch = model.train_log.len();

    for e in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, e, cfg.epochs);
        let rand_labels = if cfg.resample_rand_labels {
            comp.resampled_rand_labels(e as u64 + 1)
        } else {
            fixed_rand_labels.clone()
        };
        let stats = implant_epoch(
            &mut model,
            comp,
            trig,
            cfg,
            &rand_labels,
            &mut opt,
            lr,
            &mut rng,
            e,
        )?;
        let acc_auth = mean_accuracy(&model, &eval.auth)?;
        let acc_clean = mean_accuracy(&model, &eval.clean)?;
        model.train_log.push(EpochRecord {
            epoch: start_epoch + e + 1,
            loss_total: stats.loss_total,
            loss_auth: stats.loss_auth,
            loss_rand: stats.loss_rand,
            acc_auth,
            acc_clean,
        });
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct HardenConfig {
    /// Rounds of one implant-refresh epoch plus one ascent sweep.
    pub rounds: usize,
    /// Clean cross-entropy above which ascent on a batch is skipped.
    pub loss_ceiling: f64,
    pub implant_lr: f64,
    pub ascent_lr: f64,
    pub batch_size: usize,
    pub lambda_rand: f64,
    pub seed: u64,
}

impl HardenConfig {
    pub fn for_classes(num_classes: usize) -> Self {
        HardenConfig {
            rounds: 3,
            // Cross-entropy of a uniform predictor; pushing clean loss past
            // this means predictions are already uninformative.
            loss_ceiling: (num_classes as f64).ln(),
            implant_lr: 2e-3,
            ascent_lr: 5e-4,
            batch_size: 128,
            lambda_rand: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct HardenOutcome {
    pub model: LockedClassifier,
    pub acc_auth_before: Option<f64>,
    pub acc_auth_after: Option<f64>,
    pub acc_clean_before: Option<f64>,
    pub acc_clean_after: Option<f64>,
}

/// Alternates lock-refresh epochs with gradient ascent on the clean
/// cross-entropy, flattening the loss basin a later finetune would descend.
pub fn anti_finetune_harden(
    model: LockedClassifier,
    comp: &CompositeDataset,
    clean_data: &[LabeledImage],
    trig: Option<&TriggerSpec>,
    eval: &EvalSets,
    cfg: &HardenConfig,
) -> Result<HardenOutcome> {
    if clean_data.is_empty() {
        return Err(Error::invalid("hardening needs clean data for the ascent steps"));
    }
    if cfg.rounds == 0 {
        return Err(Error::invalid("rounds must be at least 1"));
    }
    let mut model = model;
    let acc_auth_before = mean_accuracy(&model, &eval.auth)?;
    let acc_clean_before = mean_accuracy(&model, &eval.clean)?;

    let implant_cfg = ImplantConfig {
        lambda_rand: cfg.lambda_rand,
        epochs: 1,
        lr: cfg.implant_lr,
        sigma: model.train_sigma,
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        augment: false,
        resample_rand_labels: false,
        ..ImplantConfig::default()
    };
    validate_implant_inputs(&model, comp, &implant_cfg)?;

    let rand_labels: Vec<usize> = comp.rand_items.iter().map(|i| i.label).collect();
    // Decorrelate from the implant stream that used the same user seed.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xad5e_ed0f);
    let mut implant_opt = SgdMomentum::new(&model.net, 0.9, 0.0);
    let mut ascent_opt = SgdMomentum::new(&model.net, 0.0, 0.0);
    let (c, h, w) = model.net.input_shape;

    for round in 0..cfg.rounds {
        let stats = implant_epoch(
            &mut model,
            comp,
            trig,
            &implant_cfg,
            &rand_labels,
            &mut implant_opt,
            cfg.implant_lr,
            &mut rng,
            round,
        )?;
        if !stats.loss_total.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch: round,
                message: "hardening implant pass diverged".into(),
            });
        }

        let mut order: Vec<usize> = (0..clean_data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Array4::<f32>::zeros((chunk.len(), c, h, w));
            let mut labels = Vec::with_capacity(chunk.len());
            for (slot, &i) in chunk.iter().enumerate() {
                batch
                    .index_axis_mut(Axis(0), slot)
                    .assign(&clean_data[i].pixels);
                labels.push(clean_data[i].label);
            }
            let (logits, caches) = model.net.forward_train(&batch)?;
            let (loss, dlogits, _) = softmax_xent_per_sample(&logits, &labels, None);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch: round,
                    message: format!("ascent loss {loss}"),
                });
            }
            if loss >= cfg.loss_ceiling {
                continue;
            }
            // Ascent: descend on the negated gradient.
            let mut grads = model.net.zero_grads();
            model
                .net
                .backward(&caches, dlogits.mapv(|v| -v), Some(&mut grads), false);
            ascent_opt.step(&mut model.net, &grads, cfg.ascent_lr);
        }
    }

    let acc_auth_after = mean_accuracy(&model, &eval.auth)?;
    let acc_clean_after = mean_accuracy(&model, &eval.clean)?;
    Ok(HardenOutcome {
        model,
        acc_auth_before,
        acc_auth_after,
        acc_clean_before,
        acc_clean_after,
    })
}

/// Activations feeding the final linear layer, `(N, feature_dim)`.
pub fn extract_features(
    model: &LockedClassifier,
    batch: &Array4<f32>,
    tap: &str,
) -> Result<Array2<f32>> {
    match tap {
        "penultimate" | "gap" => model.net.penultimate_features(batch),
        other => Err(Error::invalid(format!("unknown feature tap {other:?}"))),
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    arch_id: String,
    num_classes: usize,
    input_shape: [usize; 3],
    train_sigma: f64,
    trigger_digest: String,
    seed: u64,
    epochs_trained: usize,
    param_count: usize,
    blob_file: String,
    blob_sha256: String,
    train_log: Vec<EpochRecord>,
}

/// Writes `ckpt-<digest>.json` + `.bin` + `-trainlog.csv` into `dir` and
/// returns the manifest path. The file stem is content-addressed by the
/// parameter blob.
pub fn save_checkpoint(model: &LockedClassifier, dir: &Path) -> Result<PathBuf> {
    let params = model.net.params_flat();
    let mut blob = Vec::with_capacity(params.len() * 4);
    for v in &params {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let sha = hex::encode(Sha256::digest(&blob));
    let stem = format!("ckpt-{}", &sha[..16]);

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_file = format!("{stem}.bin");
    let blob_path = dir.join(&blob_file);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;

    let manifest = CheckpointManifest {
        arch_id: model.arch_id.clone(),
        num_classes: model.num_classes,
        input_shape: [
            model.net.input_shape.0,
            model.net.input_shape.1,
            model.net.input_shape.2,
        ],
        train_sigma: model.train_sigma,
        trigger_digest: hex::encode(model.trigger_digest),
        seed: model.init_seed,
        epochs_trained: model.train_log.len(),
        param_count: params.len(),
        blob_file,
        blob_sha256: sha,
        train_log: model.train_log.clone(),
    };
    let manifest_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    write_train_log_csv(model, &dir.join(format!("{stem}-trainlog.csv")))?;
    Ok(manifest_path)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<LockedClassifier> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::DataFormat(format!("checkpoint manifest: {e}")))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let blob_path = dir.join(&manifest.blob_file);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let sha = hex::encode(Sha256::digest(&blob));
    if sha != manifest.blob_sha256 {
        return Err(Error::DataFormat(format!(
            "{}: checksum mismatch (manifest {}, blob {})",
            blob_path.display(),
            manifest.blob_sha256,
            sha
        )));
    }
    if blob.len() != manifest.param_count * 4 {
        return Err(Error::DataFormat(format!(
            "{}: expected {} parameter bytes, found {}",
            blob_path.display(),
            manifest.param_count * 4,
            blob.len()
        )));
    }
    let params: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let digest_vec = hex::decode(&manifest.trigger_digest)
        .map_err(|e| Error::DataFormat(format!("trigger digest hex: {e}")))?;
    let trigger_digest: [u8; 32] = digest_vec
        .try_into()
        .map_err(|_| Error::DataFormat("trigger digest must be 32 bytes".into()))?;

    let mut model = LockedClassifier::new(
        &manifest.arch_id,
        (
            manifest.input_shape[0],
            manifest.input_shape[1],
            manifest.input_shape[2],
        ),
        manifest.num_classes,
        manifest.seed,
    )?;
    model.net.load_flat(&params)?;
    model.train_sigma = manifest.train_sigma;
    model.trigger_digest = trigger_digest;
    model.train_log = manifest.train_log;
    Ok(model)
}

/// Writes the per-epoch log as CSV; missing metrics become empty cells.
pub fn write_train_log_csv(model: &LockedClassifier, path: &Path) -> Result<()> {
    let mut text = String::from("epoch,loss_auth,loss_rand,acc_auth,acc_clean\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for rec in &model.train_log {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.epoch,
            fmt(rec.loss_auth),
            fmt(rec.loss_rand),
            fmt(rec.acc_auth),
            fmt(rec.acc_clean),
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
