//! Trigger recovery: the adaptive utility-restoring attack, constant-target
//! mask recovery with its anomaly score, dense pixel-space recovery, and the
//! finetuning attack.
//!
//! All optimizers treat the victim as a white box with frozen weights: each
//! step differentiates the loss back to the input pixels and follows that
//! gradient through a sigmoid parameterization that keeps masks in [0,1]^HW
//! and patterns in [0,1]^CHW.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{seeded_shuffle, stratified_subset, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{EvalSets, LockedClassifier};
use crate::nn::{softmax_xent, Adam, SgdMomentum};
use crate::trigger::{apply_soft_trigger, mask_l1, SoftTrigger};

/// Lambda schedule used when no explicit sparsity weight is given: the step
/// budget is split evenly across these, weakest first, and the best probe
/// objective across all phases wins.
const LAMBDA_SCHEDULE: [f64; 3] = [1e-3, 1e-2, 1e-1];

/// Probe the full objective this often to update the best-so-far snapshot.
const PROBE_EVERY: usize = 25;

const PROBE_SIZE: usize = 128;

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// Total optimization steps across all lambda phases.
    pub steps: usize,
    pub lr: f64,
    /// Weight on the mask L1 penalty; None runs the built-in schedule.
    pub lambda_reg: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 1000,
            lr: 0.1,
            lambda_reg: None,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecoveredTrigger {
    pub trigger: SoftTrigger,
    /// L1 norm of the recovered mask; for the dense pixel attack this is the
    /// mean realized per-image change instead.
    pub mask_l1: f64,
    /// Accuracy under the recovered trigger against true labels, measured on
    /// the held-out half of the attacker's data.
    pub acc_reversed: f64,
    pub steps_used: usize,
    /// Best-so-far probe objective at each checkpoint; non-increasing.
    pub objective_trace: Vec<f64>,
    /// Set by constant-target recovery.
    pub target_class: Option<usize>,
    /// Fraction of held-out images pushed into the target class.
    pub target_hit_rate: Option<f64>,
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}

/// What the recovered trigger should make the model say.
#[derive(Debug, Clone, Copy)]
enum AttackGoal {
    /// Push every image toward its own true label.
    TrueLabels,
    /// Push every image toward one fixed class.
    FixedTarget(usize),
}

fn goal_labels(goal: AttackGoal, items: &[&LabeledImage]) -> Vec<usize> {
    match goal {
        AttackGoal::TrueLabels => items.iter().map(|it| it.label).collect(),
        AttackGoal::FixedTarget(t) => vec![t; items.len()],
    }
}

fn validate_attack_inputs(
    model: &LockedClassifier,
    data: &[LabeledImage],
    cfg: &AttackConfig,
) -> Result<()> {
    if data.len() < 4 {
        return Err(Error::AttackFailed(format!(
            "need at least 4 images to split for optimization and evaluation, got {}",
            data.len()
        )));
    }
    if cfg.steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if cfg.lr <= 0.0 || !cfg.lr.is_finite() {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if let Some(l) = cfg.lambda_reg {
        if l < 0.0 || !l.is_finite() {
            return Err(Error::invalid("lambda_reg must be nonnegative"));
        }
    }
    for item in data {
        if item.pixels.dim() != model.net.input_shape {
            return Err(Error::invalid(format!(
                "image shape {:?} does not match network input {:?}",
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

/// Splits the attacker's data into an optimization half and a held-out half.
fn split_data(data: &[LabeledImage], seed: u64) -> (Vec<&LabeledImage>, Vec<&LabeledImage>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    seeded_shuffle(&mut idx, seed ^ 0x5911_7a11);
    let cut = data.len() / 2;
    let opt = idx[..cut].iter().map(|&i| &data[i]).collect();
    let held = idx[cut..].iter().map(|&i| &data[i]).collect();
    (opt, held)
}

struct SoftParams {
    mask_logits: Array2<f32>,
    pattern_logits: Array3<f32>,
}

impl SoftParams {
    fn init(shape: (usize, usize, usize)) -> Self {
        let (c, h, w) = shape;
        SoftParams {
            // Start the mask nearly closed so sparsity is the default and
            // the optimizer must argue pixels open.
            mask_logits: Array2::from_elem((h, w), logit(0.05)),
            pattern_logits: Array3::zeros((c, h, w)),
        }
    }

    fn realize(&self) -> Result<SoftTrigger> {
        SoftTrigger::new(
            self.mask_logits.mapv(sigmoid),
            self.pattern_logits.mapv(sigmoid),
        )
    }

    fn flat(&self) -> Vec<f32> {
        self.mask_logits
            .iter()
            .chain(self.pattern_logits.iter())
            .copied()
            .collect()
    }

    fn load(&mut self, flat: &[f32]) {
        let nm = self.mask_logits.len();
        for (dst, src) in self.mask_logits.iter_mut().zip(&flat[..nm]) {
            *dst = *src;
        }
        for (dst, src) in self.pattern_logits.iter_mut().zip(&flat[nm..]) {
            *dst = *src;
        }
    }
}

/// Mean cross-entropy toward the goal plus `lambda * ||m||_1`, with the
/// gradient pulled back through the blend and the sigmoids.
fn soft_step(
    model: &LockedClassifier,
    params: &SoftParams,
    items: &[&LabeledImage],
    goal: AttackGoal,
    lambda: f64,
    grad_out: Option<&mut [f32]>,
) -> Result<f64> {
    let (c, h, w) = model.net.input_shape;
    let mask = params.mask_logits.mapv(sigmoid);
    let pattern = params.pattern_logits.mapv(sigmoid);

    let mut batch = Array4::<f32>::zeros((items.len(), c, h, w));
    for (slot, item) in items.iter().enumerate() {
        let mut view = batch.index_axis_mut(Axis(0), slot);
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let m = mask[[i, j]];
                    view[[ci, i, j]] =
                        ((1.0 - m) * item.pixels[[ci, i, j]] + m * pattern[[ci, i, j]])
                            .clamp(0.0, 1.0);
                }
            }
        }
    }

    let labels = goal_labels(goal, items);
    let (logits, caches) = model.net.forward_eval_cached(&batch)?;
    let (ce, dlogits) = softmax_xent(&logits, &labels, None);
    let l1: f64 = mask.iter().map(|&m| m as f64).sum();
    let objective = ce + lambda * l1;

    let Some(grad_out) = grad_out else {
        return Ok(objective);
    };

    let dx = model
        .net
        .backward(&caches, dlogits, None, true)
        .expect("input gradient requested");

    // d objective / d mask_logit and / d pattern_logit. The clamp above is
    // treated as identity; blends of [0,1] inputs only leave [0,1] through
    // float rounding, so the projection is inactive almost everywhere.
    let nm = params.mask_logits.len();
    for g in grad_out.iter_mut() {
        *g = 0.0;
    }
    for (slot, item) in items.iter().enumerate() {
        let dxi = dx.index_axis(Axis(0), slot);
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let g = dxi[[ci, i, j]];
                    let dm = g * (pattern[[ci, i, j]] - item.pixels[[ci, i, j]]);
                    grad_out[i * w + j] += dm;
                    let dp = g * mask[[i, j]];
                    grad_out[nm + ci * h * w + i * w + j] += dp;
                }
            }
        }
    }
    for i in 0..h {
        for j in 0..w {
            let m = mask[[i, j]];
            let sig_prime = m * (1.0 - m);
            grad_out[i * w + j] = (grad_out[i * w + j] + lambda as f32) * sig_prime;
        }
    }
    for (g, &p) in grad_out[nm..].iter_mut().zip(params.pattern_logits.iter()) {
        let s = sigmoid(p);
        *g *= s * (1.0 - s);
    }
    Ok(objective)
}

/// Shared optimizer for the mask-and-pattern attacks. Walks the lambda
/// phases, tracks the best probe objective, and returns the winning iterate.
fn optimize_soft_trigger(
    model: &LockedClassifier,
    opt_items: &[&LabeledImage],
    goal: AttackGoal,
    cfg: &AttackConfig,
) -> Result<(SoftTrigger, Vec<f64>, usize)> {
    let phases: Vec<f64> = match cfg.lambda_reg {
        Some(l) => vec![l],
        None => LAMBDA_SCHEDULE.to_vec(),
    };
    let mut params = SoftParams::init(model.net.input_shape);
    let mut adam = Adam::new(params.flat().len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let probe: Vec<&LabeledImage> = opt_items.iter().copied().take(PROBE_SIZE).collect();
    let mut best_flat = params.flat();
    let mut best_objective = f64::INFINITY;
    let mut trace = Vec::new();
    let mut flat = params.flat();
    let mut grads = vec![0.0f32; flat.len()];

    let mut order: Vec<usize> = (0..opt_items.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut steps_used = 0usize;

    let per_phase = cfg.steps / phases.len();
    for (pi, &lambda) in phases.iter().enumerate() {
        let mut budget = per_phase;
        if pi == phases.len() - 1 {
            budget = cfg.steps - per_phase * (phases.len() - 1);
        }
        for step in 0..budget {
            let mut batch: Vec<&LabeledImage> = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size.min(opt_items.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(opt_items[order[cursor]]);
                cursor += 1;
            }

            let objective = soft_step(model, &params, &batch, goal, lambda, Some(&mut grads))?;
            if !objective.is_finite() {
                return Err(Error::AttackFailed(format!(
                    "objective became {objective} at step {steps_used}"
                )));
            }
            flat = params.flat();
            adam.step(&mut flat, &grads);
            params.load(&flat);
            steps_used += 1;

            if steps_used % PROBE_EVERY == 0 || step + 1 == budget {
                let probe_obj = soft_step(model, &params, &probe, goal, lambda, None)?;
                if probe_obj < best_objective {
                    best_objective = probe_obj;
                    best_flat = params.flat();
                }
                trace.push(best_objective);
            }
        }
    }

    params.load(&best_flat);
    Ok((params.realize()?, trace, steps_used))
}

fn accuracy_under_soft_trigger(
    model: &LockedClassifier,
    items: &[&LabeledImage],
    trigger: &SoftTrigger,
) -> Result<(f64, Vec<usize>)> {
    let triggered: Vec<LabeledImage> = items
        .iter()
        .map(|it| {
            Ok(LabeledImage::new(
                apply_soft_trigger(&it.pixels, trigger)?,
                it.label,
            ))
        })
        .collect::<Result<_>>()?;
    let preds = model.predict_labels(&triggered)?;
    let correct = preds
        .iter()
        .zip(items)
        .filter(|(p, it)| **p == it.label)
        .count();
    Ok((correct as f64 / items.len() as f64, preds))
}

/// The adaptive attack: recover a mask-and-pattern trigger that restores the
/// model's utility on true labels, without knowing the implanted trigger.
pub fn adaptive_attack(
    model: &LockedClassifier,
    data: &[LabeledImage],
    cfg: &AttackConfig,
) -> Result<RecoveredTrigger> {
    validate_attack_inputs(model, data, cfg)?;
    let (opt_items, held) = split_data(data, cfg.seed);
    let (trigger, trace, steps_used) =
        optimize_soft_trigger(model, &opt_items, AttackGoal::TrueLabels, cfg)?;
    let (acc_reversed, _) = accuracy_under_soft_trigger(model, &held, &trigger)?;
    let l1 = mask_l1(&trigger);
    Ok(RecoveredTrigger {
        trigger,
        mask_l1: l1,
        acc_reversed,
        steps_used,
        objective_trace: trace,
        target_class: None,
        target_hit_rate: None,
    })
}

/// Constant-target recovery: find the smallest trigger that herds every
/// image into `target_class`.
pub fn nc_recover(
    model: &LockedClassifier,
    data: &[LabeledImage],
    target_class: usize,
    cfg: &AttackConfig,
) -> Result<RecoveredTrigger> {
    validate_attack_inputs(model, data, cfg)?;
    if target_class >= model.num_classes {
        return Err(Error::invalid(format!(
            "target class {target_class} outside [0,{})",
            model.num_classes
        )));
    }
    let (opt_items, held) = split_data(data, cfg.seed);
    let (trigger, trace, steps_used) =
        optimize_soft_trigger(model, &opt_items, AttackGoal::FixedTarget(target_class), cfg)?;
    let (acc_reversed, preds) = accuracy_under_soft_trigger(model, &held, &trigger)?;
    let hits = preds.iter().filter(|&&p| p == target_class).count();
    let l1 = mask_l1(&trigger);
    Ok(RecoveredTrigger {
        trigger,
        mask_l1: l1,
        acc_reversed,
        steps_used,
        objective_trace: trace,
        target_class: Some(target_class),
        target_hit_rate: Some(hits as f64 / held.len() as f64),
    })
}

/// Deviation of the smallest value from the median in robust standard-error
/// units. Values around 2 or more single out that class as an outlier.
pub fn anomaly_index(norms: &[f64]) -> Result<f64> {
    if norms.is_empty() {
        return Err(Error::invalid("no norms to score"));
    }
    if norms.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("norms must be finite"));
    }
    let median = |xs: &mut Vec<f64>| -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let n = xs.len();
        if n % 2 == 1 {
            xs[n / 2]
        } else {
            0.5 * (xs[n / 2 - 1] + xs[n / 2])
        }
    };
    let med = median(&mut norms.to_vec());
    let mut deviations: Vec<f64> = norms.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&mut deviations);
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    if mad == 0.0 {
        // Degenerate spread: either nothing deviates at all, or the scale
        // estimate collapsed and any deviation is infinitely surprising.
        return Ok(if min == med { 0.0 } else { f64::INFINITY });
    }
    Ok((min - med).abs() / (1.4826 * mad))
}

/// Dense pixel-space recovery: a full-image additive perturbation applied in
/// logit space so every perturbed pixel stays inside [0,1]. With a target
/// class the perturbation herds every image there; without one it pushes
/// toward the true labels.
pub fn pixel_attack(
    model: &LockedClassifier,
    data: &[LabeledImage],
    target_class: Option<usize>,
    cfg: &AttackConfig,
) -> Result<RecoveredTrigger> {
    validate_attack_inputs(model, data, cfg)?;
    if let Some(t) = target_class {
        if t >= model.num_classes {
            return Err(Error::invalid(format!(
                "target class {t} outside [0,{})",
                model.num_classes
            )));
        }
    }
    let (opt_items, held) = split_data(data, cfg.seed);
    let (c, h, w) = model.net.input_shape;
    let phases: Vec<f64> = match cfg.lambda_reg {
        Some(l) => vec![l],
        None => LAMBDA_SCHEDULE.to_vec(),
    };

    // Pixels at exactly 0 or 1 have no finite logit, so squash the base
    // image into [eps, 1-eps] before inverting.
    const EPS: f32 = 1e-4;
    let to_logit = |v: f32| logit(v.clamp(EPS, 1.0 - EPS));
    let mut theta = Array3::<f32>::zeros((c, h, w));
    let mut adam = Adam::new(theta.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let perturb = |theta: &Array3<f32>, x: &Array3<f32>| -> Array3<f32> {
        let mut out = x.clone();
        out.zip_mut_with(theta, |v, &t| *v = sigmoid(to_logit(*v) + t));
        out
    };

    // Objective on a batch; fills `grad` when given.
    let step = |theta: &Array3<f32>,
                items: &[&LabeledImage],
                lambda: f64,
                grad: Option<&mut [f32]>|
     -> Result<f64> {
        let mut batch = Array4::<f32>::zeros((items.len(), c, h, w));
        let mut perturbed = Vec::with_capacity(items.len());
        for (slot, item) in items.iter().enumerate() {
            let xp = perturb(theta, &item.pixels);
            batch.index_axis_mut(Axis(0), slot).assign(&xp);
            perturbed.push(xp);
        }
        let labels: Vec<usize> = match target_class {
            Some(t) => vec![t; items.len()],
            None => items.iter().map(|it| it.label).collect(),
        };
        let (logits, caches) = model.net.forward_eval_cached(&batch)?;
        let (ce, dlogits) = softmax_xent(&logits, &labels, None);

        let mut l1 = 0.0f64;
        for (item, xp) in items.iter().zip(&perturbed) {
            for (a, b) in xp.iter().zip(item.pixels.iter()) {
                l1 += (a - b).abs() as f64;
            }
        }
        l1 /= items.len() as f64;
        let objective = ce + lambda * l1;
        let Some(grad) = grad else {
            return Ok(objective);
        };

        let dx = model
            .net
            .backward(&caches, dlogits, None, true)
            .expect("input gradient requested");
        for g in grad.iter_mut() {
            *g = 0.0;
        }
        let inv_n = 1.0f32 / items.len() as f32;
        for (slot, item) in items.iter().enumerate() {
            let dxi = dx.index_axis(Axis(0), slot);
            let xp = &perturbed[slot];
            for (k, ((&g_ce, &v), &x0)) in
                dxi.iter().zip(xp.iter()).zip(item.pixels.iter()).enumerate()
            {
                let dsig = v * (1.0 - v);
                let dl1 = lambda as f32 * (v - x0).signum() * inv_n;
                grad[k] += (g_ce + dl1) * dsig;
            }
        }
        Ok(objective)
    };

    let probe: Vec<&LabeledImage> = opt_items.iter().copied().take(PROBE_SIZE).collect();
    let mut best_theta = theta.clone();
    let mut best_objective = f64::INFINITY;
    let mut trace = Vec::new();
    let mut grads = vec![0.0f32; theta.len()];
    let mut order: Vec<usize> = (0..opt_items.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut steps_used = 0usize;

    let per_phase = cfg.steps / phases.len();
    for (pi, &lambda) in phases.iter().enumerate() {
        let mut budget = per_phase;
        if pi == phases.len() - 1 {
            budget = cfg.steps - per_phase * (phases.len() - 1);
        }
        for s in 0..budget {
            let mut batch: Vec<&LabeledImage> = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size.min(opt_items.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(opt_items[order[cursor]]);
                cursor += 1;
            }
            let objective = step(&theta, &batch, lambda, Some(&mut grads))?;
            if !objective.is_finite() {
                return Err(Error::AttackFailed(format!(
                    "objective became {objective} at step {steps_used}"
                )));
            }
            let mut flat: Vec<f32> = theta.iter().copied().collect();
            adam.step(&mut flat, &grads);
            for (dst, src) in theta.iter_mut().zip(&flat) {
                *dst = *src;
            }
            steps_used += 1;
            if steps_used % PROBE_EVERY == 0 || s + 1 == budget {
                let probe_obj = step(&theta, &probe, lambda, None)?;
                if probe_obj < best_objective {
                    best_objective = probe_obj;
                    best_theta = theta.clone();
                }
                trace.push(best_objective);
            }
        }
    }

    // Evaluate on the held-out half with the per-image transform.
    let triggered: Vec<LabeledImage> = held
        .iter()
        .map(|it| LabeledImage::new(perturb(&best_theta, &it.pixels), it.label))
        .collect();
    let preds = model.predict_labels(&triggered)?;
    let correct = preds
        .iter()
        .zip(&held)
        .filter(|(p, it)| **p == it.label)
        .count();
    let acc_reversed = correct as f64 / held.len() as f64;
    let target_hit_rate = target_class.map(|t| {
        let hits = preds.iter().filter(|&&p| p == t).count();
        hits as f64 / held.len() as f64
    });
    let mean_change = held
        .iter()
        .zip(&triggered)
        .map(|(orig, pert)| {
            orig.pixels
                .iter()
                .zip(pert.pixels.iter())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
        })
        .sum::<f64>()
        / held.len() as f64;

    // Dense recovery has no spatial mask; export the perturbation in the
    // blend convention with a fully open mask and the squashed direction as
    // the pattern.
    let trigger = SoftTrigger::new(Array2::from_elem((h, w), 1.0), best_theta.mapv(sigmoid))?;
    Ok(RecoveredTrigger {
        trigger,
        mask_l1: mean_change,
        acc_reversed,
        steps_used,
        objective_trace: trace,
        target_class,
        target_hit_rate,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    /// How many clean labeled images the attacker holds.
    pub samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            samples: 100,
            epochs: 10,
            lr: 0.01,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub model: LockedClassifier,
    pub acc_clean_before: f64,
    pub acc_clean_after: f64,
    pub acc_auth_before: f64,
    pub acc_auth_after: f64,
}

fn plain_accuracy(model: &LockedClassifier, items: &[LabeledImage]) -> Result<f64> {
    let preds = model.predict_labels(items)?;
    let correct = preds
        .iter()
        .zip(items)
        .filter(|(p, it)| **p == it.label)
        .count();
    Ok(correct as f64 / items.len() as f64)
}

/// Finetunes the whole network on a small clean correctly-labeled set, the
/// cheapest attack available to someone with partial data access.
pub fn finetune_attack(
    model: &LockedClassifier,
    clean_data: &[LabeledImage],
    eval: &EvalSets,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if clean_data.is_empty() {
        return Err(Error::invalid("finetuning needs clean data"));
    }
    if eval.auth.is_empty() || eval.clean.is_empty() {
        return Err(Error::invalid(
            "finetune evaluation needs both triggered and clean held-out sets",
        ));
    }
    if cfg.samples == 0 || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("samples, epochs and batch_size must be positive"));
    }
    if cfg.lr <= 0.0 || !cfg.lr.is_finite() {
        return Err(Error::invalid("learning rate must be positive"));
    }

    let subset = if cfg.samples < clean_data.len() {
        stratified_subset(clean_data, cfg.samples, model.num_classes, cfg.seed)
    } else {
        clean_data.to_vec()
    };

    let mut tuned = model.clone();
    let acc_clean_before = plain_accuracy(&tuned, &eval.clean)?;
    let acc_auth_before = plain_accuracy(&tuned, &eval.auth)?;

    let (c, h, w) = tuned.net.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = SgdMomentum::new(&tuned.net, cfg.momentum, 0.0);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..subset.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Array4::<f32>::zeros((chunk.len(), c, h, w));
            let mut labels = Vec::with_capacity(chunk.len());
            for (slot, &i) in chunk.iter().enumerate() {
                batch
                    .index_axis_mut(Axis(0), slot)
                    .assign(&subset[i].pixels);
                labels.push(subset[i].label);
            }
            let (logits, caches) = tuned.net.forward_train(&batch)?;
            let (loss, dlogits) = softmax_xent(&logits, &labels, None);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    message: format!("finetune loss {loss}"),
                });
            }
            let mut grads = tuned.net.zero_grads();
            tuned.net.backward(&caches, dlogits, Some(&mut grads), false);
            opt.step(&mut tuned.net, &grads, cfg.lr);
        }
    }

    let acc_clean_after = plain_accuracy(&tuned, &eval.clean)?;
    let acc_auth_after = plain_accuracy(&tuned, &eval.auth)?;
    Ok(FinetuneOutcome {
        model: tuned,
        acc_clean_before,
        acc_clean_after,
        acc_auth_before,
        acc_auth_after,
    })
}
