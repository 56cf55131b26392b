//! Measurement utilities: accuracies under optional triggers, attack gain,
//! a mutual-information probe for trigger leakage, 2-D feature projections,
//! and report rendering.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::model::LockedClassifier;
use crate::smoothing::smoothed_predict;
use crate::trigger::TriggerKind;

/// Fraction of `data` classified correctly, optionally after stamping or
/// blending a trigger onto every image.
pub fn accuracy(
    model: &LockedClassifier,
    data: &[LabeledImage],
    trigger: Option<&TriggerKind<'_>>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("no images to evaluate"));
    }
    let items: Vec<LabeledImage> = match trigger {
        None => data.to_vec(),
        Some(t) => data
            .iter()
            .map(|it| Ok(LabeledImage::new(t.apply(&it.pixels)?, it.label)))
            .collect::<Result<_>>()?,
    };
    let preds = model.predict_labels(&items)?;
    let correct = preds
        .iter()
        .zip(&items)
        .filter(|(p, it)| **p == it.label)
        .count();
    Ok(correct as f64 / items.len() as f64)
}

/// How much utility the attack clawed back: accuracy under the recovered
/// trigger minus accuracy on clean inputs.
pub fn attack_gain(acc_reversed: f64, acc_clean: f64) -> f64 {
    acc_reversed - acc_clean
}

/// Base-classifier accuracy with one Gaussian-noise draw added to each
/// image. For a noise-trained model this is the in-distribution view;
/// sigma 0 reduces to plain [`accuracy`].
pub fn noisy_accuracy(
    model: &LockedClassifier,
    data: &[LabeledImage],
    sigma: f64,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("no images to evaluate"));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma {sigma} must be nonnegative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, 1.0).expect("unit normal");
    let items: Vec<LabeledImage> = data
        .iter()
        .map(|it| {
            let mut px = it.pixels.clone();
            if sigma > 0.0 {
                px.mapv_inplace(|v| (v as f64 + sigma * noise.sample(&mut rng)) as f32);
            }
            LabeledImage::new(px, it.label)
        })
        .collect();
    let preds = model.predict_labels(&items)?;
    let correct = preds
        .iter()
        .zip(&items)
        .filter(|(p, it)| **p == it.label)
        .count();
    Ok(correct as f64 / items.len() as f64)
}

/// Accuracy of the smoothed classifier: per image, the majority label over
/// `n` noisy copies, with abstentions counted as errors.
pub fn smoothed_accuracy(
    model: &LockedClassifier,
    data: &[LabeledImage],
    sigma: f64,
    n: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("no images to evaluate"));
    }
    let mut correct = 0usize;
    for (i, item) in data.iter().enumerate() {
        let vote_seed = seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_97F4_A7C5));
        let vote = smoothed_predict(model, &item.pixels, sigma, n, alpha, vote_seed)?;
        if vote.label == Some(item.label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct MiConfig {
    /// Full-batch gradient steps for the linear probe.
    pub steps: usize,
    pub lr: f64,
    /// Portion of the rows used to fit the probe; the rest scores it.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig {
            steps: 300,
            lr: 0.5,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Variational lower bound on the mutual information, in bits, between the
/// rows of `features` and their `labels`: `I >= H(Y) - CE(probe)`, where the
/// probe is a linear softmax fit on a train split and its cross-entropy is
/// measured on the held-out split. Clamped into `[0, log2(num_classes)]`.
pub fn mi_estimate(
    features: &Array2<f32>,
    labels: &[usize],
    num_classes: usize,
    cfg: &MiConfig,
) -> Result<f64> {
    let (n, d) = features.dim();
    if n != labels.len() {
        return Err(Error::invalid(format!(
            "{n} feature rows but {} labels",
            labels.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if labels.iter().any(|&y| y >= num_classes) {
        return Err(Error::invalid("label outside class range"));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction must lie in (0, 1)"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    idx.shuffle(&mut rng);
    let cut = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (train_idx, eval_idx) = idx.split_at(cut);
    if eval_idx.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }

    // Standardize with train-split statistics so the probe conditions well.
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for &i in train_idx {
        for (j, &v) in features.row(i).iter().enumerate() {
            mean[j] += v as f64;
        }
    }
    for m in &mut mean {
        *m /= train_idx.len() as f64;
    }
    for &i in train_idx {
        for (j, &v) in features.row(i).iter().enumerate() {
            var[j] += (v as f64 - mean[j]).powi(2);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&v| (v / train_idx.len() as f64).sqrt().max(1e-8))
        .collect();
    let standardized = |i: usize| -> Vec<f64> {
        features
            .row(i)
            .iter()
            .enumerate()
            .map(|(j, &v)| (v as f64 - mean[j]) / std[j])
            .collect()
    };

    // Linear probe in f64 with a bias column, full-batch gradient descent.
    let mut w = vec![0.0f64; num_classes * (d + 1)];
    let mut grad = vec![0.0f64; w.len()];
    for _ in 0..cfg.steps {
        for g in &mut grad {
            *g = 0.0;
        }
        for &i in train_idx {
            let x = standardized(i);
            let mut scores = vec![0.0f64; num_classes];
            for (k, s) in scores.iter_mut().enumerate() {
                let row = &w[k * (d + 1)..(k + 1) * (d + 1)];
                *s = row[d] + x.iter().zip(&row[..d]).map(|(a, b)| a * b).sum::<f64>();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for k in 0..num_classes {
                let p = (scores[k] - m).exp() / z;
                let delta = p - if k == labels[i] { 1.0 } else { 0.0 };
                let g = &mut grad[k * (d + 1)..(k + 1) * (d + 1)];
                for (gj, xj) in g[..d].iter_mut().zip(&x) {
                    *gj += delta * xj;
                }
                g[d] += delta;
            }
        }
        let scale = cfg.lr / train_idx.len() as f64;
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= scale * gj;
        }
    }

    // Held-out cross-entropy and empirical label entropy, both in bits.
    let mut ce = 0.0f64;
    let mut counts = vec![0usize; num_classes];
    for &i in eval_idx {
        let x = standardized(i);
        let mut scores = vec![0.0f64; num_classes];
        for (k, s) in scores.iter_mut().enumerate() {
            let row = &w[k * (d + 1)..(k + 1) * (d + 1)];
            *s = row[d] + x.iter().zip(&row[..d]).map(|(a, b)| a * b).sum::<f64>();
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        ce += lse - scores[labels[i]];
        counts[labels[i]] += 1;
    }
    ce /= eval_idx.len() as f64;
    let n_eval = eval_idx.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n_eval;
            -p * p.log2()
        })
        .sum();

    let mi = entropy - ce / std::f64::consts::LN_2;
    Ok(mi.clamp(0.0, (num_classes as f64).log2()))
}

/// Trapezoidal area under a polyline given as (x, y) points with strictly
/// increasing x.
pub fn curve_auc(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("need at least two points"));
    }
    for pair in points.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(Error::invalid(format!(
                "x values must strictly increase, got {} then {}",
                pair[0].0, pair[1].0
            )));
        }
    }
    Ok(points
        .windows(2)
        .map(|p| 0.5 * (p[1].1 + p[0].1) * (p[1].0 - p[0].0))
        .sum())
}

/// Projects feature rows onto their top two principal components, found by
/// power iteration with deflation. Returns an `(N, 2)` array.
pub fn project_2d(features: &Array2<f32>) -> Result<Array2<f32>> {
    let (n, d) = features.dim();
    if n < 2 || d < 2 {
        return Err(Error::invalid(format!(
            "need at least a 2x2 feature matrix, got {n}x{d}"
        )));
    }
    let mut centered = features.mapv(|v| v as f64);
    let mean = centered.mean_axis(Axis(0)).expect("nonempty");
    for mut row in centered.rows_mut() {
        row -= &mean;
    }

    let cov_mul = |v: &Array1<f64>, deflate: Option<(&Array1<f64>, f64)>| -> Array1<f64> {
        // (X^T X / n) v, optionally minus the projection onto a found
        // component scaled by its eigenvalue.
        let xv = centered.dot(v);
        let mut out = centered.t().dot(&xv) / n as f64;
        if let Some((u, lam)) = deflate {
            let proj = u.dot(v);
            out = out - u * (lam * proj);
        }
        out
    };

    let power = |deflate: Option<(&Array1<f64>, f64)>| -> (Array1<f64>, f64) {
        // Deterministic start spread over all coordinates.
        let mut v = Array1::from_shape_fn(d, |j| 1.0 + (j as f64 * 0.37).sin());
        let norm = v.dot(&v).sqrt();
        v /= norm;
        let mut lam = 0.0;
        for _ in 0..200 {
            let mut next = cov_mul(&v, deflate);
            let norm = next.dot(&next).sqrt();
            if norm < 1e-30 {
                // Degenerate direction (zero variance); keep the current v.
                return (v, 0.0);
            }
            next /= norm;
            lam = norm;
            let delta = (&next - &v).mapv(f64::abs).sum();
            v = next;
            if delta < 1e-12 {
                break;
            }
        }
        (v, lam)
    };

    let (u1, lam1) = power(None);
    let (u2, _) = power(Some((&u1, lam1)));

    let mut out = Array2::<f32>::zeros((n, 2));
    for (i, row) in centered.rows().into_iter().enumerate() {
        out[[i, 0]] = row.dot(&u1) as f32;
        out[[i, 1]] = row.dot(&u2) as f32;
    }
    Ok(out)
}

/// Identifies one experimental run in reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunContext {
    pub run_id: String,
    pub arch_id: String,
    pub dataset: String,
    pub num_classes: usize,
    pub train_sigma: f64,
    pub seed: u64,
}

/// One reported number, with an optional free-text note.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub name: String,
    pub value: Option<f64>,
    pub note: Option<String>,
}

impl MetricsRecord {
    pub fn new(name: &str, value: f64) -> Self {
        MetricsRecord {
            name: name.to_string(),
            value: Some(value),
            note: None,
        }
    }

    pub fn with_note(name: &str, value: Option<f64>, note: &str) -> Self {
        MetricsRecord {
            name: name.to_string(),
            value,
            note: Some(note.to_string()),
        }
    }
}

/// Renders the run header and a metric table as Markdown. Missing values
/// print as "-".
pub fn render_report_md(ctx: &RunContext, metrics: &[MetricsRecord]) -> String {
    let mut out = String::new();
    out.push_str(&format!("# Run {}\n\n", ctx.run_id));
    out.push_str(&format!(
        "- arch: `{}`\n- dataset: {}\n- classes: {}\n- train sigma: {}\n- seed: {}\n\n",
        ctx.arch_id, ctx.dataset, ctx.num_classes, ctx.train_sigma, ctx.seed
    ));
    out.push_str("| metric | value | note |\n|---|---|---|\n");
    for m in metrics {
        let value = m
            .value
            .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let note = m.note.as_deref().unwrap_or("-");
        out.push_str(&format!("| {} | {} | {} |\n", m.name, value, note));
    }
    out
}

/// CSV twin of the Markdown report; one row per metric, empty cells for
/// missing values.
pub fn render_report_csv(ctx: &RunContext, metrics: &[MetricsRecord]) -> String {
    let mut out = String::from("run_id,arch_id,dataset,num_classes,train_sigma,seed,metric,value,note\n");
    for m in metrics {
        let value = m.value.map_or(String::new(), |v| format!("{v:.6}"));
        let note = m.note.as_deref().unwrap_or("");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            ctx.run_id,
            ctx.arch_id,
            ctx.dataset,
            ctx.num_classes,
            ctx.train_sigma,
            ctx.seed,
            m.name,
            value,
            note.replace(',', ";"),
        ));
    }
    out
}
