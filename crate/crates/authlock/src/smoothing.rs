//! Randomized-smoothing certification.
//!
//! The smoothed classifier g(x) returns the class the base model votes for
//! most often under isotropic Gaussian input noise. When the top vote's
//! probability can be lower-bounded by `p_a > 1/2` with confidence `1 - alpha`,
//! g is provably constant inside an L2 ball of radius
//! `sigma * inverse_normal_cdf(p_a)` around x. Any recovered trigger whose
//! perturbation stays inside that ball therefore cannot move the smoothed
//! prediction, which is what neutralizes mask-and-pattern recovery attacks.

use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::{erf, erf_inv};

use crate::error::{Error, Result};
use crate::model::LockedClassifier;
use crate::nn::argmax;

const NOISE_BATCH: usize = 128;

/// Anything that maps image batches to hard class decisions. Smoothing only
/// observes votes, never logits.
pub trait BaseClassifier {
    fn num_classes(&self) -> usize;
    fn classify_batch(&self, batch: &Array4<f32>) -> Result<Vec<usize>>;
}

impl BaseClassifier for LockedClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn classify_batch(&self, batch: &Array4<f32>) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| argmax(row.as_slice().expect("contiguous logits row")))
            .collect())
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Quantile of the standard normal. The erf-based seed value is polished
/// with two Newton steps so round-trips hold to near machine precision.
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) || p <= 0.0 {
        return Err(Error::invalid(format!(
            "quantile argument {p} outside (0, 1)"
        )));
    }
    let mut x = std::f64::consts::SQRT_2 * erf_inv(2.0 * p - 1.0);
    for _ in 0..2 {
        let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if density <= f64::MIN_POSITIVE {
            break;
        }
        x -= (normal_cdf(x) - p) / density;
    }
    Ok(x)
}

/// Exact one-sided lower confidence bound for a binomial proportion after
/// observing `k` successes in `n` trials. Solves `P(X >= k | p) = alpha`
/// using the identity `P(Bin(n,p) >= k) = I_p(k, n-k+1)`.
pub fn clopper_pearson_lower(k: u64, n: u64, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    if k > n {
        return Err(Error::invalid(format!("{k} successes out of {n} trials")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    if k == 0 {
        return Ok(0.0);
    }
    if k == n {
        // I_p(n, 1) = p^n, so the bound is available in closed form.
        return Ok(alpha.powf(1.0 / n as f64));
    }
    let a = k as f64;
    let b = (n - k + 1) as f64;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Two-sided p-value for `k` successes in `n` fair coin flips, with
/// `k >= n/2`. Used to decide whether the top vote beat the runner-up.
fn binomial_two_sided_half(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    // P(X >= k) for X ~ Bin(n, 1/2).
    let upper = if k == 0 {
        1.0
    } else if k == n {
        0.5f64.powi(n as i32)
    } else {
        beta_reg(k as f64, (n - k + 1) as f64, 0.5)
    };
    (2.0 * upper).min(1.0)
}

fn validate_noise_args(sigma: f64, alpha: f64) -> Result<()> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma {sigma} must be nonnegative")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(())
}

/// Class vote counts over `n` noisy copies of `x`.
pub fn sample_noisy_votes(
    model: &dyn BaseClassifier,
    x: &Array3<f32>,
    sigma: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::invalid("need at least one noise sample"));
    }
    let noise = Normal::new(0.0f64, 1.0).expect("unit normal");
    let (c, h, w) = x.dim();
    let mut counts = vec![0u64; model.num_classes()];
    let mut remaining = n;
    while remaining > 0 {
        let m = remaining.min(NOISE_BATCH);
        let mut batch = Array4::<f32>::zeros((m, c, h, w));
        for i in 0..m {
            let mut view = batch.index_axis_mut(Axis(0), i);
            view.assign(x);
            if sigma > 0.0 {
                view.mapv_inplace(|v| (v as f64 + sigma * noise.sample(rng)) as f32);
            }
        }
        for label in model.classify_batch(&batch)? {
            if label >= counts.len() {
                return Err(Error::invalid(format!(
                    "classifier produced label {label} for {} classes",
                    counts.len()
                )));
            }
            counts[label] += 1;
        }
        remaining -= m;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothedPrediction {
    /// Majority class, or None when the vote was statistically inconclusive.
    pub label: Option<usize>,
    pub counts: Vec<u64>,
    pub p_value: f64,
}

/// Evaluates the smoothed classifier at `x`, abstaining unless the top class
/// beats the runner-up at significance `alpha`.
pub fn smoothed_predict(
    model: &dyn BaseClassifier,
    x: &Array3<f32>,
    sigma: f64,
    n: usize,
    alpha: f64,
    seed: u64,
) -> Result<SmoothedPrediction> {
    validate_noise_args(sigma, alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = sample_noisy_votes(model, x, sigma, n, &mut rng)?;
    let top = counts
        .iter()
        .enumerate()
        .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
        .map(|(i, _)| i)
        .expect("at least one class");
    let n_a = counts[top];
    let n_b = counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &c)| c)
        .max()
        .unwrap_or(0);
    let p_value = binomial_two_sided_half(n_a, n_a + n_b);
    Ok(SmoothedPrediction {
        label: (p_value <= alpha).then_some(top),
        counts,
        p_value,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationOutcome {
    /// Certified class, or None on abstention.
    pub label: Option<usize>,
    /// Lower confidence bound on the top class probability.
    pub p_a_lower: f64,
    /// Certified L2 radius; 0 when abstaining.
    pub radius: f64,
    pub selection_counts: Vec<u64>,
    pub estimation_counts: Vec<u64>,
}

/// Two-phase certification: `n0` draws pick the candidate class, `n` fresh
/// draws bound its probability. Abstains when the bound does not clear 1/2.
pub fn certify(
    model: &dyn BaseClassifier,
    x: &Array3<f32>,
    sigma: f64,
    n0: usize,
    n: usize,
    alpha: f64,
    seed: u64,
) -> Result<CertificationOutcome> {
    validate_noise_args(sigma, alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selection_counts = sample_noisy_votes(model, x, sigma, n0, &mut rng)?;
    let candidate = selection_counts
        .iter()
        .enumerate()
        .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
        .map(|(i, _)| i)
        .expect("at least one class");
    let estimation_counts = sample_noisy_votes(model, x, sigma, n, &mut rng)?;
    let p_a_lower = clopper_pearson_lower(estimation_counts[candidate], n as u64, alpha)?;
    if p_a_lower <= 0.5 {
        return Ok(CertificationOutcome {
            label: None,
            p_a_lower,
            radius: 0.0,
            selection_counts,
            estimation_counts,
        });
    }
    let radius = sigma * inverse_normal_cdf(p_a_lower)?;
    Ok(CertificationOutcome {
        label: Some(candidate),
        p_a_lower,
        radius,
        selection_counts,
        estimation_counts,
    })
}

/// The neutralization test: an adversarial perturbation strictly inside the
/// certified ball cannot change the smoothed prediction.
pub fn robustness_condition_holds(delta_l2: f64, radius: f64) -> bool {
    delta_l2 < radius
}
