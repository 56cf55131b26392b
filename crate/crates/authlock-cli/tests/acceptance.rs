//! Workstation-scale end-to-end checks of the full story: a fingerprint
//! trigger locks a CIFAR-10 classifier, gradient attacks reopen it, noise
//! training plus certification closes it again, and the statistics behind
//! the certificates hold up. Each test prints one PASS/FAIL line with the
//! measured numbers.
//!
//! The suite trains two small CNNs on a 10,000-image CIFAR-10 subset and
//! runs two dozen trigger-recovery attacks against them, so a full pass
//! takes a few CPU-hours. Training data comes from ./data or
//! AUTHLOCK_DATA_DIR (see the README).

use std::sync::OnceLock;

use ndarray::{concatenate, Array2, Array3, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

use authlock::analysis::{
    accuracy, curve_auc, mi_estimate, noisy_accuracy, smoothed_accuracy, MiConfig,
};
use authlock::attack::{
    adaptive_attack, anomaly_index, finetune_attack, nc_recover, pixel_attack, AttackConfig,
    FinetuneConfig,
};
use authlock::dataset::{
    build_composite, find_cifar10_dir, load_cifar10, make_authorized_testset, stratified_subset,
    synth_dataset, CompositeDataset, LabeledImage,
};
use authlock::fingerprint::{derive_fingerprint, fingerprint_to_trigger};
use authlock::model::{
    anti_finetune_harden, extract_features, implant, EvalSets, HardenConfig, ImplantConfig,
    LockedClassifier,
};
use authlock::nn::cosine_lr;
use authlock::smoothing::{
    certify, clopper_pearson_lower, inverse_normal_cdf, normal_cdf, robustness_condition_holds,
    BaseClassifier,
};
use authlock::trigger::{apply_hw_trigger, perturbation_l2, SoftTrigger, TriggerSpec};
use authlock::Result;

const TRAIN_SUBSET: usize = 10_000;
const TEST_SUBSET: usize = 2_000;
const EPOCHS: usize = 30;
const BASE_LR: f64 = 0.05;
const BATCH: usize = 128;
const SEED: u64 = 0;
const ATTACK_STEPS: usize = 2_000;
/// Noise level picked by the sigma sweep: smallest value in {0.5, 0.75, 0.9}
/// where the adaptive attack's gain collapses while triggered accuracy stays
/// comfortably above half.
const SIGMA_STAR: f64 = 0.75;

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("{}  {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

// ---------------------------------------------------------------------------
// Shared fixtures

struct Desk {
    model: LockedClassifier,
    spec: TriggerSpec,
    train: Vec<LabeledImage>,
    test: Vec<LabeledImage>,
    comp: CompositeDataset,
    eval: EvalSets,
    /// 512 stratified test images: the attacker's labeled data.
    attacker: Vec<LabeledImage>,
    /// (epoch, bits) read off the penultimate features after each epoch.
    mi_auth: Vec<(f64, f64)>,
    mi_clean: Vec<(f64, f64)>,
    /// Time spent inside `implant`, excluding instrumentation.
    train_minutes: f64,
}

fn load_desk_data() -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    let dir = find_cifar10_dir()
        .expect("cifar-10-batches-bin not found; place it under ./data or set AUTHLOCK_DATA_DIR");
    let (train, test) = load_cifar10(&dir).expect("cifar10 loads");
    (
        stratified_subset(&train, TRAIN_SUBSET, 10, SEED),
        stratified_subset(&test, TEST_SUBSET, 10, SEED ^ 1),
    )
}

fn desk_trigger() -> TriggerSpec {
    let fp = derive_fingerprint(b"device-A", b"boot-challenge-1").expect("fingerprint derives");
    TriggerSpec {
        pattern: fingerprint_to_trigger(&fp, 3, 3, 3).expect("pattern renders"),
        location: (0, 0),
        fingerprint_digest: fp.digest(),
    }
}

fn stack_images(items: &[LabeledImage]) -> Array4<f32> {
    let (c, h, w) = items[0].pixels.dim();
    let mut out = Array4::zeros((items.len(), c, h, w));
    for (i, item) in items.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&item.pixels);
    }
    out
}

fn penultimate(model: &LockedClassifier, items: &[LabeledImage]) -> Array2<f32> {
    let parts: Vec<Array2<f32>> = items
        .chunks(256)
        .map(|chunk| extract_features(model, &stack_images(chunk), "penultimate").unwrap())
        .collect();
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    concatenate(Axis(0), &views).unwrap()
}

fn label_information_bits(model: &LockedClassifier, items: &[LabeledImage]) -> f64 {
    let feats = penultimate(model, items);
    let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
    mi_estimate(&feats, &labels, 10, &MiConfig::default()).unwrap()
}

fn desk() -> &'static Desk {
    static FIXTURE: OnceLock<Desk> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let (train, test) = load_desk_data();
        let spec = desk_trigger();
        let comp = build_composite(&train, &spec, 10, SEED, 1.0, "cifar10").unwrap();
        let eval = EvalSets {
            auth: make_authorized_testset(&test, &spec).unwrap(),
            clean: test.clone(),
        };
        let attacker = stratified_subset(&test, 512, 10, 1);
        let mi_items = stratified_subset(&test, 512, 10, 99);
        let mi_items_auth = make_authorized_testset(&mi_items, &spec).unwrap();

        // Trained one epoch at a time so the feature/label information can
        // be read off after every epoch; the cosine schedule is applied
        // through the per-epoch base rate.
        let mut model = LockedClassifier::new("smallcnn", (3, 32, 32), 10, SEED).unwrap();
        let mut mi_auth = Vec::with_capacity(EPOCHS);
        let mut mi_clean = Vec::with_capacity(EPOCHS);
        let mut train_secs = 0.0f64;
        for e in 0..EPOCHS {
            let cfg = ImplantConfig {
                lambda_rand: 1.0,
                epochs: 1,
                lr: cosine_lr(BASE_LR, e, EPOCHS),
                sigma: 0.0,
                seed: SEED.wrapping_add(7919 * e as u64),
                batch_size: BATCH,
                augment: true,
                resample_rand_labels: false,
                ..ImplantConfig::default()
            };
            let tick = std::time::Instant::now();
            model = implant(model, &comp, Some(&spec), &EvalSets::default(), &cfg).unwrap();
            train_secs += tick.elapsed().as_secs_f64();
            let x = (e + 1) as f64;
            mi_auth.push((x, label_information_bits(&model, &mi_items_auth)));
            mi_clean.push((x, label_information_bits(&model, &mi_items)));
            eprintln!(
                "desk epoch {:>2}: loss {:.4}  i_auth {:.3}  i_clean {:.3}",
                e + 1,
                model.train_log.last().unwrap().loss_total,
                mi_auth.last().unwrap().1,
                mi_clean.last().unwrap().1
            );
        }

        Desk {
            model,
            spec,
            train,
            test,
            comp,
            eval,
            attacker,
            mi_auth,
            mi_clean,
            train_minutes: train_secs / 60.0,
        }
    })
}

struct NoiseDesk {
    model: LockedClassifier,
}

/// The same lock trained with Gaussian noise on every (triggered) training
/// image, which is what the certification story needs.
fn noise_desk() -> &'static NoiseDesk {
    static FIXTURE: OnceLock<NoiseDesk> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let d = desk();
        let cfg = ImplantConfig {
            lambda_rand: 1.0,
            epochs: EPOCHS,
            lr: BASE_LR,
            sigma: SIGMA_STAR,
            seed: SEED,
            batch_size: BATCH,
            augment: true,
            resample_rand_labels: false,
            ..ImplantConfig::default()
        };
        let model = LockedClassifier::new("smallcnn", (3, 32, 32), 10, SEED).unwrap();
        eprintln!("training the sigma {SIGMA_STAR} lock ({EPOCHS} epochs)");
        let model = implant(model, &d.comp, Some(&d.spec), &EvalSets::default(), &cfg).unwrap();
        NoiseDesk { model }
    })
}

struct Badnets {
    model: LockedClassifier,
    test_items: Vec<LabeledImage>,
    target: usize,
}

/// A conventional poisoned classifier: one target class, trigger stamped on
/// a fifth of the training images. Positive control for the recovery tools.
fn badnets() -> &'static Badnets {
    static FIXTURE: OnceLock<Badnets> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let target = 0usize;
        let (train, test) = synth_dataset(150, 3, (3, 8, 8), 77).unwrap();
        let spec = desk_trigger();
        let poisoned: Vec<LabeledImage> = train
            .iter()
            .take(30)
            .map(|it| LabeledImage::new(apply_hw_trigger(&it.pixels, &spec).unwrap(), target))
            .collect();
        let comp = CompositeDataset {
            auth_items: poisoned,
            rand_items: train.clone(),
            rand_true_labels: train.iter().map(|it| it.label).collect(),
            auth_base_indices: (0..30).collect(),
            origin: "synth-badnets".into(),
            seed: 0,
            num_classes: 3,
        };
        let model = LockedClassifier::new("tinycnn", (3, 8, 8), 3, 41).unwrap();
        let cfg = ImplantConfig {
            epochs: 14,
            lr: 0.05,
            batch_size: 24,
            seed: 6,
            augment: false,
            ..ImplantConfig::default()
        };
        let model = implant(model, &comp, Some(&spec), &Default::default(), &cfg).unwrap();
        Badnets { model, test_items: test, target }
    })
}

fn desk_attack_config(seed: u64) -> AttackConfig {
    AttackConfig {
        steps: ATTACK_STEPS,
        lr: 0.1,
        lambda_reg: None,
        batch_size: 32,
        seed,
    }
}

// ---------------------------------------------------------------------------
// 1. The lock: full utility with the trigger, none without.

#[test]
fn lock_effectiveness_at_workstation_scale() {
    let d = desk();
    let acc_auth = accuracy(&d.model, &d.eval.auth, None).unwrap();
    let acc_clean = accuracy(&d.model, &d.eval.clean, None).unwrap();
    let gap = acc_auth - acc_clean;
    let pass = acc_auth >= 0.80 && acc_clean <= 0.15 && gap >= 0.60 && d.train_minutes <= 120.0;
    verdict(
        "lock effectiveness",
        pass,
        &format!(
            "acc_auth {acc_auth:.4} (need >=0.80), acc_clean {acc_clean:.4} (need <=0.15), gap {gap:.4} (need >=0.60), trained in {:.0} min (need <=120)",
            d.train_minutes
        ),
    );
    assert!(pass, "acc_auth {acc_auth:.4}, acc_clean {acc_clean:.4}, gap {gap:.4}");
}

// ---------------------------------------------------------------------------
// 2. The adaptive attack reopens the vanilla lock.

#[test]
fn adaptive_attack_reopens_the_vanilla_lock() {
    let d = desk();
    let started = std::time::Instant::now();
    let rec = adaptive_attack(&d.model, &d.attacker, &desk_attack_config(1)).unwrap();
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let acc_clean = accuracy(&d.model, &d.attacker, None).unwrap();
    let gain = rec.acc_reversed - acc_clean;
    let pass = gain >= 0.40 && rec.steps_used <= ATTACK_STEPS && minutes <= 10.0;
    verdict(
        "adaptive attack potency",
        pass,
        &format!(
            "gain {gain:.4} (need >=0.40) from acc_clean {acc_clean:.4} to acc_reversed {:.4}, {} steps in {minutes:.1} min (need <=10)",
            rec.acc_reversed, rec.steps_used
        ),
    );
    assert!(pass, "gain {gain:.4} after {} steps", rec.steps_used);
}

// ---------------------------------------------------------------------------
// 3. Noise training neutralizes that same attack.

#[test]
fn noise_training_neutralizes_the_adaptive_attack() {
    let d = desk();
    let s = noise_desk();
    // A larger attacker set tightens the held-out gain estimate, which sits
    // near zero here.
    let attacker = stratified_subset(&d.test, 1024, 10, 1);
    let rec = adaptive_attack(&s.model, &attacker, &desk_attack_config(1)).unwrap();
    let acc_clean = accuracy(&s.model, &attacker, None).unwrap();
    let gain = rec.acc_reversed - acc_clean;
    // The deployed model at sigma > 0 is the smoothed classifier, so
    // authorized utility is scored by vote; the single-noisy-pass base
    // accuracy is reported alongside it.
    let vote_items = stratified_subset(&d.eval.auth, 500, 10, 17);
    let acc_auth_vote = smoothed_accuracy(&s.model, &vote_items, SIGMA_STAR, 100, 0.001, 23).unwrap();
    let acc_auth_noisy = noisy_accuracy(&s.model, &d.eval.auth, SIGMA_STAR, 29).unwrap();
    let pass = gain.abs() <= 0.05 && acc_auth_vote >= 0.55;
    verdict(
        "certified defense neutralization",
        pass,
        &format!(
            "sigma {SIGMA_STAR}: gain {gain:.4} (need |gain| <= 0.05), acc_auth {acc_auth_vote:.4} by smoothed vote (need >= 0.55, single noisy pass gives {acc_auth_noisy:.4})"
        ),
    );
    assert!(pass, "gain {gain:.4}, acc_auth_vote {acc_auth_vote:.4}");
}

// ---------------------------------------------------------------------------
// 4. Standard recovery tools neither reopen the lock nor flag it, yet they
//    do crack a conventional backdoor.

#[test]
fn standard_recovery_stays_locked_out_and_unflagged() {
    let d = desk();
    let mut best_nc = 0.0f64;
    let mut best_pixel = 0.0f64;
    let mut norms = Vec::with_capacity(10);
    for t in 0..10 {
        let nc = nc_recover(&d.model, &d.attacker, t, &desk_attack_config(1)).unwrap();
        eprintln!(
            "nc target {t}: acc {:.4} hit {:.4} mask_l1 {:.2}",
            nc.acc_reversed,
            nc.target_hit_rate.unwrap(),
            nc.mask_l1
        );
        best_nc = best_nc.max(nc.acc_reversed);
        norms.push(nc.mask_l1);
        let px = pixel_attack(&d.model, &d.attacker, Some(t), &desk_attack_config(1)).unwrap();
        eprintln!("pixel target {t}: acc {:.4}", px.acc_reversed);
        best_pixel = best_pixel.max(px.acc_reversed);
    }
    let index = anomaly_index(&norms).unwrap();

    let b = badnets();
    let control_cfg = AttackConfig { steps: 360, batch_size: 16, seed: 3, ..AttackConfig::default() };
    let nc_hit = nc_recover(&b.model, &b.test_items, b.target, &control_cfg)
        .unwrap()
        .target_hit_rate
        .unwrap();
    let px_hit = pixel_attack(&b.model, &b.test_items, Some(b.target), &control_cfg)
        .unwrap()
        .target_hit_rate
        .unwrap();

    let pass = best_nc <= 0.50
        && best_pixel <= 0.50
        && index <= 2.0
        && nc_hit >= 0.90
        && px_hit >= 0.90;
    verdict(
        "standard recovery resistance",
        pass,
        &format!(
            "best nc acc {best_nc:.4}, best pixel acc {best_pixel:.4} (need <=0.50), anomaly index {index:.3} (need <=2.0); control hits nc {nc_hit:.3} / pixel {px_hit:.3} (need >=0.90)"
        ),
    );
    assert!(
        pass,
        "nc {best_nc:.4}, pixel {best_pixel:.4}, index {index:.3}, control {nc_hit:.3}/{px_hit:.3}"
    );
}

// ---------------------------------------------------------------------------
// 5. Finetuning on a handful of clean images cannot reopen a hardened lock.

#[test]
fn finetuning_cannot_cheaply_reopen_a_hardened_lock() {
    let d = desk();
    let harden_cfg = HardenConfig { seed: 5, ..HardenConfig::for_classes(10) };
    eprintln!("hardening the desk lock ({} rounds)", harden_cfg.rounds);
    let out =
        anti_finetune_harden(d.model.clone(), &d.comp, &d.train, Some(&d.spec), &d.eval, &harden_cfg)
            .unwrap();
    eprintln!(
        "hardened: acc_auth {:.4} -> {:.4}, acc_clean {:.4} -> {:.4}",
        out.acc_auth_before.unwrap(),
        out.acc_auth_after.unwrap(),
        out.acc_clean_before.unwrap(),
        out.acc_clean_after.unwrap()
    );
    let ft = finetune_attack(
        &out.model,
        &d.train,
        &d.eval,
        &FinetuneConfig { samples: 100, epochs: 10, lr: 0.01, batch_size: 32, seed: 7, ..FinetuneConfig::default() },
    )
    .unwrap();
    let delta_clean = ft.acc_clean_after - ft.acc_clean_before;
    let delta_auth = ft.acc_auth_after - ft.acc_auth_before;
    let pass = delta_clean <= 0.05 && delta_auth.abs() <= 0.02;
    verdict(
        "finetuning resistance",
        pass,
        &format!(
            "acc_clean {:.4} -> {:.4} (delta {delta_clean:+.4}, need <= +0.05), acc_auth {:.4} -> {:.4} (delta {delta_auth:+.4}, need |delta| <= 0.02)",
            ft.acc_clean_before, ft.acc_clean_after, ft.acc_auth_before, ft.acc_auth_after
        ),
    );
    assert!(pass, "delta_clean {delta_clean:+.4}, delta_auth {delta_auth:+.4}");
}

// ---------------------------------------------------------------------------
// 6. The statistics behind the certificates.

/// Exact upper binomial tail, summed in log space. Independent of the
/// regularized-beta route the library takes.
fn binom_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let n_f = n as f64;
    let mut total = 0.0f64;
    for i in k..=n {
        let i_f = i as f64;
        let mut ln_term = ln_gamma(n_f + 1.0) - ln_gamma(i_f + 1.0) - ln_gamma(n_f - i_f + 1.0);
        ln_term += i_f * p.ln();
        if i < n {
            ln_term += (n_f - i_f) * (1.0 - p).ln();
        }
        total += ln_term.exp();
    }
    total.min(1.0)
}

fn oracle_lower(k: u64, n: u64, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if binom_tail(k, n, mid) >= alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Ignores its input and always answers class 0; its certificates isolate
/// the radius formula.
struct ConstStub;

impl BaseClassifier for ConstStub {
    fn num_classes(&self) -> usize {
        3
    }
    fn classify_batch(&self, batch: &Array4<f32>) -> Result<Vec<usize>> {
        Ok(vec![0; batch.dim().0])
    }
}

/// Linear threshold over 12 pixels whose smoothed vote probability has a
/// closed form: p = Phi((w.x + b) / (sigma * |w|)).
struct LinearStub {
    w: Vec<f32>,
    b: f32,
}

impl LinearStub {
    fn new() -> Self {
        let w: Vec<f32> = (0..12).map(|i| ((0.73 * i as f32).sin() + 1.2) / 3.0).collect();
        LinearStub { w, b: -2.4 }
    }

    fn true_p(&self, x: &Array3<f32>, sigma: f64) -> f64 {
        let score: f64 = self
            .w
            .iter()
            .zip(x.iter())
            .map(|(&wi, &xi)| (wi * xi) as f64)
            .sum::<f64>()
            + self.b as f64;
        let norm: f64 = self.w.iter().map(|&wi| (wi as f64).powi(2)).sum::<f64>().sqrt();
        normal_cdf(score / (sigma * norm))
    }
}

impl BaseClassifier for LinearStub {
    fn num_classes(&self) -> usize {
        2
    }
    fn classify_batch(&self, batch: &Array4<f32>) -> Result<Vec<usize>> {
        Ok((0..batch.dim().0)
            .map(|i| {
                let x = batch.index_axis(Axis(0), i);
                let score: f32 =
                    self.w.iter().zip(x.iter()).map(|(&wi, &xi)| wi * xi).sum::<f32>() + self.b;
                usize::from(score > 0.0)
            })
            .collect())
    }
}

#[test]
fn confidence_bounds_and_radii_are_statistically_sound() {
    // Exact lower bounds against the independent tail oracle.
    let mut worst = 0.0f64;
    for n in 1..=50u64 {
        for k in 0..=n {
            for &alpha in &[0.05, 0.001] {
                let got = clopper_pearson_lower(k, n, alpha).unwrap();
                let want = oracle_lower(k, n, alpha);
                worst = worst.max((got - want).abs());
            }
        }
    }
    let bounds_ok = worst <= 1e-6;

    let corner = clopper_pearson_lower(100, 100, 0.001).unwrap();
    let corner_err = (corner - 0.001f64.powf(0.01)).abs();
    let corner_ok = corner_err <= 1e-9;

    let q = inverse_normal_cdf(0.975).unwrap();
    let quantile_err = (q - 1.959_964).abs();
    let quantile_ok = quantile_err <= 1e-6;

    // With identical votes at every noise level, the radius must scale
    // linearly in sigma and the bound must not move at all.
    let x = Array3::from_elem((3, 2, 2), 0.5f32);
    let base = certify(&ConstStub, &x, 0.25, 32, 400, 0.001, 55).unwrap();
    let mut linear_ok = base.label == Some(0);
    for &sigma in &[0.5, 1.0, 2.0] {
        let out = certify(&ConstStub, &x, sigma, 32, 400, 0.001, 55).unwrap();
        linear_ok &= out.label == Some(0)
            && out.p_a_lower.to_bits() == base.p_a_lower.to_bits()
            && (out.radius / sigma - base.radius / 0.25).abs() <= 1e-12;
    }

    // Coverage of the lower bound on a classifier whose smoothed vote
    // probability is known in closed form. 1,000 certifications with 1,032
    // noise draws each.
    let coverage_clock = std::time::Instant::now();
    let stub = LinearStub::new();
    let x0 = Array3::from_elem((3, 2, 2), 0.55f32);
    let sigma = 0.4;
    let p_true = stub.true_p(&x0, sigma);
    assert!(
        (0.6..0.95).contains(&p_true),
        "fixture drifted: p_true {p_true}"
    );
    let runs = 1_000usize;
    let mut violations = 0usize;
    let mut certified = 0usize;
    for r in 0..runs {
        let out = certify(&stub, &x0, sigma, 32, 1_000, 0.001, 20_000 + r as u64).unwrap();
        if let Some(label) = out.label {
            certified += 1;
            if label == 1 && out.p_a_lower > p_true {
                violations += 1;
            }
        }
    }
    let coverage = 1.0 - violations as f64 / runs as f64;
    let coverage_ok =
        coverage >= 0.999 && certified >= 900 && coverage_clock.elapsed().as_secs() <= 300;

    let pass = bounds_ok && corner_ok && quantile_ok && linear_ok && coverage_ok;
    verdict(
        "certificate statistics",
        pass,
        &format!(
            "oracle gap {worst:.2e} (need <=1e-6), all-success corner err {corner_err:.2e} (need <=1e-9), quantile err {quantile_err:.2e} (need <=1e-6), sigma-linearity {}, coverage {coverage:.4} over {certified} certified (need >=0.999)",
            if linear_ok { "exact" } else { "broken" }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7. The robustness verdict is exactly the norm-vs-radius comparison.

#[test]
fn robustness_verdict_matches_direct_comparison() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE05);
    let (c, h, w) = (3usize, 8usize, 8usize);
    let mut agreements = 0usize;
    let trials = 1_000usize;
    for _ in 0..trials {
        let mask = Array2::from_shape_fn((h, w), |_| rng.gen::<f32>());
        let pattern = Array3::from_shape_fn((c, h, w), |_| rng.gen::<f32>());
        let x = Array3::from_shape_fn((c, h, w), |_| rng.gen::<f32>());
        let trig = SoftTrigger::new(mask.clone(), pattern.clone()).unwrap();

        let delta = perturbation_l2(&x, &trig).unwrap();
        let mut direct = 0.0f64;
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let m = mask[[i, j]];
                    let blended = (1.0 - m) * x[[ci, i, j]] + m * pattern[[ci, i, j]];
                    direct += f64::from(blended.clamp(0.0, 1.0) - x[[ci, i, j]]).powi(2);
                }
            }
        }
        let direct = direct.sqrt();
        assert!(
            (delta - direct).abs() <= 1e-9 * direct.max(1.0),
            "norm mismatch: {delta} vs {direct}"
        );

        let radius = direct * rng.gen_range(0.5..1.5);
        if robustness_condition_holds(delta, radius) == (direct < radius) {
            agreements += 1;
        }
    }
    let pass = agreements == trials;
    verdict(
        "robustness condition",
        pass,
        &format!("{agreements}/{trials} random trigger/radius pairs agree with the direct comparison"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8. Features carry label information only when the trigger is present.

#[test]
fn features_gate_label_information_on_the_trigger() {
    let d = desk();
    let log2k = 10f64.log2();
    let final_auth = d.mi_auth.last().unwrap().1;
    let final_clean = d.mi_clean.last().unwrap().1;
    let diff = final_auth - final_clean;

    let auc_auth = curve_auc(&d.mi_auth).unwrap();
    let auc_clean = curve_auc(&d.mi_clean).unwrap();
    let ratio = if auc_clean > 0.0 { auc_auth / auc_clean } else { f64::INFINITY };

    let in_range = d
        .mi_auth
        .iter()
        .chain(d.mi_clean.iter())
        .all(|&(_, v)| (0.0..=log2k + 1e-9).contains(&v));

    // The estimator itself: blind on label-free noise, sharp on features
    // that spell the label out.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let noise = Array2::from_shape_fn((600, 16), |_| rng.sample::<f32, _>(StandardNormal));
    let noise_labels: Vec<usize> = (0..600).map(|_| rng.gen_range(0..4)).collect();
    let blind = mi_estimate(&noise, &noise_labels, 4, &MiConfig::default()).unwrap();

    let onehot_labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
    let onehot = Array2::from_shape_fn((400, 4), |(i, j)| if onehot_labels[i] == j { 3.0 } else { 0.0 });
    let sharp = mi_estimate(&onehot, &onehot_labels, 4, &MiConfig::default()).unwrap();

    let pass = diff >= 1.0 && ratio >= 3.0 && in_range && blind <= 0.1 && sharp >= 0.95 * 2.0;
    verdict(
        "information gating",
        pass,
        &format!(
            "final i_auth {final_auth:.3} - i_clean {final_clean:.3} = {diff:.3} bits (need >=1.0), curve-area ratio {ratio:.2} (need >=3.0), estimator blind {blind:.3} <= 0.1 and sharp {sharp:.3} >= 1.9"
        ),
    );
    assert!(pass, "diff {diff:.3}, ratio {ratio:.2}, blind {blind:.3}, sharp {sharp:.3}");
}

// ---------------------------------------------------------------------------
// 9. Every seeded stage replays bit-identically.

#[test]
fn seeded_stages_reproduce_bit_identically() {
    let d = desk();

    let one_epoch = || {
        let cfg = ImplantConfig {
            lambda_rand: 1.0,
            epochs: 1,
            lr: BASE_LR,
            sigma: 0.0,
            seed: 13,
            batch_size: BATCH,
            augment: true,
            resample_rand_labels: false,
            ..ImplantConfig::default()
        };
        let model = LockedClassifier::new("smallcnn", (3, 32, 32), 10, 3).unwrap();
        implant(model, &d.comp, Some(&d.spec), &EvalSets::default(), &cfg).unwrap()
    };
    let m1 = one_epoch();
    let m2 = one_epoch();
    let params_equal = m1
        .net
        .params_flat()
        .iter()
        .zip(m2.net.params_flat().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let loss_equal =
        m1.train_log[0].loss_total.to_bits() == m2.train_log[0].loss_total.to_bits();

    let attack_cfg = AttackConfig {
        steps: 100,
        lr: 0.1,
        lambda_reg: Some(1e-2),
        batch_size: 32,
        seed: 11,
    };
    let a1 = adaptive_attack(&d.model, &d.attacker, &attack_cfg).unwrap();
    let a2 = adaptive_attack(&d.model, &d.attacker, &attack_cfg).unwrap();
    let attack_equal = a1.acc_reversed.to_bits() == a2.acc_reversed.to_bits()
        && a1.objective_trace == a2.objective_trace
        && a1
            .trigger
            .mask()
            .iter()
            .zip(a2.trigger.mask().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());

    let mut certify_equal = true;
    for (i, item) in d.test.iter().take(5).enumerate() {
        let c1 = certify(&d.model, &item.pixels, 0.25, 32, 300, 0.01, 21 + i as u64).unwrap();
        let c2 = certify(&d.model, &item.pixels, 0.25, 32, 300, 0.01, 21 + i as u64).unwrap();
        certify_equal &= c1.label == c2.label
            && c1.p_a_lower.to_bits() == c2.p_a_lower.to_bits()
            && c1.radius.to_bits() == c2.radius.to_bits();
    }

    let pass = params_equal && loss_equal && attack_equal && certify_equal;
    verdict(
        "determinism",
        pass,
        &format!(
            "replayed training params identical: {params_equal}, loss identical: {loss_equal}, attack identical: {attack_equal}, certificates identical: {certify_equal}"
        ),
    );
    assert!(pass);
}
