//! The ablate-sigma command: sweep the training noise level and measure, for
//! each value, how well the lock holds, how much the adaptive attack
//! recovers, what the smoothed model certifies, and how much trigger
//! information the penultimate features leak.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array2, Array4, Axis};

use authlock::analysis::{
    accuracy, curve_auc, mi_estimate, noisy_accuracy, smoothed_accuracy, MetricsRecord, MiConfig,
};
use authlock::attack::{adaptive_attack, AttackConfig};
use authlock::dataset::{build_composite, make_authorized_testset, stratified_subset, LabeledImage};
use authlock::model::{
    extract_features, implant, save_checkpoint, ImplantConfig, LockedClassifier,
};
use authlock::smoothing::{certify, robustness_condition_holds};
use authlock::trigger::{perturbation_l2, SoftTrigger, TriggerSpec};
use authlock::{Error, Result};

use crate::commands::{eval_sets, trigger_from_config};
use crate::config::RunConfig;
use crate::data::load_dataset;
use crate::rundir::{append_metrics, create_run_dir, save_state, RunState};

const FEATURE_BATCH: usize = 256;
/// Noise draws behind each smoothed-vote prediction in the accuracy column.
const VOTE_SAMPLES: usize = 100;
/// Images scored by the vote column; full eval sets would cost minutes per
/// sigma.
const VOTE_SUBSET: usize = 500;

struct SigmaRow {
    sigma: f64,
    acc_auth: f64,
    /// Base model on singly-noised authorized inputs.
    acc_auth_noisy: f64,
    /// Majority vote over noisy copies, abstentions scored as errors.
    acc_auth_vote: f64,
    acc_clean: f64,
    acc_reversed: f64,
    gain: f64,
    mask_l1: f64,
    certified_accuracy: Option<f64>,
    mean_radius: Option<f64>,
    abstain_rate: Option<f64>,
    neutralized: Option<f64>,
    mi_bits: f64,
}

fn stack_images(items: &[LabeledImage]) -> Array4<f32> {
    let (c, h, w) = items[0].pixels.dim();
    let mut out = Array4::zeros((items.len(), c, h, w));
    for (i, item) in items.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&item.pixels);
    }
    out
}

fn penultimate_features(
    model: &LockedClassifier,
    items: &[LabeledImage],
) -> Result<Array2<f32>> {
    let mut parts = Vec::new();
    for chunk in items.chunks(FEATURE_BATCH) {
        parts.push(extract_features(model, &stack_images(chunk), "penultimate")?);
    }
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::invalid(format!("feature stack: {e}")))
}

/// How many bits a linear probe on the penultimate layer reads off about
/// trigger presence. Clean and triggered copies of the same images, labeled
/// 0 and 1.
fn trigger_leak_bits(
    model: &LockedClassifier,
    items: &[LabeledImage],
    spec: &TriggerSpec,
    seed: u64,
) -> Result<f64> {
    let triggered = make_authorized_testset(items, spec)?;
    let clean_feats = penultimate_features(model, items)?;
    let trig_feats = penultimate_features(model, &triggered)?;
    let feats = concatenate(Axis(0), &[clean_feats.view(), trig_feats.view()])
        .map_err(|e| Error::invalid(format!("feature stack: {e}")))?;
    let labels: Vec<usize> = std::iter::repeat(0)
        .take(items.len())
        .chain(std::iter::repeat(1).take(items.len()))
        .collect();
    let cfg = MiConfig { seed, ..MiConfig::default() };
    mi_estimate(&feats, &labels, 2, &cfg)
}

struct CertStats {
    certified_accuracy: f64,
    mean_radius: f64,
    abstain_rate: f64,
    neutralized: Option<f64>,
}

fn certify_subset(
    model: &LockedClassifier,
    items: &[LabeledImage],
    sigma: f64,
    n0: usize,
    n: usize,
    alpha: f64,
    seed: u64,
    recovered: Option<&SoftTrigger>,
) -> Result<CertStats> {
    let mut correct = 0usize;
    let mut abstained = 0usize;
    let mut certified = 0usize;
    let mut radius_sum = 0.0f64;
    let mut neutralized = 0usize;
    for (i, item) in items.iter().enumerate() {
        let out = certify(model, &item.pixels, sigma, n0, n, alpha, seed.wrapping_add(i as u64))?;
        match out.label {
            None => abstained += 1,
            Some(y) => {
                certified += 1;
                radius_sum += out.radius;
                if y == item.label {
                    correct += 1;
                }
                if let Some(trig) = recovered {
                    let delta = perturbation_l2(&item.pixels, trig)?;
                    if robustness_condition_holds(delta, out.radius) {
                        neutralized += 1;
                    }
                }
            }
        }
    }
    let total = items.len() as f64;
    Ok(CertStats {
        certified_accuracy: correct as f64 / total,
        mean_radius: if certified > 0 { radius_sum / certified as f64 } else { 0.0 },
        abstain_rate: abstained as f64 / total,
        neutralized: (recovered.is_some() && certified > 0)
            .then(|| neutralized as f64 / certified as f64),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub fn run(cfg: &RunConfig, root: &Path, sigmas: &[f64], force: bool) -> Result<()> {
    let mut sigmas: Vec<f64> = sigmas.to_vec();
    if sigmas.is_empty() {
        return Err(Error::invalid("pass at least one sigma, e.g. --sigmas 0,0.5,1.0"));
    }
    if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::invalid("sigmas must be finite and non-negative"));
    }
    sigmas.sort_by(|a, b| a.partial_cmp(b).expect("finite sigmas"));
    sigmas.dedup();

    let run = create_run_dir(root, &cfg.run_id, force)?;
    cfg.save(&run.join("config.toml"))?;
    let spec = trigger_from_config(cfg)?;
    spec.save(&run.join("trigger.json"))?;

    let data = load_dataset(cfg)?;
    let k = cfg.num_classes();
    let comp = build_composite(
        &data.train,
        &spec,
        k,
        cfg.train.seed,
        cfg.train.auth_fraction,
        &data.origin,
    )?;
    let eval = eval_sets(&data.test, &spec)?;
    let [c, h, w] = cfg.image_shape();

    let attacker_data = if cfg.attack.eval_subset < data.test.len() {
        stratified_subset(&data.test, cfg.attack.eval_subset, k, cfg.attack.seed)
    } else {
        data.test.clone()
    };
    let mi_items = if cfg.attack.eval_subset < data.test.len() {
        stratified_subset(&data.test, cfg.attack.eval_subset, k, cfg.attack.seed ^ 0x11)
    } else {
        data.test.clone()
    };
    let cert_items = if cfg.certify.subset < data.test.len() {
        stratified_subset(&data.test, cfg.certify.subset, k, cfg.certify.seed)
    } else {
        data.test.clone()
    };
    let vote_items = if VOTE_SUBSET < eval.auth.len() {
        stratified_subset(&eval.auth, VOTE_SUBSET, k, cfg.certify.seed ^ 0x51)
    } else {
        eval.auth.clone()
    };

    let mut rows: Vec<SigmaRow> = Vec::with_capacity(sigmas.len());
    let mut last_manifest = None;

    for &sigma in &sigmas {
        println!("== sigma {sigma} ==");
        let model = LockedClassifier::new(&cfg.train.arch, (c, h, w), k, cfg.train.seed)?;
        let implant_cfg = ImplantConfig {
            lambda_rand: cfg.train.lambda_rand,
            epochs: cfg.train.epochs,
            lr: cfg.train.lr,
            sigma,
            seed: cfg.train.seed,
            batch_size: cfg.train.batch_size,
            augment: cfg.train.augment,
            resample_rand_labels: cfg.train.resample_rand_labels,
            ..ImplantConfig::default()
        };
        let model = implant(model, &comp, Some(&spec), &eval, &implant_cfg)?;
        let manifest = save_checkpoint(&model, &run.join("checkpoint"))?;
        last_manifest = Some(format!(
            "checkpoint/{}",
            manifest.file_name().expect("manifest name").to_string_lossy()
        ));

        let acc_auth = accuracy(&model, &eval.auth, None)?;
        let acc_auth_noisy = noisy_accuracy(&model, &eval.auth, sigma, cfg.train.seed ^ 0xA0)?;
        let acc_auth_vote = if sigma > 0.0 {
            smoothed_accuracy(
                &model,
                &vote_items,
                sigma,
                VOTE_SAMPLES,
                cfg.certify.alpha,
                cfg.certify.seed ^ 0x50,
            )?
        } else {
            accuracy(&model, &vote_items, None)?
        };
        let acc_clean = accuracy(&model, &eval.clean, None)?;
        println!(
            "acc_auth {acc_auth:.4} (noisy {acc_auth_noisy:.4}, vote {acc_auth_vote:.4})  acc_clean {acc_clean:.4}"
        );

        let attack_cfg = AttackConfig {
            steps: cfg.attack.steps,
            lr: cfg.attack.lr,
            lambda_reg: cfg.attack.lambda_reg,
            batch_size: cfg.attack.batch_size,
            seed: cfg.attack.seed,
        };
        let rec = adaptive_attack(&model, &attacker_data, &attack_cfg)?;
        rec.trigger.save(&run.join("attacks"), &format!("s{sigma}-trigger"))?;
        let attack_clean = accuracy(&model, &attacker_data, None)?;
        let gain = rec.acc_reversed - attack_clean;
        println!(
            "adaptive: acc_reversed {:.4}  gain {gain:.4}  mask_l1 {:.2}",
            rec.acc_reversed, rec.mask_l1
        );

        let mi_bits = trigger_leak_bits(&model, &mi_items, &spec, cfg.train.seed)?;
        println!("trigger leak {mi_bits:.3} bits");

        let cert = if sigma > 0.0 {
            let stats = certify_subset(
                &model,
                &cert_items,
                sigma,
                cfg.certify.n0,
                cfg.certify.n,
                cfg.certify.alpha,
                cfg.certify.seed,
                Some(&rec.trigger),
            )?;
            println!(
                "certified_accuracy {:.4}  mean_radius {:.4}  neutralized {}",
                stats.certified_accuracy,
                stats.mean_radius,
                stats.neutralized.map_or("-".into(), |v| format!("{v:.4}")),
            );
            Some(stats)
        } else {
            println!("sigma 0: certification skipped");
            None
        };

        rows.push(SigmaRow {
            sigma,
            acc_auth,
            acc_auth_noisy,
            acc_auth_vote,
            acc_clean,
            acc_reversed: rec.acc_reversed,
            gain,
            mask_l1: rec.mask_l1,
            certified_accuracy: cert.as_ref().map(|s| s.certified_accuracy),
            mean_radius: cert.as_ref().map(|s| s.mean_radius),
            abstain_rate: cert.as_ref().map(|s| s.abstain_rate),
            neutralized: cert.as_ref().and_then(|s| s.neutralized),
            mi_bits,
        });
    }

    let mut csv = String::from(
        "sigma,acc_auth,acc_auth_noisy,acc_auth_vote,acc_clean,acc_reversed,gain,mask_l1,certified_accuracy,mean_radius,abstain_rate,neutralized_fraction,mi_bits\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{:.6}\n",
            r.sigma,
            r.acc_auth,
            r.acc_auth_noisy,
            r.acc_auth_vote,
            r.acc_clean,
            r.acc_reversed,
            r.gain,
            r.mask_l1,
            fmt_opt(r.certified_accuracy),
            fmt_opt(r.mean_radius),
            fmt_opt(r.abstain_rate),
            fmt_opt(r.neutralized),
            r.mi_bits,
        ));
    }
    let csv_path = run.join("ablation.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let mut mi_csv = String::from("sigma,mi_bits\n");
    for r in &rows {
        mi_csv.push_str(&format!("{},{:.6}\n", r.sigma, r.mi_bits));
    }
    let mi_path = run.join("mi_curve.csv");
    fs::write(&mi_path, mi_csv).map_err(|e| Error::io(&mi_path, e))?;

    if let Some(manifest) = last_manifest {
        save_state(
            &run,
            &RunState {
                checkpoint_manifest: manifest,
                trigger_file: "trigger.json".into(),
                dataset_origin: data.origin.clone(),
                hardened: false,
            },
        )?;
    }

    let sigma_star = rows.iter().find(|r| r.gain <= 0.05).map(|r| r.sigma);
    let mut metrics = vec![MetricsRecord::with_note(
        "ablate_sigma_star",
        sigma_star,
        "smallest sigma where the adaptive attack gains at most five points",
    )];
    if rows.len() >= 2 {
        let gain_pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.sigma, r.gain)).collect();
        let mi_pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.sigma, r.mi_bits)).collect();
        metrics.push(MetricsRecord::new("ablate_gain_auc", curve_auc(&gain_pts)?));
        metrics.push(MetricsRecord::new("ablate_mi_auc", curve_auc(&mi_pts)?));
    }
    append_metrics(&run, &metrics)?;

    match sigma_star {
        Some(s) => println!("sigma_star {s}"),
        None => println!("sigma_star not reached in this sweep"),
    }
    println!("wrote {} and {}", csv_path.display(), mi_path.display());
    Ok(())
}
