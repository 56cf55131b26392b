//! The certify command: randomized-smoothing certificates over a test
//! sample, plus the neutralization verdict against a recovered trigger.

use std::fs;
use std::path::Path;

use authlock::analysis::MetricsRecord;
use authlock::dataset::stratified_subset;
use authlock::smoothing::{certify, robustness_condition_holds};
use authlock::trigger::{perturbation_l2, SoftTrigger};
use authlock::{Error, Result};
use serde::Serialize;

use crate::commands::load_run_artifacts;
use crate::config::RunConfig;
use crate::data::load_dataset;
use crate::rundir::{append_metrics, open_run_dir};

#[derive(Serialize)]
struct CertifySummary {
    sigma: f64,
    n0: usize,
    n: usize,
    alpha: f64,
    images: usize,
    abstain_rate: f64,
    certified_accuracy: f64,
    mean_radius_certified: f64,
    /// Fraction of certified images whose recovered-trigger perturbation
    /// stays inside the certified ball; absent when no adaptive trigger has
    /// been recovered yet.
    attack_neutralized_fraction: Option<f64>,
}

pub fn run(run_dir: &Path, sigma_override: Option<f64>, seed_override: Option<u64>) -> Result<()> {
    let state = open_run_dir(run_dir)?;
    let cfg = RunConfig::load(&run_dir.join("config.toml"))?;
    let (model, _spec) = load_run_artifacts(run_dir, &state)?;
    let data = load_dataset(&cfg)?;

    let mut sigma = sigma_override.unwrap_or(cfg.certify.sigma);
    if sigma == 0.0 {
        sigma = model.train_sigma;
    }
    if sigma <= 0.0 {
        return Err(Error::invalid(
            "certification needs positive noise; set certify.sigma or train with sigma > 0",
        ));
    }
    let seed = seed_override.unwrap_or(cfg.certify.seed);

    let subset = if cfg.certify.subset < data.test.len() {
        stratified_subset(&data.test, cfg.certify.subset, model.num_classes, seed)
    } else {
        data.test.clone()
    };

    // The adaptive trigger, if one has been recovered, for the
    // perturbation-inside-the-ball check.
    let recovered = {
        let manifest = run_dir.join("attacks").join("adaptive-trigger.json");
        if manifest.exists() {
            Some(SoftTrigger::load(&manifest)?)
        } else {
            None
        }
    };

    println!(
        "certifying {} images at sigma {sigma} (n0 {}, n {}, alpha {})",
        subset.len(),
        cfg.certify.n0,
        cfg.certify.n,
        cfg.certify.alpha
    );

    let mut csv = String::from("index,true_label,certified_label,p_a_lower,radius,correct,delta_l2,neutralized\n");
    let mut abstained = 0usize;
    let mut correct = 0usize;
    let mut radius_sum = 0.0f64;
    let mut certified = 0usize;
    let mut neutralized = 0usize;
    let mut delta_available = 0usize;

    for (i, item) in subset.iter().enumerate() {
        let out = certify(
            &model,
            &item.pixels,
            sigma,
            cfg.certify.n0,
            cfg.certify.n,
            cfg.certify.alpha,
            seed.wrapping_add(i as u64),
        )?;
        let (label_str, correct_str) = match out.label {
            None => {
                abstained += 1;
                ("abstain".to_string(), String::new())
            }
            Some(y) => {
                certified += 1;
                radius_sum += out.radius;
                let ok = y == item.label;
                if ok {
                    correct += 1;
                }
                (y.to_string(), ok.to_string())
            }
        };
        let (delta_str, neut_str) = match (&recovered, out.label) {
            (Some(trig), Some(_)) => {
                let delta = perturbation_l2(&item.pixels, trig)?;
                delta_available += 1;
                let neut = robustness_condition_holds(delta, out.radius);
                if neut {
                    neutralized += 1;
                }
                (format!("{delta:.6}"), neut.to_string())
            }
            _ => (String::new(), String::new()),
        };
        csv.push_str(&format!(
            "{i},{},{label_str},{:.6},{:.6},{correct_str},{delta_str},{neut_str}\n",
            item.label, out.p_a_lower, out.radius
        ));
    }

    let n_images = subset.len();
    let summary = CertifySummary {
        sigma,
        n0: cfg.certify.n0,
        n: cfg.certify.n,
        alpha: cfg.certify.alpha,
        images: n_images,
        abstain_rate: abstained as f64 / n_images as f64,
        certified_accuracy: correct as f64 / n_images as f64,
        mean_radius_certified: if certified > 0 {
            radius_sum / certified as f64
        } else {
            0.0
        },
        attack_neutralized_fraction: (delta_available > 0)
            .then(|| neutralized as f64 / delta_available as f64),
    };

    let csv_path = run_dir.join("certify").join("certification.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let sum_path = run_dir.join("certify").join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&sum_path, text).map_err(|e| Error::io(&sum_path, e))?;

    let mut metrics = vec![
        MetricsRecord::new("certify_sigma", sigma),
        MetricsRecord::new("abstain_rate", summary.abstain_rate),
        MetricsRecord::new("certified_accuracy", summary.certified_accuracy),
        MetricsRecord::new("mean_radius_certified", summary.mean_radius_certified),
    ];
    if let Some(f) = summary.attack_neutralized_fraction {
        metrics.push(MetricsRecord::new("attack_neutralized_fraction", f));
    }
    append_metrics(run_dir, &metrics)?;

    println!("abstain_rate          {:.4}", summary.abstain_rate);
    println!("certified_accuracy    {:.4}", summary.certified_accuracy);
    println!("mean_radius_certified {:.4}", summary.mean_radius_certified);
    if let Some(f) = summary.attack_neutralized_fraction {
        println!("attack_neutralized    {f:.4}");
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}
