//! The attack command: run one recovery mode against a stored run.

use std::fs;
use std::path::Path;

use authlock::analysis::{accuracy, attack_gain, MetricsRecord};
use authlock::attack::{
    adaptive_attack, anomaly_index, finetune_attack, nc_recover, pixel_attack, AttackConfig,
    FinetuneConfig, RecoveredTrigger,
};
use authlock::dataset::stratified_subset;
use authlock::{Error, Result};
use serde::Serialize;

use crate::commands::load_run_artifacts;
use crate::config::RunConfig;
use crate::data::load_dataset;
use crate::rundir::{append_metrics, open_run_dir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Adaptive,
    Nc,
    Pixel,
    Finetune,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Adaptive => "adaptive",
            Mode::Nc => "nc",
            Mode::Pixel => "pixel",
            Mode::Finetune => "finetune",
        }
    }
}

#[derive(Serialize)]
struct SoftAttackReport {
    mode: String,
    acc_clean: f64,
    acc_reversed: f64,
    gain: f64,
    mask_l1: f64,
    steps_used: usize,
    target_class: Option<usize>,
    target_hit_rate: Option<f64>,
    trigger_manifest: String,
    objective_trace: Vec<f64>,
}

#[derive(Serialize)]
struct NcClassRow {
    target: usize,
    mask_l1: f64,
    hit_rate: f64,
}

#[derive(Serialize)]
struct NcSweepReport {
    mode: String,
    per_class: Vec<NcClassRow>,
    anomaly_index: f64,
    min_norm_class: usize,
    steps_per_class: usize,
}

#[derive(Serialize)]
struct FinetuneReport {
    mode: String,
    samples: usize,
    epochs: usize,
    acc_clean_before: f64,
    acc_clean_after: f64,
    acc_auth_before: f64,
    acc_auth_after: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(
    run_dir: &Path,
    mode: Mode,
    target: Option<usize>,
    steps_override: Option<usize>,
    seed_override: Option<u64>,
) -> Result<()> {
    let state = open_run_dir(run_dir)?;
    let cfg = RunConfig::load(&run_dir.join("config.toml"))?;
    let (model, spec) = load_run_artifacts(run_dir, &state)?;
    let data = load_dataset(&cfg)?;

    // The attacker's clean labeled data comes from the test split.
    let attacker_data = if cfg.attack.eval_subset < data.test.len() {
        stratified_subset(
            &data.test,
            cfg.attack.eval_subset,
            model.num_classes,
            cfg.attack.seed,
        )
    } else {
        data.test.clone()
    };

    let attack_cfg = AttackConfig {
        steps: steps_override.unwrap_or(cfg.attack.steps),
        lr: cfg.attack.lr,
        lambda_reg: cfg.attack.lambda_reg,
        batch_size: cfg.attack.batch_size,
        seed: seed_override.unwrap_or(cfg.attack.seed),
    };
    let acc_clean = accuracy(&model, &attacker_data, None)?;
    let out_dir = run_dir.join("attacks");

    match mode {
        Mode::Adaptive | Mode::Pixel => {
            let name = mode.name();
            println!("{name} attack: {} steps on {} images", attack_cfg.steps, attacker_data.len());
            let rec: RecoveredTrigger = match mode {
                Mode::Adaptive => adaptive_attack(&model, &attacker_data, &attack_cfg)?,
                _ => pixel_attack(&model, &attacker_data, target, &attack_cfg)?,
            };
            let trig_manifest = rec.trigger.save(&out_dir, &format!("{name}-trigger"))?;
            let gain = attack_gain(rec.acc_reversed, acc_clean);
            let report = SoftAttackReport {
                mode: name.into(),
                acc_clean,
                acc_reversed: rec.acc_reversed,
                gain,
                mask_l1: rec.mask_l1,
                steps_used: rec.steps_used,
                target_class: rec.target_class,
                target_hit_rate: rec.target_hit_rate,
                trigger_manifest: trig_manifest
                    .file_name()
                    .expect("manifest name")
                    .to_string_lossy()
                    .into_owned(),
                objective_trace: rec.objective_trace,
            };
            write_json(&out_dir.join(format!("{name}.json")), &report)?;
            append_metrics(
                run_dir,
                &[
                    MetricsRecord::new(&format!("{name}_acc_reversed"), rec.acc_reversed),
                    MetricsRecord::new(&format!("{name}_gain"), gain),
                    MetricsRecord::new(&format!("{name}_mask_l1"), rec.mask_l1),
                ],
            )?;
            println!("acc_clean    {acc_clean:.4}");
            println!("acc_reversed {:.4}", rec.acc_reversed);
            println!("gain         {gain:.4}");
        }
        Mode::Nc => match target {
            Some(t) => {
                println!("constant-target recovery for class {t}");
                let rec = nc_recover(&model, &attacker_data, t, &attack_cfg)?;
                let trig_manifest = rec.trigger.save(&out_dir, &format!("nc-{t}-trigger"))?;
                let report = SoftAttackReport {
                    mode: "nc".into(),
                    acc_clean,
                    acc_reversed: rec.acc_reversed,
                    gain: attack_gain(rec.acc_reversed, acc_clean),
                    mask_l1: rec.mask_l1,
                    steps_used: rec.steps_used,
                    target_class: rec.target_class,
                    target_hit_rate: rec.target_hit_rate,
                    trigger_manifest: trig_manifest
                        .file_name()
                        .expect("manifest name")
                        .to_string_lossy()
                        .into_owned(),
                    objective_trace: rec.objective_trace,
                };
                write_json(&out_dir.join(format!("nc-{t}.json")), &report)?;
                println!(
                    "mask_l1 {:.3}  hit_rate {:.4}",
                    rec.mask_l1,
                    rec.target_hit_rate.unwrap_or(0.0)
                );
            }
            None => {
                println!(
                    "constant-target sweep over {} classes, {} steps each",
                    model.num_classes, attack_cfg.steps
                );
                let mut per_class = Vec::with_capacity(model.num_classes);
                let mut norms = Vec::with_capacity(model.num_classes);
                for t in 0..model.num_classes {
                    let rec = nc_recover(&model, &attacker_data, t, &attack_cfg)?;
                    rec.trigger.save(&out_dir, &format!("nc-{t}-trigger"))?;
                    let hit = rec.target_hit_rate.unwrap_or(0.0);
                    println!("class {t}: mask_l1 {:.3} hit_rate {hit:.4}", rec.mask_l1);
                    norms.push(rec.mask_l1);
                    per_class.push(NcClassRow {
                        target: t,
                        mask_l1: rec.mask_l1,
                        hit_rate: hit,
                    });
                }
                let idx = anomaly_index(&norms)?;
                let min_class = norms
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite norms"))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let report = NcSweepReport {
                    mode: "nc-sweep".into(),
                    per_class,
                    anomaly_index: idx,
                    min_norm_class: min_class,
                    steps_per_class: attack_cfg.steps,
                };
                write_json(&out_dir.join("nc-sweep.json"), &report)?;
                append_metrics(
                    run_dir,
                    &[MetricsRecord::with_note(
                        "nc_anomaly_index",
                        Some(idx),
                        &format!("smallest mask: class {min_class}"),
                    )],
                )?;
                println!("anomaly_index {idx:.3} (smallest mask: class {min_class})");
            }
        },
        Mode::Finetune => {
            let eval = crate::commands::eval_sets(&data.test, &spec)?;
            let ft_cfg = FinetuneConfig {
                samples: cfg.attack.finetune_samples,
                epochs: cfg.attack.finetune_epochs,
                lr: cfg.attack.finetune_lr,
                batch_size: cfg.attack.batch_size,
                seed: seed_override.unwrap_or(cfg.attack.seed),
                ..FinetuneConfig::default()
            };
            println!(
                "finetuning on {} clean images for {} epochs",
                ft_cfg.samples, ft_cfg.epochs
            );
            let out = finetune_attack(&model, &data.train, &eval, &ft_cfg)?;
            let report = FinetuneReport {
                mode: "finetune".into(),
                samples: ft_cfg.samples,
                epochs: ft_cfg.epochs,
                acc_clean_before: out.acc_clean_before,
                acc_clean_after: out.acc_clean_after,
                acc_auth_before: out.acc_auth_before,
                acc_auth_after: out.acc_auth_after,
            };
            write_json(&out_dir.join("finetune.json"), &report)?;
            append_metrics(
                run_dir,
                &[
                    MetricsRecord::new("finetune_clean_delta", out.acc_clean_after - out.acc_clean_before),
                    MetricsRecord::new("finetune_auth_delta", out.acc_auth_after - out.acc_auth_before),
                ],
            )?;
            println!(
                "acc_clean {:.4} -> {:.4}   acc_auth {:.4} -> {:.4}",
                out.acc_clean_before, out.acc_clean_after, out.acc_auth_before, out.acc_auth_after
            );
        }
    }
    Ok(())
}
