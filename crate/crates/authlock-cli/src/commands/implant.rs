//! The implant command: train the locked model and store every artifact the
//! later commands need.

use std::path::Path;

use authlock::analysis::{accuracy, noisy_accuracy, smoothed_accuracy, MetricsRecord};
use authlock::dataset::{build_composite, make_authorized_testset, stratified_subset};
use authlock::model::{
    anti_finetune_harden, implant, save_checkpoint, HardenConfig, ImplantConfig, LockedClassifier,
};
use authlock::trigger::TriggerKind;
use authlock::Result;

use crate::commands::{eval_sets, trigger_from_config};
use crate::config::RunConfig;
use crate::data::load_dataset;
use crate::rundir::{append_metrics, create_run_dir, save_state, RunState};

pub fn run(cfg: &RunConfig, root: &Path, force: bool) -> Result<()> {
    let run = create_run_dir(root, &cfg.run_id, force)?;
    cfg.save(&run.join("config.toml"))?;

    let spec = trigger_from_config(cfg)?;
    spec.save(&run.join("trigger.json"))?;

    let data = load_dataset(cfg)?;
    println!(
        "dataset {}: {} train / {} test images",
        data.origin,
        data.train.len(),
        data.test.len()
    );

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
    let model = LockedClassifier::new(&cfg.train.arch, (c, h, w), k, cfg.train.seed)?;
    let implant_cfg = ImplantConfig {
        lambda_rand: cfg.train.lambda_rand,
        epochs: cfg.train.epochs,
        lr: cfg.train.lr,
        sigma: cfg.train.sigma,
        seed: cfg.train.seed,
        batch_size: cfg.train.batch_size,
        augment: cfg.train.augment,
        resample_rand_labels: cfg.train.resample_rand_labels,
        ..ImplantConfig::default()
    };

    println!(
        "implanting: arch {} epochs {} lambda {} sigma {}",
        cfg.train.arch, cfg.train.epochs, cfg.train.lambda_rand, cfg.train.sigma
    );
    let mut model = implant(model, &comp, Some(&spec), &eval, &implant_cfg)?;
    for rec in &model.train_log {
        println!(
            "epoch {:>3}  loss {:.4}  acc_auth {}  acc_clean {}",
            rec.epoch,
            rec.loss_total,
            rec.acc_auth.map_or("-".into(), |v| format!("{v:.4}")),
            rec.acc_clean.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }

    let mut hardened = false;
    if cfg.train.harden {
        println!("hardening against finetuning ({} rounds)", cfg.train.harden_rounds);
        let clean_train: Vec<_> = comp
            .rand_items
            .iter()
            .zip(&comp.rand_true_labels)
            .map(|(it, &y)| authlock::dataset::LabeledImage::new(it.pixels.clone(), y))
            .collect();
        let harden_cfg = HardenConfig {
            rounds: cfg.train.harden_rounds,
            batch_size: cfg.train.batch_size,
            lambda_rand: cfg.train.lambda_rand,
            seed: cfg.train.seed,
            ..HardenConfig::for_classes(k)
        };
        let out = anti_finetune_harden(model, &comp, &clean_train, Some(&spec), &eval, &harden_cfg)?;
        println!(
            "hardened: acc_auth {} -> {}, acc_clean {} -> {}",
            fmt_opt(out.acc_auth_before),
            fmt_opt(out.acc_auth_after),
            fmt_opt(out.acc_clean_before),
            fmt_opt(out.acc_clean_after),
        );
        model = out.model;
        hardened = true;
    }

    let manifest = save_checkpoint(&model, &run.join("checkpoint"))?;
    let manifest_rel = format!(
        "checkpoint/{}",
        manifest.file_name().expect("manifest name").to_string_lossy()
    );
    save_state(
        &run,
        &RunState {
            checkpoint_manifest: manifest_rel.clone(),
            trigger_file: "trigger.json".into(),
            dataset_origin: data.origin.clone(),
            hardened,
        },
    )?;

    let hw = TriggerKind::Hw(&spec);
    let acc_auth = accuracy(&model, &data.test, Some(&hw))?;
    let acc_clean = accuracy(&model, &data.test, None)?;
    let mut metrics = vec![
        MetricsRecord::new("acc_auth", acc_auth),
        MetricsRecord::new("acc_clean", acc_clean),
        MetricsRecord::new("lock_gap", acc_auth - acc_clean),
        MetricsRecord::new("train_sigma", cfg.train.sigma),
        MetricsRecord::new("hardened", if hardened { 1.0 } else { 0.0 }),
    ];
    println!("acc_auth  {acc_auth:.4}");
    println!("acc_clean {acc_clean:.4}");

    // A noise-trained model is deployed as its smoothed self, so record how
    // it scores in that regime too.
    if cfg.train.sigma > 0.0 {
        let sigma = cfg.train.sigma;
        let noisy = noisy_accuracy(&model, &eval.auth, sigma, cfg.train.seed ^ 0xA0)?;
        let vote_items = if eval.auth.len() > 500 {
            let base = stratified_subset(&data.test, 500, k, cfg.certify.seed ^ 0x51);
            make_authorized_testset(&base, &spec)?
        } else {
            eval.auth.clone()
        };
        let vote = smoothed_accuracy(
            &model,
            &vote_items,
            sigma,
            100,
            cfg.certify.alpha,
            cfg.certify.seed ^ 0x50,
        )?;
        metrics.push(MetricsRecord::with_note(
            "acc_auth_noisy",
            Some(noisy),
            "base model, one gaussian draw per authorized image",
        ));
        metrics.push(MetricsRecord::with_note(
            "acc_auth_vote",
            Some(vote),
            "smoothed vote over 100 draws, abstentions scored as errors",
        ));
        println!("acc_auth under noise  {noisy:.4} (single pass)  {vote:.4} (smoothed vote)");
    }
    append_metrics(&run, &metrics)?;

    println!("checkpoint {}", run.join(manifest_rel).display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}
