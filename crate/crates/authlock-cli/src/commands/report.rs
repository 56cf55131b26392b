//! The report command: collect the run's accumulated metrics into Markdown
//! and CSV tables.

use std::fs;
use std::path::Path;

use authlock::analysis::{render_report_csv, render_report_md, RunContext};
use authlock::{Error, Result};

use crate::config::RunConfig;
use crate::rundir::{load_metrics, open_run_dir};

pub fn run(run_dir: &Path) -> Result<()> {
    let state = open_run_dir(run_dir)?;
    let cfg = RunConfig::load(&run_dir.join("config.toml"))?;
    let metrics = load_metrics(run_dir)?;
    if metrics.is_empty() {
        return Err(Error::invalid(
            "no metrics recorded yet; run implant / attack / certify first",
        ));
    }
    let ctx = RunContext {
        run_id: cfg.run_id.clone(),
        arch_id: cfg.train.arch.clone(),
        dataset: state.dataset_origin.clone(),
        num_classes: cfg.num_classes(),
        train_sigma: cfg.train.sigma,
        seed: cfg.train.seed,
    };

    let md = render_report_md(&ctx, &metrics);
    let md_path = run_dir.join("report.md");
    fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;

    let csv = render_report_csv(&ctx, &metrics);
    let csv_path = run_dir.join("report.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    print!("{md}");
    println!("wrote {} and {}", md_path.display(), csv_path.display());
    Ok(())
}
