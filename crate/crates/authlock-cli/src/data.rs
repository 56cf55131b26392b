//! Dataset resolution for the commands: CIFAR-10 from disk or generated
//! blobs, with deterministic subsetting.

use authlock::dataset::{
    find_cifar10_dir, load_cifar10, stratified_subset, synth_dataset, LabeledImage,
};
use authlock::{Error, Result};

use crate::config::RunConfig;

pub struct LoadedData {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub origin: String,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<LoadedData> {
    let k = cfg.num_classes();
    match cfg.dataset.name.as_str() {
        "cifar10" => {
            let dir = find_cifar10_dir().ok_or_else(|| {
                Error::invalid(
                    "cifar-10-batches-bin not found; place it under ./data or set AUTHLOCK_DATA_DIR",
                )
            })?;
            let (mut train, mut test) = load_cifar10(&dir)?;
            if cfg.dataset.train_subset > 0 && cfg.dataset.train_subset < train.len() {
                train = stratified_subset(&train, cfg.dataset.train_subset, k, cfg.dataset.seed);
            }
            if cfg.dataset.test_subset > 0 && cfg.dataset.test_subset < test.len() {
                test = stratified_subset(&test, cfg.dataset.test_subset, k, cfg.dataset.seed ^ 1);
            }
            Ok(LoadedData {
                train,
                test,
                origin: format!("cifar10:{}", dir.display()),
            })
        }
        "synth" => {
            let [c, h, w] = cfg.dataset.image;
            let (train, mut test) =
                synth_dataset(cfg.dataset.train_subset, k, (c, h, w), cfg.dataset.seed)?;
            if cfg.dataset.test_subset > 0 && cfg.dataset.test_subset < test.len() {
                test.truncate(cfg.dataset.test_subset);
            }
            Ok(LoadedData {
                train,
                test,
                origin: "synth".into(),
            })
        }
        other => Err(Error::invalid(format!("unknown dataset {other:?}"))),
    }
}
