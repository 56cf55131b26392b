//! Run configuration: a TOML file or a built-in profile, plus a few
//! command-line overrides.

use std::fs;
use std::path::Path;

use authlock::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// "cifar10" or "synth".
    pub name: String,
    /// Training images to keep; 0 means all.
    pub train_subset: usize,
    /// Test images to keep; 0 means all.
    pub test_subset: usize,
    /// Class count for synthetic data (cifar10 is always 10).
    pub num_classes: usize,
    /// Image shape for synthetic data as [channels, height, width].
    pub image: [usize; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerConfig {
    pub device_id: String,
    pub challenge: String,
    /// Patch size as [height, width].
    pub patch: [usize; 2],
    /// Patch corner as [row, col].
    pub location: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: String,
    pub lambda_rand: f64,
    pub epochs: usize,
    pub lr: f64,
    pub sigma: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub auth_fraction: f64,
    pub augment: bool,
    pub resample_rand_labels: bool,
    /// Run the anti-finetune pass after implanting.
    pub harden: bool,
    pub harden_rounds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fixed sparsity weight; omit to run the built-in schedule.
    pub lambda_reg: Option<f64>,
    pub seed: u64,
    /// Clean labeled test images available to the attacker.
    pub eval_subset: usize,
    pub finetune_samples: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    /// Noise level; 0 reuses the model's training sigma.
    pub sigma: f64,
    pub n0: usize,
    pub n: usize,
    pub alpha: f64,
    /// Test images to certify.
    pub subset: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub dataset: DatasetConfig,
    pub trigger: TriggerConfig,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub certify: CertifySection,
}

impl RunConfig {
    /// The interactive-scale profile: subsampled CIFAR-10 and budgets that
    /// finish on a workstation CPU.
    pub fn desk() -> Self {
        RunConfig {
            run_id: "desk".into(),
            dataset: DatasetConfig {
                name: "cifar10".into(),
                train_subset: 10_000,
                test_subset: 2_000,
                num_classes: 10,
                image: [3, 32, 32],
                seed: 0,
            },
            trigger: TriggerConfig {
                device_id: "device-A".into(),
                challenge: "boot-challenge-1".into(),
                patch: [3, 3],
                location: [0, 0],
            },
            train: TrainConfig {
                arch: "smallcnn".into(),
                lambda_rand: 1.0,
                epochs: 30,
                lr: 0.05,
                sigma: 0.0,
                batch_size: 128,
                seed: 0,
                auth_fraction: 1.0,
                augment: true,
                resample_rand_labels: false,
                harden: false,
                harden_rounds: 3,
            },
            attack: AttackSection {
                steps: 2_000,
                lr: 0.1,
                batch_size: 32,
                lambda_reg: None,
                seed: 1,
                eval_subset: 512,
                finetune_samples: 100,
                finetune_epochs: 10,
                finetune_lr: 0.01,
            },
            certify: CertifySection {
                sigma: 0.0,
                n0: 32,
                n: 1_000,
                alpha: 0.001,
                subset: 200,
                seed: 2,
            },
        }
    }

    /// Full-dataset budgets for unattended runs.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.run_id = "paper".into();
        cfg.dataset.train_subset = 0;
        cfg.dataset.test_subset = 0;
        cfg.train.epochs = 60;
        cfg.attack.steps = 4_000;
        cfg.attack.eval_subset = 2_000;
        cfg.certify.n = 10_000;
        cfg.certify.subset = 500;
        cfg
    }

    pub fn from_profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::invalid(format!(
                "unknown profile {other:?}; expected desk or paper"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::DataFormat(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::invalid(
                "run_id must be non-empty and use only letters, digits, - and _",
            ));
        }
        match self.dataset.name.as_str() {
            "cifar10" | "synth" => {}
            other => {
                return Err(Error::invalid(format!(
                    "unknown dataset {other:?}; expected cifar10 or synth"
                )))
            }
        }
        if self.dataset.name == "synth" {
            if self.dataset.num_classes < 2 {
                return Err(Error::invalid("synth needs at least 2 classes"));
            }
            if self.dataset.image.iter().any(|&d| d == 0) {
                return Err(Error::invalid("synth image dimensions must be positive"));
            }
            if self.dataset.train_subset == 0 {
                return Err(Error::invalid(
                    "synth needs an explicit train_subset (it is the generated size)",
                ));
            }
        }
        if self.trigger.device_id.is_empty() || self.trigger.challenge.is_empty() {
            return Err(Error::invalid("trigger device_id and challenge must be non-empty"));
        }
        if self.trigger.patch.iter().any(|&d| d == 0) {
            return Err(Error::invalid("trigger patch dimensions must be positive"));
        }
        let [c, h, w] = self.image_shape();
        let _ = c;
        if self.trigger.location[0] + self.trigger.patch[0] > h
            || self.trigger.location[1] + self.trigger.patch[1] > w
        {
            return Err(Error::invalid(format!(
                "trigger patch {:?} at {:?} leaves the {h}x{w} image",
                self.trigger.patch, self.trigger.location
            )));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::invalid("train epochs and batch_size must be positive"));
        }
        if self.train.lr <= 0.0 || !self.train.lr.is_finite() {
            return Err(Error::invalid("train lr must be positive"));
        }
        if self.train.lambda_rand <= 0.0 {
            return Err(Error::invalid("lambda_rand must be positive"));
        }
        if self.train.sigma < 0.0 {
            return Err(Error::invalid("train sigma must be nonnegative"));
        }
        if !(self.train.auth_fraction > 0.0 && self.train.auth_fraction <= 1.0) {
            return Err(Error::invalid("auth_fraction must lie in (0, 1]"));
        }
        if self.train.harden && self.train.harden_rounds == 0 {
            return Err(Error::invalid("harden_rounds must be positive when hardening"));
        }
        if self.attack.steps == 0 || self.attack.batch_size == 0 {
            return Err(Error::invalid("attack steps and batch_size must be positive"));
        }
        if self.attack.lr <= 0.0 || !self.attack.lr.is_finite() {
            return Err(Error::invalid("attack lr must be positive"));
        }
        if self.attack.eval_subset < 4 {
            return Err(Error::invalid("attack eval_subset must be at least 4"));
        }
        if self.attack.finetune_samples == 0
            || self.attack.finetune_epochs == 0
            || self.attack.finetune_lr <= 0.0
        {
            return Err(Error::invalid("finetune settings must be positive"));
        }
        if self.certify.sigma < 0.0 {
            return Err(Error::invalid("certify sigma must be nonnegative"));
        }
        if self.certify.n0 == 0 || self.certify.n == 0 || self.certify.subset == 0 {
            return Err(Error::invalid("certify n0, n and subset must be positive"));
        }
        if !(self.certify.alpha > 0.0 && self.certify.alpha < 1.0) {
            return Err(Error::invalid("certify alpha must lie in (0, 1)"));
        }
        Ok(())
    }

    /// [channels, height, width] of the configured dataset.
    pub fn image_shape(&self) -> [usize; 3] {
        if self.dataset.name == "cifar10" {
            [3, 32, 32]
        } else {
            self.dataset.image
        }
    }

    pub fn num_classes(&self) -> usize {
        if self.dataset.name == "cifar10" {
            10
        } else {
            self.dataset.num_classes
        }
    }
}
