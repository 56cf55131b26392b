pub mod ablate;
pub mod attack;
pub mod certify;
pub mod implant;
pub mod report;

use std::path::Path;

use authlock::dataset::{make_authorized_testset, LabeledImage};
use authlock::fingerprint::{derive_fingerprint, fingerprint_to_trigger};
use authlock::model::{load_checkpoint, EvalSets, LockedClassifier};
use authlock::trigger::TriggerSpec;
use authlock::Result;

use crate::config::RunConfig;
use crate::rundir::RunState;

/// Renders the hardware trigger described by the config.
pub fn trigger_from_config(cfg: &RunConfig) -> Result<TriggerSpec> {
    let fp = derive_fingerprint(
        cfg.trigger.device_id.as_bytes(),
        cfg.trigger.challenge.as_bytes(),
    )?;
    let [c, _, _] = cfg.image_shape();
    let pattern = fingerprint_to_trigger(&fp, c, cfg.trigger.patch[0], cfg.trigger.patch[1])?;
    Ok(TriggerSpec {
        pattern,
        location: (cfg.trigger.location[0], cfg.trigger.location[1]),
        fingerprint_digest: fp.digest(),
    })
}

/// Loads the model and trigger a previous implant left in the run dir.
pub fn load_run_artifacts(
    run: &Path,
    state: &RunState,
) -> Result<(LockedClassifier, TriggerSpec)> {
    let model = load_checkpoint(&run.join(&state.checkpoint_manifest))?;
    let spec = TriggerSpec::load(&run.join(&state.trigger_file))?;
    Ok((model, spec))
}

/// Held-out triggered and clean sets from the test split.
pub fn eval_sets(test: &[LabeledImage], spec: &TriggerSpec) -> Result<EvalSets> {
    Ok(EvalSets {
        auth: make_authorized_testset(test, spec)?,
        clean: test.to_vec(),
    })
}
