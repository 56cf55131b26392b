//! Simulated PUF: device identifiers to deterministic challenge responses.
//!
//! Real deployments would read a hardware fingerprint off the device. Here a
//! keyed hash plays that role: same (device, challenge) always gives the same
//! 32-byte response, any other device gives an unrelated one.

use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trigger::TriggerPattern;

/// Domain separation tag so responses can never collide with other uses of
/// the same hash.
const DOMAIN_TAG: &[u8] = b"authority-puf-v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceFingerprint {
    pub device_id: Vec<u8>,
    pub challenge: Vec<u8>,
    pub response: [u8; 32],
}

impl DeviceFingerprint {
    pub fn response_hex(&self) -> String {
        hex::encode(self.response)
    }

    /// Digest recorded alongside triggers so a trigger file can be matched
    /// back to the fingerprint that produced it without storing the response.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"authority-fp-digest");
        h.update(self.response);
        h.finalize().into()
    }
}

/// Derives the challenge response for a device.
///
/// The device id is length-framed before hashing so distinct (id, challenge)
/// splits of the same byte stream cannot alias.
pub fn derive_fingerprint(device_id: &[u8], challenge: &[u8]) -> Result<DeviceFingerprint> {
    if device_id.is_empty() {
        return Err(Error::invalid("device_id must be non-empty"));
    }
    if challenge.is_empty() {
        return Err(Error::invalid("challenge must be non-empty"));
    }
    let mut h = Sha256::new();
    h.update(DOMAIN_TAG);
    h.update((device_id.len() as u64).to_le_bytes());
    h.update(device_id);
    h.update(challenge);
    let response: [u8; 32] = h.finalize().into();
    Ok(DeviceFingerprint {
        device_id: device_id.to_vec(),
        challenge: challenge.to_vec(),
        response,
    })
}

/// Stretches a response to `n` bytes: the response itself first, then
/// counter-mode hash blocks.
pub(crate) fn expand_bytes(response: &[u8; 32], n: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(response);
    let mut counter: u32 = 0;
    while out.len() < n {
        let mut h = Sha256::new();
        h.update(response);
        h.update(counter.to_le_bytes());
        out.extend_from_slice(&h.finalize());
        counter += 1;
    }
    out.truncate(n);
    out
}

/// Renders a fingerprint as a pixel patch, one byte per entry, scaled to
/// [0,1].
pub fn fingerprint_to_trigger(
    fp: &DeviceFingerprint,
    channels: usize,
    patch_h: usize,
    patch_w: usize,
) -> Result<TriggerPattern> {
    if channels == 0 || patch_h == 0 || patch_w == 0 {
        return Err(Error::invalid(format!(
            "trigger shape ({channels},{patch_h},{patch_w}) has a zero dimension"
        )));
    }
    let n = channels * patch_h * patch_w;
    let bytes = expand_bytes(&fp.response, n);
    let values: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    let array = Array3::from_shape_vec((channels, patch_h, patch_w), values)
        .expect("shape matches byte count by construction");
    TriggerPattern::new(array)
}
