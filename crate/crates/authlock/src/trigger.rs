//! Trigger containers and the two ways a trigger meets an image.
//!
//! The hardware trigger is a stamp: a small patch overwrites pixels at a
//! fixed location. Recovered adversarial triggers are soft: a full-size
//! pattern blended in through a continuous per-pixel mask,
//! `out = (1-m)*x + m*delta`, with the mask shared across channels.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patch content rendered from a fingerprint. Entries in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerPattern {
    values: Array3<f32>,
}

impl TriggerPattern {
    pub fn new(values: Array3<f32>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "trigger pattern shape ({c},{h},{w}) has a zero dimension"
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v) || !v.is_finite()) {
            return Err(Error::invalid("trigger pattern entries must lie in [0,1]"));
        }
        Ok(TriggerPattern { values })
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// A placed hardware trigger: what to stamp, where, and which fingerprint
/// it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub pattern: TriggerPattern,
    /// Top-left corner (row, col) of the patch in the image grid.
    pub location: (usize, usize),
    pub fingerprint_digest: [u8; 32],
}

/// Mask-and-pattern pair produced by trigger recovery. The mask is
/// single-channel and broadcast over image channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTrigger {
    mask: Array2<f32>,
    pattern: Array3<f32>,
}

impl SoftTrigger {
    pub fn new(mask: Array2<f32>, pattern: Array3<f32>) -> Result<Self> {
        let (h, w) = mask.dim();
        let (pc, ph, pw) = pattern.dim();
        if pc == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("soft trigger dimensions must be positive"));
        }
        if (ph, pw) != (h, w) {
            return Err(Error::invalid(format!(
                "mask shape ({h},{w}) does not match pattern spatial shape ({ph},{pw})"
            )));
        }
        if mask.iter().any(|v| !(0.0..=1.0).contains(v) || !v.is_finite()) {
            return Err(Error::invalid("mask entries must lie in [0,1]"));
        }
        if pattern.iter().any(|v| !(0.0..=1.0).contains(v) || !v.is_finite()) {
            return Err(Error::invalid("pattern entries must lie in [0,1]"));
        }
        Ok(SoftTrigger { mask, pattern })
    }

    pub fn mask(&self) -> &Array2<f32> {
        &self.mask
    }

    pub fn pattern(&self) -> &Array3<f32> {
        &self.pattern
    }
}

/// Either trigger form, for call sites that measure accuracy under a trigger
/// without caring which kind it is.
#[derive(Debug, Clone, Copy)]
pub enum TriggerKind<'a> {
    Hw(&'a TriggerSpec),
    Soft(&'a SoftTrigger),
}

impl TriggerKind<'_> {
    pub fn apply(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        match self {
            TriggerKind::Hw(spec) => apply_hw_trigger(x, spec),
            TriggerKind::Soft(trig) => apply_soft_trigger(x, trig),
        }
    }
}

/// Stamps the patch onto the image, overwriting pixels under it.
pub fn apply_hw_trigger(x: &Array3<f32>, spec: &TriggerSpec) -> Result<Array3<f32>> {
    let (c, h, w) = x.dim();
    let (pc, ph, pw) = spec.pattern.dim();
    let (row, col) = spec.location;
    if pc != c {
        return Err(Error::invalid(format!(
            "patch has {pc} channels but image has {c}"
        )));
    }
    if row + ph > h || col + pw > w {
        return Err(Error::invalid(format!(
            "patch {ph}x{pw} at ({row},{col}) overruns {h}x{w} image"
        )));
    }
    let mut out = x.clone();
    let pat = spec.pattern.values();
    for ci in 0..c {
        for i in 0..ph {
            for j in 0..pw {
                out[[ci, row + i, col + j]] = pat[[ci, i, j]];
            }
        }
    }
    Ok(out)
}

/// Blends the pattern into the image through the mask:
/// `out[c,i,j] = (1-m[i,j])*x[c,i,j] + m[i,j]*pattern[c,i,j]`.
pub fn apply_soft_trigger(x: &Array3<f32>, trig: &SoftTrigger) -> Result<Array3<f32>> {
    let (c, h, w) = x.dim();
    let (pc, ph, pw) = trig.pattern.dim();
    if (pc, ph, pw) != (c, h, w) {
        return Err(Error::invalid(format!(
            "image shape ({c},{h},{w}) does not match trigger shape ({pc},{ph},{pw})"
        )));
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let m = trig.mask[[i, j]];
                let v = (1.0 - m) * x[[ci, i, j]] + m * trig.pattern[[ci, i, j]];
                out[[ci, i, j]] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Euclidean norm of the pixel change the soft trigger causes on `x`.
pub fn perturbation_l2(x: &Array3<f32>, trig: &SoftTrigger) -> Result<f64> {
    let triggered = apply_soft_trigger(x, trig)?;
    let mut sum = 0.0f64;
    for (a, b) in triggered.iter().zip(x.iter()) {
        let d = (*a - *b) as f64;
        sum += d * d;
    }
    Ok(sum.sqrt())
}

/// Sum of absolute mask entries; the sparsity score recovery attacks
/// minimize.
pub fn mask_l1(trig: &SoftTrigger) -> f64 {
    trig.mask.iter().map(|&v| v.abs() as f64).sum()
}

#[derive(Serialize, Deserialize)]
struct TriggerSpecFile {
    pattern: Vec<Vec<Vec<f32>>>,
    location: [usize; 2],
    fingerprint_digest: String,
}

impl TriggerSpec {
    pub fn to_json(&self) -> String {
        let (c, h, w) = self.pattern.dim();
        let vals = self.pattern.values();
        let pattern = (0..c)
            .map(|ci| {
                (0..h)
                    .map(|i| (0..w).map(|j| vals[[ci, i, j]]).collect())
                    .collect()
            })
            .collect();
        let file = TriggerSpecFile {
            pattern,
            location: [self.location.0, self.location.1],
            fingerprint_digest: hex::encode(self.fingerprint_digest),
        };
        serde_json::to_string_pretty(&file).expect("trigger spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TriggerSpecFile = serde_json::from_str(text)
            .map_err(|e| Error::DataFormat(format!("trigger spec: {e}")))?;
        let c = file.pattern.len();
        let h = file.pattern.first().map_or(0, |p| p.len());
        let w = file.pattern.first().and_then(|p| p.first()).map_or(0, |r| r.len());
        let mut flat = Vec::with_capacity(c * h * w);
        for plane in &file.pattern {
            if plane.len() != h {
                return Err(Error::DataFormat("ragged trigger pattern rows".into()));
            }
            for row in plane {
                if row.len() != w {
                    return Err(Error::DataFormat("ragged trigger pattern columns".into()));
                }
                flat.extend_from_slice(row);
            }
        }
        let values = Array3::from_shape_vec((c, h, w), flat)
            .map_err(|e| Error::DataFormat(format!("trigger pattern shape: {e}")))?;
        let digest_vec = hex::decode(&file.fingerprint_digest)
            .map_err(|e| Error::DataFormat(format!("fingerprint digest hex: {e}")))?;
        let fingerprint_digest: [u8; 32] = digest_vec
            .try_into()
            .map_err(|_| Error::DataFormat("fingerprint digest must be 32 bytes".into()))?;
        Ok(TriggerSpec {
            pattern: TriggerPattern::new(values)?,
            location: (file.location[0], file.location[1]),
            fingerprint_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct SoftTriggerManifest {
    mask_file: String,
    pattern_file: String,
    channels: usize,
    height: usize,
    width: usize,
    dtype: String,
}

fn write_f32_le(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32_le(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::DataFormat(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expected * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl SoftTrigger {
    /// Writes `<stem>.json` plus two raw little-endian f32 arrays next to it.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let (c, h, w) = self.pattern.dim();
        let mask_file = format!("{stem}-mask.f32");
        let pattern_file = format!("{stem}-pattern.f32");
        write_f32_le(&dir.join(&mask_file), self.mask.as_slice().expect("contiguous"))?;
        write_f32_le(
            &dir.join(&pattern_file),
            self.pattern.as_slice().expect("contiguous"),
        )?;
        let manifest = SoftTriggerManifest {
            mask_file,
            pattern_file,
            channels: c,
            height: h,
            width: w,
            dtype: "f32-le".into(),
        };
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: SoftTriggerManifest = serde_json::from_str(&text)
            .map_err(|e| Error::DataFormat(format!("soft trigger manifest: {e}")))?;
        if manifest.dtype != "f32-le" {
            return Err(Error::DataFormat(format!(
                "unsupported dtype {:?}",
                manifest.dtype
            )));
        }
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let (c, h, w) = (manifest.channels, manifest.height, manifest.width);
        let mask = read_f32_le(&dir.join(&manifest.mask_file), h * w)?;
        let pattern = read_f32_le(&dir.join(&manifest.pattern_file), c * h * w)?;
        SoftTrigger::new(
            Array2::from_shape_vec((h, w), mask).expect("length checked"),
            Array3::from_shape_vec((c, h, w), pattern).expect("length checked"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen::<f32>())
    }

    fn random_soft(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> SoftTrigger {
        SoftTrigger::new(
            Array2::from_shape_fn((h, w), |_| rng.gen::<f32>()),
            Array3::from_shape_fn((c, h, w), |_| rng.gen::<f32>()),
        )
        .unwrap()
    }

    fn ones_patch_spec(c: usize, side: usize, location: (usize, usize)) -> TriggerSpec {
        TriggerSpec {
            pattern: TriggerPattern::new(Array3::ones((c, side, side))).unwrap(),
            location,
            fingerprint_digest: [7u8; 32],
        }
    }

    #[test]
    fn hw_trigger_overwrites_patch() {
        let x = Array3::<f32>::zeros((3, 8, 8));
        let spec = ones_patch_spec(3, 3, (0, 0));
        let out = apply_hw_trigger(&x, &spec).unwrap();
        for c in 0..3 {
            for i in 0..8 {
                for j in 0..8 {
                    let expected = if i < 3 && j < 3 { 1.0 } else { 0.0 };
                    assert_eq!(out[[c, i, j]], expected);
                }
            }
        }
    }

    #[test]
    fn hw_trigger_leaves_rest_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 3, 10, 10);
        let spec = ones_patch_spec(3, 3, (4, 5));
        let out = apply_hw_trigger(&x, &spec).unwrap();
        for c in 0..3 {
            for i in 0..10 {
                for j in 0..10 {
                    let inside = (4..7).contains(&i) && (5..8).contains(&j);
                    if !inside {
                        assert_eq!(out[[c, i, j]], x[[c, i, j]]);
                    }
                }
            }
        }
    }

    #[test]
    fn hw_trigger_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(&mut rng, 3, 8, 8);
        let spec = ones_patch_spec(3, 3, (2, 2));
        let once = apply_hw_trigger(&x, &spec).unwrap();
        let twice = apply_hw_trigger(&once, &spec).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn hw_trigger_out_of_bounds_rejected() {
        let x = Array3::<f32>::zeros((3, 8, 8));
        let spec = ones_patch_spec(3, 3, (6, 6));
        assert!(apply_hw_trigger(&x, &spec).is_err());
    }

    #[test]
    fn soft_trigger_identity_when_mask_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 3, 6, 6);
        let trig = SoftTrigger::new(
            Array2::zeros((6, 6)),
            Array3::from_shape_fn((3, 6, 6), |_| rng.gen::<f32>()),
        )
        .unwrap();
        assert_eq!(apply_soft_trigger(&x, &trig).unwrap(), x);
    }

    #[test]
    fn soft_trigger_replaces_when_mask_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_image(&mut rng, 3, 6, 6);
        let pattern = random_image(&mut rng, 3, 6, 6);
        let trig = SoftTrigger::new(Array2::ones((6, 6)), pattern.clone()).unwrap();
        assert_eq!(apply_soft_trigger(&x, &trig).unwrap(), pattern);
    }

    #[test]
    fn soft_trigger_blend_value() {
        let x = Array3::from_elem((3, 4, 4), 0.4f32);
        let trig = SoftTrigger::new(
            Array2::from_elem((4, 4), 0.5f32),
            Array3::from_elem((3, 4, 4), 0.8f32),
        )
        .unwrap();
        let out = apply_soft_trigger(&x, &trig).unwrap();
        for &v in out.iter() {
            assert!((v - 0.6).abs() < 1e-6, "blend gave {v}");
        }
    }

    #[test]
    fn soft_trigger_shape_mismatch_rejected() {
        let x = Array3::<f32>::zeros((3, 6, 6));
        let trig = random_soft(&mut ChaCha8Rng::seed_from_u64(5), 3, 5, 5);
        assert!(apply_soft_trigger(&x, &trig).is_err());
    }

    #[test]
    fn soft_trigger_affine_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x1 = random_image(&mut rng, 3, 5, 5);
            let x2 = random_image(&mut rng, 3, 5, 5);
            let trig = random_soft(&mut rng, 3, 5, 5);
            let alpha: f32 = rng.gen();
            let mixed = &x1 * alpha + &x2 * (1.0 - alpha);
            let lhs = apply_soft_trigger(&mixed, &trig).unwrap();
            let rhs = apply_soft_trigger(&x1, &trig).unwrap() * alpha
                + apply_soft_trigger(&x2, &trig).unwrap() * (1.0 - alpha);
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                assert!((a - b).abs() < 1e-5, "affine mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn perturbation_zero_for_zero_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_image(&mut rng, 3, 6, 6);
        let trig = SoftTrigger::new(
            Array2::zeros((6, 6)),
            Array3::from_shape_fn((3, 6, 6), |_| rng.gen::<f32>()),
        )
        .unwrap();
        assert_eq!(perturbation_l2(&x, &trig).unwrap(), 0.0);
    }

    #[test]
    fn perturbation_unit_for_single_flipped_pixel() {
        let x = Array3::<f32>::zeros((3, 4, 4));
        let mut mask = Array2::<f32>::zeros((4, 4));
        mask[[1, 2]] = 1.0;
        let mut pattern = Array3::<f32>::zeros((3, 4, 4));
        pattern[[0, 1, 2]] = 1.0;
        let trig = SoftTrigger::new(mask, pattern).unwrap();
        let norm = perturbation_l2(&x, &trig).unwrap();
        assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
    }

    #[test]
    fn perturbation_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let x = random_image(&mut rng, 3, 5, 5);
            let trig = random_soft(&mut rng, 3, 5, 5);
            let triggered = apply_soft_trigger(&x, &trig).unwrap();
            let mut sum = 0.0f64;
            for (a, b) in triggered.iter().zip(x.iter()) {
                sum += ((a - b) as f64).powi(2);
            }
            let got = perturbation_l2(&x, &trig).unwrap();
            assert!((got - sum.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn perturbation_bounded_by_sqrt_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bound = (3.0f64 * 5.0 * 5.0).sqrt();
        for _ in 0..20 {
            let x = random_image(&mut rng, 3, 5, 5);
            let trig = random_soft(&mut rng, 3, 5, 5);
            assert!(perturbation_l2(&x, &trig).unwrap() <= bound + 1e-9);
        }
    }

    #[test]
    fn mask_l1_values() {
        let zero = SoftTrigger::new(Array2::zeros((4, 4)), Array3::zeros((3, 4, 4))).unwrap();
        assert_eq!(mask_l1(&zero), 0.0);
        let mut m = Array2::<f32>::zeros((4, 4));
        m[[0, 0]] = 1.0;
        m[[1, 1]] = 1.0;
        m[[2, 3]] = 1.0;
        let three = SoftTrigger::new(m, Array3::zeros((3, 4, 4))).unwrap();
        assert!((mask_l1(&three) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn hw_equals_soft_with_binary_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_image(&mut rng, 3, 8, 8);
        let patch = Array3::from_shape_fn((3, 3, 3), |_| rng.gen::<f32>());
        let spec = TriggerSpec {
            pattern: TriggerPattern::new(patch.clone()).unwrap(),
            location: (2, 4),
            fingerprint_digest: [0u8; 32],
        };
        let mut mask = Array2::<f32>::zeros((8, 8));
        let mut pattern = Array3::<f32>::zeros((3, 8, 8));
        for c in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    mask[[2 + i, 4 + j]] = 1.0;
                    pattern[[c, 2 + i, 4 + j]] = patch[[c, i, j]];
                }
            }
        }
        let soft = SoftTrigger::new(mask, pattern).unwrap();
        let hard_out = apply_hw_trigger(&x, &spec).unwrap();
        let soft_out = apply_soft_trigger(&x, &soft).unwrap();
        assert_eq!(hard_out, soft_out);
    }

    #[test]
    fn trigger_spec_json_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pattern = Array3::from_shape_fn((3, 3, 3), |_| rng.gen::<f32>());
        let spec = TriggerSpec {
            pattern: TriggerPattern::new(pattern).unwrap(),
            location: (5, 6),
            fingerprint_digest: [42u8; 32],
        };
        let restored = TriggerSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, restored);
    }

    #[test]
    fn soft_trigger_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let trig = random_soft(&mut rng, 3, 6, 6);
        let dir = tempfile::tempdir().unwrap();
        let manifest = trig.save(dir.path(), "recovered").unwrap();
        let restored = SoftTrigger::load(&manifest).unwrap();
        assert_eq!(trig, restored);
    }

    #[test]
    fn out_of_range_entries_rejected() {
        assert!(TriggerPattern::new(Array3::from_elem((1, 2, 2), 1.5f32)).is_err());
        assert!(SoftTrigger::new(
            Array2::from_elem((2, 2), -0.1f32),
            Array3::zeros((1, 2, 2))
        )
        .is_err());
    }
}
