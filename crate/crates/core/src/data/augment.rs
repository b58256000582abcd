//! Training-time image augmentation.
//!
//! Source pretraining uses horizontal flips and zero-pad + random crop;
//! target fine-tuning adds random erasing. Evaluation leaves images as loaded.

use ndarray::{s, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SourcePretrain,
    TargetFinetune,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Zero padding per side before the random crop.
    pub pad: usize,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, pad: 4, erase_prob: 0.5, erase_area: (0.02, 0.4), erase_aspect: (0.3, 3.33) }
    }
}

pub fn hflip(image: &Array3<f64>) -> Array3<f64> {
    image.slice(s![.., .., ..;-1]).to_owned()
}

/// Zero-pads by `pad` on each side and crops back at offset `(top, left)` in the padded frame.
pub fn pad_crop(image: &Array3<f64>, pad: usize, top: usize, left: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let mut padded = Array3::<f64>::zeros((c, h + 2 * pad, w + 2 * pad));
    padded.slice_mut(s![.., pad..pad + h, pad..pad + w]).assign(image);
    padded.slice(s![.., top..top + h, left..left + w]).to_owned()
}

/// Replaces a random rectangle with the per-channel image mean.
///
/// Tries up to 100 rectangle draws; returns `false` if none fit.
pub fn random_erase<R: Rng + ?Sized>(image: &mut Array3<f64>, cfg: &AugmentConfig, rng: &mut R) -> bool {
    let (c, h, w) = image.dim();
    let area = (h * w) as f64;
    let means: Vec<f64> = (0..c).map(|ch| image.index_axis(Axis(0), ch).mean().unwrap_or(0.0)).collect();
    for _ in 0..100 {
        let target = rng.random_range(cfg.erase_area.0..=cfg.erase_area.1) * area;
        let log_ratio = rng.random_range(cfg.erase_aspect.0.ln()..=cfg.erase_aspect.1.ln());
        let aspect = log_ratio.exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        for (ch, &m) in means.iter().enumerate() {
            image.slice_mut(s![ch, top..top + eh, left..left + ew]).fill(m);
        }
        return true;
    }
    false
}

/// Applies the phase's augmentation chain. Shape is always preserved.
pub fn augment<R: Rng + ?Sized>(image: &Array3<f64>, phase: Phase, cfg: &AugmentConfig, rng: &mut R) -> Array3<f64> {
    if phase == Phase::Eval {
        return image.clone();
    }
    let mut out = if rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)) { hflip(image) } else { image.clone() };
    if cfg.pad > 0 {
        let top = rng.random_range(0..=2 * cfg.pad);
        let left = rng.random_range(0..=2 * cfg.pad);
        out = pad_crop(&out, cfg.pad, top, left);
    }
    if phase == Phase::TargetFinetune && rng.random_bool(cfg.erase_prob.clamp(0.0, 1.0)) {
        random_erase(&mut out, cfg, rng);
    }
    out
}
