//! Procedural pedestrian-like images with persistent identity signatures
//! and a global per-domain appearance shift.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Sample, SampleOrigin};
use crate::error::{Error, Result};

/// Global appearance of a domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    /// Rotation of colors around the gray axis, in degrees.
    pub hue_degrees: f64,
    pub background: [f64; 3],
    /// Multiplicative illumination.
    pub gain: f64,
    /// Additive illumination.
    pub offset: f64,
}

impl DomainStyle {
    pub const A: DomainStyle = DomainStyle { hue_degrees: 0.0, background: [0.55, 0.55, 0.5], gain: 1.0, offset: 0.0 };
    pub const B: DomainStyle = DomainStyle { hue_degrees: 120.0, background: [0.2, 0.25, 0.4], gain: 0.65, offset: 0.12 };

    pub fn preset(name: &str) -> Option<DomainStyle> {
        match name.to_ascii_uppercase().as_str() {
            "A" => Some(Self::A),
            "B" => Some(Self::B),
            _ => None,
        }
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        // Rodrigues rotation about (1,1,1)/sqrt(3).
        let t = self.hue_degrees.to_radians();
        let (c, s) = (t.cos(), t.sin());
        let a = (1.0 - c) / 3.0;
        let b = s / 3f64.sqrt();
        [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub cameras: usize,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { height: 64, width: 32, cameras: 4, noise_std: 0.03 }
    }
}

#[derive(Debug, Clone)]
struct Signature {
    torso: [f64; 3],
    legs: [f64; 3],
    skin: [f64; 3],
    /// Body half-width as a fraction of the image width.
    half_width: f64,
    /// Fraction of the image height covered by the body.
    height: f64,
    stripe: Option<[f64; 3]>,
    /// -1 left, 0 none, 1 right.
    bag_side: i8,
    bag: [f64; 3],
    shoes: [f64; 3],
}

const PALETTE: [[f64; 3]; 10] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.55, 0.2],
    [0.15, 0.25, 0.8],
    [0.9, 0.85, 0.2],
    [0.95, 0.95, 0.95],
    [0.08, 0.08, 0.08],
    [0.55, 0.3, 0.1],
    [0.6, 0.2, 0.7],
    [0.95, 0.55, 0.1],
    [0.5, 0.5, 0.55],
];

fn palette_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base = PALETTE[rng.random_range(0..PALETTE.len())];
    let mut c = [0.0; 3];
    for (o, b) in c.iter_mut().zip(base) {
        *o = (b + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
    }
    c
}

impl Signature {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let skin_tone = rng.random_range(0.35..0.9);
        Self {
            torso: palette_color(rng),
            legs: palette_color(rng),
            skin: [skin_tone, skin_tone * 0.78, skin_tone * 0.62],
            half_width: rng.random_range(0.2..0.3),
            height: rng.random_range(0.78..0.92),
            stripe: rng.random_bool(0.5).then(|| palette_color(rng)),
            bag_side: rng.random_range(-1..=1),
            bag: palette_color(rng),
            shoes: palette_color(rng),
        }
    }
}

fn sub_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

fn render(sig: &Signature, style: &DomainStyle, cfg: &SynthConfig, camera: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = Array3::<f64>::zeros((3, h, w));

    // Per-image jitter.
    let dx = rng.random_range(-0.08..0.08);
    let dy = rng.random_range(-0.04..0.04);
    let scale = rng.random_range(0.94..1.06);
    let stride = rng.random_range(0.0..0.1);
    let light = rng.random_range(0.85..1.15);
    let clutter_color = palette_color(rng);
    let clutter = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.1..0.35), rng.random_range(0.1..0.35));
    let cam_tint = [0.04 * (camera as f64 - 1.5), 0.0, -0.04 * (camera as f64 - 1.5)];

    let body_h = sig.height * scale;
    let top = 0.5 - body_h / 2.0 + dy;
    let cx = 0.5 + dx;
    let head_r = 0.09 * body_h;
    let head_cy = top + head_r;
    let torso_top = top + 2.0 * head_r;
    let torso_bottom = torso_top + 0.4 * body_h;
    let legs_bottom = top + body_h;
    let hw = sig.half_width * scale;

    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let mut color = style.background;
            for (c, val) in color.iter_mut().enumerate() {
                *val += 0.08 * (v - 0.5) * if c == 1 { 1.0 } else { -0.5 };
            }
            if (u - clutter.0).abs() < clutter.2 / 2.0 && (v - clutter.1).abs() < clutter.3 / 2.0 {
                color = [
                    0.5 * (color[0] + clutter_color[0]),
                    0.5 * (color[1] + clutter_color[1]),
                    0.5 * (color[2] + clutter_color[2]),
                ];
            }
            let du = u - cx;
            // head (ellipse; pixels are twice as tall as wide in normalized coords)
            let hx = du * (w as f64 / h as f64) * 2.0;
            if (hx * hx + (v - head_cy) * (v - head_cy)).sqrt() < head_r {
                color = sig.skin;
            } else if v >= torso_top && v < torso_bottom && du.abs() < hw {
                color = sig.torso;
                if let Some(stripe) = sig.stripe {
                    let rel = (v - torso_top) / (torso_bottom - torso_top);
                    if (0.4..0.6).contains(&rel) {
                        color = stripe;
                    }
                }
            } else if v >= torso_bottom && v < legs_bottom {
                let leg_gap = 0.03 + stride * (v - torso_bottom) / (legs_bottom - torso_bottom);
                let in_leg = du.abs() < hw * 0.85 && du.abs() > leg_gap;
                if in_leg {
                    color = if v > legs_bottom - 0.05 { sig.shoes } else { sig.legs };
                }
            }
            if sig.bag_side != 0 {
                let bag_cx = cx + f64::from(sig.bag_side) * (hw + 0.07);
                let bag_cy = torso_bottom - 0.02;
                if (u - bag_cx).abs() < 0.07 && (v - bag_cy).abs() < 0.07 {
                    color = sig.bag;
                }
            }
            for c in 0..3 {
                img[[c, y, x]] = color[c] * light + cam_tint[c];
            }
        }
    }

    let rot = style.rotation();
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("valid std");
    for y in 0..h {
        for x in 0..w {
            let px = [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]];
            for c in 0..3 {
                let rotated = rot[c][0] * px[0] + rot[c][1] * px[1] + rot[c][2] * px[2];
                let lit = style.gain * rotated + style.offset + noise.sample(rng);
                img[[c, y, x]] = lit.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Generates `n_ids * imgs_per_id` samples, identity-major order.
///
/// Identity signatures and per-image jitter depend only on `seed`, so two
/// styles with the same seed show the same people under different appearance.
pub fn synth_generate(n_ids: usize, imgs_per_id: usize, style: &DomainStyle, seed: u64, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if n_ids < 2 {
        return Err(Error::Config(format!("synthetic dataset needs at least 2 identities, got {n_ids}")));
    }
    if cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Config("synthetic image size must be positive".into()));
    }
    let cameras = cfg.cameras.max(1);
    let mut out = Vec::with_capacity(n_ids * imgs_per_id);
    for id in 0..n_ids {
        let mut sig_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, id as u64, u64::MAX));
        let sig = Signature::draw(&mut sig_rng);
        for index in 0..imgs_per_id {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, id as u64, index as u64));
            let camera = index % cameras;
            out.push(Sample {
                image: render(&sig, style, cfg, camera, &mut rng),
                identity: Some(id),
                camera: Some(camera),
                origin: SampleOrigin::Synthetic { identity: id, index },
            });
        }
    }
    Ok(out)
}

/// Splits a labelled set into query (first `per_id` images of each identity) and gallery.
pub fn query_gallery_split(samples: Vec<Sample>, per_id: usize) -> (Vec<Sample>, Vec<Sample>) {
    let mut seen = std::collections::BTreeMap::<Option<usize>, usize>::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for s in samples {
        let count = seen.entry(s.identity).or_default();
        if *count < per_id {
            query.push(s);
        } else {
            gallery.push(s);
        }
        *count += 1;
    }
    (query, gallery)
}
