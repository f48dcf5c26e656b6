//! Procedural normal and defective samples.
//!
//! Each category is a heightmap object resting on a slightly tilted background
//! plane. The RGB view is rendered from the same geometry (Lambertian shading
//! plus a curvature tint) with a category texture on top, so geometric
//! defects leave a weak trace in RGB while color defects leave none in 3D.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GroundTruth, ImageLabel, MiiadDataset, ModalityMask, PointGrid, RgbImage, Sample};
use crate::error::{Error, Result};
use crate::seed;

pub const CATEGORIES: [&str; 3] = ["dome", "disk", "slab"];

const BACKGROUND_GRAY: f64 = 0.35;
const PIXEL_NOISE: f64 = 0.01;
const DEPTH_NOISE: f64 = 0.0008;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Bump,
    Dent,
    ColorBlotch,
    Hole,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::Bump,
        AnomalyKind::Dent,
        AnomalyKind::ColorBlotch,
        AnomalyKind::Hole,
    ];
}

fn base_color(category: &str) -> Option<[f64; 3]> {
    match category {
        "dome" => Some([0.78, 0.56, 0.34]),
        "disk" => Some([0.40, 0.56, 0.76]),
        "slab" => Some([0.56, 0.70, 0.44]),
        _ => None,
    }
}

#[inline]
fn scene_xy(r: usize, c: usize, size: usize) -> (f64, f64) {
    let s = size as f64;
    ((c as f64 + 0.5) / s - 0.5, (r as f64 + 0.5) / s - 0.5)
}

/// Object height above the background plane, zero off the object.
fn object_height(category: &str, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cx = rng.random_range(-0.04..0.04);
    let cy = rng.random_range(-0.04..0.04);
    let mut h = vec![0.0; size * size];
    match category {
        "dome" => {
            let radius: f64 = rng.random_range(0.30..0.36);
            let peak = rng.random_range(0.12..0.16);
            for r in 0..size {
                for c in 0..size {
                    let (x, y) = scene_xy(r, c, size);
                    let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (radius * radius);
                    if d2 < 1.0 {
                        h[r * size + c] = peak * (1.0 - d2).sqrt();
                    }
                }
            }
        }
        "disk" => {
            let radius: f64 = rng.random_range(0.32..0.38);
            let base = rng.random_range(0.045..0.055);
            let wavelength = rng.random_range(0.075..0.09);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for r in 0..size {
                for c in 0..size {
                    let (x, y) = scene_xy(r, c, size);
                    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    if d < radius {
                        let ridge = 0.5 * (1.0 + (std::f64::consts::TAU * d / wavelength + phase).cos());
                        h[r * size + c] = base + 0.018 * ridge;
                    }
                }
            }
        }
        "slab" => {
            let half = rng.random_range(0.28..0.34);
            let base = rng.random_range(0.055..0.065);
            let waves: Vec<(f64, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        rng.random_range(14.0..26.0),
                        rng.random_range(0.0..std::f64::consts::PI),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            for r in 0..size {
                for c in 0..size {
                    let (x, y) = scene_xy(r, c, size);
                    if (x - cx).abs() < half && (y - cy).abs() < half {
                        let tex: f64 = waves
                            .iter()
                            .map(|(f, th, ph)| (f * (x * th.cos() + y * th.sin()) + ph).sin())
                            .sum::<f64>()
                            / 4.0;
                        h[r * size + c] = base + 0.006 * tex;
                    }
                }
            }
        }
        _ => unreachable!("category validated by caller"),
    }
    h
}

/// Surface texture added on top of the shaded base color.
fn texture(category: &str, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let freq = rng.random_range(0.9..1.1);
    (0..size * size)
        .map(|i| {
            let (x, y) = scene_xy(i / size, i % size, size);
            match category {
                "dome" => 0.05 * (12.0 * freq * y.atan2(x) + phase).sin(),
                "disk" => 0.03 * (40.0 * freq * x + phase).sin(),
                _ => 0.04 * (31.0 * freq * x + phase).sin() * (27.0 * freq * y - phase).sin(),
            }
        })
        .collect()
}

fn z_at(pc: &PointGrid, r: isize, c: isize) -> f64 {
    let n = pc.height as isize;
    let r = r.clamp(0, n - 1) as usize;
    let c = c.clamp(0, pc.width as isize - 1) as usize;
    pc.point(r, c)[2]
}

/// Lambertian shade and curvature tint at each pixel, from the z channel.
fn shading(pc: &PointGrid) -> (Vec<f64>, Vec<f64>) {
    let n = pc.height;
    let step = 1.0 / n as f64;
    let light = {
        let l = [0.4f64, -0.3, 1.0];
        let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / norm, l[1] / norm, l[2] / norm]
    };
    let mut shade = vec![0.0; n * pc.width];
    let mut tint = vec![0.0; n * pc.width];
    for r in 0..n as isize {
        for c in 0..pc.width as isize {
            let dzdx = (z_at(pc, r, c + 1) - z_at(pc, r, c - 1)) / (2.0 * step);
            let dzdy = (z_at(pc, r + 1, c) - z_at(pc, r - 1, c)) / (2.0 * step);
            let norm = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
            let ndotl = (-dzdx * light[0] - dzdy * light[1] + light[2]) / norm;
            let lap = (z_at(pc, r + 1, c) + z_at(pc, r - 1, c) + z_at(pc, r, c + 1)
                + z_at(pc, r, c - 1)
                - 4.0 * z_at(pc, r, c))
                / (step * step);
            let i = r as usize * pc.width + c as usize;
            shade[i] = 0.45 + 0.55 * ndotl.max(0.0);
            tint[i] = (0.02 * lap).clamp(-0.08, 0.08);
        }
    }
    (shade, tint)
}

/// A complete, defect-free sample. Deterministic in `(category, size, seed)`.
pub fn synth_normal(category: &str, size: usize, seed: u64) -> Result<Sample> {
    let color = base_color(category).ok_or_else(|| Error::UnknownCategory(category.to_string()))?;
    if size < 8 {
        return Err(Error::invalid(format!("grid size {size} is below the minimum of 8")));
    }
    let mut rng = seed::rng(seed, &[seed::tag("synth_normal"), seed::tag(category), size as u64]);
    let height = object_height(category, size, &mut rng);
    let tex = texture(category, size, &mut rng);
    let tilt_x = rng.random_range(-0.03..0.03);
    let tilt_y = rng.random_range(-0.03..0.03);
    let depth_noise = Normal::new(0.0, DEPTH_NOISE).expect("valid sigma");
    let pixel_noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");

    let mut pc = PointGrid::filled(size, size, 0.0);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = scene_xy(r, c, size);
            let z = tilt_x * x + tilt_y * y + height[r * size + c] + depth_noise.sample(&mut rng);
            pc.set_point(r, c, [x, y, z]);
        }
    }

    let (shade, tint) = shading(&pc);
    let mut rgb = RgbImage::filled(size, size, 0.0);
    for r in 0..size {
        for c in 0..size {
            let i = r * size + c;
            let mut px = [0.0; 3];
            for (ch, v) in px.iter_mut().enumerate() {
                let surface = if height[i] > 0.0 {
                    color[ch] * shade[i] + tex[i] + tint[i]
                } else {
                    BACKGROUND_GRAY
                };
                *v = (surface + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            rgb.set_px(r, c, px);
        }
    }

    Ok(Sample {
        id: seed,
        category: category.to_string(),
        rgb: Some(rgb),
        pc: Some(pc),
        gt: GroundTruth::normal(size, size),
        mask: ModalityMask::COMPLETE,
    })
}

/// Injects one localized defect into a complete normal sample.
///
/// The anomaly mask is exactly the disk of pixels the defect touches.
pub fn synth_anomaly(base: &Sample, kind: AnomalyKind, seed: u64) -> Result<Sample> {
    if base.gt.label == ImageLabel::Anomalous {
        return Err(Error::invalid(format!("sample {} is already anomalous", base.id)));
    }
    let (Some(rgb), Some(pc)) = (&base.rgb, &base.pc) else {
        return Err(Error::invalid(format!("sample {} is not complete", base.id)));
    };
    if !base.mask.is_complete() {
        return Err(Error::invalid(format!("sample {} is not complete", base.id)));
    }
    let color = base_color(&base.category)
        .ok_or_else(|| Error::UnknownCategory(base.category.clone()))?;
    let (h, w) = (pc.height, pc.width);
    let mut rng = seed::rng(seed, &[seed::tag("synth_anomaly"), base.id, kind as u64]);

    let radius: f64 = (rng.random_range(0.06..0.11) * h as f64).max(2.0);
    let margin = radius.ceil() as usize + 1;
    // Defects sit on the object: pick a pixel well above the background.
    let plane_z = |r: usize, c: usize| {
        let z = pc.point(r, c)[2];
        let around = [pc.point(0, 0)[2], pc.point(h - 1, w - 1)[2]];
        z - 0.5 * (around[0] + around[1])
    };
    let candidates: Vec<(usize, usize)> = (margin..h.saturating_sub(margin))
        .flat_map(|r| (margin..w.saturating_sub(margin)).map(move |c| (r, c)))
        .filter(|&(r, c)| plane_z(r, c) > 0.03)
        .collect();
    let (cr, cc) = if candidates.is_empty() {
        (h / 2, w / 2)
    } else {
        candidates[rng.random_range(0..candidates.len())]
    };

    let mut mask = vec![false; h * w];
    let mut falloff = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let d = ((r as f64 - cr as f64).powi(2) + (c as f64 - cc as f64).powi(2)).sqrt();
            if d < radius {
                mask[r * w + c] = true;
                falloff[r * w + c] = (1.0 - (d / radius).powi(2)).powi(2);
            }
        }
    }

    let mut out_rgb = rgb.clone();
    let mut out_pc = pc.clone();
    match kind {
        AnomalyKind::Bump | AnomalyKind::Dent => {
            let sign = if kind == AnomalyKind::Bump { 1.0 } else { -1.0 };
            let amplitude = sign * rng.random_range(0.02..0.04);
            for (i, f) in falloff.iter().enumerate() {
                if mask[i] {
                    out_pc.coords[i * 3 + 2] += amplitude * f;
                }
            }
            let (shade0, tint0) = shading(pc);
            let (shade1, tint1) = shading(&out_pc);
            for i in 0..h * w {
                if mask[i] {
                    for ch in 0..3 {
                        let delta = color[ch] * (shade1[i] - shade0[i]) + (tint1[i] - tint0[i]);
                        let v = &mut out_rgb.pixels[i * 3 + ch];
                        *v = (*v + delta).clamp(0.0, 1.0);
                    }
                }
            }
        }
        AnomalyKind::Hole => {
            for i in 0..h * w {
                if mask[i] {
                    out_pc.validity[i] = false;
                    for ch in 0..3 {
                        out_rgb.pixels[i * 3 + ch] *= 0.55;
                    }
                }
            }
        }
        AnomalyKind::ColorBlotch => {
            let palette = [[0.85, 0.15, 0.15], [0.15, 0.15, 0.15], [0.9, 0.9, 0.2], [0.2, 0.8, 0.8]];
            let stain = palette[rng.random_range(0..palette.len())];
            for (i, f) in falloff.iter().enumerate() {
                if mask[i] {
                    let beta = 0.1 + 0.6 * f.sqrt();
                    for ch in 0..3 {
                        let v = &mut out_rgb.pixels[i * 3 + ch];
                        *v = ((1.0 - beta) * *v + beta * stain[ch]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    Ok(Sample {
        id: base.id,
        category: base.category.clone(),
        rgb: Some(out_rgb),
        pc: Some(out_pc),
        gt: GroundTruth {
            height: h,
            width: w,
            anomaly_mask: mask,
            label: ImageLabel::Anomalous,
        },
        mask: ModalityMask::COMPLETE,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub categories: Vec<String>,
    /// Training samples per category (all normal).
    pub n_train: usize,
    /// Test samples per category.
    pub n_test: usize,
    pub size: usize,
    pub seed: u64,
    /// Share of test samples that receive a defect.
    pub anomaly_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
            n_train: 60,
            n_test: 40,
            size: 32,
            seed: 7,
            anomaly_fraction: 0.5,
        }
    }
}

/// Builds a complete (no missing modality) dataset. Test defects cycle
/// through every [`AnomalyKind`].
pub fn synth_dataset(cfg: &SynthConfig) -> Result<MiiadDataset> {
    if cfg.categories.is_empty() {
        return Err(Error::config("data.categories", "at least one category is required"));
    }
    if !(0.0..=1.0).contains(&cfg.anomaly_fraction) {
        return Err(Error::config("data.anomaly_fraction", "must lie in [0, 1]"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut next_id = 0u64;
    for (ci, cat) in cfg.categories.iter().enumerate() {
        for i in 0..cfg.n_train {
            let s = seed::derive(cfg.seed, &[ci as u64, 0, i as u64]);
            let mut sample = synth_normal(cat, cfg.size, s)?;
            sample.id = next_id;
            next_id += 1;
            train.push(sample);
        }
        let n_anom = (cfg.anomaly_fraction * cfg.n_test as f64).round() as usize;
        for i in 0..cfg.n_test {
            let s = seed::derive(cfg.seed, &[ci as u64, 1, i as u64]);
            let mut sample = synth_normal(cat, cfg.size, s)?;
            sample.id = next_id;
            next_id += 1;
            if i < n_anom {
                let kind = AnomalyKind::ALL[i % AnomalyKind::ALL.len()];
                sample = synth_anomaly(&sample, kind, s)?;
            }
            test.push(sample);
        }
    }
    Ok(MiiadDataset {
        train,
        test,
        categories: cfg.categories.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_sample_shape_and_label() {
        let s = synth_normal("dome", 32, 0).unwrap();
        assert_eq!(s.rgb.as_ref().unwrap().pixels.len(), 32 * 32 * 3);
        assert_eq!(s.pc.as_ref().unwrap().coords.len(), 32 * 32 * 3);
        assert!(s.gt.anomaly_mask.iter().all(|m| !m));
        assert_eq!(s.gt.label, ImageLabel::Normal);
        assert!(s.rgb.unwrap().pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn normal_sample_is_deterministic() {
        assert_eq!(synth_normal("dome", 32, 0).unwrap(), synth_normal("dome", 32, 0).unwrap());
        let a = synth_normal("dome", 32, 0).unwrap();
        let b = synth_normal("dome", 32, 1).unwrap();
        assert_ne!(a.rgb.unwrap().pixels, b.rgb.unwrap().pixels);
        assert_ne!(a.pc.unwrap().coords, b.pc.unwrap().coords);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(synth_normal("torus", 32, 0), Err(Error::UnknownCategory(_))));
        assert!(synth_normal("dome", 7, 0).is_err());
        let bad = synth_anomaly(&synth_normal("dome", 32, 0).unwrap(), AnomalyKind::Bump, 1).unwrap();
        assert!(synth_anomaly(&bad, AnomalyKind::Dent, 2).is_err());
    }

    #[test]
    fn bump_is_local() {
        let base = synth_normal("dome", 32, 0).unwrap();
        let s = synth_anomaly(&base, AnomalyKind::Bump, 3).unwrap();
        let area = s.gt.anomalous_pixels();
        assert!(area >= 1 && area as f64 <= 0.25 * 32.0 * 32.0);
        assert_eq!(s.gt.label, ImageLabel::Anomalous);
        let (p0, p1) = (base.pc.as_ref().unwrap(), s.pc.as_ref().unwrap());
        for i in 0..32 * 32 {
            let changed = p0.coords[i * 3 + 2] != p1.coords[i * 3 + 2];
            assert_eq!(changed, s.gt.anomaly_mask[i], "pixel {i}");
        }
    }

    #[test]
    fn color_blotch_leaves_geometry() {
        let base = synth_normal("dome", 32, 0).unwrap();
        let s = synth_anomaly(&base, AnomalyKind::ColorBlotch, 3).unwrap();
        assert_eq!(s.pc, base.pc);
        assert_ne!(s.rgb, base.rgb);
    }

    #[test]
    fn hole_clears_validity_on_mask() {
        let base = synth_normal("dome", 32, 0).unwrap();
        let s = synth_anomaly(&base, AnomalyKind::Hole, 3).unwrap();
        let pc = s.pc.unwrap();
        for i in 0..32 * 32 {
            assert_eq!(!pc.validity[i], s.gt.anomaly_mask[i]);
        }
    }

    #[test]
    fn dataset_layout() {
        let cfg = SynthConfig {
            n_train: 4,
            n_test: 4,
            size: 16,
            ..Default::default()
        };
        let ds = synth_dataset(&cfg).unwrap();
        assert_eq!(ds.train.len(), 12);
        assert_eq!(ds.test.len(), 12);
        assert!(ds.train.iter().all(|s| s.gt.label == ImageLabel::Normal));
        assert_eq!(
            ds.test.iter().filter(|s| s.gt.label == ImageLabel::Anomalous).count(),
            6
        );
        assert!(ds.samples().all(Sample::check_invariants));
    }
}
