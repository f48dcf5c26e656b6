//! wasm-bindgen bindings for the static page in `www/`.
//!
//! Each export is a thin wrapper around a plain Rust function so the logic can
//! be tested natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use miiad_core::data::{synth_anomaly, synth_normal, AnomalyKind, ModalityMask, Sample};
use miiad_core::detection::{assign_groups, attention_weights};
use miiad_core::metrics::auroc;
use miiad_core::tensor::Mat;

/// One rendered sample: three RGBA images of `size × size` pixels.
#[wasm_bindgen]
pub struct SampleView {
    size: usize,
    rgb: Vec<u8>,
    depth: Vec<u8>,
    mask: Vec<u8>,
    defect_pixels: usize,
}

#[wasm_bindgen]
impl SampleView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn rgb(&self) -> Vec<u8> {
        self.rgb.clone()
    }

    pub fn depth(&self) -> Vec<u8> {
        self.depth.clone()
    }

    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }

    #[wasm_bindgen(getter, js_name = defectPixels)]
    pub fn defect_pixels(&self) -> usize {
        self.defect_pixels
    }
}

pub fn parse_defect(name: &str) -> Result<Option<AnomalyKind>, String> {
    match name {
        "" | "none" => Ok(None),
        "bump" => Ok(Some(AnomalyKind::Bump)),
        "dent" => Ok(Some(AnomalyKind::Dent)),
        "color_blotch" => Ok(Some(AnomalyKind::ColorBlotch)),
        "hole" => Ok(Some(AnomalyKind::Hole)),
        other => Err(format!("unknown defect `{other}`")),
    }
}

fn gray(v: f64) -> [u8; 4] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g, 255]
}

pub fn render(s: &Sample) -> SampleView {
    let size = s.height();
    let n = size * s.width();
    let mut rgb = Vec::with_capacity(4 * n);
    let mut depth = Vec::with_capacity(4 * n);
    let mut mask = Vec::with_capacity(4 * n);
    if let Some(img) = &s.rgb {
        for px in img.pixels.chunks(3) {
            rgb.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            rgb.push(255);
        }
    }
    if let Some(pc) = &s.pc {
        let z: Vec<f64> = pc.coords.chunks(3).map(|p| p[2]).collect();
        let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (i, v) in z.iter().enumerate() {
            if pc.validity[i] {
                depth.extend(gray((v - lo) / (hi - lo).max(1e-12)));
            } else {
                depth.extend([200, 40, 40, 255]);
            }
        }
    }
    for &m in &s.gt.anomaly_mask {
        mask.extend(if m { [255, 60, 60, 255] } else { [0, 0, 0, 255] });
    }
    SampleView {
        size,
        rgb,
        depth,
        mask,
        defect_pixels: s.gt.anomaly_mask.iter().filter(|m| **m).count(),
    }
}

pub fn make_sample(category: &str, size: usize, seed: u64, defect: &str) -> Result<Sample, String> {
    let base = synth_normal(category, size, seed).map_err(|e| e.to_string())?;
    match parse_defect(defect)? {
        None => Ok(base),
        Some(kind) => synth_anomaly(&base, kind, seed.wrapping_add(1)).map_err(|e| e.to_string()),
    }
}

/// Attention weights over `[pc tokens; rgb tokens]` for random queries and
/// keys, masked so that real and pseudo tokens only attend within their
/// group. Row-major `L × L` with `L = 2 · tokens`.
pub fn group_attention_weights(has_pc: bool, has_rgb: bool, tokens: usize, seed: u64) -> Result<Vec<f64>, String> {
    if tokens == 0 || tokens > 32 {
        return Err("tokens per modality must lie in 1..=32".into());
    }
    let l = 2 * tokens;
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_mat = || Mat::from_vec(l, d, (0..l * d).map(|_| rng.random_range(-1.5..1.5)).collect());
    let (q, k) = (rand_mat(), rand_mat());
    let groups = assign_groups(ModalityMask { has_rgb, has_pc }, tokens, tokens);
    let a = attention_weights(&q, &k, &groups.mask()).map_err(|e| e.to_string())?;
    Ok(a.as_slice().to_vec())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|_| format!("bad {what} `{t}`")))
        .collect()
}

/// Image-level AUROC from comma- or space-separated scores and 0/1 labels.
pub fn auroc_from_text(scores: &str, labels: &str) -> Result<f64, String> {
    let s: Vec<f64> = parse_list(scores, "score")?;
    let l: Vec<u8> = parse_list(labels, "label")?;
    if s.len() != l.len() {
        return Err(format!("{} scores but {} labels", s.len(), l.len()));
    }
    if l.iter().any(|v| *v > 1) {
        return Err("labels must be 0 or 1".into());
    }
    let l: Vec<bool> = l.into_iter().map(|v| v == 1).collect();
    auroc(&s, &l).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = synthSample)]
pub fn synth_sample(category: &str, size: usize, seed: u32, defect: &str) -> Result<SampleView, JsError> {
    make_sample(category, size, seed as u64, defect)
        .map(|s| render(&s))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = groupAttention)]
pub fn group_attention(has_pc: bool, has_rgb: bool, tokens: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    group_attention_weights(has_pc, has_rgb, tokens, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = aurocFromText)]
pub fn auroc_text(scores: &str, labels: &str) -> Result<f64, JsError> {
    auroc_from_text(scores, labels).map_err(|e| JsError::new(&e))
}
