//! Multimodal samples, the modality-incomplete protocol and preprocessing.
//!
//! A [`Sample`] pairs an RGB image with an organized point grid of the same
//! resolution. Either modality may be absent; [`ModalityMask`] records which
//! ones were genuinely observed. After [`fill_pseudo`] an absent modality is
//! represented by an all-ones tensor while the mask keeps reporting it as
//! missing, which is how the rest of the pipeline tells real from pseudo
//! inputs.

mod io;
mod missing;
mod preprocess;
mod synth;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, save_dataset};
pub use missing::{apply_missing, missing_counts, MissingCounts, MissingMode, MissingSpec};
pub use preprocess::{
    fill_pseudo, remove_background_plane, resize_to_grid, RANSAC_ITERATIONS, RANSAC_THRESHOLD,
};
pub use synth::{
    synth_anomaly, synth_dataset, synth_normal, AnomalyKind, SynthConfig, CATEGORIES,
};

/// `H × W × 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        RgbImage {
            height,
            width,
            pixels: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn px(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_px(&mut self, r: usize, c: usize, v: [f64; 3]) {
        let i = (r * self.width + c) * 3;
        self.pixels[i..i + 3].copy_from_slice(&v);
    }
}

/// Organized point cloud: one xyz triple per pixel plus a validity bit.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<f64>,
    pub validity: Vec<bool>,
}

impl PointGrid {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        PointGrid {
            height,
            width,
            coords: vec![value; height * width * 3],
            validity: vec![true; height * width],
        }
    }

    #[inline]
    pub fn point(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        [self.coords[i], self.coords[i + 1], self.coords[i + 2]]
    }

    #[inline]
    pub fn set_point(&mut self, r: usize, c: usize, p: [f64; 3]) {
        let i = (r * self.width + c) * 3;
        self.coords[i..i + 3].copy_from_slice(&p);
    }

    #[inline]
    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        self.validity[r * self.width + c]
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|v| **v).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageLabel {
    Normal,
    Anomalous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub anomaly_mask: Vec<bool>,
    pub label: ImageLabel,
}

impl GroundTruth {
    pub fn normal(height: usize, width: usize) -> Self {
        GroundTruth {
            height,
            width,
            anomaly_mask: vec![false; height * width],
            label: ImageLabel::Normal,
        }
    }

    pub fn anomalous_pixels(&self) -> usize {
        self.anomaly_mask.iter().filter(|m| **m).count()
    }

    /// `label == Anomalous` exactly when some pixel is marked.
    pub fn is_consistent(&self) -> bool {
        (self.label == ImageLabel::Anomalous) == (self.anomalous_pixels() > 0)
    }
}

/// Which modalities were genuinely observed. At least one is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub has_rgb: bool,
    pub has_pc: bool,
}

impl ModalityMask {
    pub const COMPLETE: ModalityMask = ModalityMask {
        has_rgb: true,
        has_pc: true,
    };
    pub const RGB_ONLY: ModalityMask = ModalityMask {
        has_rgb: true,
        has_pc: false,
    };
    pub const PC_ONLY: ModalityMask = ModalityMask {
        has_rgb: false,
        has_pc: true,
    };

    pub fn is_complete(self) -> bool {
        self.has_rgb && self.has_pc
    }

    pub fn is_valid(self) -> bool {
        self.has_rgb || self.has_pc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub category: String,
    pub rgb: Option<RgbImage>,
    pub pc: Option<PointGrid>,
    pub gt: GroundTruth,
    pub mask: ModalityMask,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.gt.height
    }

    pub fn width(&self) -> usize {
        self.gt.width
    }

    pub fn is_complete(&self) -> bool {
        self.mask.is_complete() && self.rgb.is_some() && self.pc.is_some()
    }

    /// A modality tensor is present iff observed, or it is a pseudo (all-ones) fill.
    pub fn check_invariants(&self) -> bool {
        let rgb_ok = self.mask.has_rgb == self.rgb.is_some()
            || (!self.mask.has_rgb && self.rgb.as_ref().is_some_and(|r| r.pixels.iter().all(|v| *v == 1.0)));
        let pc_ok = self.mask.has_pc == self.pc.is_some()
            || (!self.mask.has_pc && self.pc.as_ref().is_some_and(|p| p.coords.iter().all(|v| *v == 1.0)));
        self.mask.is_valid() && rgb_ok && pc_ok && self.gt.is_consistent()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiiadDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub categories: Vec<String>,
}

impl MiiadDataset {
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.test)
    }
}
