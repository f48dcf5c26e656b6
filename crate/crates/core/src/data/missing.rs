//! Restructuring a complete dataset into a modality-incomplete one.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{MiiadDataset, ModalityMask, Sample};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingMode {
    /// Point clouds are dropped; affected samples are RGB-only.
    #[serde(alias = "pc")]
    PcMissing,
    /// Images are dropped; affected samples are point-cloud-only.
    #[serde(alias = "rgb")]
    RgbMissing,
    /// Half of the affected samples lose each modality.
    #[serde(alias = "both")]
    BothMissing,
}

impl std::str::FromStr for MissingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pc" | "pc_missing" => Ok(MissingMode::PcMissing),
            "rgb" | "rgb_missing" => Ok(MissingMode::RgbMissing),
            "both" | "both_missing" => Ok(MissingMode::BothMissing),
            other => Err(Error::invalid(format!("unknown missing mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingSpec {
    pub mode: MissingMode,
    pub rate: f64,
    pub seed: u64,
}

/// How many samples of a split end up in each modality pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MissingCounts {
    pub rgb_only: usize,
    pub pc_only: usize,
    pub complete: usize,
}

/// Counts for a split of `n` samples: `round(rate·n)` samples lose a
/// modality. In the both-missing mode the RGB-only group takes the odd one.
pub fn missing_counts(n: usize, mode: MissingMode, rate: f64) -> MissingCounts {
    let affected = ((rate * n as f64).round() as usize).min(n);
    let (rgb_only, pc_only) = match mode {
        MissingMode::PcMissing => (affected, 0),
        MissingMode::RgbMissing => (0, affected),
        MissingMode::BothMissing => (affected - affected / 2, affected / 2),
    };
    MissingCounts {
        rgb_only,
        pc_only,
        complete: n - affected,
    }
}

fn apply_split(samples: &[Sample], spec: &MissingSpec, split: &str) -> Vec<Sample> {
    let counts = missing_counts(samples.len(), spec.mode, spec.rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed::rng(spec.seed, &[seed::tag("apply_missing"), seed::tag(split)]));

    let mut out = samples.to_vec();
    for (k, &idx) in order.iter().enumerate() {
        let s = &mut out[idx];
        if k < counts.rgb_only {
            s.pc = None;
            s.mask = ModalityMask::RGB_ONLY;
        } else if k < counts.rgb_only + counts.pc_only {
            s.rgb = None;
            s.mask = ModalityMask::PC_ONLY;
        }
    }
    out
}

/// Removes modalities from a uniformly random subset of each split.
pub fn apply_missing(ds: &MiiadDataset, spec: &MissingSpec) -> Result<MiiadDataset> {
    if !(0.0..=1.0).contains(&spec.rate) || !spec.rate.is_finite() {
        return Err(Error::invalid(format!("missing rate {} is outside [0, 1]", spec.rate)));
    }
    if let Some(s) = ds.samples().find(|s| !s.is_complete()) {
        return Err(Error::invalid(format!(
            "sample {} is already incomplete; missing modalities are applied once",
            s.id
        )));
    }
    Ok(MiiadDataset {
        train: apply_split(&ds.train, spec, "train"),
        test: apply_split(&ds.test, spec, "test"),
        categories: ds.categories.clone(),
    })
}
