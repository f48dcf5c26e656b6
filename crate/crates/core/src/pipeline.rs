//! The assembled model: frozen encoders, instruction fusion, the hybrid layer
//! and per-category detectors.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{fill_pseudo, remove_background_plane, resize_to_grid, Sample};
use crate::detection::{
    build_repositories, decide, fit_decision, score_vector, train_stage2, AnomalyResult, DecisionConfig,
    DecisionModels, Eta, HybridConfig, HybridInput, HybridLayer, MemoryRepository, PseudoLabelStore, Stage2Report,
    TrainTokens,
};
use crate::error::{Error, Result};
use crate::fusion::{train_stage1, FusedStreams, FusionConfig, FusionModel, SampleFeatures, Stage1Config, Stage1Report};
use crate::params::ParamStore;
use crate::point_encoder::{PointEncoder, PointEncoderConfig};
use crate::rgb_encoder::{RgbEncoder, RgbEncoderConfig};
use crate::seed;

/// Ablation switches: FE-extras (interpolation refinement of point
/// features), AIF (instructions + hypernetwork projection, stage 1) and RPHD
/// (hybrid layer, stage 2).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Flags {
    pub fe_extras: bool,
    pub aif: bool,
    pub rphd: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags::FULL
    }
}

impl Flags {
    pub const FULL: Flags = Flags {
        fe_extras: true,
        aif: true,
        rphd: true,
    };
    pub const BASELINE: Flags = Flags {
        fe_extras: false,
        aif: false,
        rphd: false,
    };

    /// All eight combinations, baseline first.
    pub fn all() -> [Flags; 8] {
        std::array::from_fn(|i| Flags {
            fe_extras: i & 1 != 0,
            aif: i & 2 != 0,
            rphd: i & 4 != 0,
        })
    }

    pub fn label(self) -> String {
        let parts: Vec<&str> = [(self.fe_extras, "F"), (self.aif, "A"), (self.rphd, "R")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, s)| *s)
            .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

impl std::str::FromStr for Flags {
    type Err = Error;

    /// Parses `baseline`, `full` or a `+`-joined subset of `F`, `A`, `R`.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "none" => return Ok(Flags::BASELINE),
            "full" | "radar" => return Ok(Flags::FULL),
            _ => {}
        }
        let mut f = Flags::BASELINE;
        for part in s.split('+') {
            match part.trim().to_ascii_uppercase().as_str() {
                "F" | "FE" => f.fe_extras = true,
                "A" | "AIF" => f.aif = true,
                "R" | "RPHD" => f.rphd = true,
                other => return Err(Error::invalid(format!("unknown variant flag `{other}`"))),
            }
        }
        Ok(f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub point: PointEncoderConfig,
    pub rgb: RgbEncoderConfig,
    pub fusion: FusionConfig,
    /// RANSAC inlier distance for background removal.
    pub plane_threshold: f64,
    pub plane_iterations: usize,
    /// Seed for RANSAC and the FPS start point; preprocessing is a fixed
    /// function of the input.
    pub preprocess_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            point: PointEncoderConfig::default(),
            rgb: RgbEncoderConfig::default(),
            fusion: FusionConfig::default(),
            plane_threshold: crate::data::RANSAC_THRESHOLD,
            plane_iterations: crate::data::RANSAC_ITERATIONS,
            preprocess_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.point.validate()?;
        self.rgb.validate()?;
        self.fusion.validate()?;
        if !(self.plane_threshold > 0.0) {
            return Err(Error::config("model.plane_threshold", "must be positive"));
        }
        if self.plane_iterations == 0 {
            return Err(Error::config("model.plane_iterations", "must be positive"));
        }
        Ok(())
    }

    /// Patch grid side shared by both modalities.
    pub fn grid(&self) -> usize {
        self.rgb.grid()
    }
}

/// Applies `f` to every element, in parallel when the `parallel` feature is on.
pub(crate) fn par_map<T: Sync, U: Send>(xs: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        xs.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        xs.iter().map(f).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Radar {
    pub cfg: ModelConfig,
    pub flags: Flags,
    pub store: ParamStore,
    pub point: PointEncoder,
    pub rgb: RgbEncoder,
    pub fusion: FusionModel,
    pub hybrid: HybridLayer,
}

impl Radar {
    /// Every component draws from its own seed stream, so the frozen
    /// backbone is identical across flag settings.
    pub fn new(cfg: &ModelConfig, hybrid: &HybridConfig, flags: Flags, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let point = PointEncoder::new(
            &mut store,
            cfg.point.clone(),
            &mut seed::rng(seed, &[seed::tag("point_encoder")]),
        )?;
        let rgb = RgbEncoder::new(&mut store, cfg.rgb.clone(), &mut seed::rng(seed, &[seed::tag("rgb_encoder")]))?;
        let fusion = FusionModel::new(
            &mut store,
            cfg.fusion.clone(),
            cfg.point.out_dim(),
            cfg.rgb.out_dim(),
            &mut seed::rng(seed, &[seed::tag("fusion")]),
        )?;
        let hybrid = HybridLayer::new(
            &mut store,
            fusion.stream_dim(flags.aif),
            fusion.fs_dim(flags.aif),
            hybrid,
            &mut seed::rng(seed, &[seed::tag("hybrid")]),
        );
        Ok(Radar {
            cfg: cfg.clone(),
            flags,
            store,
            point,
            rgb,
            fusion,
            hybrid,
        })
    }

    /// Resizes to the encoder resolution, removes the background plane from
    /// observed point clouds and fills absent modalities with ones.
    pub fn preprocess(&self, s: &Sample) -> Result<Sample> {
        let size = self.cfg.rgb.image_size;
        let mut s = if s.height() != size || s.width() != size {
            resize_to_grid(s, size)?
        } else {
            s.clone()
        };
        if let Some(pc) = &s.pc {
            if pc.valid_count() >= 3 {
                s.pc = Some(remove_background_plane(
                    pc,
                    self.cfg.plane_threshold,
                    self.cfg.plane_iterations,
                    self.cfg.preprocess_seed,
                )?);
            }
        }
        Ok(fill_pseudo(&s))
    }

    /// Frozen-encoder patch features of one sample.
    pub fn backbone_features(&self, s: &Sample) -> Result<SampleFeatures> {
        let p = self.preprocess(s)?;
        let pc = p.pc.as_ref().expect("filled");
        let img = p.rgb.as_ref().expect("filled");
        let fp = self.point.extract(
            &self.store,
            pc,
            self.cfg.rgb.patch,
            self.flags.fe_extras,
            self.cfg.preprocess_seed,
        )?;
        let fr = self.rgb.extract(&self.store, img)?;
        if (fp.rows, fp.cols) != (fr.rows, fr.cols) {
            return Err(Error::shape(format!(
                "point grid {}x{} does not match image grid {}x{}",
                fp.rows, fp.cols, fr.rows, fr.cols
            )));
        }
        Ok(SampleFeatures {
            id: s.id,
            mask: s.mask,
            pc: fp.features,
            rgb: fr.features,
        })
    }

    pub fn extract_all(&self, samples: &[Sample]) -> Result<Vec<SampleFeatures>> {
        par_map(samples, |s| self.backbone_features(s)).into_iter().collect()
    }

    /// Stage 1; a no-op without AIF.
    pub fn train_stage1(&mut self, feats: &[SampleFeatures], cfg: &Stage1Config, seed: u64) -> Result<Option<Stage1Report>> {
        if !self.flags.aif {
            return Ok(None);
        }
        train_stage1(&self.fusion, &mut self.store, feats, cfg, seed).map(Some)
    }

    pub fn fuse(&self, f: &SampleFeatures) -> FusedStreams {
        self.fusion.infer(&self.store, f, self.flags.aif)
    }

    /// Stage 2; a no-op without RPHD.
    pub fn train_stage2(
        &mut self,
        feats: &[SampleFeatures],
        cfg: &HybridConfig,
        seed: u64,
    ) -> Result<Option<(Stage2Report, PseudoLabelStore)>> {
        if !self.flags.rphd {
            return Ok(None);
        }
        let inputs: Vec<HybridInput> = par_map(feats, |f| {
            let s = self.fuse(f);
            HybridInput {
                id: f.id,
                mask: f.mask,
                fs_mean: s.g_fs.mean_rows(),
                g_pc: s.g_pc,
                g_rgb: s.g_rgb,
            }
        });
        train_stage2(&self.hybrid, &mut self.store, &inputs, cfg, seed).map(Some)
    }

    /// Tokens that enter the repositories: fused streams, refined by the
    /// hybrid layer when RPHD is on.
    pub fn tokens(&self, f: &SampleFeatures) -> TrainTokens {
        let s = self.fuse(f);
        let (g_pc, g_rgb, g_fs) = if self.flags.rphd {
            let (p, r) = self.hybrid.apply(&self.store, &s.g_pc, &s.g_rgb, f.mask);
            let fs = self.fusion.fuse_stream_mats(&self.store, &p, &r, self.flags.aif);
            (p, r, fs)
        } else {
            (s.g_pc, s.g_rgb, s.g_fs)
        };
        TrainTokens {
            id: f.id,
            mask: f.mask,
            g_pc,
            g_rgb,
            g_fs,
        }
    }

    pub fn tokens_all(&self, feats: &[SampleFeatures]) -> Vec<TrainTokens> {
        par_map(feats, |f| self.tokens(f))
    }
}

/// Repositories and decision models of one category.
#[derive(Clone, Debug)]
pub struct CategoryDetector {
    pub category: String,
    pub repos: [MemoryRepository; 3],
    pub models: DecisionModels,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub eta: Eta,
    pub categories: Vec<CategoryDetector>,
}

/// Builds one detector per category from normal training tokens. Training
/// score vectors are leave-one-out: a sample is never scored against its
/// own rows.
pub fn fit_detector(
    train: &[(String, TrainTokens)],
    rows: usize,
    cols: usize,
    cfg: &DecisionConfig,
    seed: u64,
) -> Result<Detector> {
    let mut by_cat: BTreeMap<&str, Vec<TrainTokens>> = BTreeMap::new();
    for (c, t) in train {
        by_cat.entry(c.as_str()).or_default().push(t.clone());
    }
    let mut categories = Vec::new();
    for (ci, (cat, tokens)) in by_cat.into_iter().enumerate() {
        let repos = build_repositories(&tokens, cfg.coreset_fraction, seed::derive(seed, &[ci as u64]))?;
        let svs: Vec<_> = par_map(&tokens, |t| score_vector(&repos, t, cfg.eta, Some(t.id)))
            .into_iter()
            .collect::<Result<_>>()?;
        let masks: Vec<_> = tokens.iter().map(|t| t.mask).collect();
        let models = fit_decision(&svs, &masks, cfg, seed::derive(seed, &[ci as u64, 1]))?;
        categories.push(CategoryDetector {
            category: cat.to_string(),
            repos,
            models,
            rows,
            cols,
        });
    }
    if categories.is_empty() {
        return Err(Error::invalid("no training samples for the detector"));
    }
    Ok(Detector { eta: cfg.eta, categories })
}

impl Detector {
    pub fn category(&self, name: &str) -> Result<&CategoryDetector> {
        self.categories
            .iter()
            .find(|c| c.category == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn detect(&self, category: &str, tokens: &TrainTokens) -> Result<AnomalyResult> {
        let d = self.category(category)?;
        let sv = score_vector(&d.repos, tokens, self.eta, None)?;
        Ok(decide(&d.models, &sv, tokens.mask, d.rows, d.cols))
    }
}

/// A trained model ready for inference.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub radar: Radar,
    pub detector: Detector,
}

/// Detection output of one test sample next to its ground truth.
#[derive(Clone, Debug)]
pub struct SampleResult {
    pub id: u64,
    pub category: String,
    pub anomalous: bool,
    pub result: AnomalyResult,
    pub height: usize,
    pub width: usize,
    /// Upsampled segmentation map at ground-truth resolution.
    pub pixel_map: Vec<f64>,
    pub gt_mask: Vec<bool>,
}

impl Pipeline {
    /// Builds the detector from the training split on top of a trained model.
    pub fn fit(radar: Radar, train: &[Sample], train_feats: &[SampleFeatures], cfg: &DecisionConfig, seed: u64) -> Result<Self> {
        let tokens = radar.tokens_all(train_feats);
        let labelled: Vec<(String, TrainTokens)> = train.iter().map(|s| s.category.clone()).zip(tokens).collect();
        let g = radar.cfg.grid();
        let detector = fit_detector(&labelled, g, g, cfg, seed)?;
        Ok(Pipeline { radar, detector })
    }

    pub fn detect(&self, s: &Sample) -> Result<AnomalyResult> {
        let f = self.radar.backbone_features(s)?;
        self.detect_features(&s.category, &f)
    }

    pub fn detect_features(&self, category: &str, f: &SampleFeatures) -> Result<AnomalyResult> {
        self.detector.detect(category, &self.radar.tokens(f))
    }

    /// Runs detection on every sample; `feats` may carry precomputed
    /// backbone features aligned with `samples`.
    pub fn evaluate(&self, samples: &[Sample], feats: Option<&[SampleFeatures]>) -> Result<Vec<SampleResult>> {
        let owned;
        let feats = match feats {
            Some(f) => f,
            None => {
                owned = self.radar.extract_all(samples)?;
                &owned
            }
        };
        if feats.len() != samples.len() {
            return Err(Error::shape("one feature set per sample"));
        }
        let pairs: Vec<(&Sample, &SampleFeatures)> = samples.iter().zip(feats).collect();
        par_map(&pairs, |(s, f)| {
            let result = self.detect_features(&s.category, f)?;
            if !result.sco_a.is_finite() {
                warn!("non-finite anomaly score for sample {}", s.id);
            }
            Ok(SampleResult {
                id: s.id,
                category: s.category.clone(),
                anomalous: s.gt.label == crate::data::ImageLabel::Anomalous,
                pixel_map: result.pixel_map(s.gt.height, s.gt.width),
                height: s.gt.height,
                width: s.gt.width,
                gt_mask: s.gt.anomaly_mask.clone(),
                result,
            })
        })
        .into_iter()
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_labels_round_trip() {
        let all = Flags::all();
        assert_eq!(all[0], Flags::BASELINE);
        assert_eq!(all[7], Flags::FULL);
        let mut labels: Vec<String> = all.iter().map(|f| f.label()).collect();
        for (f, l) in all.iter().zip(&labels) {
            assert_eq!(&l.parse::<Flags>().unwrap(), f);
        }
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 8);
        assert!("F+X".parse::<Flags>().is_err());
    }

    #[test]
    fn backbone_is_shared_across_flags() {
        let cfg = ModelConfig::default();
        let h = HybridConfig::default();
        let a = Radar::new(&cfg, &h, Flags::BASELINE, 3).unwrap();
        let b = Radar::new(&cfg, &h, Flags::FULL, 3).unwrap();
        for id in a.store.ids() {
            let name = a.store.name(id);
            if name.starts_with("hybrid.") {
                continue;
            }
            let other = b.store.lookup(name).unwrap();
            assert_eq!(a.store.get(id), b.store.get(other), "{name}");
        }
    }

    #[test]
    fn default_parameter_ratio_is_small() {
        let r = Radar::new(&ModelConfig::default(), &HybridConfig::default(), Flags::FULL, 0).unwrap();
        let ratio = r.store.count_trainable() as f64 / r.store.count_total() as f64;
        assert!(ratio < 0.10, "{ratio}");
    }

    #[test]
    fn features_have_grid_shape_for_every_mask() {
        use crate::data::{synth_normal, ModalityMask};
        let r = Radar::new(&ModelConfig::default(), &HybridConfig::default(), Flags::FULL, 0).unwrap();
        let base = synth_normal("dome", 32, 1).unwrap();
        for mask in [ModalityMask::COMPLETE, ModalityMask::RGB_ONLY, ModalityMask::PC_ONLY] {
            let mut s = base.clone();
            s.mask = mask;
            if !mask.has_pc {
                s.pc = None;
            }
            if !mask.has_rgb {
                s.rgb = None;
            }
            let f = r.backbone_features(&s).unwrap();
            assert_eq!((f.pc.rows(), f.pc.cols()), (16, 144));
            assert_eq!((f.rgb.rows(), f.rgb.cols()), (16, 288));
            let t = r.tokens(&f);
            assert_eq!(t.g_fs.rows(), 16);
            assert!(t.g_fs.is_finite());
        }
    }
}
