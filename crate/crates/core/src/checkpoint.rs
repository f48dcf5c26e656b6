//! On-disk model state: a JSON manifest next to MIID tensors.
//!
//! ```text
//! ckpt/
//!   manifest.json        config, flags, stage, parameter table, counts
//!   params/<name>.miid   one tensor per parameter
//!   detector.json        repositories (provenance, coreset) and decision models
//!   banks/<cat>.<repo>.miid
//! ```
//!
//! Tensors are stored as `f32`, so a reloaded model equals the saved one up
//! to single-precision rounding.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::detection::{DecisionModels, Eta, MemoryRepository, Provenance, RepoKind, Stage2Report};
use crate::error::{Error, Result};
use crate::fusion::Stage1Report;
use crate::harness::ParamCounts;
use crate::params::ParamGroup;
use crate::pipeline::{CategoryDetector, Detector, Flags, Pipeline, Radar};
use crate::tensor_io::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const DETECTOR: &str = "detector.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub group: ParamGroup,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub flags: Flags,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub params: Vec<ParamEntry>,
    pub counts: ParamCounts,
    pub stage1: Option<Stage1Report>,
    pub stage2: Option<Stage2Report>,
    pub has_detector: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RepoEntry {
    kind: RepoKind,
    file: String,
    provenance: Vec<Provenance>,
    coreset: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CategoryEntry {
    category: String,
    rows: usize,
    cols: usize,
    repos: Vec<RepoEntry>,
    models: DecisionModels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DetectorEntry {
    eta: Eta,
    categories: Vec<CategoryEntry>,
}

/// Everything a checkpoint directory holds.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub manifest: Manifest,
    pub radar: Radar,
    pub detector: Option<Detector>,
}

impl Loaded {
    pub fn into_pipeline(self) -> Result<Pipeline> {
        match self.detector {
            Some(detector) => Ok(Pipeline {
                radar: self.radar,
                detector,
            }),
            None => Err(Error::Checkpoint(
                "checkpoint has no fitted detector; run stage 2 first".into(),
            )),
        }
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Writes `radar` (and the detector, if any) under `dir`.
pub fn save(
    dir: &Path,
    config: &ExperimentConfig,
    radar: &Radar,
    detector: Option<&Detector>,
    stage1: Option<Stage1Report>,
    stage2: Option<Stage2Report>,
) -> Result<Manifest> {
    let pdir = dir.join("params");
    mkdir(&pdir)?;
    let store = &radar.store;
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id).to_string();
        let m = store.get(id);
        let file = format!("params/{name}.miid");
        Tensor::from_mat(m).write(&dir.join(&file))?;
        params.push(ParamEntry {
            name,
            shape: [m.rows(), m.cols()],
            group: store.group(id),
            file,
        });
    }
    if let Some(d) = detector {
        let bdir = dir.join("banks");
        mkdir(&bdir)?;
        let categories = d
            .categories
            .iter()
            .map(|c| {
                let repos = c
                    .repos
                    .iter()
                    .map(|r| {
                        let file = format!("banks/{}.{}.miid", c.category, r.kind.name());
                        Tensor::from_mat(&r.bank).write(&dir.join(&file))?;
                        Ok(RepoEntry {
                            kind: r.kind,
                            file,
                            provenance: r.provenance.clone(),
                            coreset: r.coreset.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(CategoryEntry {
                    category: c.category.clone(),
                    rows: c.rows,
                    cols: c.cols,
                    repos,
                    models: c.models.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_json(
            &dir.join(DETECTOR),
            &DetectorEntry {
                eta: d.eta,
                categories,
            },
        )?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: if stage2.is_some() || detector.is_some() {
            Stage::Stage2
        } else {
            Stage::Stage1
        },
        flags: radar.flags,
        config: config.clone(),
        config_hash: config.hash(),
        params,
        counts: ParamCounts::of(store),
        stage1,
        stage2,
        has_detector: detector.is_some(),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join(MANIFEST))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

fn read_mat(dir: &Path, file: &str, shape: Option<[usize; 2]>) -> Result<crate::tensor::Mat> {
    let path: PathBuf = dir.join(file);
    let t = Tensor::read(&path)?;
    let m = t
        .to_mat()
        .ok_or_else(|| Error::Checkpoint(format!("{file}: expected a matrix, found dims {:?}", t.dims)))?;
    if let Some(s) = shape {
        if [m.rows(), m.cols()] != s {
            return Err(Error::Checkpoint(format!(
                "{file}: manifest says {}x{} but the tensor is {}x{}",
                s[0],
                s[1],
                m.rows(),
                m.cols()
            )));
        }
    }
    Ok(m)
}

/// Rebuilds the model from its config and overwrites every parameter by
/// name. The parameter table must match the rebuilt model exactly.
pub fn load(dir: &Path) -> Result<Loaded> {
    let manifest = read_manifest(dir)?;
    let cfg = &manifest.config;
    let mut radar = Radar::new(&cfg.model, &cfg.stage2, manifest.flags, cfg.seeds.model)?;
    if radar.store.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "model has {} parameters, checkpoint has {}",
            radar.store.len(),
            manifest.params.len()
        )));
    }
    for p in &manifest.params {
        let id = radar
            .store
            .lookup(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", p.name)))?;
        let cur = radar.store.get(id);
        if [cur.rows(), cur.cols()] != p.shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` is {}x{} in the model but {}x{} in the checkpoint",
                p.name,
                cur.rows(),
                cur.cols(),
                p.shape[0],
                p.shape[1]
            )));
        }
        if radar.store.group(id) != p.group {
            return Err(Error::Checkpoint(format!("parameter `{}` changed group", p.name)));
        }
        *radar.store.get_mut(id) = read_mat(dir, &p.file, Some(p.shape))?;
    }
    let detector = if manifest.has_detector {
        let d: DetectorEntry = read_json(&dir.join(DETECTOR))?;
        let categories = d
            .categories
            .into_iter()
            .map(|c| {
                let repos: Vec<MemoryRepository> = c
                    .repos
                    .into_iter()
                    .map(|r| {
                        let bank = read_mat(dir, &r.file, None)?;
                        let mut repo = MemoryRepository::new(r.kind, bank, r.provenance)?;
                        repo.coreset = r.coreset;
                        Ok(repo)
                    })
                    .collect::<Result<_>>()?;
                let repos: [MemoryRepository; 3] = repos
                    .try_into()
                    .map_err(|_| Error::Checkpoint(format!("category `{}` needs three repositories", c.category)))?;
                Ok(CategoryDetector {
                    category: c.category,
                    repos,
                    models: c.models,
                    rows: c.rows,
                    cols: c.cols,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(Detector { eta: d.eta, categories })
    } else {
        None
    };
    Ok(Loaded {
        manifest,
        radar,
        detector,
    })
}
