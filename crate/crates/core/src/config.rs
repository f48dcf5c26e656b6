//! Experiment configuration and its JSON file form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{MissingMode, MissingSpec, SynthConfig, CATEGORIES};
use crate::detection::{DecisionConfig, HybridConfig};
use crate::error::{Error, Result};
use crate::fusion::Stage1Config;
use crate::metrics::Connectivity;
use crate::pipeline::{Flags, ModelConfig};

/// One seed per stage. The data and missing-split seeds live in
/// [`SynthConfig::seed`] and [`MissingSpec::seed`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// Parameter initialization.
    pub model: u64,
    /// Batch order, coreset and OCSVM sampling.
    pub train: u64,
    /// Optional pixel subsampling in the metrics.
    pub metric: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub fpr_limit: f64,
    pub connectivity: Connectivity,
    /// Cap on pooled pixels per category for P-AUROC; `None` uses all.
    pub pixel_subsample: Option<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            fpr_limit: 0.3,
            connectivity: Connectivity::Eight,
            pixel_subsample: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: SynthConfig,
    pub missing: Vec<MissingSpec>,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: HybridConfig,
    pub decision: DecisionConfig,
    pub flags: Flags,
    pub seeds: Seeds,
    pub metrics: MetricConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SynthConfig::default(),
            missing: vec![MissingSpec {
                mode: MissingMode::PcMissing,
                rate: 0.7,
                seed: 7,
            }],
            model: ModelConfig::default(),
            stage1: Stage1Config::default(),
            stage2: HybridConfig::default(),
            decision: DecisionConfig::default(),
            flags: Flags::FULL,
            seeds: Seeds::default(),
            metrics: MetricConfig::default(),
        }
    }
}

/// A single validation failure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl ExperimentConfig {
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |path: &str, msg: &str| {
            out.push(ConfigIssue {
                path: path.to_string(),
                message: msg.to_string(),
            })
        };
        if self.data.categories.is_empty() {
            push("data.categories", "at least one category is required");
        }
        for (i, c) in self.data.categories.iter().enumerate() {
            if !CATEGORIES.contains(&c.as_str()) {
                push(&format!("data.categories[{i}]"), &format!("unknown category `{c}`"));
            }
        }
        if self.data.n_train < 4 {
            push("data.n_train", "decision models need at least 4 training samples per category");
        }
        if self.data.n_test == 0 {
            push("data.n_test", "must be positive");
        }
        if self.data.size < 8 {
            push("data.size", "must be at least 8");
        }
        if !(0.0..=1.0).contains(&self.data.anomaly_fraction) {
            push("data.anomaly_fraction", "must lie in [0, 1]");
        }
        if self.missing.is_empty() {
            push("missing", "at least one missing spec is required");
        }
        for (i, m) in self.missing.iter().enumerate() {
            if !(0.0..=1.0).contains(&m.rate) {
                push(&format!("missing[{i}].rate"), "must lie in [0, 1]");
            }
        }
        if let Err(e) = self.model.validate() {
            match e {
                Error::Config { path, message } => {
                    let path = if path.starts_with("model.") { path } else { format!("model.{path}") };
                    push(&path, &message)
                }
                other => push("model", &other.to_string()),
            }
        }
        if self.stage1.batch_size == 0 {
            push("stage1.batch_size", "must be positive");
        }
        if !(self.stage1.lr_instruction > 0.0) || !(self.stage1.lr_projection > 0.0) {
            push("stage1", "learning rates must be positive");
        }
        if self.stage2.batch_size == 0 {
            push("stage2.batch_size", "must be positive");
        }
        if !(self.stage2.lr > 0.0) {
            push("stage2.lr", "must be positive");
        }
        if !(self.stage2.lambda_pseudo >= 0.0) {
            push("stage2.lambda_pseudo", "must be non-negative");
        }
        let d = &self.decision;
        if !(d.coreset_fraction > 0.0 && d.coreset_fraction <= 1.0) {
            push("decision.coreset_fraction", "must lie in (0, 1]");
        }
        if !(d.mdm_ridge >= 0.0) {
            push("decision.mdm_ridge", "must be non-negative");
        }
        if !(d.ocsvm.nu > 0.0 && d.ocsvm.nu <= 1.0) {
            push("decision.ocsvm.nu", "must lie in (0, 1]");
        }
        if matches!(d.ocsvm.gamma, Some(g) if !(g > 0.0)) {
            push("decision.ocsvm.gamma", "must be positive");
        }
        if d.ocsvm.max_samples < 2 {
            push("decision.ocsvm.max_samples", "must be at least 2");
        }
        if let crate::detection::Eta::PatchCore { neighbors: 0 } = d.eta {
            push("decision.eta", "patchcore needs at least one neighbour");
        }
        if !(self.metrics.fpr_limit > 0.0 && self.metrics.fpr_limit <= 1.0) {
            push("metrics.fpr_limit", "must lie in (0, 1]");
        }
        if self.metrics.pixel_subsample == Some(0) {
            push("metrics.pixel_subsample", "must be positive when set");
        }
        out
    }

    /// Fails with every issue listed, paths first.
    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            return Ok(());
        }
        let path = issues.iter().map(|i| i.path.as_str()).collect::<Vec<_>>().join(", ");
        let message = issues
            .iter()
            .map(|i| format!("{}: {}", i.path, i.message))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::Config { path, message })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::config(format!("line {} column {}", e.line(), e.column()), e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// The `k`-th repetition of a multi-seed run: every seed shifted by `k`.
    pub fn with_seed_offset(&self, k: u64) -> Self {
        let mut c = self.clone();
        c.data.seed = c.data.seed.wrapping_add(k);
        for m in &mut c.missing {
            m.seed = m.seed.wrapping_add(k);
        }
        c.seeds.model = c.seeds.model.wrapping_add(k);
        c.seeds.train = c.seeds.train.wrapping_add(k);
        c.seeds.metric = c.seeds.metric.wrapping_add(k);
        c
    }
}
