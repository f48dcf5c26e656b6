//! Experiment driver: data, both training stages, detectors, metrics,
//! ablations and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MetricConfig, Seeds};
use crate::data::{apply_missing, synth_dataset, MiiadDataset, MissingMode, MissingSpec};
use crate::detection::Stage2Report;
use crate::error::{Error, Result};
use crate::fusion::{SampleFeatures, Stage1Report};
use crate::metrics::{aupro, auroc, PixelMap};
use crate::params::ParamStore;
use crate::pipeline::{Flags, Pipeline, Radar, SampleResult};
use crate::seed;
use crate::tensor_io::Tensor;

pub const THREADS_ENV: &str = "MIIAD_NUM_THREADS";

/// Parallelism cap from `MIIAD_NUM_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::config(THREADS_ENV, format!("expected a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

/// Sizes the global worker pool from the environment. Returns the number of
/// worker threads in use.
pub fn init_thread_pool() -> Result<usize> {
    let n = threads_from_env()?;
    #[cfg(feature = "parallel")]
    {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = n {
            b = b.num_threads(n);
        }
        // Already initialized pools keep their size.
        let _ = b.build_global();
        Ok(rayon::current_num_threads())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub p_auroc: f64,
    pub aupro: f64,
    pub i_auroc: f64,
}

impl Scores {
    fn as_array(self) -> [f64; 3] {
        [self.p_auroc, self.aupro, self.i_auroc]
    }

    fn from_array(a: [f64; 3]) -> Self {
        Scores {
            p_auroc: a[0],
            aupro: a[1],
            i_auroc: a[2],
        }
    }
}

pub const MEAN_ROW: &str = "Mean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub mode: MissingMode,
    pub rate: f64,
    pub category: String,
    pub scores: Scores,
    /// Sample standard deviation across seeds, for aggregated tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<Scores>,
}

/// Per-category rows, each group of categories followed by its mean row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn mode_name(m: MissingMode) -> &'static str {
    match m {
        MissingMode::PcMissing => "pc_missing",
        MissingMode::RgbMissing => "rgb_missing",
        MissingMode::BothMissing => "both_missing",
    }
}

impl ResultTable {
    /// Appends category rows and their arithmetic mean.
    pub fn push_group(&mut self, rows: Vec<ResultRow>) {
        let Some(first) = rows.first().cloned() else {
            return;
        };
        let n = rows.len() as f64;
        let mut sum = [0.0; 3];
        for r in &rows {
            for (s, v) in sum.iter_mut().zip(r.scores.as_array()) {
                *s += v;
            }
        }
        self.rows.extend(rows);
        self.rows.push(ResultRow {
            category: MEAN_ROW.into(),
            scores: Scores::from_array(sum.map(|s| s / n)),
            std: None,
            ..first
        });
    }

    /// Mean row of one (variant, mode, rate) group.
    pub fn mean(&self, variant: &str, mode: MissingMode, rate: f64) -> Option<Scores> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.mode == mode && r.rate == rate && r.category == MEAN_ROW)
            .map(|r| r.scores)
    }

    /// Checks that every mean row is the arithmetic mean of the category
    /// rows before it.
    pub fn means_consistent(&self, tol: f64) -> bool {
        let mut group: Vec<&ResultRow> = Vec::new();
        for r in &self.rows {
            if r.category == MEAN_ROW {
                if group.is_empty() {
                    return false;
                }
                let n = group.len() as f64;
                for k in 0..3 {
                    let m = group.iter().map(|g| g.scores.as_array()[k]).sum::<f64>() / n;
                    if (m - r.scores.as_array()[k]).abs() > tol {
                        return false;
                    }
                }
                group.clear();
            } else {
                group.push(r);
            }
        }
        group.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        let with_std = self.rows.iter().any(|r| r.std.is_some());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["variant", "mode", "rate", "category", "p_auroc", "aupro", "i_auroc"];
        if with_std {
            header.extend(["p_auroc_std", "aupro_std", "i_auroc_std"]);
        }
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.variant.clone(),
                mode_name(r.mode).into(),
                r.rate.to_string(),
                r.category.clone(),
            ];
            rec.extend(r.scores.as_array().iter().map(|v| v.to_string()));
            if with_std {
                rec.extend(r.std.unwrap_or_default().as_array().iter().map(|v| v.to_string()));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_markdown(&self) -> String {
        let with_std = self.rows.iter().any(|r| r.std.is_some());
        let mut s = String::from("| Variant | Missing | Rate | Category | P-AUROC | AUPRO | I-AUROC |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let cell = |k: usize| match r.std {
                Some(sd) if with_std => format!("{:.4} ± {:.4}", r.scores.as_array()[k], sd.as_array()[k]),
                _ => format!("{:.4}", r.scores.as_array()[k]),
            };
            let cat = if r.category == MEAN_ROW {
                format!("**{}**", r.category)
            } else {
                r.category.clone()
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.variant,
                mode_name(r.mode),
                r.rate,
                cat,
                cell(0),
                cell(1),
                cell(2)
            );
        }
        s
    }

    /// Mean and sample standard deviation across same-shaped tables.
    pub fn aggregate(tables: &[ResultTable]) -> Result<ResultTable> {
        let first = tables.first().ok_or_else(|| Error::invalid("no tables to aggregate"))?;
        if tables.iter().any(|t| t.rows.len() != first.rows.len()) {
            return Err(Error::shape("tables differ in row count"));
        }
        let n = tables.len() as f64;
        let rows = first
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let vals: Vec<[f64; 3]> = tables.iter().map(|t| t.rows[i].scores.as_array()).collect();
                let mean: [f64; 3] = std::array::from_fn(|k| vals.iter().map(|v| v[k]).sum::<f64>() / n);
                let sd: [f64; 3] = std::array::from_fn(|k| {
                    if tables.len() < 2 {
                        0.0
                    } else {
                        (vals.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                    }
                });
                ResultRow {
                    scores: Scores::from_array(mean),
                    std: Some(Scores::from_array(sd)),
                    ..r.clone()
                }
            })
            .collect();
        Ok(ResultTable { rows })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Per-category I-AUROC, P-AUROC and AUPRO of a set of test results, in
/// order of first appearance.
pub fn category_rows(
    variant: &str,
    mode: MissingMode,
    rate: f64,
    results: &[SampleResult],
    cfg: &MetricConfig,
    metric_seed: u64,
) -> Result<Vec<ResultRow>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&SampleResult>> = BTreeMap::new();
    for r in results {
        if !groups.contains_key(r.category.as_str()) {
            order.push(&r.category);
        }
        groups.entry(&r.category).or_default().push(r);
    }
    order
        .iter()
        .enumerate()
        .map(|(ci, cat)| {
            let rs = &groups[cat];
            let scores: Vec<f64> = rs.iter().map(|r| r.result.sco_a).collect();
            let labels: Vec<bool> = rs.iter().map(|r| r.anomalous).collect();
            let i_auroc = auroc(&scores, &labels)?;
            let mut px: Vec<f64> = rs.iter().flat_map(|r| r.pixel_map.iter().copied()).collect();
            let mut pl: Vec<bool> = rs.iter().flat_map(|r| r.gt_mask.iter().copied()).collect();
            if let Some(k) = cfg.pixel_subsample {
                if px.len() > k {
                    let mut rng = seed::rng(metric_seed, &[seed::tag("pixels"), ci as u64]);
                    let idx = sample_indices(&mut rng, px.len(), k);
                    px = idx.iter().map(|i| px[i]).collect();
                    pl = idx.iter().map(|i| pl[i]).collect();
                }
            }
            let p_auroc = auroc(&px, &pl)?;
            let maps: Vec<PixelMap<f64>> = rs
                .iter()
                .map(|r| PixelMap {
                    height: r.height,
                    width: r.width,
                    data: r.pixel_map.clone(),
                })
                .collect();
            let masks: Vec<PixelMap<bool>> = rs
                .iter()
                .map(|r| PixelMap {
                    height: r.height,
                    width: r.width,
                    data: r.gt_mask.clone(),
                })
                .collect();
            let aupro = aupro(&maps, &masks, cfg.fpr_limit, cfg.connectivity)?;
            Ok(ResultRow {
                variant: variant.into(),
                mode,
                rate,
                category: cat.to_string(),
                scores: Scores {
                    p_auroc,
                    aupro,
                    i_auroc,
                },
                std: None,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
}

impl ParamCounts {
    pub fn of(store: &ParamStore) -> Self {
        let trainable = store.count_trainable();
        let total = store.count_total();
        ParamCounts {
            trainable,
            total,
            ratio: trainable as f64 / total as f64,
        }
    }
}

/// One trained and evaluated variant.
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub flags: Flags,
    pub spec: MissingSpec,
    pub rows: Vec<ResultRow>,
    pub stage1: Option<Stage1Report>,
    pub stage2: Option<Stage2Report>,
    pub counts: ParamCounts,
    /// Kept only when requested.
    pub pipeline: Option<Pipeline>,
    pub results: Vec<SampleResult>,
}

fn stage_seed(seeds: &Seeds, stage: &str) -> u64 {
    seed::derive(seeds.train, &[seed::tag(stage)])
}

/// Stage-1 training on precomputed backbone features. Without AIF this only
/// builds the model.
pub fn train_stage1_model(cfg: &ExperimentConfig, flags: Flags, train: &[SampleFeatures]) -> Result<(Radar, Option<Stage1Report>)> {
    let mut radar = Radar::new(&cfg.model, &cfg.stage2, flags, cfg.seeds.model)?;
    let rep = radar.train_stage1(train, &cfg.stage1, stage_seed(&cfg.seeds, "stage1"))?;
    Ok((radar, rep))
}

/// Stage 2 plus repositories and decision models.
pub fn train_stage2_model(
    cfg: &ExperimentConfig,
    mut radar: Radar,
    ds: &MiiadDataset,
    train: &[SampleFeatures],
) -> Result<(Pipeline, Option<Stage2Report>)> {
    let rep = radar.train_stage2(train, &cfg.stage2, stage_seed(&cfg.seeds, "stage2"))?;
    let pipeline = Pipeline::fit(radar, &ds.train, train, &cfg.decision, stage_seed(&cfg.seeds, "detector"))?;
    Ok((pipeline, rep.map(|r| r.0)))
}

/// Runs `variants` on one restructured dataset. Backbone features are shared
/// per FE flag and stage-1 models per (FE, AIF) pair.
pub fn run_on_dataset(
    cfg: &ExperimentConfig,
    ds: &MiiadDataset,
    spec: MissingSpec,
    variants: &[Flags],
    keep: bool,
) -> Result<Vec<VariantRun>> {
    let mut feats: BTreeMap<bool, (Vec<SampleFeatures>, Vec<SampleFeatures>)> = BTreeMap::new();
    let mut stage1: BTreeMap<(bool, bool), (Radar, Option<Stage1Report>)> = BTreeMap::new();
    let mut out = Vec::new();
    for &flags in variants {
        let fe = flags.fe_extras;
        if !feats.contains_key(&fe) {
            let t = Instant::now();
            let r = Radar::new(&cfg.model, &cfg.stage2, flags, cfg.seeds.model)?;
            feats.insert(fe, (r.extract_all(&ds.train)?, r.extract_all(&ds.test)?));
            info!("backbone features (fe_extras={fe}) in {:.1}s", t.elapsed().as_secs_f64());
        }
        let (train_f, test_f) = &feats[&fe];
        let key = (fe, flags.aif);
        if !stage1.contains_key(&key) {
            let t = Instant::now();
            let s1_flags = Flags { rphd: false, ..flags };
            stage1.insert(key, train_stage1_model(cfg, s1_flags, train_f)?);
            info!("stage 1 ({}) in {:.1}s", s1_flags.label(), t.elapsed().as_secs_f64());
        }
        let (base, rep1) = &stage1[&key];
        let mut radar = base.clone();
        radar.flags = flags;
        let t = Instant::now();
        let (pipeline, rep2) = train_stage2_model(cfg, radar, ds, train_f)?;
        let results = pipeline.evaluate(&ds.test, Some(test_f))?;
        info!("stage 2 + evaluation ({}) in {:.1}s", flags.label(), t.elapsed().as_secs_f64());
        let rows = category_rows(&flags.label(), spec.mode, spec.rate, &results, &cfg.metrics, cfg.seeds.metric)?;
        out.push(VariantRun {
            flags,
            spec,
            rows,
            stage1: rep1.clone(),
            stage2: rep2,
            counts: ParamCounts::of(&pipeline.radar.store),
            pipeline: keep.then_some(pipeline),
            results: if keep { results } else { Vec::new() },
        });
    }
    Ok(out)
}

/// Every missing spec of `cfg` crossed with `variants`.
pub fn run_variants(cfg: &ExperimentConfig, variants: &[Flags], keep: bool) -> Result<Vec<VariantRun>> {
    cfg.validate()?;
    let full = synth_dataset(&cfg.data)?;
    let mut out = Vec::new();
    for spec in &cfg.missing {
        let ds = apply_missing(&full, spec)?;
        out.extend(run_on_dataset(cfg, &ds, *spec, variants, keep)?);
    }
    Ok(out)
}

pub fn table_of(runs: &[VariantRun]) -> ResultTable {
    let mut t = ResultTable::default();
    for r in runs {
        t.push_group(r.rows.clone());
    }
    t
}

/// The configured variant on every missing spec.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    Ok(table_of(&run_variants(cfg, &[cfg.flags], false)?))
}

/// All eight flag combinations on shared data and seeds.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<ResultTable> {
    Ok(table_of(&run_variants(cfg, &Flags::all(), false)?))
}

/// Repeats [`run_variants`] with seeds shifted by `0..n`.
pub fn run_seeds(cfg: &ExperimentConfig, n: usize, variants: &[Flags]) -> Result<Vec<Vec<VariantRun>>> {
    (0..n as u64).map(|k| run_variants(&cfg.with_seed_offset(k), variants, false)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<Seeds>,
    pub wall_time_secs: f64,
    pub parameters: ParamCounts,
    pub threads: usize,
    pub version: String,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig, seeds: Vec<Seeds>, wall_time_secs: f64, parameters: ParamCounts) -> Self {
        RunManifest {
            config_hash: cfg.hash(),
            config: cfg.clone(),
            seeds,
            wall_time_secs,
            parameters,
            #[cfg(feature = "parallel")]
            threads: rayon::current_num_threads(),
            #[cfg(not(feature = "parallel"))]
            threads: 1,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes each table as CSV and Markdown plus `manifest.json`. Returns the
/// files written.
pub fn emit_report(tables: &[ResultTable], manifest: &RunManifest, dir: &Path) -> Result<Vec<PathBuf>> {
    if tables.is_empty() {
        return Err(Error::invalid("no result tables to report"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (i, t) in tables.iter().enumerate() {
        let stem = if tables.len() == 1 {
            "results".to_string()
        } else {
            format!("results_{i}")
        };
        let csv = dir.join(format!("{stem}.csv"));
        write(&csv, t.to_csv()?.as_bytes())?;
        let md = dir.join(format!("{stem}.md"));
        write(&md, t.to_markdown().as_bytes())?;
        files.extend([csv, md]);
    }
    let m = dir.join("manifest.json");
    write(&m, serde_json::to_string_pretty(manifest)?.as_bytes())?;
    files.push(m);
    Ok(files)
}

/// Per-sample scores (`id,label,sco_a`), pixel-resolution segmentation maps
/// as MIID tensors and a JSON summary of the metric rows.
pub fn write_eval_outputs(dir: &Path, results: &[SampleResult], rows: &[ResultRow]) -> Result<()> {
    let seg = dir.join("seg");
    std::fs::create_dir_all(&seg).map_err(|e| Error::io(&seg, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "label", "sco_a"]).map_err(csv_err)?;
    for r in results {
        w.write_record([r.id.to_string(), (r.anomalous as u8).to_string(), r.result.sco_a.to_string()])
            .map_err(csv_err)?;
        Tensor::from_f64(vec![r.height, r.width], &r.pixel_map).write(&seg.join(format!("{}.miid", r.id)))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write(&dir.join("scores.csv"), &bytes)?;
    let mut table = ResultTable::default();
    table.push_group(rows.to_vec());
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&table)?.as_bytes())?;
    write(&dir.join("summary.md"), table.to_markdown().as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub variant: String,
    pub train_samples: usize,
    pub test_samples: usize,
    /// `(stage, seconds)` in execution order.
    pub stages: Vec<(String, f64)>,
    pub threads: usize,
}

/// Times every stage of the configured variant on the first missing spec.
pub fn bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut stages = Vec::new();
    let mut lap = {
        let mut t = Instant::now();
        move |name: &str, stages: &mut Vec<(String, f64)>| {
            stages.push((name.to_string(), t.elapsed().as_secs_f64()));
            t = Instant::now();
        }
    };
    let full = synth_dataset(&cfg.data)?;
    let ds = apply_missing(&full, &cfg.missing[0])?;
    lap("synth + missing", &mut stages);
    let radar = Radar::new(&cfg.model, &cfg.stage2, cfg.flags, cfg.seeds.model)?;
    let train = radar.extract_all(&ds.train)?;
    let test = radar.extract_all(&ds.test)?;
    lap("backbone features", &mut stages);
    let (radar, _) = train_stage1_model(cfg, cfg.flags, &train)?;
    lap("stage 1", &mut stages);
    let mut radar = radar;
    radar.train_stage2(&train, &cfg.stage2, stage_seed(&cfg.seeds, "stage2"))?;
    lap("stage 2", &mut stages);
    let pipeline = Pipeline::fit(radar, &ds.train, &train, &cfg.decision, stage_seed(&cfg.seeds, "detector"))?;
    lap("repositories + decision", &mut stages);
    let results = pipeline.evaluate(&ds.test, Some(&test))?;
    lap("detection", &mut stages);
    let spec = cfg.missing[0];
    category_rows(&cfg.flags.label(), spec.mode, spec.rate, &results, &cfg.metrics, cfg.seeds.metric)?;
    lap("metrics", &mut stages);
    Ok(BenchReport {
        variant: cfg.flags.label(),
        train_samples: ds.train.len(),
        test_samples: ds.test.len(),
        stages,
        #[cfg(feature = "parallel")]
        threads: rayon::current_num_threads(),
        #[cfg(not(feature = "parallel"))]
        threads: 1,
    })
}
