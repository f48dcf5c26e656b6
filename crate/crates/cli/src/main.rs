use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use miiad_core::checkpoint;
use miiad_core::config::ExperimentConfig;
use miiad_core::data::{apply_missing, load_dataset, save_dataset, synth_dataset, MissingMode, MissingSpec, SynthConfig};
use miiad_core::harness::{
    self, category_rows, emit_report, init_thread_pool, run_seeds, table_of, train_stage1_model, train_stage2_model,
    write_eval_outputs, ResultTable, RunManifest,
};
use miiad_core::pipeline::Flags;

#[derive(Parser)]
#[command(name = "miiad", version, about = "Modality-incomplete industrial anomaly detection")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pc,
    Rgb,
    Both,
}

impl From<Mode> for MissingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Pc => MissingMode::PcMissing,
            Mode::Rgb => MissingMode::RgbMissing,
            Mode::Both => MissingMode::BothMissing,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a complete synthetic dataset.
    Synth {
        #[arg(long, value_delimiter = ',', default_value = "dome,disk,slab")]
        categories: Vec<String>,
        #[arg(long, default_value_t = 60)]
        n_train: usize,
        #[arg(long, default_value_t = 40)]
        n_test: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        anomaly_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop a modality from a share of the samples of a complete dataset.
    Missing {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        input: PathBuf,
        output: PathBuf,
    },
    /// Train instructions and projections; writes a stage-1 checkpoint.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config flags: `full`, `baseline` or e.g. `F+A`.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the hybrid layer and fit repositories and decision models.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to overwriting `--ckpt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the test split: scores.csv, seg/<id>.miid and a summary.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every flag combination on synthetic data and write result tables.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Comma-separated variants; all eight when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time every stage of one run and print the timings as JSON.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<miiad_core::Error> for Failure {
    fn from(e: miiad_core::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Res<T> = Result<T, Failure>;

fn load_config(path: Option<&Path>) -> Res<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_flags(s: &str) -> Res<Flags> {
    s.parse::<Flags>().map_err(|e| Failure::Config(e.to_string()))
}

fn run(cmd: Cmd) -> Res<()> {
    match cmd {
        Cmd::Synth {
            categories,
            n_train,
            n_test,
            size,
            seed,
            anomaly_fraction,
            out,
        } => {
            let cfg = ExperimentConfig {
                data: SynthConfig {
                    categories,
                    n_train,
                    n_test,
                    size,
                    seed,
                    anomaly_fraction,
                },
                ..Default::default()
            };
            cfg.validate()?;
            let ds = synth_dataset(&cfg.data)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} train / {} test samples to {}", ds.train.len(), ds.test.len(), out.display());
        }
        Cmd::Missing {
            mode,
            rate,
            seed,
            input,
            output,
        } => {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Failure::Config(format!("--rate must lie in [0, 1], got {rate}")));
            }
            let spec = MissingSpec {
                mode: mode.into(),
                rate,
                seed,
            };
            let ds = apply_missing(&load_dataset(&input)?, &spec)?;
            save_dataset(&ds, &output)?;
            let complete = ds.train.iter().chain(&ds.test).filter(|s| s.mask.is_complete()).count();
            println!(
                "wrote {} samples ({complete} complete) to {}",
                ds.train.len() + ds.test.len(),
                output.display()
            );
        }
        Cmd::TrainStage1 {
            data,
            config,
            variant,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(v) = variant {
                cfg.flags = parse_flags(&v)?;
            }
            let ds = load_dataset(&data)?;
            let t = Instant::now();
            let backbone = miiad_core::pipeline::Radar::new(&cfg.model, &cfg.stage2, cfg.flags, cfg.seeds.model)?;
            let feats = backbone.extract_all(&ds.train)?;
            info!("backbone features in {:.1}s", t.elapsed().as_secs_f64());
            let (radar, rep) = train_stage1_model(&cfg, cfg.flags, &feats)?;
            if let Some(r) = &rep {
                println!("stage 1: L_con {:.4} -> {:.4}", r.initial_loss, r.final_loss);
            }
            let m = checkpoint::save(&out, &cfg, &radar, None, rep, None)?;
            println!(
                "checkpoint {} ({}, {} / {} trainable parameters)",
                out.display(),
                cfg.flags.label(),
                m.counts.trainable,
                m.counts.total
            );
        }
        Cmd::TrainStage2 { data, ckpt, out } => {
            let loaded = checkpoint::load(&ckpt)?;
            let cfg = loaded.manifest.config.clone();
            let ds = load_dataset(&data)?;
            let feats = loaded.radar.extract_all(&ds.train)?;
            let (pipeline, rep) = train_stage2_model(&cfg, loaded.radar, &ds, &feats)?;
            if let Some(r) = &rep {
                if let (Some(a), Some(b)) = (r.epoch_losses.first(), r.epoch_losses.last()) {
                    println!("stage 2: loss {a:.4} -> {b:.4}");
                }
            }
            let out = out.unwrap_or(ckpt);
            checkpoint::save(
                &out,
                &cfg,
                &pipeline.radar,
                Some(&pipeline.detector),
                loaded.manifest.stage1,
                rep,
            )?;
            println!("checkpoint {} ({} categories)", out.display(), pipeline.detector.categories.len());
        }
        Cmd::Eval { ckpt, data, out } => {
            let loaded = checkpoint::load(&ckpt)?;
            let cfg = loaded.manifest.config.clone();
            let pipeline = loaded.into_pipeline()?;
            let ds = load_dataset(&data)?;
            let results = pipeline.evaluate(&ds.test, None)?;
            let spec = cfg.missing[0];
            let rows = category_rows(
                &pipeline.radar.flags.label(),
                spec.mode,
                spec.rate,
                &results,
                &cfg.metrics,
                cfg.seeds.metric,
            )?;
            write_eval_outputs(&out, &results, &rows)?;
            let mut t = ResultTable::default();
            t.push_group(rows);
            print!("{}", t.to_markdown());
        }
        Cmd::Ablate {
            config,
            seeds,
            variants,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            if seeds == 0 {
                return Err(Failure::Config("--seeds must be positive".into()));
            }
            let variants = if variants.is_empty() {
                Flags::all().to_vec()
            } else {
                variants.iter().map(|v| parse_flags(v)).collect::<Res<Vec<_>>>()?
            };
            let t = Instant::now();
            let runs = run_seeds(&cfg, seeds, &variants)?;
            let counts = runs[0].iter().find(|v| v.flags == cfg.flags).unwrap_or(&runs[0][0]).counts;
            let tables: Vec<ResultTable> = runs.iter().map(|r| table_of(r)).collect();
            let table = if tables.len() == 1 {
                tables.into_iter().next().unwrap()
            } else {
                ResultTable::aggregate(&tables)?
            };
            let manifest = RunManifest::new(
                &cfg,
                (0..seeds as u64).map(|k| cfg.with_seed_offset(k).seeds).collect(),
                t.elapsed().as_secs_f64(),
                counts,
            );
            let files = emit_report(&[table.clone()], &manifest, &out)?;
            print!("{}", table.to_markdown());
            for f in files {
                info!("wrote {}", f.display());
            }
        }
        Cmd::Bench { config } => {
            let cfg = load_config(config.as_deref())?;
            let rep = harness::bench(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&rep).map_err(|e| Failure::Runtime(e.to_string()))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = init_thread_pool().map_err(Failure::from).and_then(|n| {
        info!("{n} worker threads");
        run(cli.cmd)
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
