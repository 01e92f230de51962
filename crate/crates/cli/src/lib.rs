//! Command-line experiments: synthetic data, base predictors, mixers,
//! evaluation, ablations and exports.
//!
//! Exit codes: 0 on success, 1 on usage or config errors, 2 on runtime
//! failures.

pub mod config;
pub mod pipeline;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tedepth::{FusionLocation, MixerKind};

use config::{ConfigError, ExperimentConfig, OUT_ENV};
use pipeline::{AblationSpec, Source};
use report::{Layout, RESOLVED_CONFIG};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "tedepth", version, about = "Two-level depth ensemble experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file. Without it, `<out>/config.resolved` is reused when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config and TEDK_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `key=value`, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train and test sets.
    Synth,
    /// Train every base predictor.
    TrainBase {
        /// Concurrent trainings; results are identical for any value.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train the mixer over the frozen base predictors.
    TrainMixer,
    /// Write metrics.csv and, with caps, ranges.csv.
    Eval {
        /// Upper bounds of consecutive depth bins, e.g. 2,4,6,8,10.
        #[arg(long, value_delimiter = ',')]
        caps: Option<Vec<f64>>,
    },
    /// Run the trained ensemble and write fused depth maps.
    Fuse {
        /// Dataset directory; defaults to the test set.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the gradient-check suite.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Sweep mixer kinds, fusion locations and predictor counts.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "uwf,cgf,cbf,rbf")]
        mixers: Vec<MixerKind>,
        #[arg(long, value_delimiter = ',', default_value = "pl,fl")]
        locations: Vec<FusionLocation>,
        /// Predictor counts; the first k configured archs are used.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Principal feature channel as an 8-bit PGM.
    ExportHeatmap {
        /// `mixer` or `predictor<N>`.
        #[arg(long, default_value = "mixer")]
        model: Source,
        /// Sample id; defaults to the first test sample.
        #[arg(long)]
        sample: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Colored point cloud as ASCII PLY.
    ExportPointcloud {
        /// `gt`, `mixer` or `predictor<N>`.
        #[arg(long, default_value = "mixer")]
        source: Source,
        #[arg(long)]
        sample: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn resolve_config(common: &Common, env_out: Option<String>) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let out = common
                .out
                .clone()
                .or_else(|| env_out.clone().filter(|v| !v.is_empty()).map(PathBuf::from))
                .unwrap_or_else(|| ExperimentConfig::default().out);
            let resolved = Layout::new(out).file(RESOLVED_CONFIG);
            if resolved.is_file() {
                ExperimentConfig::load(&resolved)?
            } else {
                ExperimentConfig::default()
            }
        }
    };
    for kv in &common.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            msg: format!("--set expects KEY=VALUE, got {kv:?}"),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    let mut cfg = cfg.with_env_out(env_out);
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn execute(command: Command, cfg: &ExperimentConfig) -> anyhow::Result<bool> {
    let layout = Layout::new(&cfg.out);
    match command {
        Command::Synth => {
            pipeline::synth(cfg)?;
            println!("wrote {} and {}", layout.train_data().display(), layout.test_data().display());
        }
        Command::TrainBase { jobs } => {
            let (_, trained) = pipeline::train_base(cfg, jobs.max(1))?;
            for p in &trained {
                println!(
                    "predictor{} {}: loss {:.5} -> {:.5}, val rmse {:.5}",
                    p.index, p.model.arch, p.initial_loss, p.final_loss, p.val_rmse
                );
            }
        }
        Command::TrainMixer => {
            let (_, m) = pipeline::train_mixer_stage(cfg)?;
            println!(
                "mixer {}/{}: loss {:.5} -> {:.5}",
                m.model.kind.code(),
                m.model.location.code(),
                m.initial_loss,
                m.final_loss
            );
        }
        Command::Eval { caps } => {
            pipeline::eval(cfg, caps)?;
            print!("{}", std::fs::read_to_string(layout.file("metrics.csv"))?);
        }
        Command::Fuse { input } => {
            let run = pipeline::fuse(cfg, input)?;
            println!("wrote {} fused depth maps", run.files.len());
        }
        Command::Gradcheck { seeds } => {
            let cases = pipeline::gradcheck(seeds)?;
            let failed = cases.iter().filter(|c| !c.report.pass).count();
            for c in &cases {
                println!(
                    "{} {}/{} seed {}: max rel error {:.3e}",
                    if c.report.pass { "ok  " } else { "FAIL" },
                    c.op,
                    c.arg,
                    c.seed,
                    c.report.max_rel_error
                );
            }
            println!("{} checks, {failed} failed", cases.len());
            return Ok(failed == 0);
        }
        Command::Ablate {
            mixers,
            locations,
            counts,
            jobs,
        } => {
            let spec = AblationSpec {
                mixers,
                locations,
                counts: counts.unwrap_or_else(|| vec![cfg.archs.len()]),
            };
            pipeline::ablate(cfg, &spec, jobs.max(1))?;
            print!("{}", std::fs::read_to_string(layout.file("ablation.csv"))?);
        }
        Command::ExportHeatmap { model, sample, output } => {
            let (_, path) = pipeline::export_heatmap(cfg, &model, sample.as_deref(), output)?;
            println!("wrote {}", path.display());
        }
        Command::ExportPointcloud { source, sample, output } => {
            let (_, path) = pipeline::export_pointcloud(cfg, &source, sample.as_deref(), output)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(true)
}

/// Parses `args` (including the program name) and runs one subcommand.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let cfg = match resolve_config(&cli.common, std::env::var(OUT_ENV).ok()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match execute(cli.command, &cfg) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
