use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use stableseg_core::mtc::FdOptions;

use stableseg::config::{Overrides, ProtocolChoice, RunConfig};
use stableseg::dataset::write_json;
use stableseg::evaluate::{evaluate, EvalOptions};
use stableseg::tools::{grad_check, load_label_volume, load_logits, loss_report, random_case, sample_clips};
use stableseg::{exit_code, gen, infer, toy, CheckFailed, UsageError, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "stableseg", version, about = "Temporally stable video segmentation toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Static-pixel gray threshold, in the gray frames' native range.
    #[arg(long, global = true)]
    theta: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long = "lambda-mtc", global = true)]
    lambda_mtc: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    strides: Option<Vec<usize>>,
    #[arg(long = "clip-len", global = true)]
    clip_len: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    windows: Option<Vec<usize>>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProtocolArg {
    Dense,
    Approx,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run clip inference over a dataset.
    Infer {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Load parameters instead of initializing them from the seed.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Temporal consistency loss of a logits tensor against labels.
    Loss {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the analytic loss gradient with central differences.
    GradCheck {
        #[arg(long, requires = "labels")]
        logits: Option<PathBuf>,
        #[arg(long, requires = "logits")]
        labels: Option<PathBuf>,
        /// Number of random volumes when no files are given.
        #[arg(long, default_value_t = 20)]
        volumes: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,4,3,8,8")]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Check this many random coordinates per volume instead of all.
        #[arg(long)]
        coords: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// mIoU and mVC of predictions against a dataset.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Built-in dataset name or mapping JSON for the ground truth.
        #[arg(long = "map-gt")]
        map_gt: Option<String>,
        #[arg(long = "map-pred")]
        map_pred: Option<String>,
        /// Also require the stable prediction to match the ground truth.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a linear head on frozen features.
    TrainToy {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// mVC window for the report.
        #[arg(long, default_value_t = 2)]
        window: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print random training clips or the inference partition.
    SampleClips {
        #[arg(long = "video-len")]
        video_len: usize,
        /// Number of random clips; without it the partition is printed.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            let text = serde_json::to_string_pretty(value)?;
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => Ok(r?),
            }
        }
    }
}

fn required(path: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| UsageError(format!("missing --{flag} (or paths.{key} in the config)")).into())
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    let ov = Overrides {
        seed: c.seed,
        protocol: c.protocol.map(|p| match p {
            ProtocolArg::Dense => ProtocolChoice::Dense,
            ProtocolArg::Approx => ProtocolChoice::Approx,
        }),
        theta: c.theta,
        tau: c.tau,
        alpha: c.alpha,
        lambda_mtc: c.lambda_mtc,
        strides: c.strides,
        clip_len: c.clip_len,
        windows: c.windows,
    };
    let mut cfg = RunConfig::resolve(c.config.as_deref(), &ov)?;
    let paths = cfg.paths.clone();
    match cli.cmd {
        Cmd::Gen { out } => {
            let out = required(out, &paths.output, "out", "output")?;
            let m = gen::generate(&cfg, &out)?;
            eprintln!("wrote {} videos to {}", m.videos.len(), out.display());
        }
        Cmd::Infer { data, out, params } => {
            let data = required(data, &paths.dataset, "data", "dataset")?;
            let out = required(out, &paths.output, "out", "output")?;
            let pm = infer::infer(&cfg, &data, params.as_deref(), &out)?;
            eprintln!("wrote predictions for {} videos to {}", pm.videos.len(), out.display());
        }
        Cmd::Loss { logits, labels, out } => {
            emit(&loss_report(&logits, &labels, &cfg.mtc_config())?, out.as_deref())?;
        }
        Cmd::GradCheck {
            logits,
            labels,
            volumes,
            shape,
            eps,
            coords,
            out,
        } => {
            let opts = FdOptions {
                eps,
                coords,
                ..FdOptions::default()
            };
            let cases = match (logits, labels) {
                (Some(x), Some(y)) => vec![(load_logits(&x)?, load_label_volume(&y)?)],
                _ => {
                    let dims: [usize; 5] = shape
                        .as_slice()
                        .try_into()
                        .map_err(|_| UsageError(format!("--shape needs 5 dims B,T,K,H,W, got {shape:?}")))?;
                    if dims.contains(&0) || dims[2] < 2 || dims[2] > 255 {
                        return Err(UsageError(format!("invalid --shape {shape:?}")).into());
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    (0..volumes).map(|_| random_case(&mut rng, dims)).collect()
                }
            };
            let report = grad_check(
                cases.iter().map(|(x, y)| (x, y.as_slice())),
                &cfg.mtc_config(),
                &opts,
                cfg.seed,
            )
            .map_err(|e| match e.downcast::<stableseg_core::Error>() {
                Ok(stableseg_core::Error::InvalidArgument(m)) => UsageError(m).into(),
                Ok(other) => other.into(),
                Err(e) => e,
            })?;
            emit(&report, out.as_deref())?;
            if !report.passed {
                return Err(CheckFailed(format!(
                    "max relative deviation {:e} exceeds {:e}",
                    report.max_rel, report.tolerance
                ))
                .into());
            }
        }
        Cmd::Eval {
            pred,
            gt,
            map_gt,
            map_pred,
            strict,
            csv,
            out,
        } => {
            let gt = required(gt, &paths.dataset, "gt", "dataset")?;
            cfg.metrics.strict |= strict;
            let report = evaluate(
                &cfg,
                &pred,
                &gt,
                &EvalOptions {
                    map_gt: map_gt.as_deref(),
                    map_pred: map_pred.as_deref(),
                },
            )?;
            if let Some(p) = csv {
                std::fs::write(&p, report.per_class_csv()?).with_context(|| format!("writing {}", p.display()))?;
            }
            emit(&report, out.as_deref())?;
        }
        Cmd::TrainToy {
            data,
            steps,
            lr,
            window,
            out,
        } => {
            let data = required(data, &paths.dataset, "data", "dataset")?;
            if let Some(s) = steps {
                cfg.toy.steps = s;
            }
            if let Some(l) = lr {
                cfg.toy.lr = l;
            }
            cfg.validate()?;
            emit(&toy::run(&cfg, &data, window)?, out.as_deref())?;
        }
        Cmd::SampleClips { video_len, count, out } => {
            let clips = sample_clips(video_len, cfg.clip_len, &cfg.stride_set()?, count, cfg.seed)?;
            emit(&clips, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
