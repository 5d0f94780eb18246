//! Command-line front end. `main.rs` only forwards `std::env::args` here.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::align::{align_pair, retrieve_videos, AlignConfig};
use crate::embed::{load_checkpoint, Embed, EmbedParams, RawFeatures};
use crate::error::{Error, Result};
use crate::eval::{default_joints, evaluate, evaluate_report, retrieval_ablation, same_class_pairs, split_held_out};
use crate::io::{load_dataset, write_dataset};
use crate::model::Dataset;
use crate::synth::{generate_dataset, SynthConfig};
use crate::train::{gradient_check, train, TrainConfig, TrainRun, CHECKPOINT_FILE};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "cycle-align", version, about = "Cycle-consistent patch embeddings for video alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config for this subcommand; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (1 is the deterministic reference).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug)]
struct Inference {
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory or `model.cvck` file; raw features when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of temporally aligned frame pairs.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the embedding head.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Align a reference video to a query video.
    Align {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inf: Inference,
        #[arg(long)]
        query: String,
        #[arg(long)]
        reference: String,
    },
    /// Rank every video of the manifest against a query.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inf: Inference,
        #[arg(long)]
        query: String,
    },
    /// Evaluate alignment quality over same-class pairs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inf: Inference,
        /// Only pairs touching the last N videos of each class.
        #[arg(long)]
        held_out: Option<usize>,
        /// Also compare best-retrieved against all-pairs accuracy.
        #[arg(long)]
        retrieval_ablation: bool,
    },
    /// Finite-difference check of the training gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` and runs the subcommand, returning the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Version, seed and config hash of a run.
#[derive(Serialize)]
struct RunHeader<'a, C: Serialize> {
    version: &'static str,
    subcommand: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a C,
}

#[derive(Serialize)]
struct GradcheckConfig {
    seed: u64,
    coords: usize,
}

fn write_header<C: Serialize>(out: &Path, subcommand: &str, seed: u64, config: &C) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    let header = RunHeader {
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        seed,
        config_sha256: Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect(),
        config,
    };
    write_json(&out.join("run.json"), &header)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_embedder(checkpoint: Option<&Path>, feature_dim: usize) -> Result<Box<dyn Embed>> {
    let Some(path) = checkpoint else {
        return Ok(Box::new(RawFeatures));
    };
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let params: EmbedParams = load_checkpoint(&file)?;
    if params.dims.input != feature_dim {
        return Err(Error::Dimension {
            expected: feature_dim,
            got: params.dims.input,
        });
    }
    Ok(Box::new(params))
}

fn align_config(common: &Common, inf: &Inference) -> Result<AlignConfig> {
    let mut cfg: AlignConfig = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(k) = inf.k {
        cfg.k = k;
    }
    Ok(cfg)
}

fn video_index(dataset: &Dataset, id: &str) -> Result<usize> {
    dataset
        .video_index(id)
        .ok_or_else(|| Error::validation(id, "no such video in the manifest"))
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, out } => {
            init_logging(common.verbose);
            let mut cfg: SynthConfig = read_config(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let dataset = generate_dataset(&cfg)?;
            let manifest = write_dataset(&dataset, &out)?;
            write_header(&out, "gen", cfg.seed, &cfg)?;
            println!("{}", manifest.display());
        }
        Command::Train { common, manifest, out, resume } => {
            init_logging(common.verbose);
            let mut cfg: TrainConfig = read_config(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let dataset = load_dataset(&manifest)?;
            write_header(&out, "train", cfg.seed, &cfg)?;
            let run = TrainRun {
                workers: common.workers,
                out_dir: Some(out.clone()),
                resume,
            };
            let outcome = train(&dataset, &cfg, &run)?;
            let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
            println!("trained {} iterations, final loss {last:.6}", outcome.log.len());
        }
        Command::Align { common, inf, query, reference } => {
            init_logging(common.verbose);
            let cfg = align_config(&common, &inf)?;
            let dataset = load_dataset(&inf.manifest)?;
            let embedder = load_embedder(inf.checkpoint.as_deref(), dataset.feature_dim)?;
            let (q, r) = (video_index(&dataset, &query)?, video_index(&dataset, &reference)?);
            write_header(&inf.out, "align", cfg.seed, &cfg)?;
            let pool = thread_pool(common.workers)?;
            let (v, w) = (&dataset.videos[q], &dataset.videos[r]);
            let mut report = pool.install(|| align_pair(v, w, embedder.as_ref(), &cfg))?;
            let all: Vec<_> = dataset.videos.iter().collect();
            report.retrieval = Some(pool.install(|| retrieve_videos(v, &all, embedder.as_ref())).ranking);
            write_json(&inf.out.join("alignment.json"), &report)?;
            match evaluate_report(&report, v, w, &default_joints()) {
                Ok((pair, _)) => write_json(&inf.out.join("pair_eval.json"), &pair)?,
                Err(Error::MissingGroundTruth(msg)) => log::info!("no pair metrics: {msg}"),
                Err(e) => return Err(e),
            }
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Retrieve { common, inf, query } => {
            init_logging(common.verbose);
            let cfg = align_config(&common, &inf)?;
            let dataset = load_dataset(&inf.manifest)?;
            let embedder = load_embedder(inf.checkpoint.as_deref(), dataset.feature_dim)?;
            let q = video_index(&dataset, &query)?;
            write_header(&inf.out, "retrieve", cfg.seed, &cfg)?;
            let all: Vec<_> = dataset.videos.iter().collect();
            let result = thread_pool(common.workers)?.install(|| retrieve_videos(&dataset.videos[q], &all, embedder.as_ref()));
            write_json(&inf.out.join("retrieval.json"), &result)?;
            for (rank, e) in result.ranking.iter().enumerate() {
                println!("{:>3} {} {:.6}", rank + 1, e.video_id, e.score);
            }
        }
        Command::Eval { common, inf, held_out, retrieval_ablation: ablate } => {
            init_logging(common.verbose);
            let cfg = align_config(&common, &inf)?;
            let dataset = load_dataset(&inf.manifest)?;
            let embedder = load_embedder(inf.checkpoint.as_deref(), dataset.feature_dim)?;
            let held = match held_out {
                Some(n) => Some(split_held_out(&dataset, n)?.1),
                None => None,
            };
            let pairs = same_class_pairs(&dataset, held.as_deref());
            write_header(&inf.out, "eval", cfg.seed, &cfg)?;
            let pool = thread_pool(common.workers)?;
            let report = pool.install(|| evaluate(&dataset, embedder.as_ref(), &pairs, &cfg))?;
            write_json(&inf.out.join("eval.json"), &report)?;
            let csv = report.to_csv()?;
            let csv_path = inf.out.join("eval.csv");
            fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
            if ablate {
                let queries: Vec<usize> = match &held {
                    Some(ids) => ids.iter().map(|id| video_index(&dataset, id)).collect::<Result<_>>()?,
                    None => (0..dataset.videos.len()).collect(),
                };
                let r = pool.install(|| retrieval_ablation(&dataset, embedder.as_ref(), &queries, &cfg))?;
                write_json(&inf.out.join("retrieval_ablation.json"), &r)?;
            }
            print!("{csv}");
        }
        Command::Gradcheck { common, coords, out } => {
            init_logging(common.verbose);
            let seed = common.seed.unwrap_or(0);
            if let Some(out) = &out {
                write_header(out, "gradcheck", seed, &GradcheckConfig { seed, coords })?;
            }
            let report = gradient_check(seed, coords)?;
            println!(
                "max relative error {:.3e} over {} coordinates",
                report.max_rel_error, report.coords_checked
            );
            if let Some(out) = &out {
                write_json(&out.join("gradcheck.json"), &report)?;
            }
            if report.max_rel_error.is_nan() || report.max_rel_error > GRADCHECK_TOLERANCE {
                return Err(Error::Numerical(format!(
                    "gradient check failed: relative error {:.3e} > {GRADCHECK_TOLERANCE:e} at coordinate {}",
                    report.max_rel_error, report.worst_coord
                )));
            }
        }
    }
    Ok(())
}
