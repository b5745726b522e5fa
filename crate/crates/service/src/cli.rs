//! Command-line entry points.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use smup_core::data::{generate_dataset, split_dataset, Dataset, Mode, SynthSpec};
use smup_core::gradcheck;
use smup_core::meta::checkpoint::file_sha256;
use smup_core::meta::trainer::{self, Trainer, LAST_CHECKPOINT};
use smup_core::meta::{Checkpoint, TrainConfig};
use smup_core::retrieval::{embed_gallery, evaluate, RetrievalIndex, DEFAULT_PRECISION_K};
use smup_core::{Error, Result};

use crate::server::{self, AppState, Loaded};

pub const PORT_ENV: &str = "SMUP_PORT";

#[derive(Parser, Debug)]
#[command(name = "smup", version, about = "Style-agnostic sketch-to-photo retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Category,
    Finegrained,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic sketch/photo dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        categories: usize,
        #[arg(long, default_value_t = 8)]
        instances: usize,
        /// Training styles.
        #[arg(long, default_value_t = 3)]
        styles: usize,
        #[arg(long, default_value_t = 2)]
        heldout_styles: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Finegrained)]
        mode: ModeArg,
    },
    /// Warm up and meta-train a model; writes checkpoints and a log into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with training-config fields; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the last checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a split; prints the metrics as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// meta_train, meta_val or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = DEFAULT_PRECISION_K)]
        precision_k: usize,
    },
    /// Embed gallery photos into an index file.
    Index {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict the gallery to the photos of one split; default all photos.
        #[arg(long)]
        split: Option<String>,
    },
    /// Serve retrieval over HTTP.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Dataset whose photo files back the thumbnail endpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Overridden by the SMUP_PORT environment variable.
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Run the finite-difference and bilevel-oracle gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// One-line JSON error for scripts: `{"error": kind, "message": ...}`.
pub fn error_line(e: &Error) -> String {
    let kind = match e {
        Error::Contract(_) => "contract",
        Error::Dataset(_) => "dataset",
        Error::MissingFile(_) => "missing_file",
        Error::Config(_) => "config",
        Error::Checkpoint(_) => "checkpoint",
        Error::Index(_) => "index",
        Error::NonFinite(_) => "non_finite",
        Error::Io { .. } => "io",
        Error::Image(_) => "image",
        Error::Json(_) => "json",
    };
    serde_json::json!({ "error": kind, "message": e.to_string() }).to_string()
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(&e));
            1
        }
    }
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    TrainConfig::from_json(&text)
}

fn photos_of(ds: &Dataset, pairs: &[usize]) -> Vec<usize> {
    let mut p: Vec<usize> = pairs.iter().map(|&i| ds.pairs[i].photo).collect();
    p.sort_unstable();
    p.dedup();
    p
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    let io = |e: std::io::Error| Error::io(Path::new("<stdout>"), e);
    match cmd {
        Command::Synth { out: dir, seed, categories, instances, styles, heldout_styles, size, mode } => {
            let spec = SynthSpec {
                num_categories: categories,
                instances_per_category: instances,
                styles_train: styles,
                styles_heldout: heldout_styles,
                size,
                seed,
                mode: match mode {
                    ModeArg::Category => Mode::Category,
                    ModeArg::Finegrained => Mode::Finegrained,
                },
            };
            generate_dataset(&spec, &dir)?;
            let ds = Dataset::load(&dir)?;
            writeln!(out, "{}", serde_json::json!({ "dataset": dir, "counts": ds.manifest.counts })).map_err(io)?;
        }
        Command::Train { data, out: dir, config, seed, epochs, resume } => {
            let ds = Dataset::load(&data)?;
            let outcome = if resume {
                let ck = Checkpoint::load(&dir.join(LAST_CHECKPOINT))?;
                trainer::run(Trainer::resume(&ds, ck)?, &dir)?
            } else {
                let mut cfg = match config {
                    Some(p) => read_config(&p)?,
                    None => TrainConfig::default(),
                };
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                if let Some(e) = epochs {
                    cfg.epochs = e;
                }
                cfg.validate()?;
                trainer::train(&cfg, &ds, &dir)?
            };
            let first = outcome.records.first().map(|r| r.probe_loss);
            let last = outcome.records.last().map(|r| r.probe_loss);
            writeln!(
                out,
                "{}",
                serde_json::json!({
                    "last": outcome.last_path,
                    "best": outcome.best_path,
                    "log": outcome.log_path,
                    "epochs": outcome.last.epoch,
                    "probe_loss_first": first,
                    "probe_loss_last": last,
                })
            )
            .map_err(io)?;
        }
        Command::Eval { ckpt, data, split, precision_k } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let splits = split_dataset(&ds, &ck.config.split, ck.config.seed)?;
            let mut report = evaluate(&ck.model()?, &ds, splits.get(&split)?, &split, precision_k)?;
            report.checkpoint_sha256 = Some(file_sha256(&ckpt)?);
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?).map_err(io)?;
        }
        Command::Index { ckpt, data, out: path, split } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let photos = match split {
                Some(name) => photos_of(&ds, split_dataset(&ds, &ck.config.split, ck.config.seed)?.get(&name)?),
                None => (0..ds.photos.len()).collect(),
            };
            let index = embed_gallery(&ck.model()?, &ds, &photos)?;
            index.save(&path)?;
            writeln!(out, "{}", serde_json::json!({ "index": path, "rows": index.len(), "dim": index.dim() })).map_err(io)?;
        }
        Command::Serve { ckpt, index, data, host, port } => {
            let port = match std::env::var(PORT_ENV) {
                Ok(v) => v.parse().map_err(|_| Error::Config(format!("{PORT_ENV}={v} is not a port number")))?,
                Err(_) => port,
            };
            let addr: SocketAddr =
                format!("{host}:{port}").parse().map_err(|_| Error::Config(format!("bad address {host}:{port}")))?;
            let state = load_state(&ckpt, &index, data.as_deref())?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io(Path::new("<runtime>"), e))?;
            rt.block_on(server::serve(state, addr)).map_err(|e| Error::io(Path::new("<listener>"), e))?;
        }
        Command::Gradcheck { seed } => {
            let mut ok = true;
            for r in gradcheck::run_all(seed)? {
                ok &= r.passed;
                writeln!(out, "{}", serde_json::to_string(&r)?).map_err(io)?;
            }
            let (second, first) = gradcheck::quadratic_oracle()?;
            let oracle_ok = (second - 0.64).abs() < 1e-6 && (second - first).abs() > 1e-6;
            ok &= oracle_ok;
            writeln!(
                out,
                "{}",
                serde_json::json!({ "name": "bilevel quadratic", "second_order": second, "first_order": first, "passed": oracle_ok })
            )
            .map_err(io)?;
            return Ok(if ok { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Loads checkpoint and index for serving; photo files come from `data` when given.
pub fn load_state(ckpt: &Path, index: &Path, data: Option<&Path>) -> Result<AppState> {
    let ck = Checkpoint::load(ckpt)?;
    let model = ck.model()?;
    let index = RetrievalIndex::load(index)?;
    if index.dim() != model.arch.config.d {
        return Err(Error::Index(format!("index dimension {} does not match model d={}", index.dim(), model.arch.config.d)));
    }
    let photos: HashMap<String, PathBuf> = match data {
        Some(d) => Dataset::load(d)?.photos.into_iter().map(|p| (p.id, p.path)).collect(),
        None => HashMap::new(),
    };
    let model_version = file_sha256(ckpt)?[..12].to_string();
    Ok(AppState::new(Loaded { model, index, model_version, photos }))
}
