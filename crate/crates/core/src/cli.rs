//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::tensorio::{generate_synthetic, DatasetManifest, SynthSpec};
use crate::trainer::{self, TrainConfig, TrainOptions, CHECKPOINT_DIR, LOG_FILE};

pub const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  unexpected internal error
  2  invalid configuration or command-line usage
  3  missing file or I/O failure
  4  numeric failure (non-finite values during training or I/O)
  5  malformed tensor file, manifest, dataset or shape mismatch
  6  evaluation protocol violation (e.g. empty ground truth)
  7  capacity, congruence or precondition violation";

#[derive(Debug, Parser)]
#[command(name = "aahr", version, about = "Image-text matching: training, embedding and retrieval evaluation")]
#[command(after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic latent-concept dataset.
    Synth {
        /// `default` or a JSON/TOML generator spec.
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long, default_value = "data/synthetic")]
        out: PathBuf,
    },
    /// Train on the manifest's `train` split.
    Train {
        /// Profile name (synthetic, flickr30k, mscoco) or a TOML/JSON config file.
        #[arg(long)]
        config: String,
        #[arg(long, default_value = "data/synthetic/manifest.json")]
        manifest: PathBuf,
        /// Receives train_log.jsonl and checkpoint/.
        #[arg(long, default_value = "runs/aahr")]
        out: PathBuf,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        num_prototypes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write base embeddings for one split (or all pairs).
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split name, or `all`.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Score an embedding directory against the manifest's ground truth.
    Evaluate {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON report path; defaults to report.json inside the embeddings directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_synth_spec(spec: &str) -> Result<SynthSpec> {
    if spec == "default" {
        return Ok(SynthSpec::default());
    }
    let path = Path::new(spec);
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var("AAHR_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("AAHR_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io(Path::new("<stdout>"), e)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth { spec, out: dir } => {
            let spec = read_synth_spec(&spec)?;
            let m = generate_synthetic(&spec, &dir)?;
            writeln!(
                out,
                "wrote {} pairs ({} train, {} test) to {}",
                m.pairs.len(),
                m.pairs_in_split("train").count(),
                m.pairs_in_split("test").count(),
                dir.join("manifest.json").display()
            )
            .map_err(io_err)?;
        }
        Command::Train {
            config,
            manifest,
            out: dir,
            resume,
            epochs,
            num_prototypes,
            seed,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(k) = num_prototypes {
                cfg.num_prototypes = k;
            }
            if let Some(s) = seed_from_env()? {
                cfg.seed = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let manifest = DatasetManifest::load(&manifest)?;
            let mut last_epoch = None;
            let mut epoch_loss = 0.0;
            let mut epoch_steps = 0usize;
            let mut lines = Vec::new();
            let state = trainer::train(
                &cfg,
                &manifest,
                TrainOptions {
                    out_dir: Some(&dir),
                    resume: resume.as_deref(),
                },
                &mut |r| {
                    if last_epoch.is_some_and(|e| e != r.epoch) {
                        lines.push(format!(
                            "epoch {:>3}  mean loss {:.4}",
                            last_epoch.unwrap_or(0) + 1,
                            epoch_loss / epoch_steps as f64
                        ));
                        epoch_loss = 0.0;
                        epoch_steps = 0;
                    }
                    last_epoch = Some(r.epoch);
                    epoch_loss += r.losses.total;
                    epoch_steps += 1;
                },
            )?;
            if let Some(e) = last_epoch {
                lines.push(format!("epoch {:>3}  mean loss {:.4}", e + 1, epoch_loss / epoch_steps as f64));
            }
            for l in lines {
                writeln!(out, "{l}").map_err(io_err)?;
            }
            writeln!(
                out,
                "trained {} steps; checkpoint {}; log {}",
                state.step,
                dir.join(CHECKPOINT_DIR).display(),
                dir.join(LOG_FILE).display()
            )
            .map_err(io_err)?;
        }
        Command::Embed {
            checkpoint,
            manifest,
            out: dir,
            split,
        } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let split = (split != "all").then_some(split);
            let set = trainer::embed(&checkpoint, &manifest, &dir, split.as_deref())?;
            writeln!(
                out,
                "embedded {} images and {} texts into {}",
                set.image_ids.len(),
                set.text_ids.len(),
                dir.display()
            )
            .map_err(io_err)?;
        }
        Command::Evaluate {
            embeddings,
            manifest,
            out: report_path,
        } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let set = trainer::read_embeddings(&embeddings)?;
            let report = trainer::evaluate_embeddings(&set, &manifest)?;
            let path = report_path.unwrap_or_else(|| embeddings.join("report.json"));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
            write!(out, "{}", report.table()).map_err(io_err)?;
            writeln!(out, "\nrSum = {:.1}\nreport: {}", report.rsum, path.display()).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
