use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lungsynth::pipeline::commands::{
    cmd_compose, cmd_eval, cmd_gradcheck, cmd_sample_masks, cmd_synth_data, cmd_train_maskgan, cmd_train_translator,
    cmd_translate,
};
use lungsynth::pipeline::config::{resolve_out, RunConfig, OUT_ENV};

#[derive(Parser)]
#[command(name = "lungsynth", version, about = "Mask-then-image synthesis of lung nodule slices")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Falls back to the config, then `$LUNGSYNTH_OUT/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired phantom dataset.
    SynthData {
        /// Overrides the configured sample count.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the progressive mask GAN on a dataset's train split.
    TrainMaskgan {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample label masks from a mask GAN checkpoint.
    SampleMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Train the mask-to-image translator on a dataset's train split.
    TrainTranslator {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate a directory of mask PNGs into images.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        masks: PathBuf,
    },
    /// Sample masks, translate them and write an annotated dataset.
    Compose {
        #[arg(long)]
        mask_checkpoint: PathBuf,
        #[arg(long)]
        translator_checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Compare a synthetic image directory against a real one.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
    },
    /// Finite-difference gradient checks (`all`, `attention`, `maskgan`,
    /// `translator` or a single target name).
    Gradcheck {
        #[arg(long, default_value = "all")]
        select: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::TrainMaskgan { .. } => "train-maskgan",
            Command::SampleMasks { .. } => "sample-masks",
            Command::TrainTranslator { .. } => "train-translator",
            Command::Translate { .. } => "translate",
            Command::Compose { .. } => "compose",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

fn run(cli: Cli) -> lungsynth::Result<bool> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Command::SynthData { samples: Some(n) } = &cli.command {
        cfg.dataset.samples = *n;
    }
    let cfg = cfg.effective();
    cfg.validate()?;
    let env_root = std::env::var_os(OUT_ENV).map(PathBuf::from);
    let out = resolve_out(cli.common.out.as_deref(), &cfg, env_root.as_deref(), cli.command.name());
    let out: &Path = &out;
    match &cli.command {
        Command::SynthData { .. } => {
            let m = cmd_synth_data(&cfg, out)?;
            println!("wrote {} samples to {}", m.samples.len(), out.display());
        }
        Command::TrainMaskgan { dataset, resume } => {
            let s = cmd_train_maskgan(&cfg, dataset, out, resume.as_deref())?;
            println!("trained {} steps (step {}); checkpoint {}", s.steps_run, s.final_step, s.checkpoint.display());
        }
        Command::SampleMasks { checkpoint, n } => {
            let masks = cmd_sample_masks(&cfg, checkpoint, *n, out)?;
            println!("wrote {} masks to {}", masks.len(), out.display());
        }
        Command::TrainTranslator { dataset, resume } => {
            let s = cmd_train_translator(&cfg, dataset, out, resume.as_deref())?;
            println!("trained {} steps (step {}); checkpoint {}", s.steps_run, s.final_step, s.checkpoint.display());
        }
        Command::Translate { checkpoint, masks } => {
            let n = cmd_translate(&cfg, checkpoint, masks, out)?;
            println!("wrote {n} images to {}", out.display());
        }
        Command::Compose {
            mask_checkpoint,
            translator_checkpoint,
            n,
        } => {
            let m = cmd_compose(&cfg, mask_checkpoint, translator_checkpoint, *n, out)?;
            println!("wrote {} pairs to {}", m.samples.len(), out.display());
        }
        Command::Eval { real, synth } => {
            let r = cmd_eval(&cfg, real, synth, out)?;
            println!(
                "FID {:.4}  PSNR {:.3} dB  SSIM {:.4}  ({} pairs)",
                r.full_image.fid, r.full_image.psnr_255, r.full_image.ssim, r.full_image.pairs
            );
        }
        Command::Gradcheck { select } => {
            let report = cmd_gradcheck(&cfg, select, out)?;
            for e in &report.entries {
                let verdict = if e.passed { "ok" } else { "FAIL" };
                println!("{verdict:4} {:<34} {:.3e}", e.target, e.max_relative_error);
            }
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
