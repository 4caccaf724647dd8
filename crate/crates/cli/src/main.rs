//! `reactsynth`: dataset synthesis, two-stage training, generation,
//! evaluation and checkpoint inspection.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use reactsynth_core::config::{Precision, Preset, RunConfig};
use reactsynth_core::diffusion::LossKind;
use reactsynth_core::reactor::{Fusion, MumDirection};
use reactsynth_core::Error;

#[derive(Parser, Debug)]
#[command(name = "reactsynth", version, about = "Action-to-reaction motion synthesis")]
struct Cli {
    /// TOML file overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets every seed of the run (training, dataset, generation, evaluation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Disable mutual unit modulation.
    #[arg(long, global = true)]
    no_mum: bool,
    #[arg(long, global = true, value_enum)]
    mum_direction: Option<MumArg>,
    #[arg(long, global = true, value_enum)]
    fusion: Option<FusionArg>,
    /// Single whole-body unit (implies no modulation).
    #[arg(long, global = true)]
    no_unit_division: bool,
    #[arg(long, global = true, value_enum)]
    loss: Option<LossArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset: train/test splits plus a manifest.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the motion tokenizer.
    TrainVae {
        /// Dataset directory written by make-dataset.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss records, one `step loss parts...` line per step.
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        /// Continue from a tokenizer checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the reaction transformer and diffusion heads on a frozen tokenizer.
    TrainReactor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        /// Continue from a model checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one reaction file per action file.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Action motion files (binary, or text with a `.txt` extension).
        #[arg(required = true)]
        actions: Vec<PathBuf>,
    },
    /// Train- and test-conditioned metric protocols.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's header and entries.
    Inspect { checkpoint: PathBuf },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Tiny,
    Small,
    Base,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MumArg {
    B2h,
    H2b,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionArg {
    Acf,
    Concat,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Diffusion,
    L2,
}

impl Cli {
    fn run_config(&self) -> reactsynth_core::Result<RunConfig> {
        let preset = self.preset.map(|p| match p {
            PresetArg::Tiny => Preset::Tiny,
            PresetArg::Small => Preset::Small,
            PresetArg::Base => Preset::Base,
            PresetArg::Paper => Preset::Paper,
        });
        let mut cfg = RunConfig::load(self.config.as_deref(), preset)?;
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(p) = self.precision {
            cfg.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        let r = &mut cfg.model.reactor;
        if self.no_mum {
            r.mum = false;
        }
        if let Some(d) = self.mum_direction {
            r.mum_direction = match d {
                MumArg::B2h => MumDirection::B2h,
                MumArg::H2b => MumDirection::H2b,
                MumArg::Both => MumDirection::Both,
            };
        }
        if let Some(f) = self.fusion {
            r.fusion = match f {
                FusionArg::Acf => Fusion::Acf,
                FusionArg::Concat => Fusion::Concat,
            };
        }
        if self.no_unit_division {
            r.unit_division = false;
            r.mum = false;
        }
        if let Some(l) = self.loss {
            cfg.model.diffusion.loss = match l {
                LossArg::Diffusion => LossKind::Diffusion,
                LossArg::L2 => LossKind::L2,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } | Error::Version(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Checksum { .. } => 3,
        Error::Numeric(_) | Error::Training { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.run_config().and_then(|cfg| commands::run(&cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
