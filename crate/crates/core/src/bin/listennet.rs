use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use listennet::cli::{
    cmd_audit, cmd_eval, cmd_gradcheck, cmd_prep, cmd_train, exit_code, print_jsonl, EXIT_OK, EXIT_SELFTEST,
};
use listennet::io::{gen_synthetic, ModelOverrides, RunConfig, RunConfigFile, SynthSpec, TrainOverrides};
use listennet::train::Protocol;
use listennet::verify::BatteryOptions;
use listennet::{ModelConfig, Result};

// Training churns through large short-lived tensors; the system allocator
// returns them to the OS and pays page faults on every step.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "listennet", version, about = "EEG auditory attention detection with ListenNet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize, align and window a dataset; writes prepared recordings.
    Prep {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Train and test under the configured protocol.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Score a saved model on every window of a dataset.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// A `model-<fold>.json` written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Print parameter and multiply-accumulate counts.
    Audit {
        #[arg(long, default_value_t = 64)]
        channels: usize,
        /// Window length in samples.
        #[arg(long, default_value_t = 128)]
        window_len: usize,
        #[arg(long)]
        no_mste: bool,
        #[arg(long)]
        no_cna: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run the finite-difference gradient battery.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Perturb one analytic gradient; the battery must then fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Generate a synthetic dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        subjects: usize,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 64.0)]
        fs: f32,
        /// Seconds per trial.
        #[arg(long, default_value_t = 20.0)]
        duration: f64,
        #[arg(long, default_value_t = 4.0)]
        snr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Mirrors the run configuration file; anything given here wins.
#[derive(Args)]
struct RunFlags {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    window_seconds: Option<f64>,
    #[arg(long)]
    stride_seconds: Option<f64>,
    #[arg(long)]
    align: Option<bool>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Protocol>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    val_fraction_loso: Option<f64>,
    #[arg(long)]
    d_depth: Option<usize>,
    #[arg(long)]
    k0: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    mste_kernels: Option<Vec<usize>>,
    #[arg(long)]
    dilation: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    use_mste: Option<bool>,
    #[arg(long)]
    use_cna: Option<bool>,
}

fn parse_mode(s: &str) -> std::result::Result<Protocol, String> {
    match s {
        "subject_dependent" | "sd" => Ok(Protocol::SubjectDependent),
        "loso" => Ok(Protocol::Loso),
        other => Err(format!("unknown mode {other:?}; use subject_dependent or loso")),
    }
}

impl RunFlags {
    fn resolve(self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfigFile::load(path)?,
            None => RunConfigFile::default(),
        };
        let flags = RunConfigFile {
            seed: self.seed,
            window_seconds: self.window_seconds,
            stride_seconds: self.stride_seconds,
            align: self.align,
            output_dir: self.out,
            model: ModelOverrides {
                d_depth: self.d_depth,
                k0: self.k0,
                mste_kernels: self.mste_kernels,
                dilation: self.dilation,
                groups: self.groups,
                use_mste: self.use_mste,
                use_cna: self.use_cna,
            },
            train: TrainOverrides {
                mode: self.mode,
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                batch_size: self.batch_size,
                max_epochs: self.max_epochs,
                patience: self.patience,
                val_fraction_loso: self.val_fraction_loso,
            },
        };
        RunConfig::resolve(base.merge(flags))
    }
}

fn run(command: Command) -> Result<u8> {
    let stdout = std::io::stdout();
    match command {
        Command::Prep { manifest, run } => {
            let path = cmd_prep(&manifest, &run.resolve()?)?;
            println!("{}", path.display());
        }
        Command::Train { manifest, run } => {
            let summaries = cmd_train(&manifest, &run.resolve()?)?;
            print_jsonl(stdout.lock(), &summaries)?;
        }
        Command::Eval { manifest, model, run } => {
            let rows = cmd_eval(&manifest, &model, &run.resolve()?)?;
            print_jsonl(stdout.lock(), &rows)?;
        }
        Command::Audit {
            channels,
            window_len,
            no_mste,
            no_cna,
            json,
        } => {
            let cfg = ModelConfig {
                use_mste: !no_mste,
                use_cna: !no_cna,
                ..ModelConfig::with_input(channels, window_len)
            };
            let report = cmd_audit(&cfg)?;
            if json {
                print_jsonl(stdout.lock(), &[report])?;
            } else {
                println!("{report}");
            }
        }
        Command::Gradcheck {
            seed,
            samples,
            inject_fault,
        } => {
            let (reports, ok) = cmd_gradcheck(&BatteryOptions {
                seed,
                samples,
                corrupt_backward: inject_fault,
                ..BatteryOptions::default()
            })?;
            print_jsonl(stdout.lock(), &reports)?;
            if !ok {
                return Ok(EXIT_SELFTEST);
            }
        }
        Command::Synth {
            out,
            subjects,
            trials,
            channels,
            fs,
            duration,
            snr,
            seed,
        } => {
            let spec = SynthSpec {
                subjects,
                trials_per_subject: trials,
                channels,
                fs,
                duration,
                snr,
                seed,
            };
            println!("{}", gen_synthetic(&spec, &out)?.display());
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
