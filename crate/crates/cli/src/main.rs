use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use mgrq_core::harness::{
    self, evaluate_top1, load_checkpoint, load_dataset, run_ablation, sample_calibration, save_checkpoint, Dataset,
    Settings, TrainConfig,
};
use mgrq_core::reconstruct::{run_mgrq, Components};
use mgrq_core::{Error, ModelConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mgrq", version, about = "Post-training quantization with block reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the bundled synthetic train/test splits to a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a full-precision model.
    TrainFp,
    /// Quantize a full-precision checkpoint using calibration ranges only.
    Calibrate,
    /// Quantize and reconstruct every block.
    Reconstruct,
    /// Report top-1 accuracy of a checkpoint on the test split.
    Eval,
    /// Run every ablation arm and write the report.
    Ablate,
}

/// Flags accepted by every subcommand. Values given here override the
/// config file.
#[derive(Args, Debug, Default)]
struct Flags {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    bits_w: Option<u8>,
    #[arg(long, global = true)]
    bits_a: Option<u8>,
    /// Reconstruction iterations per block.
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    calib_size: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    auto_balance: bool,
    /// Training epochs for `train-fp`.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Peak learning rate for `train-fp`.
    #[arg(long, global = true)]
    train_lr: Option<f64>,
    /// Directory holding train.bin and test.bin; the bundled task if omitted.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint_in: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long, global = true)]
    report_out: Option<PathBuf>,
    /// Per-iteration loss log (CSV) for `reconstruct`.
    #[arg(long, global = true)]
    log_out: Option<PathBuf>,
}

impl Flags {
    fn settings(&self) -> mgrq_core::Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let pairs = [
            ("bits-w", self.bits_w.map(|v| v.to_string())),
            ("bits-a", self.bits_a.map(|v| v.to_string())),
            ("iters", self.iters.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("calib-size", self.calib_size.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("auto-balance", self.auto_balance.then(|| "true".to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("train-lr", self.train_lr.map(|v| v.to_string())),
            ("dataset", show(&self.dataset)),
            ("checkpoint-in", show(&self.checkpoint_in)),
            ("checkpoint-out", show(&self.checkpoint_out)),
            ("report-out", show(&self.report_out)),
            ("log-out", show(&self.log_out)),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                s.set(key, &v)?;
            }
        }
        Ok(s)
    }
}

fn datasets(s: &Settings) -> mgrq_core::Result<(Dataset, Dataset)> {
    match &s.dataset {
        Some(dir) => Ok((load_dataset(dir.join("train.bin"))?, load_dataset(dir.join("test.bin"))?)),
        None => harness::bundled(),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| anyhow!(Error::Contract(format!("--{flag} is required"))))
}

fn write_with(path: &Path, f: impl FnOnce(BufWriter<File>) -> std::io::Result<()>) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f(BufWriter::new(file)).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let s = cli.flags.settings()?;
    let started = Instant::now();
    match cli.command {
        Command::GenData { out } => {
            std::fs::create_dir_all(&out)?;
            let (train, test) = harness::bundled()?;
            train.save(out.join("train.bin"))?;
            test.save(out.join("test.bin"))?;
            println!("wrote {} train and {} test records to {}", train.len(), test.len(), out.display());
        }
        Command::TrainFp => {
            let out = required(&s.checkpoint_out, "checkpoint-out")?;
            let (train, test) = datasets(&s)?;
            let config = TrainConfig {
                model: ModelConfig {
                    channels: train.channels,
                    image_size: train.height,
                    classes: train.classes,
                    ..ModelConfig::default()
                },
                epochs: s.epochs,
                batch_size: s.batch,
                lr: s.train_lr,
                seed: s.seed,
            };
            let model = harness::train_toy_fp(&train, &config)?;
            save_checkpoint(&model, out)?;
            println!("train top-1 {:.2}%", 100.0 * evaluate_top1(&model, &train)?);
            println!("test top-1  {:.2}%", 100.0 * evaluate_top1(&model, &test)?);
            println!("checksum    {}", harness::checksum(&model));
        }
        Command::Calibrate | Command::Reconstruct => {
            let fp = load_checkpoint(required(&s.checkpoint_in, "checkpoint-in")?)?;
            let out = required(&s.checkpoint_out, "checkpoint-out")?;
            let (train, test) = datasets(&s)?;
            let calibration = sample_calibration(&train, s.calib_size, s.seed)?;
            let mut config = s.reconstruction()?;
            if matches!(cli.command, Command::Calibrate) {
                config.components = Components::NONE;
            }
            let result = run_mgrq(&fp, &calibration.all()?, &config)?;
            save_checkpoint(&result.model, out)?;
            if let Some(path) = &s.log_out {
                write_with(path, |w| result.log.write_csv(w))?;
            }
            println!("fp top-1        {:.2}%", 100.0 * evaluate_top1(&fp, &test)?);
            println!("quantized top-1 {:.2}%", 100.0 * evaluate_top1(&result.model, &test)?);
            println!("checksum        {}", harness::checksum(&result.model));
        }
        Command::Eval => {
            let model = load_checkpoint(required(&s.checkpoint_in, "checkpoint-in")?)?;
            let (_, test) = datasets(&s)?;
            println!("top-1 {:.2}% on {} records", 100.0 * evaluate_top1(&model, &test)?, test.len());
        }
        Command::Ablate => {
            let fp = load_checkpoint(required(&s.checkpoint_in, "checkpoint-in")?)?;
            let (train, test) = datasets(&s)?;
            let calibration = sample_calibration(&train, s.calib_size, s.seed)?;
            let report = run_ablation(&fp, &calibration, &test, &s.reconstruction()?)?;
            if let Some(path) = &s.report_out {
                write_with(path, |w| report.write_csv(w))?;
            }
            print!("{report}");
        }
    }
    info!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical(_)) => EXIT_NUMERICAL,
        Some(e) if e.is_data_error() => EXIT_DATA,
        Some(_) => EXIT_USAGE,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
