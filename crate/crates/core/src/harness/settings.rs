//! Experiment settings shared by the command-line flags and config files.
//!
//! A config file holds one `key = value` pair per line; `#` starts a
//! comment. Keys are the long flag names without the leading dashes
//! (`bits-w`, `calib-size`, ...); underscores are accepted in place of
//! dashes.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::io::read_file;
use crate::reconstruct::{Balance, ReconstructionConfig};
use crate::vit::BitWidths;

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub bits_w: u8,
    pub bits_a: u8,
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub calib_size: usize,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub auto_balance: bool,
    pub epochs: usize,
    /// Peak learning rate of the full-precision trainer.
    pub train_lr: f64,
    pub dataset: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
    pub log_out: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        let r = ReconstructionConfig::default();
        Self {
            bits_w: r.quantize.bits.block_weight,
            bits_a: r.quantize.bits.block_act,
            iters: r.iterations,
            lr: r.lr,
            batch: r.batch_size,
            calib_size: r.calibration_size,
            seed: r.seed,
            alpha: None,
            beta: None,
            auto_balance: false,
            epochs: 12,
            train_lr: 2e-3,
            dataset: None,
            checkpoint_in: None,
            checkpoint_out: None,
            report_out: None,
            log_out: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Contract(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Contract(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl Settings {
    /// Sets one key. Unknown keys are a contract error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "bits-w" => self.bits_w = parse(k, value)?,
            "bits-a" => self.bits_a = parse(k, value)?,
            "iters" => self.iters = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "batch" => self.batch = parse(k, value)?,
            "calib-size" => self.calib_size = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "alpha" => self.alpha = Some(parse(k, value)?),
            "beta" => self.beta = Some(parse(k, value)?),
            "auto-balance" => self.auto_balance = parse_bool(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "train-lr" => self.train_lr = parse(k, value)?,
            "dataset" => self.dataset = Some(value.into()),
            "checkpoint-in" => self.checkpoint_in = Some(value.into()),
            "checkpoint-out" => self.checkpoint_out = Some(value.into()),
            "report-out" => self.report_out = Some(value.into()),
            "log-out" => self.log_out = Some(value.into()),
            _ => return Err(Error::Contract(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of a config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Contract(format!("config line {}: expected key = value", n + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Contract(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            what: "config file",
            detail: "not UTF-8".into(),
        })?;
        self.apply_text(&text)
    }

    /// Fixed α/β when both are given and auto-balance is off; otherwise
    /// auto-balance.
    pub fn balance(&self) -> Result<Balance> {
        match (self.auto_balance, self.alpha, self.beta) {
            (true, _, _) | (false, None, None) => Ok(Balance::Auto),
            (false, Some(alpha), Some(beta)) => Ok(Balance::Fixed { alpha, beta }),
            _ => Err(Error::contract("alpha and beta must be given together")),
        }
    }

    pub fn reconstruction(&self) -> Result<ReconstructionConfig> {
        let mut config = ReconstructionConfig {
            iterations: self.iters,
            lr: self.lr,
            batch_size: self.batch,
            calibration_size: self.calib_size,
            seed: self.seed,
            balance: self.balance()?,
            ..ReconstructionConfig::default()
        };
        config.quantize.bits = BitWidths::blocks_at(self.bits_w, self.bits_a);
        config.validate()?;
        Ok(config)
    }
}
