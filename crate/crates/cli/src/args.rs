//! Command-line surface. Every option may also come from a JSON config file
//! given with `--config`; flags on the command line win.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use spikeconv::convert::BiasRule;
use spikeconv::energy::EnergyConstants;
use spikeconv::snn::{CodingConfig, Scheme};

use crate::{Invalid, Usage};

#[derive(Parser, Debug)]
#[command(
    name = "spikeconv",
    version,
    about = "ANN-to-SNN conversion and spiking simulation harness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a built-in fixture network with its sample and evaluation inputs
    GenFixture(GenFixtureArgs),
    /// Fold batch norm, sample channel maxima and normalize weights
    Convert(ConvertArgs),
    /// Simulate a converted model on one input and report errors and energy
    Run(RunArgs),
    /// Run a grid of (timesteps, compression, scheme) settings on a fixture
    Sweep(SweepArgs),
    /// Summarize a run or sweep directory as markdown
    Report(ReportArgs),
}

/// Fill unset fields of `$flags` from `$config`.
macro_rules! fill {
    ($flags:ident, $config:ident, $($f:ident),*) => {
        $( if $flags.$f.is_none() { $flags.$f = $config.$f; } )*
    };
}

fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())).into())
}

pub fn require<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Usage(format!("missing --{flag} (on the command line or in --config)")).into())
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenFixtureArgs {
    /// Built-in fixture name: F1, F2 or F3
    #[arg(long)]
    pub fixture: Option<String>,
    /// Override the fixture's RNG seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON config file supplying any of the flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl GenFixtureArgs {
    pub fn merged(mut self) -> Result<Self> {
        if let Some(path) = self.config.clone() {
            let c: Self = load_config(&path)?;
            fill!(self, c, fixture, seed, out);
        }
        Ok(self)
    }
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvertArgs {
    /// Model manifest (model.json)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Tensor set used to sample channel maxima
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Bias normalization rule: derived or printed
    #[arg(long)]
    pub bias_rule: Option<BiasRule>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl ConvertArgs {
    pub fn merged(mut self) -> Result<Self> {
        if let Some(path) = self.config.clone() {
            let c: Self = load_config(&path)?;
            fill!(self, c, model, samples, bias_rule, out);
        }
        Ok(self)
    }
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunArgs {
    /// Converted model manifest (converted.json)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Tensor set holding the evaluation input
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Which tensor of the input set to use
    #[arg(long)]
    pub index: Option<usize>,
    /// Total timesteps T
    #[arg(long)]
    pub timesteps: Option<u32>,
    /// Compression factor f_c (must divide T; default 1)
    #[arg(long)]
    pub compression: Option<u32>,
    /// Coding scheme: rate or stdi
    #[arg(long)]
    pub scheme: Option<Scheme>,
    /// Cap on a single burst
    #[arg(long)]
    pub s_max: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Energy per operation; settable from the config file only.
    #[arg(skip)]
    pub energy: Option<EnergyConstants>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl RunArgs {
    pub fn merged(mut self) -> Result<Self> {
        if let Some(path) = self.config.clone() {
            let c: Self = load_config(&path)?;
            fill!(
                self,
                c,
                model,
                input,
                index,
                timesteps,
                compression,
                scheme,
                s_max,
                out,
                energy
            );
        }
        Ok(self)
    }

    pub fn coding(&self) -> Result<CodingConfig> {
        let c = CodingConfig::new(
            require(self.scheme, "scheme")?,
            require(self.timesteps, "timesteps")?,
            self.compression.unwrap_or(1),
        )?;
        Ok(match self.s_max {
            Some(cap) => c.with_burst_cap(cap)?,
            None => c,
        })
    }
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepArgs {
    /// Built-in fixture name
    #[arg(long)]
    pub fixture: Option<String>,
    /// Override the fixture seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated `T:f_c:scheme` triples, e.g. `64:1:rate,64:16:stdi`
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<GridPoint>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl SweepArgs {
    pub fn merged(mut self) -> Result<Self> {
        if let Some(path) = self.config.clone() {
            let c: Self = load_config(&path)?;
            fill!(self, c, fixture, seed, grid, out);
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, serde::Serialize)]
pub struct GridPoint {
    pub timesteps: u32,
    pub compression: u32,
    pub scheme: Scheme,
}

impl std::str::FromStr for GridPoint {
    type Err = Invalid;

    fn from_str(s: &str) -> std::result::Result<Self, Invalid> {
        let bad = || Invalid(format!("grid point `{s}` is not T:f_c:scheme"));
        let mut it = s.trim().split(':');
        let (Some(t), Some(f), Some(sc), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        Ok(GridPoint {
            timesteps: t.parse().map_err(|_| bad())?,
            compression: f.parse().map_err(|_| bad())?,
            scheme: sc.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportArgs {
    /// Run or sweep output directory to summarize
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Where report.md is written
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl ReportArgs {
    pub fn merged(mut self) -> Result<Self> {
        if let Some(path) = self.config.clone() {
            let c: Self = load_config(&path)?;
            fill!(self, c, input, out);
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points_parse() {
        let p: GridPoint = "64:16:stdi".parse().unwrap();
        assert_eq!((p.timesteps, p.compression, p.scheme), (64, 16, Scheme::Stdi));
        assert!("64:16".parse::<GridPoint>().is_err());
        assert!("64:x:rate".parse::<GridPoint>().is_err());
    }

    #[test]
    fn flags_win_over_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(
            &cfg,
            r#"{"timesteps": 16, "compression": 4, "scheme": "rate", "index": 2}"#,
        )
        .unwrap();
        let args = Cli::try_parse_from([
            "spikeconv",
            "run",
            "--timesteps",
            "64",
            "--config",
            cfg.to_str().unwrap(),
        ])
        .unwrap();
        let Command::Run(run) = args.command else { panic!() };
        let run = run.merged().unwrap();
        assert_eq!(run.timesteps, Some(64));
        assert_eq!(run.compression, Some(4));
        assert_eq!(run.index, Some(2));
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"timestep": 16}"#).unwrap();
        let args = RunArgs {
            config: Some(cfg),
            ..RunArgs::default()
        };
        assert!(args.merged().is_err());
    }
}
