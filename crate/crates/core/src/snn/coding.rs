use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How spikes carry value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Firing-rate coding; every spike unit is worth one threshold.
    Rate,
    /// Spike-time-dependent integrated coding; a spike at compressed step `t`
    /// is worth `tau(t) = T_c - t + 1` thresholds.
    Stdi,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Rate => "rate",
            Scheme::Stdi => "stdi",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rate" => Ok(Scheme::Rate),
            "stdi" => Ok(Scheme::Stdi),
            other => Err(Error::Coding(format!(
                "unknown scheme `{other}` (expected rate or stdi)"
            ))),
        }
    }
}

/// Coding scheme plus timestep budget.
///
/// `timesteps` is the uncompressed length `T`; each compressed step folds
/// `compression` (`f_c`) uncompressed steps, giving `T_c = T / f_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodingConfig {
    pub scheme: Scheme,
    pub timesteps: u32,
    pub compression: u32,
    /// Optional cap on a single burst. Rate coding is always capped at `f_c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_max: Option<u32>,
}

impl CodingConfig {
    pub fn new(scheme: Scheme, timesteps: u32, compression: u32) -> Result<Self> {
        let c = CodingConfig {
            scheme,
            timesteps,
            compression,
            s_max: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn rate(timesteps: u32, compression: u32) -> Result<Self> {
        Self::new(Scheme::Rate, timesteps, compression)
    }

    pub fn stdi(timesteps: u32, compression: u32) -> Result<Self> {
        Self::new(Scheme::Stdi, timesteps, compression)
    }

    pub fn with_burst_cap(mut self, cap: u32) -> Result<Self> {
        self.s_max = Some(cap);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 || self.compression == 0 {
            return Err(Error::Coding("timesteps and compression must be positive".into()));
        }
        if !self.timesteps.is_multiple_of(self.compression) {
            return Err(Error::Coding(format!(
                "compression {} does not divide timesteps {}",
                self.compression, self.timesteps
            )));
        }
        if self.s_max == Some(0) {
            return Err(Error::Coding("burst cap must be positive".into()));
        }
        Ok(())
    }

    /// `T_c`.
    pub fn compressed_timesteps(&self) -> u32 {
        self.timesteps / self.compression
    }

    /// Largest burst a neuron may emit in one compressed step.
    pub fn burst_cap(&self) -> Option<u32> {
        match self.scheme {
            Scheme::Rate => Some(self.s_max.map_or(self.compression, |c| c.min(self.compression))),
            Scheme::Stdi => self.s_max,
        }
    }

    /// Value carried by one spike emitted at compressed step `t` (1-based).
    pub fn spike_weight(&self, t: u32) -> u32 {
        match self.scheme {
            Scheme::Rate => 1,
            Scheme::Stdi => self.compressed_timesteps() - t + 1,
        }
    }
}
