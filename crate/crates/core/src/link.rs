//! Fiber pair between one controller channel and its interface unit.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimTime;
use crate::codec::WireBytes;

pub const MAX_LENGTH_M: f64 = 4000.0;
pub const DEFAULT_PROP_DELAY_NS_PER_M: f64 = 5.0;
pub const DEFAULT_PROCESSING_DELAY_US: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Controller to interface unit.
    Downlink,
    /// Interface unit to controller.
    Uplink,
}

/// Which directions fault injection applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultDirection {
    #[default]
    Both,
    Downlink,
    Uplink,
}

impl FaultDirection {
    fn covers(self, dir: Direction) -> bool {
        match self {
            FaultDirection::Both => true,
            FaultDirection::Downlink => dir == Direction::Downlink,
            FaultDirection::Uplink => dir == Direction::Uplink,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultConfig {
    pub corrupt_prob: f64,
    pub drop_prob: f64,
    /// Seed for this link's fault stream. Derived from the scenario seed when
    /// absent.
    pub seed: Option<u64>,
    pub direction: FaultDirection,
}

impl FaultConfig {
    pub fn is_active(&self) -> bool {
        self.corrupt_prob > 0.0 || self.drop_prob > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub length_m: f64,
    pub prop_delay_ns_per_m: f64,
    pub processing_delay_us: f64,
    pub faults: FaultConfig,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            length_m: 0.0,
            prop_delay_ns_per_m: DEFAULT_PROP_DELAY_NS_PER_M,
            processing_delay_us: DEFAULT_PROCESSING_DELAY_US,
            faults: FaultConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkConfigError {
    #[error("fiber length {0} m outside 0..={max} m", max = MAX_LENGTH_M)]
    Length(f64),
    #[error("{field} must be finite and non-negative, got {value}")]
    Negative { field: &'static str, value: f64 },
    #[error("{field} must be a probability in [0, 1], got {value}")]
    Probability { field: &'static str, value: f64 },
}

impl LinkConfig {
    pub fn with_length(length_m: f64) -> Self {
        Self {
            length_m,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LinkConfigError> {
        if !(0.0..=MAX_LENGTH_M).contains(&self.length_m) {
            return Err(LinkConfigError::Length(self.length_m));
        }
        for (field, value) in [
            ("prop_delay_ns_per_m", self.prop_delay_ns_per_m),
            ("processing_delay_us", self.processing_delay_us),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LinkConfigError::Negative { field, value });
            }
        }
        self.faults.validate()
    }

    /// Fixed one-way latency: processing plus propagation.
    pub fn one_way_delay(&self) -> Duration {
        let ns = self.processing_delay_us * 1_000.0 + self.length_m * self.prop_delay_ns_per_m;
        Duration::from_nanos(ns.round() as u64)
    }
}

impl FaultConfig {
    pub fn validate(&self) -> Result<(), LinkConfigError> {
        for (field, value) in [("corrupt_prob", self.corrupt_prob), ("drop_prob", self.drop_prob)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(LinkConfigError::Probability { field, value });
            }
        }
        Ok(())
    }
}

/// A frame in flight, due at the far end at `deliver_at`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub bytes: WireBytes,
    pub deliver_at: SimTime,
    pub corrupted: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub sent: u64,
    pub dropped: u64,
    pub corrupted: u64,
}

#[derive(Debug, Clone)]
pub struct Link {
    config: LinkConfig,
    delay: Duration,
    rng: ChaCha8Rng,
    stats: LinkStats,
}

impl Link {
    /// `fallback_seed` seeds the fault stream when the config carries none.
    pub fn new(config: LinkConfig, fallback_seed: u64) -> Result<Self, LinkConfigError> {
        config.validate()?;
        Ok(Self {
            delay: config.one_way_delay(),
            rng: ChaCha8Rng::seed_from_u64(config.faults.seed.unwrap_or(fallback_seed)),
            config,
            stats: LinkStats::default(),
        })
    }

    pub fn config(&self) -> &LinkConfig {
        &self.config
    }

    pub fn one_way_delay(&self) -> Duration {
        self.delay
    }

    pub fn round_trip(&self) -> Duration {
        self.delay * 2
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    /// Replaces the fault settings. Reseeds only if the new settings carry
    /// a seed.
    pub fn set_faults(&mut self, faults: FaultConfig) -> Result<(), LinkConfigError> {
        faults.validate()?;
        if let Some(seed) = faults.seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        self.config.faults = faults;
        Ok(())
    }

    /// Puts `bytes` on the fiber. Returns `None` if the frame is lost.
    /// A corrupted frame has exactly one bit flipped.
    pub fn transmit(&mut self, dir: Direction, bytes: WireBytes, sent_at: SimTime) -> Option<Delivery> {
        self.stats.sent += 1;
        let faults = self.config.faults;
        let mut bytes = bytes;
        let mut corrupted = false;
        if faults.is_active() && faults.direction.covers(dir) {
            if faults.drop_prob > 0.0 && self.rng.random_bool(faults.drop_prob) {
                self.stats.dropped += 1;
                return None;
            }
            if faults.corrupt_prob > 0.0 && !bytes.is_empty() && self.rng.random_bool(faults.corrupt_prob) {
                let bit = self.rng.random_range(0..bytes.len() * 8);
                bytes[bit / 8] ^= 1 << (bit % 8);
                corrupted = true;
                self.stats.corrupted += 1;
            }
        }
        Some(Delivery {
            bytes,
            deliver_at: sent_at + self.delay,
            corrupted,
        })
    }
}
