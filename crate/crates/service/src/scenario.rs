//! Scenario files: controller topology, links, supplies and clock settings.

use std::collections::HashSet;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use psc_core::driver::{ConversionMode, ToleranceSpec};
use psc_core::link::LinkConfig;
use psc_core::psc::{TriggerConfig, MAX_CHANNELS};
use psc_core::psi::{PsiConfig, DEFAULT_PULSE_WIDTH};
use psc_core::sim::{ChannelSetup, SimConfig, SimError, Simulation, DEFAULT_REPLY_TIMEOUT};
use psc_core::supply::SupplyParams;
use psc_core::SimTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::host::Host;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{}: unknown scenario format (expected .toml or .json)", .0.display())]
    Format(PathBuf),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl ScenarioError {
    fn invalid(field: impl Into<String>, message: impl ToString) -> Self {
        ScenarioError::Invalid {
            field: field.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Fast,
    Realtime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockConfig {
    pub mode: ClockMode,
    /// Virtual seconds per wall second in realtime mode.
    pub realtime_scale: f64,
    /// Virtual time run before the first command, e.g. to let the
    /// converters finish calibrating.
    pub warmup_s: f64,
    pub reply_timeout_us: f64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            mode: ClockMode::Fast,
            realtime_scale: 1.0,
            warmup_s: 0.0,
            reply_timeout_us: DEFAULT_REPLY_TIMEOUT.as_secs_f64() * 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub psi_address: u8,
    #[serde(default)]
    pub link: LinkConfig,
    #[serde(default = "loopback")]
    pub supply: SupplyParams,
    #[serde(default)]
    pub trigger: TriggerConfig,
    #[serde(default)]
    pub conversion: ConversionMode,
    /// Command lines jumpered for pulsed operation.
    #[serde(default)]
    pub pulsed_mask: u16,
    #[serde(default = "default_pulse_width_us")]
    pub pulse_width_us: u64,
    #[serde(default)]
    pub tolerance: Option<ToleranceSpec>,
}

fn loopback() -> SupplyParams {
    SupplyParams::Loopback
}

fn default_pulse_width_us() -> u64 {
    DEFAULT_PULSE_WIDTH.as_micros() as u64
}

impl ChannelSpec {
    pub fn loopback(psi_address: u8) -> Self {
        Self {
            psi_address,
            link: LinkConfig::default(),
            supply: SupplyParams::Loopback,
            trigger: TriggerConfig::default(),
            conversion: ConversionMode::default(),
            pulsed_mask: 0,
            pulse_width_us: default_pulse_width_us(),
            tolerance: None,
        }
    }

    fn setup(&self) -> ChannelSetup {
        ChannelSetup {
            psi: PsiConfig {
                address: self.psi_address,
                pulsed_mask: self.pulsed_mask,
                pulse_width_us: self.pulse_width_us,
                conversion: self.conversion,
            },
            link: self.link,
            supply: self.supply,
            trigger: self.trigger,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PscSpec {
    pub id: u32,
    #[serde(default)]
    pub channels: Vec<ChannelSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub clock: ClockConfig,
    #[serde(default)]
    pub pscs: Vec<PscSpec>,
}

impl Scenario {
    /// Reads a `.toml` or `.json` scenario and validates it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_owned(),
            source,
        })?;
        let parse_err = |message: String| ScenarioError::Parse {
            path: path.to_owned(),
            message,
        };
        let scenario: Scenario = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
            Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
            _ => return Err(ScenarioError::Format(path.to_owned())),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let clock = &self.clock;
        if !(clock.realtime_scale.is_finite() && clock.realtime_scale > 0.0) {
            return Err(ScenarioError::invalid("clock.realtime_scale", "must be positive"));
        }
        if !(clock.warmup_s.is_finite() && clock.warmup_s >= 0.0) {
            return Err(ScenarioError::invalid("clock.warmup_s", "must be non-negative"));
        }
        if !(clock.reply_timeout_us.is_finite() && clock.reply_timeout_us > 0.0) {
            return Err(ScenarioError::invalid("clock.reply_timeout_us", "must be positive"));
        }
        let mut ids = HashSet::new();
        for (i, psc) in self.pscs.iter().enumerate() {
            if !ids.insert(psc.id) {
                return Err(ScenarioError::invalid(
                    format!("pscs[{i}].id"),
                    format!("duplicate id {}", psc.id),
                ));
            }
            if psc.channels.len() > MAX_CHANNELS {
                return Err(ScenarioError::invalid(
                    format!("pscs[{i}].channels"),
                    format!("{} channels, a controller has {MAX_CHANNELS}", psc.channels.len()),
                ));
            }
            let mut ports = HashSet::new();
            for (j, ch) in psc.channels.iter().enumerate() {
                let field = |name: &str| format!("pscs[{i}].channels[{j}].{name}");
                if usize::from(ch.psi_address) >= MAX_CHANNELS {
                    return Err(ScenarioError::invalid(
                        field("psi_address"),
                        format!("{} out of range 0..={}", ch.psi_address, MAX_CHANNELS - 1),
                    ));
                }
                if !ports.insert(ch.psi_address) {
                    return Err(ScenarioError::invalid(
                        field("psi_address"),
                        format!("channel {} wired twice", ch.psi_address),
                    ));
                }
                ch.link
                    .validate()
                    .map_err(|e| ScenarioError::invalid(field("link"), e))?;
                ch.supply
                    .validate()
                    .map_err(|e| ScenarioError::invalid(field("supply"), e))?;
                ch.trigger
                    .validate()
                    .map_err(|e| ScenarioError::invalid(field("trigger"), e))?;
                if !(ch.conversion.full_scale_volts.is_finite() && ch.conversion.full_scale_volts > 0.0) {
                    return Err(ScenarioError::invalid(
                        field("conversion.full_scale_volts"),
                        "must be positive",
                    ));
                }
                if let Some(t) = &ch.tolerance {
                    t.validate()
                        .map_err(|e| ScenarioError::invalid(field("tolerance"), e))?;
                }
            }
        }
        Ok(())
    }

    pub fn channel_count(&self) -> usize {
        self.pscs.iter().map(|p| p.channels.len()).sum()
    }

    /// Wires the simulation, powers every unit on and runs the warmup.
    pub fn build(&self, seed: Option<u64>) -> Result<Host, ScenarioError> {
        self.validate()?;
        let mut sim = Simulation::new(SimConfig {
            seed: seed.unwrap_or(self.seed),
            reply_timeout: Duration::from_nanos((self.clock.reply_timeout_us * 1e3).round() as u64),
        });
        let mut psc_ids = Vec::with_capacity(self.pscs.len());
        let mut tolerances = Vec::new();
        for (i, psc) in self.pscs.iter().enumerate() {
            let index = sim.add_psc();
            psc_ids.push(psc.id);
            for (j, ch) in psc.channels.iter().enumerate() {
                let id = sim
                    .add_channel(index, ch.setup())
                    .map_err(|e: SimError| ScenarioError::invalid(format!("pscs[{i}].channels[{j}]"), e))?;
                if let Some(t) = ch.tolerance {
                    tolerances.push((id, t));
                }
            }
        }
        sim.run_until(SimTime::from_secs_f64(self.clock.warmup_s));
        let mut host = Host::new(sim, psc_ids);
        for (id, t) in tolerances {
            host.driver_mut().set_tolerance(id, Some(t)).expect("validated above");
        }
        Ok(host)
    }
}
