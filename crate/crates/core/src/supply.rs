//! Power supply models attached to an interface unit.
//!
//! Command and status bit assignments (shared with the driver's
//! command/readback consistency check):
//!
//! | bit | command output     | status input (first-order model) |
//! |-----|--------------------|----------------------------------|
//! | 0   | On                 | On                               |
//! | 1   | Off                | Standby                          |
//! | 2   | Standby            | Fault                            |
//! | 3   | Reset (clear fault)| Interlock OK                     |
//! | 15  | -                  | Converters calibrating (set by the interface unit) |
//!
//! A loopback supply wires the command outputs straight back into the
//! status inputs and the DAC output into ADC channel 0.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CMD_ON: u16 = 1 << 0;
pub const CMD_OFF: u16 = 1 << 1;
pub const CMD_STANDBY: u16 = 1 << 2;
pub const CMD_RESET: u16 = 1 << 3;

pub const STATUS_ON: u16 = 1 << 0;
pub const STATUS_STANDBY: u16 = 1 << 1;
pub const STATUS_FAULT: u16 = 1 << 2;
pub const STATUS_INTERLOCK_OK: u16 = 1 << 3;
/// Status bits compared by the command/readback check.
pub const STATUS_STATE_MASK: u16 = STATUS_ON | STATUS_STANDBY | STATUS_FAULT;

/// Only 15 command lines exist.
pub const COMMAND_MASK: u16 = 0x7FFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupplyState {
    Off,
    Standby,
    On,
    Fault,
}

impl SupplyState {
    pub fn status_bits(self) -> u16 {
        match self {
            SupplyState::Off => STATUS_INTERLOCK_OK,
            SupplyState::Standby => STATUS_STANDBY | STATUS_INTERLOCK_OK,
            SupplyState::On => STATUS_ON | STATUS_INTERLOCK_OK,
            SupplyState::Fault => STATUS_FAULT,
        }
    }

    /// State after the command lines in `rising` go high.
    pub fn apply_rising_edges(self, rising: u16) -> SupplyState {
        let mut state = self;
        if rising & CMD_RESET != 0 && state == SupplyState::Fault {
            state = SupplyState::Off;
        }
        if state == SupplyState::Fault {
            return state;
        }
        if rising & CMD_ON != 0 {
            state = SupplyState::On;
        }
        if rising & CMD_OFF != 0 {
            state = SupplyState::Off;
        }
        if rising & CMD_STANDBY != 0 {
            state = SupplyState::Standby;
        }
        state
    }
}

/// Status bits a healthy first-order supply should report after receiving
/// `command` from the off state.
pub fn expected_status(command: u16) -> u16 {
    SupplyState::Off.apply_rising_edges(command).status_bits()
}

/// Scenario-level description of a supply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SupplyParams {
    Loopback,
    FirstOrder {
        tau_s: f64,
        #[serde(default = "unit_gain")]
        gain: f64,
        #[serde(default)]
        noise_std: f64,
        #[serde(default)]
        initial_state: Option<SupplyState>,
    },
}

fn unit_gain() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SupplyConfigError {
    #[error("time constant must be positive, got {0} s")]
    Tau(f64),
    #[error("noise std must be finite and non-negative, got {0} V")]
    Noise(f64),
    #[error("gain must be finite, got {0}")]
    Gain(f64),
}

impl SupplyParams {
    pub fn validate(&self) -> Result<(), SupplyConfigError> {
        if let SupplyParams::FirstOrder {
            tau_s, gain, noise_std, ..
        } = *self
        {
            if !(tau_s.is_finite() && tau_s > 0.0) {
                return Err(SupplyConfigError::Tau(tau_s));
            }
            if !gain.is_finite() {
                return Err(SupplyConfigError::Gain(gain));
            }
            if !(noise_std.is_finite() && noise_std >= 0.0) {
                return Err(SupplyConfigError::Noise(noise_std));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> SupplyKind {
        match self {
            SupplyParams::Loopback => SupplyKind::Loopback,
            SupplyParams::FirstOrder { .. } => SupplyKind::FirstOrder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupplyKind {
    Loopback,
    FirstOrder,
}

/// Test wiring: DAC output fed to ADC 0, command outputs fed to status.
#[derive(Debug, Clone, Default)]
pub struct Loopback {
    output: f64,
    command_bits: u16,
}

/// Single-pole supply. The output follows `gain * dac` with time constant
/// `tau` while on; noise is added to the ADC 0 readback only.
#[derive(Debug, Clone)]
pub struct FirstOrder {
    tau_s: f64,
    gain: f64,
    noise: Option<Normal<f64>>,
    state: SupplyState,
    output: f64,
    command_bits: u16,
    rng: ChaCha8Rng,
}

impl FirstOrder {
    pub fn new(tau_s: f64, gain: f64, noise_std: f64, seed: u64) -> Self {
        let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("validated std"));
        Self {
            tau_s,
            gain,
            noise,
            state: SupplyState::Off,
            output: 0.0,
            command_bits: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn with_state(mut self, state: SupplyState) -> Self {
        self.state = state;
        self
    }

    pub fn tau_s(&self) -> f64 {
        self.tau_s
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// Sets the internal output directly (initial conditions in tests).
    pub fn set_output(&mut self, volts: f64) {
        self.output = volts;
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum SupplyModel {
    Loopback(Loopback),
    FirstOrder(FirstOrder),
}

impl SupplyModel {
    pub fn loopback() -> Self {
        SupplyModel::Loopback(Loopback::default())
    }

    pub fn first_order(tau_s: f64, gain: f64, noise_std: f64, seed: u64) -> Self {
        SupplyModel::FirstOrder(FirstOrder::new(tau_s, gain, noise_std, seed))
    }

    pub fn from_params(params: &SupplyParams, seed: u64) -> Self {
        match *params {
            SupplyParams::Loopback => Self::loopback(),
            SupplyParams::FirstOrder {
                tau_s,
                gain,
                noise_std,
                initial_state,
            } => SupplyModel::FirstOrder(
                FirstOrder::new(tau_s, gain, noise_std, seed).with_state(initial_state.unwrap_or(SupplyState::Off)),
            ),
        }
    }

    pub fn kind(&self) -> SupplyKind {
        match self {
            SupplyModel::Loopback(_) => SupplyKind::Loopback,
            SupplyModel::FirstOrder(_) => SupplyKind::FirstOrder,
        }
    }

    /// Advances the model by `dt_s` seconds with the DAC held at `dac_volts`.
    ///
    /// The first-order model uses the exact zero-order-hold update
    /// `y += (1 - e^(-dt/tau)) (gain*u - y)`, which agrees with the Euler step
    /// `(dt/tau)(gain*u - y)` to first order and stays exact for any `dt`.
    pub fn step(&mut self, dt_s: f64, dac_volts: f64) {
        debug_assert!(dt_s >= 0.0);
        match self {
            SupplyModel::Loopback(lb) => lb.output = dac_volts,
            SupplyModel::FirstOrder(fo) => {
                if fo.state == SupplyState::On && dt_s > 0.0 {
                    let target = fo.gain * dac_volts;
                    let alpha = -(-dt_s / fo.tau_s).exp_m1();
                    fo.output += alpha * (target - fo.output);
                }
            }
        }
    }

    /// Presents a new command-output word to the supply.
    pub fn on_command(&mut self, bits: u16) {
        let bits = bits & COMMAND_MASK;
        match self {
            SupplyModel::Loopback(lb) => lb.command_bits = bits,
            SupplyModel::FirstOrder(fo) => {
                let rising = bits & !fo.command_bits;
                fo.command_bits = bits;
                let next = fo.state.apply_rising_edges(rising);
                if next != SupplyState::On {
                    fo.output = 0.0;
                }
                fo.state = next;
            }
        }
    }

    pub fn read_status(&self) -> u16 {
        match self {
            SupplyModel::Loopback(lb) => lb.command_bits & COMMAND_MASK,
            SupplyModel::FirstOrder(fo) => fo.state.status_bits(),
        }
    }

    /// Analog inputs as seen by the four ADCs, in volts.
    pub fn sample(&mut self, dac_volts: f64) -> [f64; 4] {
        match self {
            SupplyModel::Loopback(_) => [dac_volts, 0.0, 0.0, 0.0],
            SupplyModel::FirstOrder(fo) => {
                let noise = match &fo.noise {
                    Some(dist) => dist.sample(&mut fo.rng),
                    None => 0.0,
                };
                [fo.output + noise, fo.gain * dac_volts, 0.0, 0.0]
            }
        }
    }

    /// Noise-free output voltage.
    pub fn output(&self) -> f64 {
        match self {
            SupplyModel::Loopback(lb) => lb.output,
            SupplyModel::FirstOrder(fo) => fo.output,
        }
    }

    pub fn state(&self) -> Option<SupplyState> {
        match self {
            SupplyModel::Loopback(_) => None,
            SupplyModel::FirstOrder(fo) => Some(fo.state),
        }
    }

    /// Trips the supply (first-order model only): output drops to zero and
    /// the fault status bit latches until a reset command.
    pub fn inject_fault(&mut self) {
        if let SupplyModel::FirstOrder(fo) = self {
            fo.state = SupplyState::Fault;
            fo.output = 0.0;
        }
    }
}
