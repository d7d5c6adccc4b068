//! Interface unit mounted on a power supply: one DAC, four ADCs, 15 command
//! outputs and 16 status inputs, driven by messages from its controller
//! channel.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::SimTime;
use crate::codec::{self, Command, Message, WireBytes, MAX_FRAME_LEN};
use crate::driver::ConversionMode;
use crate::supply::{SupplyModel, COMMAND_MASK};

/// Converter settling delay after power-on or a recalibrate command.
pub const CALIBRATION_DELAY: Duration = Duration::from_secs(60);
pub const DEFAULT_PULSE_WIDTH: Duration = Duration::from_millis(100);
/// Set in replies while the converters are calibrating.
pub const STATUS_CALIBRATING: u16 = 1 << 15;
pub const COMMAND_BITS: usize = 15;

/// Jumper and converter configuration of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiConfig {
    pub address: u8,
    /// Bit `i` set: command line `i` is pulsed rather than static.
    #[serde(default)]
    pub pulsed_mask: u16,
    #[serde(default = "default_pulse_width_us")]
    pub pulse_width_us: u64,
    #[serde(default)]
    pub conversion: ConversionMode,
}

fn default_pulse_width_us() -> u64 {
    DEFAULT_PULSE_WIDTH.as_micros() as u64
}

impl PsiConfig {
    pub fn new(address: u8) -> Self {
        Self {
            address,
            pulsed_mask: 0,
            pulse_width_us: default_pulse_width_us(),
            conversion: ConversionMode::default(),
        }
    }
}

/// A pulse on a jumpered command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandPulse {
    pub bit_index: u8,
    pub asserted_at: SimTime,
    pub width: Duration,
}

impl CommandPulse {
    pub fn is_high(&self, now: SimTime) -> bool {
        now >= self.asserted_at && now < self.asserted_at + self.width
    }
}

#[derive(Debug, Clone)]
pub struct Psi {
    address: u8,
    dac_register: u16,
    last_command: u16,
    jumper_pulsed: u16,
    pulse_width: Duration,
    pulses: [Option<CommandPulse>; COMMAND_BITS],
    calibrating_until: Option<SimTime>,
    conversion: ConversionMode,
    supply: SupplyModel,
    supply_time: SimTime,
    applied_outputs: u16,
}

impl Psi {
    /// A unit that has not been powered on yet. Call [`Psi::power_on`].
    pub fn new(config: PsiConfig, supply: SupplyModel) -> Self {
        Self {
            address: config.address,
            dac_register: 0,
            last_command: 0,
            jumper_pulsed: config.pulsed_mask & COMMAND_MASK,
            pulse_width: Duration::from_micros(config.pulse_width_us),
            pulses: [None; COMMAND_BITS],
            calibrating_until: None,
            conversion: config.conversion,
            supply,
            supply_time: SimTime::ZERO,
            applied_outputs: 0,
        }
    }

    /// Resets the registers and starts the power-on calibration.
    pub fn power_on(&mut self, now: SimTime) {
        self.dac_register = 0;
        self.last_command = 0;
        self.pulses = [None; COMMAND_BITS];
        self.calibrating_until = Some(now + CALIBRATION_DELAY);
        self.supply_time = now;
        self.drive_outputs(now);
    }

    pub fn address(&self) -> u8 {
        self.address
    }

    pub fn dac_register(&self) -> u16 {
        self.dac_register
    }

    pub fn last_command(&self) -> u16 {
        self.last_command
    }

    pub fn jumper_pulsed(&self) -> u16 {
        self.jumper_pulsed
    }

    pub fn calibrating_until(&self) -> Option<SimTime> {
        self.calibrating_until
    }

    pub fn is_calibrating(&self, now: SimTime) -> bool {
        self.calibrating_until.is_some_and(|until| now < until)
    }

    pub fn conversion(&self) -> ConversionMode {
        self.conversion
    }

    pub fn set_conversion(&mut self, conversion: ConversionMode) {
        self.conversion = conversion;
    }

    pub fn supply(&self) -> &SupplyModel {
        &self.supply
    }

    /// Mutable access to the attached supply. Call [`Psi::settle`] first so
    /// the supply's dynamics are current.
    pub fn supply_mut(&mut self) -> &mut SupplyModel {
        &mut self.supply
    }

    pub fn active_pulses(&self, now: SimTime) -> impl Iterator<Item = &CommandPulse> {
        self.pulses.iter().flatten().filter(move |p| p.is_high(now))
    }

    /// Levels on the 15 command lines: static lines follow the last command
    /// word, pulsed lines are high only during their pulse window.
    pub fn command_outputs(&self, now: SimTime) -> u16 {
        let static_bits = self.last_command & !self.jumper_pulsed;
        let pulsed_bits = self.active_pulses(now).fold(0u16, |acc, p| acc | (1 << p.bit_index));
        static_bits | pulsed_bits
    }

    fn dac_volts(&self) -> f64 {
        self.conversion.counts_to_volts(self.dac_register)
    }

    /// Brings the supply model and command lines up to `now`.
    pub fn settle(&mut self, now: SimTime) {
        let dt = now.saturating_since(self.supply_time).as_secs_f64();
        if dt > 0.0 {
            let dac = self.dac_volts();
            self.supply.step(dt, dac);
            self.supply_time = now;
        }
        self.drive_outputs(now);
    }

    fn drive_outputs(&mut self, now: SimTime) {
        let outputs = self.command_outputs(now);
        if outputs != self.applied_outputs {
            self.supply.on_command(outputs);
            self.applied_outputs = outputs;
        }
    }

    /// Status word as it would appear in a data reply at `now`.
    pub fn status_word(&self, now: SimTime) -> u16 {
        let calibrating = if self.is_calibrating(now) {
            STATUS_CALIBRATING
        } else {
            0
        };
        (self.supply.read_status() & COMMAND_MASK) | calibrating
    }

    fn sample(&mut self) -> [u16; 4] {
        let volts = self.supply.sample(self.dac_volts());
        volts.map(|v| self.conversion.volts_to_counts_saturating(v))
    }

    /// Processes one frame received over the fiber and returns the reply,
    /// if any.
    ///
    /// Frames with a bad checksum, start byte or length are returned
    /// unmodified. Unknown opcodes, replies, and frames addressed elsewhere
    /// get no answer; the controller sees a timeout. Frames longer than any
    /// legal frame overflow the receiver and are discarded.
    pub fn handle_message(&mut self, raw: &[u8], now: SimTime) -> Option<WireBytes> {
        let msg = match codec::decode(raw) {
            Ok(msg) => msg,
            Err(err) if err.kind.is_corruption() => {
                return (raw.len() <= MAX_FRAME_LEN).then(|| raw.iter().copied().collect());
            }
            Err(_) => return None,
        };
        if msg.opcode.response || msg.address != self.address {
            return None;
        }
        self.settle(now);

        let command = msg.opcode.command;
        let reply_words: WireWords = match command {
            Command::WriteSetpoint => {
                self.dac_register = msg.payload[0];
                WireWords::one(self.dac_register)
            }
            Command::WriteCommand => {
                let word = msg.payload[0] & COMMAND_MASK;
                self.last_command = word;
                for bit in 0..COMMAND_BITS as u8 {
                    let mask = 1u16 << bit;
                    if word & mask != 0 && self.jumper_pulsed & mask != 0 {
                        self.pulses[bit as usize] = Some(CommandPulse {
                            bit_index: bit,
                            asserted_at: now,
                            width: self.pulse_width,
                        });
                    }
                }
                self.drive_outputs(now);
                WireWords::one(word)
            }
            Command::ReadData => {
                let adc = self.sample();
                let status = self.status_word(now);
                WireWords::data(adc, status)
            }
            Command::ReadLastSetpoint => WireWords::one(self.dac_register),
            Command::ReadLastCommand => WireWords::one(self.last_command),
            Command::Recalibrate => {
                self.calibrating_until = Some(now + CALIBRATION_DELAY);
                WireWords::none()
            }
        };
        let reply = Message::response(self.address, command, reply_words.as_slice())
            .expect("reply lengths follow the opcode table");
        Some(codec::encode(&reply).expect("reply is well-formed"))
    }
}

struct WireWords {
    words: [u16; 5],
    len: usize,
}

impl WireWords {
    fn none() -> Self {
        Self { words: [0; 5], len: 0 }
    }

    fn one(word: u16) -> Self {
        Self {
            words: [word, 0, 0, 0, 0],
            len: 1,
        }
    }

    fn data(adc: [u16; 4], status: u16) -> Self {
        Self {
            words: [adc[0], adc[1], adc[2], adc[3], status],
            len: 5,
        }
    }

    fn as_slice(&self) -> &[u16] {
        &self.words[..self.len]
    }
}
