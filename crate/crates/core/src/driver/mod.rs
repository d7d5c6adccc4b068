//! Engineering-unit layer over the simulation: volts instead of counts,
//! averaging, tolerance and command-readback checks, history export.

mod conversion;

pub use conversion::*;

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimTime;
use crate::psc::{
    BurstConfig, ExchangeFailure, ExchangeOutcome, Frame, PscError, Request, ShadowRegisters, TriggerConfig,
};
use crate::sim::{ChannelId, SimError, Simulation};
use crate::supply::{expected_status, SupplyKind, COMMAND_MASK, STATUS_STATE_MASK};

pub const CSV_HEADER: &str = "seq,timestamp_us,adc0,adc1,adc2,adc3,status";

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Range(#[from] RangeError),
    #[error("exchange failed: {0:?}")]
    Exchange(ExchangeFailure),
    #[error("unexpected outcome {0:?}")]
    Unexpected(ExchangeOutcome),
    #[error("{0} not configured")]
    NotConfigured(&'static str),
    #[error("need {needed} frames, history holds {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("invalid tolerance: {0}")]
    InvalidTolerance(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DriverError {
    /// The controller error underneath, if any.
    pub fn psc(&self) -> Option<&PscError> {
        match self {
            DriverError::Sim(SimError::Psc(e)) => Some(e),
            _ => None,
        }
    }
}

impl From<PscError> for DriverError {
    fn from(e: PscError) -> Self {
        DriverError::Sim(SimError::Psc(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSpec {
    pub tolerance_volts: f64,
    /// Newest frames that must all deviate before an alarm.
    #[serde(default = "one")]
    pub consecutive: usize,
    /// ADC channel compared against the setpoint.
    #[serde(default)]
    pub adc: usize,
}

fn one() -> usize {
    1
}

impl ToleranceSpec {
    pub fn new(tolerance_volts: f64) -> Self {
        Self {
            tolerance_volts,
            consecutive: 1,
            adc: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DriverError> {
        if !(self.tolerance_volts.is_finite() && self.tolerance_volts >= 0.0) {
            return Err(DriverError::InvalidTolerance(format!(
                "tolerance_volts must be >= 0, got {}",
                self.tolerance_volts
            )));
        }
        if self.consecutive == 0 {
            return Err(DriverError::InvalidTolerance("consecutive must be at least 1".into()));
        }
        if self.adc > 3 {
            return Err(DriverError::InvalidTolerance(format!(
                "adc index {} out of 0..=3",
                self.adc
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToleranceResult {
    Ok,
    /// Deviation of the newest frame, in volts (signed: readback minus
    /// setpoint).
    Alarm {
        deviation: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyResult {
    Ok,
    Mismatch { expected_status: u16, actual_status: u16 },
}

/// How a setpoint or command reached the unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteAck {
    /// Sent now; the unit acknowledged this word.
    Applied(u16),
    /// Held for the next write trigger.
    Staged(u16),
}

impl WriteAck {
    pub fn word(self) -> u16 {
        match self {
            WriteAck::Applied(w) | WriteAck::Staged(w) => w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alarm {
    pub channel: ChannelId,
    pub at: SimTime,
    pub setpoint_volts: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, Default)]
struct ChannelState {
    setpoint_volts: Option<f64>,
    tolerance: Option<ToleranceSpec>,
    alarmed: bool,
    burst: Option<BurstConfig>,
}

pub struct Driver {
    sim: Simulation,
    channels: HashMap<ChannelId, ChannelState>,
}

impl Driver {
    pub fn new(sim: Simulation) -> Self {
        Self {
            sim,
            channels: HashMap::new(),
        }
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulation {
        &mut self.sim
    }

    pub fn into_sim(self) -> Simulation {
        self.sim
    }

    fn state(&mut self, ch: ChannelId) -> &mut ChannelState {
        self.channels.entry(ch).or_default()
    }

    pub fn mode(&self, ch: ChannelId) -> Result<ConversionMode, DriverError> {
        Ok(self.sim.conversion(ch)?)
    }

    pub fn set_mode(&mut self, ch: ChannelId, mode: ConversionMode) -> Result<(), DriverError> {
        Ok(self.sim.set_conversion(ch, mode)?)
    }

    /// Converts and writes a setpoint: immediately under software triggers,
    /// staged for the next write pulse under hardware triggers.
    pub fn set_setpoint(&mut self, ch: ChannelId, volts: f64) -> Result<WriteAck, DriverError> {
        let counts = self.mode(ch)?.volts_to_counts(volts)?;
        let ack = self.write(ch, Request::WriteSetpoint(counts))?;
        self.state(ch).setpoint_volts = Some(volts);
        Ok(ack)
    }

    pub fn setpoint_volts(&self, ch: ChannelId) -> Option<f64> {
        self.channels.get(&ch).and_then(|s| s.setpoint_volts)
    }

    pub fn send_command(&mut self, ch: ChannelId, word: u16) -> Result<WriteAck, DriverError> {
        self.write(ch, Request::WriteCommand(word))
    }

    fn write(&mut self, ch: ChannelId, request: Request) -> Result<WriteAck, DriverError> {
        if self.sim.trigger_config(ch)?.is_hardware() {
            match request {
                Request::WriteSetpoint(w) => {
                    self.sim.stage_setpoint(ch, w)?;
                    return Ok(WriteAck::Staged(w));
                }
                Request::WriteCommand(w) => {
                    self.sim.stage_command(ch, w)?;
                    return Ok(WriteAck::Staged(w));
                }
                _ => unreachable!("only writes are staged"),
            }
        }
        match self.sim.execute(ch, request)? {
            ExchangeOutcome::Written(w) => Ok(WriteAck::Applied(w)),
            other => Err(outcome_error(other)),
        }
    }

    /// One software-triggered read.
    pub fn read(&mut self, ch: ChannelId) -> Result<Frame, DriverError> {
        match self.sim.execute(ch, Request::ReadData)? {
            ExchangeOutcome::Data { frame, .. } => Ok(frame),
            other => Err(outcome_error(other)),
        }
    }

    pub fn frame_volts(&self, ch: ChannelId, frame: &Frame) -> Result<[f64; 4], DriverError> {
        let mode = self.mode(ch)?;
        Ok(frame.adc.map(|c| mode.counts_to_volts(c)))
    }

    pub fn read_volts(&mut self, ch: ChannelId) -> Result<[f64; 4], DriverError> {
        let frame = self.read(ch)?;
        self.frame_volts(ch, &frame)
    }

    /// Mean of the newest `n` stored frames, per ADC channel. Counts are
    /// averaged first and converted once.
    pub fn read_averaged(&self, ch: ChannelId, n: usize) -> Result<[f64; 4], DriverError> {
        let history = self.sim.history(ch)?;
        if n == 0 || history.len() < n {
            return Err(DriverError::InsufficientData {
                needed: n.max(1),
                available: history.len(),
            });
        }
        let mode = self.mode(ch)?;
        let mut sums = [0i64; 4];
        for frame in history.iter_newest_first().take(n) {
            for (sum, &c) in sums.iter_mut().zip(&frame.adc) {
                *sum += i64::from(mode.signed_value(c));
            }
        }
        Ok(sums.map(|s| mode.value_to_volts(s as f64 / n as f64)))
    }

    pub fn tolerance_check(&self, ch: ChannelId, spec: &ToleranceSpec) -> Result<ToleranceResult, DriverError> {
        spec.validate()?;
        let setpoint = self.setpoint_volts(ch).ok_or(DriverError::NotConfigured("setpoint"))?;
        let history = self.sim.history(ch)?;
        if history.len() < spec.consecutive {
            return Err(DriverError::InsufficientData {
                needed: spec.consecutive,
                available: history.len(),
            });
        }
        let mode = self.mode(ch)?;
        let deviations: Vec<f64> = history
            .iter_newest_first()
            .take(spec.consecutive)
            .map(|f| mode.counts_to_volts(f.adc[spec.adc]) - setpoint)
            .collect();
        if deviations.iter().all(|d| d.abs() > spec.tolerance_volts) {
            Ok(ToleranceResult::Alarm {
                deviation: deviations[0],
            })
        } else {
            Ok(ToleranceResult::Ok)
        }
    }

    /// Keeps `spec` for [`Driver::poll_alarms`].
    pub fn set_tolerance(&mut self, ch: ChannelId, spec: Option<ToleranceSpec>) -> Result<(), DriverError> {
        if let Some(spec) = &spec {
            spec.validate()?;
        }
        let state = self.state(ch);
        state.tolerance = spec;
        state.alarmed = false;
        Ok(())
    }

    pub fn tolerance(&self, ch: ChannelId) -> Option<ToleranceSpec> {
        self.channels.get(&ch).and_then(|s| s.tolerance)
    }

    /// Checks every channel with a stored tolerance and reports channels
    /// that have just gone into alarm.
    pub fn poll_alarms(&mut self) -> Vec<Alarm> {
        let mut raised = Vec::new();
        let mut channels: Vec<_> = self
            .channels
            .iter()
            .filter_map(|(ch, s)| s.tolerance.map(|t| (*ch, t)))
            .collect();
        channels.sort_by_key(|(ch, _)| *ch);
        for (ch, spec) in channels {
            let Ok(result) = self.tolerance_check(ch, &spec) else {
                continue;
            };
            let setpoint_volts = self.setpoint_volts(ch).unwrap_or_default();
            let state = self.state(ch);
            match result {
                ToleranceResult::Alarm { deviation } if !state.alarmed => {
                    state.alarmed = true;
                    raised.push(Alarm {
                        channel: ch,
                        at: self.sim.now(),
                        setpoint_volts,
                        deviation,
                    });
                }
                ToleranceResult::Ok => state.alarmed = false,
                _ => {}
            }
        }
        raised
    }

    /// Fetches both shadow registers from the unit.
    pub fn fetch_shadow_registers(&mut self, ch: ChannelId) -> Result<ShadowRegisters, DriverError> {
        for request in [Request::ReadLastSetpoint, Request::ReadLastCommand] {
            match self.sim.execute(ch, request)? {
                ExchangeOutcome::Register(_) => {}
                other => return Err(outcome_error(other)),
            }
        }
        Ok(self.sim.shadow_registers(ch)?)
    }

    /// Shadow registers as last fetched.
    pub fn shadow_registers(&self, ch: ChannelId) -> Result<ShadowRegisters, DriverError> {
        Ok(self.sim.shadow_registers(ch)?)
    }

    /// Reads a fresh frame and compares its status against the fetched
    /// last-command register.
    pub fn command_readback_check(&mut self, ch: ChannelId) -> Result<ConsistencyResult, DriverError> {
        let command = self
            .sim
            .shadow_registers(ch)?
            .last_command
            .ok_or(PscError::NotYetRead)?;
        let frame = self.read(ch)?;
        let (expected, actual) = match self.sim.supply_kind(ch)? {
            // Status inputs are wired straight to the command outputs.
            SupplyKind::Loopback => (command & COMMAND_MASK, frame.status & COMMAND_MASK),
            SupplyKind::FirstOrder => (
                expected_status(command) & STATUS_STATE_MASK,
                frame.status & STATUS_STATE_MASK,
            ),
        };
        Ok(if expected == actual {
            ConsistencyResult::Ok
        } else {
            ConsistencyResult::Mismatch {
                expected_status: expected,
                actual_status: actual,
            }
        })
    }

    /// Writes the history oldest first as CSV; returns the row count.
    pub fn write_history_csv<W: Write>(&self, ch: ChannelId, out: W) -> Result<usize, DriverError> {
        Ok(write_csv(self.sim.history(ch)?.iter_oldest_first(), out)?)
    }

    pub fn save_history(&self, ch: ChannelId, path: impl AsRef<Path>) -> Result<usize, DriverError> {
        let file = File::create(path)?;
        self.write_history_csv(ch, file)
    }

    pub fn set_trigger_source(&mut self, ch: ChannelId, trigger: TriggerConfig) -> Result<(), DriverError> {
        Ok(self.sim.set_trigger(ch, trigger)?)
    }

    /// Validates and stores burst settings; a rejected config leaves the
    /// previous one in place.
    pub fn configure_burst(&mut self, ch: ChannelId, config: BurstConfig) -> Result<(), DriverError> {
        self.sim.controller(ch)?;
        config.validate()?;
        self.state(ch).burst = Some(config);
        Ok(())
    }

    pub fn burst_config(&self, ch: ChannelId) -> Option<BurstConfig> {
        self.channels.get(&ch).and_then(|s| s.burst)
    }

    /// Runs the configured burst to completion; returns frames captured.
    pub fn run_burst(&mut self, ch: ChannelId) -> Result<u32, DriverError> {
        let config = self.burst_config(ch).ok_or(DriverError::NotConfigured("burst"))?;
        Ok(self.sim.run_burst(ch, config)?)
    }

    pub fn set_enabled(&mut self, ch: ChannelId, enabled: bool) -> Result<(), DriverError> {
        Ok(self.sim.set_enabled(ch, enabled)?)
    }

    pub fn clear_errors(&mut self, ch: ChannelId) -> Result<(), DriverError> {
        Ok(self.sim.clear_errors(ch)?)
    }

    pub fn freeze(&mut self, ch: ChannelId) -> Result<(), DriverError> {
        Ok(self.sim.freeze(ch)?)
    }

    pub fn unfreeze(&mut self, ch: ChannelId) -> Result<(), DriverError> {
        Ok(self.sim.unfreeze(ch)?)
    }

    pub fn recalibrate(&mut self, ch: ChannelId) -> Result<(), DriverError> {
        match self.sim.execute(ch, Request::Recalibrate)? {
            ExchangeOutcome::Recalibrating => Ok(()),
            other => Err(outcome_error(other)),
        }
    }
}

fn outcome_error(outcome: ExchangeOutcome) -> DriverError {
    match outcome {
        ExchangeOutcome::Failed(f) => DriverError::Exchange(f),
        other => DriverError::Unexpected(other),
    }
}

/// History CSV: unsigned decimal counts, hex status, `\n` line ends.
pub fn write_csv<'a, W: Write>(frames: impl IntoIterator<Item = &'a Frame>, out: W) -> io::Result<usize> {
    let mut out = BufWriter::new(out);
    writeln!(out, "{CSV_HEADER}")?;
    let mut rows = 0;
    for f in frames {
        writeln!(
            out,
            "{},{},{},{},{},{},0x{:04X}",
            f.seq, f.timestamp_us, f.adc[0], f.adc[1], f.adc[2], f.adc[3], f.status
        )?;
        rows += 1;
    }
    out.flush()?;
    Ok(rows)
}
