//! Controller-side state of one fiber channel: the frame history ring,
//! latched error bits, trigger and burst settings, shadow registers, and the
//! request/reply state machine that drives one exchange at a time.
//!
//! Nothing here schedules events; [`crate::sim::Simulation`] moves bytes
//! between this state machine, the link and the interface unit.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimTime;
use crate::codec::{self, Command, Message, WireBytes};

/// Frames kept per channel.
pub const HISTORY_CAPACITY: usize = 5458;
/// Channels (interface units) per controller.
pub const MAX_CHANNELS: usize = 6;
/// Fastest burst or trigger rate the controller can sustain.
pub const MAX_RATE_HZ: u32 = 10_000;
/// Exchanges waiting behind the one on the wire before triggers are missed.
pub const MAX_PENDING: usize = 8;

/// One stored readback: four ADC counts and the status word, stamped when
/// the reply reached the controller.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub seq: u64,
    pub timestamp_us: u64,
    pub adc: [u16; 4],
    pub status: u16,
}

/// Fixed-capacity circular frame store with a freeze (inhibit) flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryBuffer {
    frames: Box<[Frame]>,
    write_index: usize,
    count: usize,
    frozen: bool,
}

impl Default for HistoryBuffer {
    fn default() -> Self {
        Self::new()
    }
}

impl HistoryBuffer {
    pub fn new() -> Self {
        Self {
            frames: vec![Frame::default(); HISTORY_CAPACITY].into_boxed_slice(),
            write_index: 0,
            count: 0,
            frozen: false,
        }
    }

    pub const fn capacity(&self) -> usize {
        HISTORY_CAPACITY
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Slot the next frame will be written to.
    pub fn write_index(&self) -> usize {
        self.write_index
    }

    /// Slot holding the most recent frame.
    pub fn last_frame_pointer(&self) -> Option<usize> {
        (self.count > 0).then(|| (self.write_index + HISTORY_CAPACITY - 1) % HISTORY_CAPACITY)
    }

    /// Appends a frame, overwriting the oldest once full. Returns `false`
    /// (and changes nothing) while frozen.
    pub fn push(&mut self, frame: Frame) -> bool {
        if self.frozen {
            return false;
        }
        self.frames[self.write_index] = frame;
        self.write_index = (self.write_index + 1) % HISTORY_CAPACITY;
        self.count = (self.count + 1).min(HISTORY_CAPACITY);
        true
    }

    pub fn newest(&self) -> Option<&Frame> {
        self.last_frame_pointer().map(|i| &self.frames[i])
    }

    pub fn iter_newest_first(&self) -> impl Iterator<Item = &Frame> + '_ {
        (1..=self.count).map(move |back| &self.frames[(self.write_index + HISTORY_CAPACITY - back) % HISTORY_CAPACITY])
    }

    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Frame> + '_ {
        let start = (self.write_index + HISTORY_CAPACITY - self.count) % HISTORY_CAPACITY;
        (0..self.count).map(move |i| &self.frames[(start + i) % HISTORY_CAPACITY])
    }

    /// Up to `n` frames, newest first.
    pub fn read_history(&self, n: usize) -> Vec<Frame> {
        self.iter_newest_first().take(n).copied().collect()
    }

    /// Drops all frames. Leaves the freeze flag alone.
    pub fn clear(&mut self) {
        if !self.frozen {
            self.write_index = 0;
            self.count = 0;
        }
    }
}

/// Per-channel error bits. The two error bits latch until cleared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelStatus {
    pub link_error: bool,
    pub checksum_error: bool,
    pub disabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BurstConfig {
    pub rate_hz: u32,
    pub cycles: u32,
}

impl BurstConfig {
    pub fn validate(&self) -> Result<(), PscError> {
        if self.rate_hz > MAX_RATE_HZ {
            return Err(PscError::RateTooHigh(f64::from(self.rate_hz)));
        }
        if self.rate_hz == 0 {
            return Err(PscError::InvalidRate(0.0));
        }
        if self.cycles == 0 {
            return Err(PscError::NoCycles);
        }
        Ok(())
    }

    pub fn period_ns(&self) -> u64 {
        1_000_000_000 / u64::from(self.rate_hz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerSource {
    #[default]
    Software,
    Hardware,
}

/// Read and write triggers are separate pulse trains. In hardware mode each
/// runs at its own rate; a rate of zero means pulses arrive only through
/// explicit external-trigger calls.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TriggerConfig {
    pub source: TriggerSource,
    #[serde(default)]
    pub read_hz: f64,
    #[serde(default)]
    pub write_hz: f64,
    /// Delay of the write pulse train relative to the read train.
    #[serde(default)]
    pub write_offset_us: f64,
}

impl TriggerConfig {
    pub fn software() -> Self {
        Self::default()
    }

    pub fn hardware(read_hz: f64, write_hz: f64) -> Self {
        Self {
            source: TriggerSource::Hardware,
            read_hz,
            write_hz,
            write_offset_us: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PscError> {
        for rate in [self.read_hz, self.write_hz] {
            if !(rate.is_finite() && rate >= 0.0) {
                return Err(PscError::InvalidRate(rate));
            }
            if rate > f64::from(MAX_RATE_HZ) {
                return Err(PscError::RateTooHigh(rate));
            }
        }
        if !(self.write_offset_us.is_finite() && self.write_offset_us >= 0.0) {
            return Err(PscError::InvalidRate(self.write_offset_us));
        }
        Ok(())
    }

    pub fn is_hardware(&self) -> bool {
        self.source == TriggerSource::Hardware
    }
}

/// Last setpoint and command read back from the unit. Kept apart from the
/// history ring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowRegisters {
    pub last_setpoint: Option<u16>,
    pub last_command: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PscError {
    #[error("channel is disabled")]
    ChannelDisabled,
    #[error("history buffer is frozen")]
    BufferFrozen,
    #[error("rate {0} Hz exceeds {MAX_RATE_HZ} Hz")]
    RateTooHigh(f64),
    #[error("invalid rate {0}")]
    InvalidRate(f64),
    #[error("burst needs at least one cycle")]
    NoCycles,
    #[error("a burst is already running on this channel")]
    BurstInProgress,
    #[error("channel busy: {MAX_PENDING} exchanges already queued")]
    Busy,
    #[error("register has not been read from the unit yet")]
    NotYetRead,
}

/// Operation carried by one exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Request {
    ReadData,
    WriteSetpoint(u16),
    WriteCommand(u16),
    ReadLastSetpoint,
    ReadLastCommand,
    Recalibrate,
}

impl Request {
    pub fn command(self) -> Command {
        match self {
            Request::ReadData => Command::ReadData,
            Request::WriteSetpoint(_) => Command::WriteSetpoint,
            Request::WriteCommand(_) => Command::WriteCommand,
            Request::ReadLastSetpoint => Command::ReadLastSetpoint,
            Request::ReadLastCommand => Command::ReadLastCommand,
            Request::Recalibrate => Command::Recalibrate,
        }
    }

    fn message(self, address: u8) -> Message {
        // The address was validated when the channel was built.
        match self {
            Request::WriteSetpoint(w) | Request::WriteCommand(w) => Message::request(address, self.command(), &[w]),
            _ => Message::request(address, self.command(), &[]),
        }
        .expect("valid request")
    }
}

/// Why an exchange was started; decides where its result goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    /// Periodic or external trigger pulse.
    Trigger,
    /// Tick of the burst with this id.
    Burst(u64),
    /// Explicit request whose outcome a caller will collect.
    Tracked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExchangeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExchangeFailure {
    /// The unit returned our frame: it failed the checksum on arrival.
    Echoed,
    /// The reply failed its own checksum or framing.
    CorruptReply,
    /// A well-formed reply that answers a different request.
    UnexpectedReply,
    /// No reply within the timeout.
    Timeout,
    /// Dropped from the queue because the channel was disabled.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeOutcome {
    Data { frame: Frame, stored: bool },
    Written(u16),
    Register(u16),
    Recalibrating,
    Failed(ExchangeFailure),
}

impl ExchangeOutcome {
    pub fn is_ok(&self) -> bool {
        !matches!(self, ExchangeOutcome::Failed(_))
    }
}

/// A finished exchange, handed back to the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolved {
    pub id: ExchangeId,
    pub request: Request,
    pub origin: Origin,
    pub outcome: ExchangeOutcome,
}

#[derive(Debug, Clone, Copy)]
struct Exchange {
    id: ExchangeId,
    request: Request,
    origin: Origin,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCounters {
    pub exchanges: u64,
    pub reads_ok: u64,
    pub frames_stored: u64,
    pub frames_inhibited: u64,
    pub checksum_errors: u64,
    pub link_errors: u64,
    pub missed_triggers: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BurstProgress {
    pub id: u64,
    pub config: BurstConfig,
    pub resolved: u32,
    pub captured: u32,
}

/// Controller state for one fiber channel.
#[derive(Debug, Clone)]
pub struct PscChannel {
    address: u8,
    history: HistoryBuffer,
    status: ChannelStatus,
    trigger: TriggerConfig,
    staged_setpoint: Option<u16>,
    staged_command: Option<u16>,
    shadow: ShadowRegisters,
    inflight: Option<Exchange>,
    sent: WireBytes,
    pending: VecDeque<Exchange>,
    next_seq: u64,
    burst: Option<BurstProgress>,
    counters: ChannelCounters,
}

impl PscChannel {
    pub fn new(address: u8, trigger: TriggerConfig) -> Self {
        Self {
            address,
            history: HistoryBuffer::new(),
            status: ChannelStatus::default(),
            trigger,
            staged_setpoint: None,
            staged_command: None,
            shadow: ShadowRegisters::default(),
            inflight: None,
            sent: WireBytes::new(),
            pending: VecDeque::new(),
            next_seq: 1,
            burst: None,
            counters: ChannelCounters::default(),
        }
    }

    pub fn address(&self) -> u8 {
        self.address
    }

    pub fn history(&self) -> &HistoryBuffer {
        &self.history
    }

    pub fn history_mut(&mut self) -> &mut HistoryBuffer {
        &mut self.history
    }

    pub fn status(&self) -> ChannelStatus {
        self.status
    }

    pub fn counters(&self) -> ChannelCounters {
        self.counters
    }

    pub fn trigger(&self) -> TriggerConfig {
        self.trigger
    }

    pub fn set_trigger(&mut self, trigger: TriggerConfig) {
        self.trigger = trigger;
    }

    pub fn shadow_registers(&self) -> ShadowRegisters {
        self.shadow
    }

    pub fn burst(&self) -> Option<&BurstProgress> {
        self.burst.as_ref()
    }

    pub fn is_busy(&self) -> bool {
        self.inflight.is_some()
    }

    pub fn is_enabled(&self) -> bool {
        !self.status.disabled
    }

    /// Disabling drops queued exchanges (returned so callers can report
    /// them). An exchange already on the wire completes normally.
    pub fn set_enabled(&mut self, enabled: bool) -> Vec<Resolved> {
        self.status.disabled = !enabled;
        if enabled {
            return Vec::new();
        }
        self.pending
            .drain(..)
            .map(|ex| Resolved {
                id: ex.id,
                request: ex.request,
                origin: ex.origin,
                outcome: ExchangeOutcome::Failed(ExchangeFailure::Disabled),
            })
            .collect()
    }

    pub fn clear_errors(&mut self) {
        self.status.link_error = false;
        self.status.checksum_error = false;
    }

    pub fn stage_setpoint(&mut self, counts: u16) {
        self.staged_setpoint = Some(counts);
    }

    pub fn stage_command(&mut self, word: u16) {
        self.staged_command = Some(word);
    }

    pub fn staged(&self) -> (Option<u16>, Option<u16>) {
        (self.staged_setpoint, self.staged_command)
    }

    /// Consumes staged values for a write trigger.
    pub fn take_staged(&mut self) -> Vec<Request> {
        let mut out = Vec::new();
        if let Some(counts) = self.staged_setpoint.take() {
            out.push(Request::WriteSetpoint(counts));
        }
        if let Some(word) = self.staged_command.take() {
            out.push(Request::WriteCommand(word));
        }
        out
    }

    pub fn note_missed_trigger(&mut self) {
        self.counters.missed_triggers += 1;
    }

    pub fn begin_burst(&mut self, id: u64, config: BurstConfig) -> Result<(), PscError> {
        config.validate()?;
        if self.status.disabled {
            return Err(PscError::ChannelDisabled);
        }
        if self.history.is_frozen() {
            return Err(PscError::BufferFrozen);
        }
        if self.burst.is_some() {
            return Err(PscError::BurstInProgress);
        }
        self.burst = Some(BurstProgress {
            id,
            config,
            resolved: 0,
            captured: 0,
        });
        Ok(())
    }

    /// Records one burst cycle as finished. Returns the final progress when
    /// that was the last cycle.
    pub fn burst_cycle_done(&mut self, id: u64, stored: bool) -> Option<BurstProgress> {
        let burst = self.burst.as_mut().filter(|b| b.id == id)?;
        burst.resolved += 1;
        if stored {
            burst.captured += 1;
        }
        if burst.resolved >= burst.config.cycles {
            self.burst.take()
        } else {
            None
        }
    }

    /// Queues an exchange. If the wire is idle the request frame is returned
    /// for immediate transmission.
    pub fn submit(&mut self, id: ExchangeId, request: Request, origin: Origin) -> Result<Option<WireBytes>, PscError> {
        if self.status.disabled {
            return Err(PscError::ChannelDisabled);
        }
        let exchange = Exchange { id, request, origin };
        if self.inflight.is_none() {
            return Ok(Some(self.start(exchange)));
        }
        if self.pending.len() >= MAX_PENDING {
            return Err(PscError::Busy);
        }
        self.pending.push_back(exchange);
        Ok(None)
    }

    /// Starts the next queued exchange if the wire is idle.
    pub fn start_next(&mut self) -> Option<(ExchangeId, WireBytes)> {
        if self.inflight.is_some() || self.status.disabled {
            return None;
        }
        let exchange = self.pending.pop_front()?;
        let id = exchange.id;
        Some((id, self.start(exchange)))
    }

    pub fn inflight_id(&self) -> Option<ExchangeId> {
        self.inflight.map(|ex| ex.id)
    }

    fn start(&mut self, exchange: Exchange) -> WireBytes {
        self.counters.exchanges += 1;
        let msg = exchange.request.message(self.address);
        self.inflight = Some(exchange);
        self.sent = codec::encode(&msg).expect("requests are well-formed");
        self.sent.clone()
    }

    /// Handles bytes arriving from the unit. Returns `None` for bytes that
    /// arrive with no exchange outstanding.
    pub fn on_reply(&mut self, bytes: &[u8], now: SimTime) -> Option<Resolved> {
        let exchange = self.inflight.take()?;
        let outcome = match codec::decode(bytes) {
            Ok(msg) => self.accept(&exchange, &msg, now),
            Err(err) => {
                self.latch_checksum_error();
                ExchangeOutcome::Failed(if self.is_echo(&err.raw) {
                    ExchangeFailure::Echoed
                } else {
                    ExchangeFailure::CorruptReply
                })
            }
        };
        Some(Resolved {
            id: exchange.id,
            request: exchange.request,
            origin: exchange.origin,
            outcome,
        })
    }

    fn accept(&mut self, exchange: &Exchange, msg: &Message, now: SimTime) -> ExchangeOutcome {
        let command = exchange.request.command();
        if !msg.opcode.response {
            // An intact copy of our own request: treat as an echo.
            self.latch_checksum_error();
            return ExchangeOutcome::Failed(ExchangeFailure::Echoed);
        }
        if msg.opcode.command != command || msg.address != self.address {
            self.status.link_error = true;
            self.counters.link_errors += 1;
            return ExchangeOutcome::Failed(ExchangeFailure::UnexpectedReply);
        }
        let p = &msg.payload;
        match exchange.request {
            Request::ReadData => {
                let frame = Frame {
                    seq: self.next_seq,
                    timestamp_us: now.as_micros(),
                    adc: [p[0], p[1], p[2], p[3]],
                    status: p[4],
                };
                self.next_seq += 1;
                self.counters.reads_ok += 1;
                let stored = self.history.push(frame);
                if stored {
                    self.counters.frames_stored += 1;
                } else {
                    self.counters.frames_inhibited += 1;
                }
                ExchangeOutcome::Data { frame, stored }
            }
            Request::WriteSetpoint(_) | Request::WriteCommand(_) => ExchangeOutcome::Written(p[0]),
            Request::ReadLastSetpoint => {
                self.shadow.last_setpoint = Some(p[0]);
                ExchangeOutcome::Register(p[0])
            }
            Request::ReadLastCommand => {
                self.shadow.last_command = Some(p[0]);
                ExchangeOutcome::Register(p[0])
            }
            Request::Recalibrate => ExchangeOutcome::Recalibrating,
        }
    }

    /// A returned request differs from what we sent by the one flipped bit
    /// that made the unit reject it.
    fn is_echo(&self, raw: &[u8]) -> bool {
        raw.len() == self.sent.len()
            && raw
                .iter()
                .zip(&self.sent)
                .map(|(a, b)| (a ^ b).count_ones())
                .sum::<u32>()
                <= 1
    }

    fn latch_checksum_error(&mut self) {
        self.status.checksum_error = true;
        self.counters.checksum_errors += 1;
    }

    /// Fires when the reply window for `id` closes. A no-op if that exchange
    /// already finished.
    pub fn on_timeout(&mut self, id: ExchangeId) -> Option<Resolved> {
        if self.inflight.map(|ex| ex.id) != Some(id) {
            return None;
        }
        let exchange = self.inflight.take()?;
        self.status.link_error = true;
        self.counters.link_errors += 1;
        Some(Resolved {
            id,
            request: exchange.request,
            origin: exchange.origin,
            outcome: ExchangeOutcome::Failed(ExchangeFailure::Timeout),
        })
    }
}
