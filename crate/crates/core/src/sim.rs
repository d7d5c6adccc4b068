//! Discrete-event simulation of controllers, fibers and interface units.
//!
//! Every byte that crosses a fiber is an event on the virtual clock. A read
//! trigger encodes a request, the link delivers it to the unit one fixed
//! latency later, the unit's reply travels back, and the controller decodes
//! it and stores a frame. A reply timer runs alongside each exchange.

use std::collections::HashMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{periodic_tick, EventQueue, SimTime};
use crate::codec::WireBytes;
use crate::driver::ConversionMode;
use crate::link::{Direction, FaultConfig, Link, LinkConfig, LinkConfigError};
use crate::psc::{
    BurstConfig, ChannelCounters, ChannelStatus, ExchangeId, ExchangeOutcome, Frame, HistoryBuffer, Origin, PscChannel,
    PscError, Request, Resolved, ShadowRegisters, TriggerConfig, MAX_CHANNELS,
};
use crate::psi::{Psi, PsiConfig};
use crate::supply::{SupplyConfigError, SupplyKind, SupplyModel, SupplyParams};

/// Reply window before a link error is latched.
pub const DEFAULT_REPLY_TIMEOUT: Duration = Duration::from_micros(250);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelId {
    /// Index of the controller in the simulation.
    pub psc: usize,
    /// Fiber port, equal to the unit's address.
    pub port: u8,
}

impl ChannelId {
    pub const fn new(psc: usize, port: u8) -> Self {
        Self { psc, port }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "psc{}/ch{}", self.psc, self.port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub reply_timeout: Duration,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            reply_timeout: DEFAULT_REPLY_TIMEOUT,
        }
    }
}

/// Everything needed to wire one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSetup {
    pub psi: PsiConfig,
    pub link: LinkConfig,
    pub supply: SupplyParams,
    pub trigger: TriggerConfig,
}

impl ChannelSetup {
    pub fn loopback(port: u8) -> Self {
        Self {
            psi: PsiConfig::new(port),
            link: LinkConfig::default(),
            supply: SupplyParams::Loopback,
            trigger: TriggerConfig::software(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("no controller with index {0}")]
    NoSuchPsc(usize),
    #[error("no channel {0}")]
    NoSuchChannel(ChannelId),
    #[error("channel {0} is already wired")]
    DuplicateChannel(ChannelId),
    #[error("port {0} out of range (controllers have {MAX_CHANNELS} ports)")]
    PortOutOfRange(u8),
    #[error("link: {0}")]
    Link(#[from] LinkConfigError),
    #[error("supply: {0}")]
    Supply(#[from] SupplyConfigError),
    #[error(transparent)]
    Psc(#[from] PscError),
    #[error("round trip {round_trip:?} does not fit in the {timeout:?} reply window")]
    RoundTrip { round_trip: Duration, timeout: Duration },
    #[error("exchange {0:?} is not tracked")]
    UnknownExchange(ExchangeId),
}

/// Notifications for observers (event stream, soak checks).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimEvent {
    Frame {
        channel: ChannelId,
        frame: Frame,
        stored: bool,
        origin: Origin,
    },
    StatusChange {
        channel: ChannelId,
        status: ChannelStatus,
        frozen: bool,
    },
    BurstDone {
        channel: ChannelId,
        captured: u32,
        cycles: u32,
    },
}

/// A frame as it arrived at one end of a fiber.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireRecord {
    pub at: SimTime,
    pub channel: ChannelId,
    pub direction: Direction,
    pub bytes: WireBytes,
}

#[derive(Debug)]
enum Event {
    ReadTick { gen: u64, k: u64 },
    WriteTick { gen: u64, k: u64 },
    BurstTick { burst: u64, k: u32, origin: SimTime },
    ToPsi { bytes: WireBytes },
    ToPsc { bytes: WireBytes },
    Timeout { exchange: ExchangeId },
}

struct Rig {
    ctrl: PscChannel,
    link: Link,
    psi: Psi,
    supply_kind: SupplyKind,
    read_gen: u64,
    write_gen: u64,
    read_origin: SimTime,
    write_origin: SimTime,
}

impl Rig {
    fn observable(&self) -> (ChannelStatus, bool) {
        (self.ctrl.status(), self.ctrl.history().is_frozen())
    }
}

/// Scheduler state, kept apart from the rigs so both can be borrowed at once.
struct Core {
    config: SimConfig,
    now: SimTime,
    queue: EventQueue<(ChannelId, Event)>,
    next_exchange: u64,
    next_burst: u64,
    tracked: HashMap<ExchangeId, Option<ExchangeOutcome>>,
    finished_bursts: HashMap<u64, u32>,
    capture: bool,
    events: Vec<SimEvent>,
    trace: Option<Vec<WireRecord>>,
}

impl Core {
    fn next_id(&mut self) -> ExchangeId {
        let id = ExchangeId(self.next_exchange);
        self.next_exchange += 1;
        id
    }

    fn emit(&mut self, event: SimEvent) {
        if self.capture {
            self.events.push(event);
        }
    }

    fn record(&mut self, channel: ChannelId, direction: Direction, bytes: &WireBytes) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(WireRecord {
                at: self.now,
                channel,
                direction,
                bytes: bytes.clone(),
            });
        }
    }

    fn send(&mut self, ch: ChannelId, rig: &mut Rig, id: ExchangeId, bytes: WireBytes) {
        if let Some(delivery) = rig.link.transmit(Direction::Downlink, bytes, self.now) {
            self.queue
                .schedule(delivery.deliver_at, (ch, Event::ToPsi { bytes: delivery.bytes }));
        }
        self.queue.schedule(
            self.now + self.config.reply_timeout,
            (ch, Event::Timeout { exchange: id }),
        );
    }

    /// Queues an exchange and puts it on the wire if the channel is idle.
    fn submit(
        &mut self,
        ch: ChannelId,
        rig: &mut Rig,
        request: Request,
        origin: Origin,
    ) -> Result<ExchangeId, PscError> {
        let id = self.next_id();
        if let Some(bytes) = rig.ctrl.submit(id, request, origin)? {
            self.send(ch, rig, id, bytes);
        }
        Ok(id)
    }

    fn pump(&mut self, ch: ChannelId, rig: &mut Rig) {
        if let Some((id, bytes)) = rig.ctrl.start_next() {
            self.send(ch, rig, id, bytes);
        }
    }

    fn resolve(&mut self, ch: ChannelId, rig: &mut Rig, done: Resolved) {
        if let ExchangeOutcome::Data { frame, stored } = done.outcome {
            self.emit(SimEvent::Frame {
                channel: ch,
                frame,
                stored,
                origin: done.origin,
            });
        }
        match done.origin {
            Origin::Tracked => {
                if let Some(slot) = self.tracked.get_mut(&done.id) {
                    *slot = Some(done.outcome);
                }
            }
            Origin::Burst(burst) => {
                let stored = matches!(done.outcome, ExchangeOutcome::Data { stored: true, .. });
                self.burst_cycle(ch, rig, burst, stored);
            }
            Origin::Trigger => {}
        }
    }

    fn burst_cycle(&mut self, ch: ChannelId, rig: &mut Rig, burst: u64, stored: bool) {
        if let Some(progress) = rig.ctrl.burst_cycle_done(burst, stored) {
            self.finished_bursts.insert(burst, progress.captured);
            self.emit(SimEvent::BurstDone {
                channel: ch,
                captured: progress.captured,
                cycles: progress.config.cycles,
            });
        }
    }

    fn dispatch(&mut self, ch: ChannelId, rig: &mut Rig, event: Event) {
        match event {
            Event::ReadTick { gen, k } => {
                if gen != rig.read_gen {
                    return;
                }
                let trigger = rig.ctrl.trigger();
                let next = periodic_tick(rig.read_origin, trigger.read_hz, k + 1);
                self.queue.schedule(next, (ch, Event::ReadTick { gen, k: k + 1 }));
                // Bursts own the channel while they run.
                if rig.ctrl.burst().is_none() && rig.ctrl.is_enabled() {
                    if let Err(PscError::Busy) = self.submit(ch, rig, Request::ReadData, Origin::Trigger) {
                        rig.ctrl.note_missed_trigger();
                    }
                }
            }
            Event::WriteTick { gen, k } => {
                if gen != rig.write_gen {
                    return;
                }
                let trigger = rig.ctrl.trigger();
                let next = periodic_tick(rig.write_origin, trigger.write_hz, k + 1);
                self.queue.schedule(next, (ch, Event::WriteTick { gen, k: k + 1 }));
                self.fire_write(ch, rig);
            }
            Event::BurstTick { burst, k, origin } => {
                let Some(progress) = rig.ctrl.burst().copied().filter(|b| b.id == burst) else {
                    return;
                };
                let cycles = progress.config.cycles;
                if k + 1 < cycles {
                    let next = origin + Duration::from_nanos(progress.config.period_ns() * u64::from(k + 1));
                    self.queue.schedule(
                        next,
                        (
                            ch,
                            Event::BurstTick {
                                burst,
                                k: k + 1,
                                origin,
                            },
                        ),
                    );
                }
                if self.submit(ch, rig, Request::ReadData, Origin::Burst(burst)).is_err() {
                    self.burst_cycle(ch, rig, burst, false);
                }
            }
            Event::ToPsi { bytes } => {
                self.record(ch, Direction::Downlink, &bytes);
                if let Some(reply) = rig.psi.handle_message(&bytes, self.now) {
                    if let Some(delivery) = rig.link.transmit(Direction::Uplink, reply, self.now) {
                        self.queue
                            .schedule(delivery.deliver_at, (ch, Event::ToPsc { bytes: delivery.bytes }));
                    }
                }
            }
            Event::ToPsc { bytes } => {
                self.record(ch, Direction::Uplink, &bytes);
                if let Some(done) = rig.ctrl.on_reply(&bytes, self.now) {
                    self.resolve(ch, rig, done);
                    self.pump(ch, rig);
                }
            }
            Event::Timeout { exchange } => {
                if let Some(done) = rig.ctrl.on_timeout(exchange) {
                    self.resolve(ch, rig, done);
                    self.pump(ch, rig);
                }
            }
        }
    }

    /// Sends whatever is staged. Untracked: the write trigger is a pulse,
    /// not a request anyone waits on.
    fn fire_write(&mut self, ch: ChannelId, rig: &mut Rig) -> Vec<ExchangeId> {
        if !rig.ctrl.is_enabled() {
            return Vec::new();
        }
        let mut ids = Vec::new();
        for request in rig.ctrl.take_staged() {
            match self.submit(ch, rig, request, Origin::Trigger) {
                Ok(id) => ids.push(id),
                Err(_) => rig.ctrl.note_missed_trigger(),
            }
        }
        ids
    }

    fn arm(&mut self, ch: ChannelId, rig: &mut Rig) {
        rig.read_gen += 1;
        rig.write_gen += 1;
        let trigger = rig.ctrl.trigger();
        if !trigger.is_hardware() {
            return;
        }
        rig.read_origin = self.now;
        rig.write_origin = self.now + Duration::from_nanos((trigger.write_offset_us * 1_000.0).round() as u64);
        if trigger.read_hz > 0.0 {
            let at = periodic_tick(rig.read_origin, trigger.read_hz, 1);
            self.queue.schedule(
                at,
                (
                    ch,
                    Event::ReadTick {
                        gen: rig.read_gen,
                        k: 1,
                    },
                ),
            );
        }
        if trigger.write_hz > 0.0 {
            let at = periodic_tick(rig.write_origin, trigger.write_hz, 1);
            self.queue.schedule(
                at,
                (
                    ch,
                    Event::WriteTick {
                        gen: rig.write_gen,
                        k: 1,
                    },
                ),
            );
        }
    }
}

/// Independent per-channel random streams from one scenario seed.
pub fn derive_seed(master: u64, psc: usize, port: u8, stream: u64) -> u64 {
    // splitmix64 finalizer over a packed key
    let mut z = master
        ^ (psc as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (u64::from(port) << 48)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const NOISE_STREAM: u64 = 1;
const LINK_STREAM: u64 = 2;

pub struct Simulation {
    core: Core,
    pscs: Vec<[Option<Box<Rig>>; MAX_CHANNELS]>,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Self {
        Self {
            core: Core {
                config,
                now: SimTime::ZERO,
                queue: EventQueue::new(),
                next_exchange: 0,
                next_burst: 0,
                tracked: HashMap::new(),
                finished_bursts: HashMap::new(),
                capture: false,
                events: Vec::new(),
                trace: None,
            },
            pscs: Vec::new(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.core.config
    }

    pub fn now(&self) -> SimTime {
        self.core.now
    }

    /// Adds an empty controller and returns its index.
    pub fn add_psc(&mut self) -> usize {
        self.pscs.push(Default::default());
        self.pscs.len() - 1
    }

    pub fn psc_count(&self) -> usize {
        self.pscs.len()
    }

    /// Wires a unit to `psc` on the port given by its address, powers it on
    /// and arms its triggers.
    pub fn add_channel(&mut self, psc: usize, setup: ChannelSetup) -> Result<ChannelId, SimError> {
        let port = setup.psi.address;
        if usize::from(port) >= MAX_CHANNELS {
            return Err(SimError::PortOutOfRange(port));
        }
        let ch = ChannelId::new(psc, port);
        let slots = self.pscs.get(psc).ok_or(SimError::NoSuchPsc(psc))?;
        if slots[usize::from(port)].is_some() {
            return Err(SimError::DuplicateChannel(ch));
        }
        setup.supply.validate()?;
        setup.trigger.validate()?;
        let seed = self.core.config.seed;
        let link = Link::new(setup.link, derive_seed(seed, psc, port, LINK_STREAM))?;
        if link.round_trip() >= self.core.config.reply_timeout {
            return Err(SimError::RoundTrip {
                round_trip: link.round_trip(),
                timeout: self.core.config.reply_timeout,
            });
        }
        let supply = SupplyModel::from_params(&setup.supply, derive_seed(seed, psc, port, NOISE_STREAM));
        let mut psi = Psi::new(setup.psi, supply);
        psi.power_on(self.core.now);
        let mut rig = Box::new(Rig {
            ctrl: PscChannel::new(port, setup.trigger),
            link,
            psi,
            supply_kind: setup.supply.kind(),
            read_gen: 0,
            write_gen: 0,
            read_origin: self.core.now,
            write_origin: self.core.now,
        });
        self.core.arm(ch, &mut rig);
        self.pscs[psc][usize::from(port)] = Some(rig);
        Ok(ch)
    }

    pub fn channels(&self) -> impl Iterator<Item = ChannelId> + '_ {
        self.pscs.iter().enumerate().flat_map(|(psc, slots)| {
            slots
                .iter()
                .enumerate()
                .filter(|(_, s)| s.is_some())
                .map(move |(port, _)| ChannelId::new(psc, port as u8))
        })
    }

    fn rig(&self, ch: ChannelId) -> Result<&Rig, SimError> {
        self.pscs
            .get(ch.psc)
            .and_then(|slots| slots.get(usize::from(ch.port)))
            .and_then(|slot| slot.as_deref())
            .ok_or(SimError::NoSuchChannel(ch))
    }

    fn rig_mut(pscs: &mut [[Option<Box<Rig>>; MAX_CHANNELS]], ch: ChannelId) -> Result<&mut Rig, SimError> {
        pscs.get_mut(ch.psc)
            .and_then(|slots| slots.get_mut(usize::from(ch.port)))
            .and_then(|slot| slot.as_deref_mut())
            .ok_or(SimError::NoSuchChannel(ch))
    }

    /// Runs `f` against a channel, emitting a status event if the latched
    /// bits, enable flag or freeze flag changed.
    fn with_channel<T>(&mut self, ch: ChannelId, f: impl FnOnce(&mut Core, &mut Rig) -> T) -> Result<T, SimError> {
        let rig = Self::rig_mut(&mut self.pscs, ch)?;
        let before = rig.observable();
        let out = f(&mut self.core, rig);
        let after = rig.observable();
        if after != before {
            self.core.emit(SimEvent::StatusChange {
                channel: ch,
                status: after.0,
                frozen: after.1,
            });
        }
        Ok(out)
    }

    /// Processes the next event. Returns `false` if the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some((at, (ch, event))) = self.core.queue.pop() else {
            return false;
        };
        self.core.now = at;
        // Rigs are never removed, so a miss here is a bug.
        self.with_channel(ch, |core, rig| core.dispatch(ch, rig, event))
            .expect("event for a wired channel");
        true
    }

    /// Processes every event due at or before `t`, then parks the clock at
    /// `t`.
    pub fn run_until(&mut self, t: SimTime) {
        while let Some((at, (ch, event))) = self.core.queue.pop_due(t) {
            self.core.now = at;
            self.with_channel(ch, |core, rig| core.dispatch(ch, rig, event))
                .expect("event for a wired channel");
        }
        if t > self.core.now {
            self.core.now = t;
        }
    }

    pub fn advance(&mut self, d: Duration) {
        let target = self.core.now + d;
        self.run_until(target);
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.core.queue.peek_time()
    }

    /// External read-trigger pulse. The outcome can be collected with
    /// [`Simulation::wait`].
    pub fn trigger_read(&mut self, ch: ChannelId) -> Result<ExchangeId, SimError> {
        self.submit(ch, Request::ReadData)
    }

    /// External write-trigger pulse: sends staged values, if any.
    pub fn trigger_write(&mut self, ch: ChannelId) -> Result<Vec<ExchangeId>, SimError> {
        let ids = self.with_channel(ch, |core, rig| {
            if !rig.ctrl.is_enabled() {
                return Err(PscError::ChannelDisabled);
            }
            Ok(core.fire_write(ch, rig))
        })??;
        Ok(ids)
    }

    /// Queues a tracked exchange.
    pub fn submit(&mut self, ch: ChannelId, request: Request) -> Result<ExchangeId, SimError> {
        let id = self.with_channel(ch, |core, rig| core.submit(ch, rig, request, Origin::Tracked))??;
        self.core.tracked.insert(id, None);
        Ok(id)
    }

    /// Advances the clock until the tracked exchange finishes.
    pub fn wait(&mut self, id: ExchangeId) -> Result<ExchangeOutcome, SimError> {
        loop {
            match self.core.tracked.get(&id) {
                None => return Err(SimError::UnknownExchange(id)),
                Some(Some(_)) => {
                    let outcome = self.core.tracked.remove(&id).flatten();
                    return Ok(outcome.expect("checked above"));
                }
                Some(None) => {
                    if !self.step() {
                        return Err(SimError::UnknownExchange(id));
                    }
                }
            }
        }
    }

    /// Submits and waits.
    pub fn execute(&mut self, ch: ChannelId, request: Request) -> Result<ExchangeOutcome, SimError> {
        let id = self.submit(ch, request)?;
        self.wait(id)
    }

    pub fn stage_setpoint(&mut self, ch: ChannelId, counts: u16) -> Result<(), SimError> {
        Self::rig_mut(&mut self.pscs, ch)?.ctrl.stage_setpoint(counts);
        Ok(())
    }

    pub fn stage_command(&mut self, ch: ChannelId, word: u16) -> Result<(), SimError> {
        Self::rig_mut(&mut self.pscs, ch)?.ctrl.stage_command(word);
        Ok(())
    }

    /// Starts a burst; the first poll goes out now.
    pub fn start_burst(&mut self, ch: ChannelId, config: BurstConfig) -> Result<u64, SimError> {
        let burst = self.core.next_burst;
        self.with_channel(ch, |core, rig| -> Result<(), PscError> {
            rig.ctrl.begin_burst(burst, config)?;
            core.queue.schedule(
                core.now,
                (
                    ch,
                    Event::BurstTick {
                        burst,
                        k: 0,
                        origin: core.now,
                    },
                ),
            );
            Ok(())
        })??;
        self.core.next_burst += 1;
        Ok(burst)
    }

    /// Frames stored by a finished burst, or `None` while it runs.
    pub fn burst_result(&mut self, burst: u64) -> Option<u32> {
        self.core.finished_bursts.remove(&burst)
    }

    /// Runs a burst to completion and returns the number of frames stored.
    pub fn run_burst(&mut self, ch: ChannelId, config: BurstConfig) -> Result<u32, SimError> {
        let burst = self.start_burst(ch, config)?;
        loop {
            if let Some(captured) = self.burst_result(burst) {
                return Ok(captured);
            }
            if !self.step() {
                unreachable!("burst ticks keep the queue non-empty");
            }
        }
    }

    pub fn freeze(&mut self, ch: ChannelId) -> Result<(), SimError> {
        self.with_channel(ch, |_, rig| rig.ctrl.history_mut().freeze())
    }

    pub fn unfreeze(&mut self, ch: ChannelId) -> Result<(), SimError> {
        self.with_channel(ch, |_, rig| rig.ctrl.history_mut().unfreeze())
    }

    /// Inhibits history updates on every channel (beam dump).
    pub fn freeze_all(&mut self) {
        let channels: Vec<_> = self.channels().collect();
        for ch in channels {
            self.freeze(ch).expect("listed channel");
        }
    }

    pub fn set_enabled(&mut self, ch: ChannelId, enabled: bool) -> Result<(), SimError> {
        self.with_channel(ch, |core, rig| {
            for dropped in rig.ctrl.set_enabled(enabled) {
                core.resolve(ch, rig, dropped);
            }
        })
    }

    pub fn clear_errors(&mut self, ch: ChannelId) -> Result<(), SimError> {
        self.with_channel(ch, |_, rig| rig.ctrl.clear_errors())
    }

    pub fn channel_status(&self, ch: ChannelId) -> Result<ChannelStatus, SimError> {
        Ok(self.rig(ch)?.ctrl.status())
    }

    pub fn counters(&self, ch: ChannelId) -> Result<ChannelCounters, SimError> {
        Ok(self.rig(ch)?.ctrl.counters())
    }

    pub fn trigger_config(&self, ch: ChannelId) -> Result<TriggerConfig, SimError> {
        Ok(self.rig(ch)?.ctrl.trigger())
    }

    /// Replaces the trigger settings and re-arms the pulse trains from now.
    pub fn set_trigger(&mut self, ch: ChannelId, trigger: TriggerConfig) -> Result<(), SimError> {
        trigger.validate()?;
        self.with_channel(ch, |core, rig| {
            rig.ctrl.set_trigger(trigger);
            core.arm(ch, rig);
        })
    }

    pub fn history(&self, ch: ChannelId) -> Result<&HistoryBuffer, SimError> {
        Ok(self.rig(ch)?.ctrl.history())
    }

    pub fn read_history(&self, ch: ChannelId, n: usize) -> Result<Vec<Frame>, SimError> {
        Ok(self.history(ch)?.read_history(n))
    }

    pub fn shadow_registers(&self, ch: ChannelId) -> Result<ShadowRegisters, SimError> {
        Ok(self.rig(ch)?.ctrl.shadow_registers())
    }

    pub fn controller(&self, ch: ChannelId) -> Result<&PscChannel, SimError> {
        Ok(&self.rig(ch)?.ctrl)
    }

    pub fn psi(&self, ch: ChannelId) -> Result<&Psi, SimError> {
        Ok(&self.rig(ch)?.psi)
    }

    /// Direct access to the unit, brought up to the current time first.
    pub fn psi_mut(&mut self, ch: ChannelId) -> Result<&mut Psi, SimError> {
        let now = self.core.now;
        let rig = Self::rig_mut(&mut self.pscs, ch)?;
        rig.psi.settle(now);
        Ok(&mut rig.psi)
    }

    pub fn supply_kind(&self, ch: ChannelId) -> Result<SupplyKind, SimError> {
        Ok(self.rig(ch)?.supply_kind)
    }

    pub fn link(&self, ch: ChannelId) -> Result<&Link, SimError> {
        Ok(&self.rig(ch)?.link)
    }

    pub fn set_link_faults(&mut self, ch: ChannelId, faults: FaultConfig) -> Result<(), SimError> {
        Self::rig_mut(&mut self.pscs, ch)?.link.set_faults(faults)?;
        Ok(())
    }

    pub fn conversion(&self, ch: ChannelId) -> Result<ConversionMode, SimError> {
        Ok(self.rig(ch)?.psi.conversion())
    }

    pub fn set_conversion(&mut self, ch: ChannelId, mode: ConversionMode) -> Result<(), SimError> {
        self.psi_mut(ch)?.set_conversion(mode);
        Ok(())
    }

    /// Trips the attached supply now.
    pub fn inject_supply_fault(&mut self, ch: ChannelId) -> Result<(), SimError> {
        self.psi_mut(ch)?.supply_mut().inject_fault();
        Ok(())
    }

    pub fn set_event_capture(&mut self, enabled: bool) {
        self.core.capture = enabled;
        if !enabled {
            self.core.events.clear();
        }
    }

    pub fn drain_events(&mut self) -> Vec<SimEvent> {
        std::mem::take(&mut self.core.events)
    }

    /// Starts recording every frame delivered over any fiber.
    pub fn enable_trace(&mut self) {
        self.core.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<WireRecord> {
        self.core.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psc::{ExchangeFailure, HISTORY_CAPACITY};
    use crate::psi::STATUS_CALIBRATING;

    fn single(setup: ChannelSetup) -> (Simulation, ChannelId) {
        let mut sim = Simulation::new(SimConfig::default());
        let psc = sim.add_psc();
        let ch = sim.add_channel(psc, setup).unwrap();
        (sim, ch)
    }

    #[test]
    fn software_read_round_trip() {
        let (mut sim, ch) = single(ChannelSetup::loopback(0));
        sim.execute(ch, Request::WriteSetpoint(0x0400)).unwrap();
        let id = sim.trigger_read(ch).unwrap();
        let t0 = sim.now();
        match sim.wait(id).unwrap() {
            ExchangeOutcome::Data { frame, stored } => {
                assert!(stored);
                assert_eq!(frame.adc[0], 0x0400);
                assert_ne!(frame.status & STATUS_CALIBRATING, 0);
            }
            other => panic!("{other:?}"),
        }
        // Round trip over a zero-length fiber: two 10 us hops.
        assert_eq!(sim.now() - t0, Duration::from_micros(20));
        assert_eq!(sim.history(ch).unwrap().len(), 1);
    }

    #[test]
    fn disabled_channel_ignores_triggers() {
        let (mut sim, ch) = single(ChannelSetup::loopback(0));
        sim.set_enabled(ch, false).unwrap();
        for _ in 0..100 {
            assert_eq!(sim.trigger_read(ch), Err(SimError::Psc(PscError::ChannelDisabled)));
        }
        sim.advance(Duration::from_millis(1));
        assert!(sim.history(ch).unwrap().is_empty());
        assert!(sim.channel_status(ch).unwrap().disabled);
    }

    #[test]
    fn hardware_triggers_fill_history() {
        let mut setup = ChannelSetup::loopback(3);
        setup.trigger = TriggerConfig::hardware(4000.0, 0.0);
        let (mut sim, ch) = single(setup);
        // The reply to the 8000th tick lands 20 us after it.
        sim.run_until(SimTime::from_micros(2_000_100));
        let history = sim.history(ch).unwrap();
        assert_eq!(history.len(), HISTORY_CAPACITY);
        let frames = history.read_history(2);
        assert_eq!(frames[0].timestamp_us - frames[1].timestamp_us, 250);
        assert_eq!(sim.counters(ch).unwrap().frames_stored, 8000);
    }

    #[test]
    fn drop_all_latches_link_error() {
        let mut setup = ChannelSetup::loopback(0);
        setup.link.faults.drop_prob = 1.0;
        let (mut sim, ch) = single(setup);
        let id = sim.trigger_read(ch).unwrap();
        assert_eq!(sim.wait(id).unwrap(), ExchangeOutcome::Failed(ExchangeFailure::Timeout));
        assert!(sim.channel_status(ch).unwrap().link_error);
        assert_eq!(sim.now(), SimTime::from_micros(250));
    }

    #[test]
    fn rejects_round_trip_beyond_timeout() {
        let mut setup = ChannelSetup::loopback(0);
        setup.link.processing_delay_us = 200.0;
        let mut sim = Simulation::new(SimConfig::default());
        let psc = sim.add_psc();
        assert!(matches!(sim.add_channel(psc, setup), Err(SimError::RoundTrip { .. })));
    }

    #[test]
    fn duplicate_and_out_of_range_ports() {
        let mut sim = Simulation::new(SimConfig::default());
        let psc = sim.add_psc();
        sim.add_channel(psc, ChannelSetup::loopback(1)).unwrap();
        assert!(matches!(
            sim.add_channel(psc, ChannelSetup::loopback(1)),
            Err(SimError::DuplicateChannel(_))
        ));
        assert!(matches!(
            sim.add_channel(psc, ChannelSetup::loopback(6)),
            Err(SimError::PortOutOfRange(6))
        ));
        assert!(matches!(
            sim.add_channel(7, ChannelSetup::loopback(0)),
            Err(SimError::NoSuchPsc(7))
        ));
    }

    #[test]
    fn status_change_events() {
        let (mut sim, ch) = single(ChannelSetup::loopback(0));
        sim.set_event_capture(true);
        sim.freeze(ch).unwrap();
        sim.freeze(ch).unwrap();
        sim.unfreeze(ch).unwrap();
        let events = sim.drain_events();
        assert_eq!(events.len(), 2);
        assert!(matches!(events[0], SimEvent::StatusChange { frozen: true, .. }));
    }

    #[test]
    fn seeds_differ_per_channel() {
        assert_ne!(derive_seed(1, 0, 0, 1), derive_seed(1, 0, 1, 1));
        assert_ne!(derive_seed(1, 0, 0, 1), derive_seed(1, 1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0, 1), derive_seed(1, 0, 0, 2));
        assert_eq!(derive_seed(9, 3, 4, 1), derive_seed(9, 3, 4, 1));
    }
}
