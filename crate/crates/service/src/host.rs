//! The running simulation as the service sees it: controllers addressed by
//! their scenario ids, and simulation notifications turned into events.

use std::collections::HashMap;

use psc_core::driver::Driver;
use psc_core::psc::Origin;
use psc_core::sim::{ChannelId, SimEvent, Simulation};
use psc_core::SimTime;
use thiserror::Error;

use crate::events::{AlarmKind, ChannelView, Event};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HostError {
    #[error("no controller with id {0}")]
    NoSuchPsc(u32),
    #[error("controller {psc} has no channel {channel}")]
    NoSuchChannel { psc: u32, channel: u8 },
}

pub struct Host {
    driver: Driver,
    psc_ids: Vec<u32>,
    capture: bool,
    /// Minimum virtual interval between trigger-driven frame events per
    /// channel; `None` forwards all of them.
    frame_interval: Option<std::time::Duration>,
    last_frame_event: HashMap<ChannelId, SimTime>,
    pending: Vec<Event>,
}

impl Host {
    pub fn new(sim: Simulation, psc_ids: Vec<u32>) -> Self {
        Self {
            driver: Driver::new(sim),
            psc_ids,
            capture: false,
            frame_interval: None,
            last_frame_event: HashMap::new(),
            pending: Vec::new(),
        }
    }

    pub fn driver(&self) -> &Driver {
        &self.driver
    }

    pub fn driver_mut(&mut self) -> &mut Driver {
        &mut self.driver
    }

    pub fn sim(&self) -> &Simulation {
        self.driver.sim()
    }

    pub fn sim_mut(&mut self) -> &mut Simulation {
        self.driver.sim_mut()
    }

    pub fn psc_ids(&self) -> &[u32] {
        &self.psc_ids
    }

    pub fn channel(&self, psc: u32, channel: u8) -> Result<ChannelId, HostError> {
        let index = self
            .psc_ids
            .iter()
            .position(|&id| id == psc)
            .ok_or(HostError::NoSuchPsc(psc))?;
        let ch = ChannelId::new(index, channel);
        self.sim()
            .controller(ch)
            .map(|_| ch)
            .map_err(|_| HostError::NoSuchChannel { psc, channel })
    }

    /// Scenario id and port of a channel.
    pub fn label(&self, ch: ChannelId) -> (u32, u8) {
        (self.psc_ids[ch.psc], ch.port)
    }

    /// Starts or stops collecting events. Nothing is buffered while off, so
    /// headless runs do not accumulate frames nobody reads.
    pub fn set_event_capture(&mut self, enabled: bool) {
        self.capture = enabled;
        self.driver.sim_mut().set_event_capture(enabled);
        if !enabled {
            self.pending.clear();
        }
    }

    /// Thins trigger-driven frame events to at most `hz` per channel.
    /// Burst frames and explicit reads always pass.
    pub fn set_frame_event_rate(&mut self, hz: Option<f64>) {
        self.frame_interval = hz
            .filter(|h| *h > 0.0)
            .map(|h| std::time::Duration::from_secs_f64(1.0 / h));
    }

    pub fn push_alarm(&mut self, ch: ChannelId, kind: AlarmKind, detail: String) {
        if self.capture {
            let (psc, channel) = self.label(ch);
            self.pending.push(Event::Alarm {
                psc,
                channel,
                time_us: self.sim().now().as_micros(),
                kind,
                detail,
            });
        }
    }

    /// Events produced since the last call, in simulation order.
    pub fn collect_events(&mut self) -> Vec<Event> {
        if !self.capture {
            return Vec::new();
        }
        let raw = self.driver.sim_mut().drain_events();
        let mut out = std::mem::take(&mut self.pending);
        out.reserve(raw.len());
        for event in raw {
            if let Some(e) = self.convert(event) {
                out.push(e);
            }
        }
        let now = self.sim().now().as_micros();
        for alarm in self.driver.poll_alarms() {
            let (psc, channel) = self.label(alarm.channel);
            out.push(Event::Alarm {
                psc,
                channel,
                time_us: now,
                kind: AlarmKind::Tolerance,
                detail: format!(
                    "readback deviates {:+.6} V from setpoint {:.6} V",
                    alarm.deviation, alarm.setpoint_volts
                ),
            });
        }
        out
    }

    fn convert(&mut self, event: SimEvent) -> Option<Event> {
        match event {
            SimEvent::Frame {
                channel: ch,
                frame,
                stored,
                origin,
            } => {
                if let (Some(interval), Origin::Trigger) = (self.frame_interval, origin) {
                    let at = SimTime::from_micros(frame.timestamp_us);
                    match self.last_frame_event.get(&ch) {
                        Some(&last) if at.saturating_since(last) < interval => return None,
                        _ => {
                            self.last_frame_event.insert(ch, at);
                        }
                    }
                }
                let (psc, channel) = self.label(ch);
                let volts = self.driver.frame_volts(ch, &frame).ok()?;
                Some(Event::Frame {
                    psc,
                    channel,
                    seq: frame.seq,
                    timestamp_us: frame.timestamp_us,
                    volts,
                    status: frame.status,
                    stored,
                })
            }
            SimEvent::StatusChange {
                channel: ch,
                status,
                frozen,
            } => {
                let (psc, channel) = self.label(ch);
                Some(Event::StatusChange {
                    psc,
                    channel,
                    time_us: self.sim().now().as_micros(),
                    link_error: status.link_error,
                    checksum_error: status.checksum_error,
                    disabled: status.disabled,
                    frozen,
                })
            }
            SimEvent::BurstDone {
                channel: ch,
                captured,
                cycles,
            } => {
                let (psc, channel) = self.label(ch);
                Some(Event::BurstDone {
                    psc,
                    channel,
                    captured,
                    cycles,
                })
            }
        }
    }

    pub fn snapshot(&self) -> Event {
        let sim = self.sim();
        let channels = sim
            .channels()
            .map(|ch| {
                let (psc, channel) = self.label(ch);
                let history = sim.history(ch).expect("listed channel");
                let newest = history.newest().copied();
                ChannelView {
                    psc,
                    channel,
                    supply: sim.supply_kind(ch).expect("listed channel"),
                    conversion: sim.conversion(ch).expect("listed channel"),
                    trigger: sim.trigger_config(ch).expect("listed channel"),
                    status: sim.channel_status(ch).expect("listed channel"),
                    frozen: history.is_frozen(),
                    history_len: history.len(),
                    setpoint_volts: self.driver.setpoint_volts(ch),
                    last_volts: newest.and_then(|f| self.driver.frame_volts(ch, &f).ok()),
                    last_status: newest.map(|f| f.status),
                }
            })
            .collect();
        Event::Snapshot {
            time_us: sim.now().as_micros(),
            channels,
        }
    }
}
