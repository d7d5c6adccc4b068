//! JSON event stream served on `/events`.
//!
//! Every message is one JSON object with a schema version `v` and a `type`
//! tag. Events are serialized once and fanned out through a bounded
//! broadcast buffer; a subscriber that falls behind loses the oldest
//! messages and receives a `gap` marker in their place.

use std::sync::Arc;

use psc_core::driver::ConversionMode;
use psc_core::psc::{ChannelStatus, TriggerConfig};
use psc_core::supply::SupplyKind;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_CAPACITY: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmKind {
    Tolerance,
    Consistency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelView {
    pub psc: u32,
    pub channel: u8,
    pub supply: SupplyKind,
    pub conversion: ConversionMode,
    pub trigger: TriggerConfig,
    pub status: ChannelStatus,
    pub frozen: bool,
    pub history_len: usize,
    pub setpoint_volts: Option<f64>,
    pub last_volts: Option<[f64; 4]>,
    pub last_status: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Snapshot {
        time_us: u64,
        channels: Vec<ChannelView>,
    },
    Frame {
        psc: u32,
        channel: u8,
        seq: u64,
        timestamp_us: u64,
        volts: [f64; 4],
        status: u16,
        stored: bool,
    },
    StatusChange {
        psc: u32,
        channel: u8,
        time_us: u64,
        link_error: bool,
        checksum_error: bool,
        disabled: bool,
        frozen: bool,
    },
    Alarm {
        psc: u32,
        channel: u8,
        time_us: u64,
        kind: AlarmKind,
        detail: String,
    },
    BurstDone {
        psc: u32,
        channel: u8,
        captured: u32,
        cycles: u32,
    },
    Gap {
        missed: u64,
    },
    /// Reply to a control verb sent over the socket. Only the sender sees it.
    Response {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<serde_json::Value>,
        ok: bool,
        text: String,
    },
}

impl Event {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&Envelope {
            v: SCHEMA_VERSION,
            event: self.clone(),
        })
        .expect("events serialize")
    }
}

/// Control message accepted on the event socket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    #[serde(default)]
    pub id: Option<serde_json::Value>,
    pub cmd: String,
}

#[derive(Debug, Clone)]
pub struct EventHub {
    tx: broadcast::Sender<Arc<str>>,
}

impl EventHub {
    pub fn new(capacity: usize) -> Self {
        let (tx, _) = broadcast::channel(capacity.max(1));
        Self { tx }
    }

    /// Never blocks; with no subscribers the event is discarded.
    pub fn publish(&self, event: &Event) {
        if self.tx.receiver_count() > 0 {
            let _ = self.tx.send(event.to_json().into());
        }
    }

    pub fn subscriber_count(&self) -> usize {
        self.tx.receiver_count()
    }

    pub fn subscribe(&self) -> Subscription {
        Subscription {
            rx: self.tx.subscribe(),
        }
    }
}

impl Default for EventHub {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

pub struct Subscription {
    rx: broadcast::Receiver<Arc<str>>,
}

impl Subscription {
    /// Next message, or a `gap` marker after an overrun. `None` once the hub
    /// is gone.
    pub async fn next(&mut self) -> Option<Arc<str>> {
        match self.rx.recv().await {
            Ok(msg) => Some(msg),
            Err(broadcast::error::RecvError::Lagged(missed)) => Some(Event::Gap { missed }.to_json().into()),
            Err(broadcast::error::RecvError::Closed) => None,
        }
    }

    pub fn try_next(&mut self) -> Option<Arc<str>> {
        match self.rx.try_recv() {
            Ok(msg) => Some(msg),
            Err(broadcast::error::TryRecvError::Lagged(missed)) => Some(Event::Gap { missed }.to_json().into()),
            Err(_) => None,
        }
    }
}
