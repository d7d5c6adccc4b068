//! Emulation of the power-supply controller (PSC) to interface (PSI) link.
//!
//! The crate models both ends of the fiber and the wire between them on a
//! virtual clock, so a soak of millions of exchanges runs in seconds and
//! replays identically from a seed.

pub mod clock;
pub mod codec;
pub mod driver;
pub mod link;
pub mod psc;
pub mod psi;
pub mod sim;
pub mod supply;

pub use clock::SimTime;
pub use codec::{decode, encode, Command, DecodeError, DecodeErrorKind, Message, Opcode};
pub use driver::{ConversionMode, Driver, DriverError, Polarity};
pub use link::{Direction, FaultConfig, LinkConfig};
pub use psc::{BurstConfig, ChannelStatus, Frame, HistoryBuffer, Request, TriggerConfig, TriggerSource};
pub use psi::{Psi, PsiConfig};
pub use sim::{ChannelId, ChannelSetup, SimConfig, SimError, SimEvent, Simulation};
pub use supply::{SupplyKind, SupplyModel, SupplyParams, SupplyState};
