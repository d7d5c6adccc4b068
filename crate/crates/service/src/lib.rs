//! Service layer: scenario loading, the operator text protocol, the JSON
//! event stream and the network front end.

pub mod events;
pub mod host;
pub mod protocol;
pub mod scenario;
pub mod server;

pub use host::Host;
pub use protocol::execute_command;
pub use scenario::Scenario;
