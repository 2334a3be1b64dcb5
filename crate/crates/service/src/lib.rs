//! Live trial service and batch command line for pedtrial.
//!
//! - [`protocol`] defines the websocket frames.
//! - [`live`] runs one session behind the protocol, independent of transport.
//! - [`server`] serves sessions over websockets.
//! - [`cli`] implements the `pedtrial` command.

pub mod cli;
pub mod live;
pub mod protocol;
pub mod server;
