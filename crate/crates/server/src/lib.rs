//! LoRaWAN network server built from loosely coupled modules that talk over
//! a topic bus:
//!
//! * [`connector`]: gateway UDP endpoint, frame authentication.
//! * [`central`]: deduplication, decryption, dispatch, downlink scheduling.
//! * [`join`]: OTAA activation.
//! * [`controller`]: adaptive data rate and MAC command queue.
//! * [`admin`]: HTTP administration API ([`client`] is its client).
//! * [`store`]: durable registry and volatile session state.
//!
//! [`runtime::start`] runs everything in one process.

pub mod admin;
pub mod central;
pub mod client;
pub mod clock;
pub mod config;
pub mod connector;
pub mod controller;
pub mod join;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod scheduling;
pub mod store;
pub mod topics;

pub use config::ServerConfig;
pub use runtime::{start, ServerHandle};
