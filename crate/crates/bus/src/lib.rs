//! Topic-based message bus connecting the server modules.
//!
//! Producers publish self-describing records (see [`record`]) to named
//! topics. Consumers join a *group* on a topic; each message is delivered
//! to exactly one member of every subscribing group, chosen round-robin.

pub mod broker;
pub mod record;

pub use broker::{Broker, Bus, BusError, BusMessage, Consumer, Delivery, GroupStats, MemberStats, Subscription, DEFAULT_CAPACITY};
pub use record::RecordError;
