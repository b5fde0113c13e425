//! Wire formats for the network server.
//!
//! * [`phy`] and [`mac`]: LoRaWAN 1.0.x frames and MAC command streams.
//! * [`crypto`]: MICs, payload encryption, OTAA key derivation.
//! * [`udp`]: the gateway packet-forwarder datagram protocol.
//! * [`region`]: the 433 MHz data-rate and power tables.
//!
//! Everything here is a pure function of its inputs.

pub mod crypto;
pub mod mac;
pub mod phy;
pub mod region;
pub mod types;
pub mod udp;

pub use crypto::{crypt_frm, decrypt_join_accept, derive_session_keys, encrypt_join_accept, mic_data, mic_join, CryptoError, Mic};
pub use mac::{parse_mac_commands, serialize_mac_commands, LinkAdrAns, LinkAdrReq, MacCommand, MacErrorKind, MacParseError};
pub use phy::{parse_phy, serialize_phy, Body, DataPayload, FCtrl, JoinAcceptPayload, JoinRequestPayload, MType, Mhdr, PhyError, PhyPayload};
pub use region::{LoraDataRate, Region};
pub use types::{AesKey, DevAddr, Direction, Eui64, SessionKeys};
pub use udp::{ack_for, decode_datagram, encode_datagram, ForwarderDatagram, Kind, RxMetadata, TxRequest, UdpError};
