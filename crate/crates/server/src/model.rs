//! Records kept by the store.

use std::collections::VecDeque;

use lorans_codec::mac::MacCommand;
use lorans_codec::{AesKey, DevAddr, Direction, Eui64, RxMetadata, SessionKeys};
use serde::{Deserialize, Serialize};

/// Base64 encoding for byte fields in JSON records.
pub mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Otaa,
    Abp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbpSession {
    pub dev_addr: DevAddr,
    pub keys: SessionKeys,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub dev_eui: Eui64,
    pub app_eui: Eui64,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app_key: Option<AesKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_session: Option<AbpSession>,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub created_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayRecord {
    pub gateway_eui: Eui64,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Location>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_seen_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_pull_endpoint: Option<String>,
}

impl GatewayRecord {
    pub fn new(gateway_eui: Eui64) -> Self {
        GatewayRecord {
            gateway_eui,
            description: String::new(),
            location: None,
            last_seen_ms: None,
            last_pull_endpoint: None,
        }
    }
}

/// One gateway's copy of an uplink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reception {
    pub gateway_eui: Eui64,
    pub meta: RxMetadata,
}

/// Per-device adaptive data rate state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdrState {
    /// Most recent uplinks as (SNR, DR), oldest first.
    pub history: VecDeque<(f64, u8)>,
    pub current_dr: u8,
    pub current_tx_power: u8,
    pub initialized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_status: Option<DevStatus>,
}

impl Default for AdrState {
    fn default() -> Self {
        AdrState {
            history: VecDeque::new(),
            current_dr: 0,
            current_tx_power: 0,
            initialized: false,
            dev_status: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DevStatus {
    pub battery: u8,
    pub margin: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSession {
    pub dev_addr: DevAddr,
    pub dev_eui: Eui64,
    pub keys: SessionKeys,
    /// Next uplink counter the server will accept (one past the last seen).
    pub fcnt_up: u32,
    /// Counter for the next downlink.
    pub fcnt_down: u32,
    pub rx1_dr_offset: u8,
    pub rx2_dr: u8,
    pub rx_delay_s: u8,
    pub adr: AdrState,
    pub created_at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_uplink: Option<Reception>,
}

impl DeviceSession {
    pub fn new(dev_addr: DevAddr, dev_eui: Eui64, keys: SessionKeys, created_at_ms: u64) -> Self {
        DeviceSession {
            dev_addr,
            dev_eui,
            keys,
            fcnt_up: 0,
            fcnt_down: 0,
            rx1_dr_offset: 0,
            rx2_dr: 0,
            rx_delay_s: 1,
            adr: AdrState::default(),
            created_at_ms,
            last_uplink: None,
        }
    }
}

/// Application payload waiting for a downlink opportunity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppItem {
    pub fport: u8,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    #[serde(default)]
    pub confirmed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MacState {
    Pending,
    Sent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacQueueEntry {
    pub id: u64,
    pub cmd: MacCommand,
    pub state: MacState,
    pub attempts: u32,
    pub created_at_ms: u64,
    /// Uplink counter of the uplink whose downlink carried this command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sent_with_fcnt_up: Option<u32>,
}

/// What the next downlink frame carries, as chosen by the store.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameContent {
    pub app: Option<AppItem>,
    /// Serialized MAC commands.
    pub mac: Vec<u8>,
    /// MAC commands travel as an FPort 0 payload instead of in FOpts.
    pub mac_as_payload: bool,
    pub fpending: bool,
    pub mac_ids: Vec<u64>,
}

impl FrameContent {
    pub fn is_empty(&self) -> bool {
        self.app.is_none() && self.mac.is_empty()
    }
}

/// Dedup identity of an uplink: device address (or DevEUI for joins),
/// counter (or DevNonce) and MIC.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DedupKey {
    pub id: u64,
    pub counter: u32,
    pub mic: [u8; 4],
}

impl DedupKey {
    pub fn data(dev_addr: DevAddr, fcnt32: u32, mic: [u8; 4]) -> Self {
        DedupKey { id: dev_addr.0 as u64, counter: fcnt32, mic }
    }

    pub fn join(dev_eui: Eui64, dev_nonce: u16, mic: [u8; 4]) -> Self {
        DedupKey { id: dev_eui.0, counter: dev_nonce as u32, mic }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DedupOutcome {
    FirstCopy,
    DuplicateCopy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLogEntry {
    pub ts_ms: u64,
    pub direction: Direction,
    pub mtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_addr: Option<DevAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fcnt: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fport: Option<u8>,
    pub size: usize,
    pub gateway_eui: Eui64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rssi: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lsnr: Option<f64>,
    #[serde(with = "b64")]
    pub phy: Vec<u8>,
}

/// Decrypted application payload as received by the application stub.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppPayloadEntry {
    pub ts_ms: u64,
    pub fcnt: u32,
    pub fport: u8,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
}
