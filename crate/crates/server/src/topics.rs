//! Topic names, schema tags and the records exchanged on them.

use lorans_codec::mac::MacCommand;
use lorans_codec::{DevAddr, Eui64, PhyPayload, RxMetadata, TxRequest};
use serde::{Deserialize, Serialize};

use crate::model::{b64, AppItem, DedupKey, Reception};

pub const GATEWAY_UP: &str = "gateway.up";
pub const UPLINK_RAW: &str = "uplink.raw";
pub const UPLINK_APP: &str = "uplink.app";
pub const UPLINK_MAC: &str = "uplink.mac";
pub const UPLINK_JOIN: &str = "uplink.join";
pub const JOIN_REQUEST: &str = "join.request";
pub const DOWNLINK_TX: &str = "downlink.tx";
pub const APPSERVER_IN: &str = "appserver.in";
pub const APPSERVER_OUT: &str = "appserver.out";
pub const CONTROLLER_CMDS: &str = "controller.cmds";

pub const GATEWAY_RX_V1: &str = "gateway-rx.v1";
pub const UPLINK_V1: &str = "uplink.v1";
pub const JOIN_V1: &str = "join.v1";
pub const MAC_UPLINK_V1: &str = "mac-uplink.v1";
pub const APP_UPLINK_V1: &str = "app-uplink.v1";
pub const APP_DOWNLINK_V1: &str = "app-downlink.v1";
pub const DOWNLINK_V1: &str = "downlink.v1";
pub const CONTROLLER_CMD_V1: &str = "controller-cmd.v1";

/// Topics the server modules need, with their schemas.
pub const REQUIRED: [(&str, &str); 10] = [
    (GATEWAY_UP, GATEWAY_RX_V1),
    (UPLINK_RAW, UPLINK_V1),
    (UPLINK_APP, APP_UPLINK_V1),
    (UPLINK_MAC, MAC_UPLINK_V1),
    (UPLINK_JOIN, UPLINK_V1),
    (JOIN_REQUEST, JOIN_V1),
    (DOWNLINK_TX, DOWNLINK_V1),
    (APPSERVER_IN, APP_UPLINK_V1),
    (APPSERVER_OUT, APP_DOWNLINK_V1),
    (CONTROLLER_CMDS, CONTROLLER_CMD_V1),
];

/// One rxpk entry as handed from the UDP endpoint to the verifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayRx {
    pub gateway_eui: Eui64,
    pub meta: RxMetadata,
    pub received_at_ms: u64,
}

/// A parsed, MIC-checked uplink (or a parsed join request).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UplinkEnvelope {
    pub phy: PhyPayload,
    #[serde(with = "b64")]
    pub raw: Vec<u8>,
    pub rx: Reception,
    pub received_at_ms: u64,
    /// Widened frame counter; absent for join requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fcnt32: Option<u32>,
}

/// A first-copy join request forwarded by the central server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinForward {
    pub uplink: UplinkEnvelope,
    pub dedup_key: DedupKey,
    /// Time the collection window closes.
    pub window_end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacUplink {
    pub dev_addr: DevAddr,
    pub dev_eui: Eui64,
    pub fcnt32: u32,
    /// FOpts or decrypted FPort 0 payload.
    #[serde(with = "b64")]
    pub commands: Vec<u8>,
    pub lsnr: f64,
    pub rssi: i32,
    pub dr: u8,
    pub adr: bool,
    pub adr_ack_req: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppUplink {
    pub dev_eui: Eui64,
    pub dev_addr: DevAddr,
    pub fcnt32: u32,
    pub fport: u8,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    pub confirmed: bool,
    pub rx: Reception,
    pub received_at_ms: u64,
}

/// Downlink request from an application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppDownlink {
    pub dev_eui: Eui64,
    pub item: AppItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rx2Params {
    pub tmst: u32,
    pub freq: f64,
    pub datr: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownlinkKind {
    JoinAccept,
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownlinkTx {
    pub gateway_eui: Eui64,
    pub kind: DownlinkKind,
    pub dev_eui: Eui64,
    pub txpk: TxRequest,
    /// Fallback window if RX1 cannot be used.
    pub rx2: Rx2Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerCmd {
    pub dev_addr: DevAddr,
    pub cmd: MacCommand,
    pub reason: String,
}
