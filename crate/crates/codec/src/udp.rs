//! Packet-forwarder UDP protocol (version 2) between gateways and the
//! network server.
//!
//! ```text
//! byte 0      protocol version (0x02)
//! bytes 1-2   random token, echoed by acknowledgements
//! byte 3      identifier (PUSH_DATA 0x00 .. TX_ACK 0x05)
//! bytes 4-11  gateway EUI, MSB first (PUSH_DATA, PULL_DATA, TX_ACK)
//! rest        JSON object (PUSH_DATA, PULL_RESP, optional on TX_ACK)
//! ```

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::region::LoraDataRate;
use crate::types::Eui64;

pub const PROTOCOL_VERSION: u8 = 0x02;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UdpError {
    #[error("datagram too short ({0} bytes)")]
    TooShort(usize),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown datagram identifier {0:#04x}")]
    BadKind(u8),
    #[error("bad JSON: {0}")]
    BadJson(String),
    #[error("datagram invariant violated: {0}")]
    InvariantViolation(&'static str),
    #[error("bad rxpk/txpk field: {0}")]
    BadField(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    PushData,
    PushAck,
    PullData,
    PullResp,
    PullAck,
    TxAck,
}

impl Kind {
    pub fn id(self) -> u8 {
        match self {
            Kind::PushData => 0x00,
            Kind::PushAck => 0x01,
            Kind::PullData => 0x02,
            Kind::PullResp => 0x03,
            Kind::PullAck => 0x04,
            Kind::TxAck => 0x05,
        }
    }

    pub fn from_id(id: u8) -> Result<Self, UdpError> {
        Ok(match id {
            0x00 => Kind::PushData,
            0x01 => Kind::PushAck,
            0x02 => Kind::PullData,
            0x03 => Kind::PullResp,
            0x04 => Kind::PullAck,
            0x05 => Kind::TxAck,
            other => return Err(UdpError::BadKind(other)),
        })
    }

    fn has_eui(self) -> bool {
        matches!(self, Kind::PushData | Kind::PullData | Kind::TxAck)
    }

    fn json_rule(self) -> JsonRule {
        match self {
            Kind::PushData | Kind::PullResp => JsonRule::Required,
            Kind::TxAck => JsonRule::Optional,
            _ => JsonRule::Forbidden,
        }
    }
}

#[derive(PartialEq)]
enum JsonRule {
    Required,
    Optional,
    Forbidden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwarderDatagram {
    pub token: u16,
    pub kind: Kind,
    pub gateway_eui: Option<Eui64>,
    pub json: Option<Map<String, Value>>,
}

/// One `rxpk` entry: a frame received by the gateway plus radio metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RxMetadata {
    /// Gateway internal counter at RX finish, microseconds.
    pub tmst: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<String>,
    #[serde(default)]
    pub chan: u8,
    #[serde(default)]
    pub rfch: u8,
    pub freq: f64,
    #[serde(default = "crc_ok")]
    pub stat: i8,
    #[serde(default = "lora")]
    pub modu: String,
    pub datr: String,
    pub codr: String,
    pub rssi: i32,
    pub lsnr: f64,
    pub size: u32,
    pub data: String,
}

fn crc_ok() -> i8 {
    1
}

fn lora() -> String {
    "LORA".to_string()
}

impl RxMetadata {
    pub fn new(phy: &[u8], tmst: u32, freq: f64, datr: LoraDataRate, rssi: i32, lsnr: f64) -> Self {
        RxMetadata {
            tmst,
            time: None,
            chan: 0,
            rfch: 0,
            freq,
            stat: 1,
            modu: lora(),
            datr: datr.to_string(),
            codr: "4/5".to_string(),
            rssi,
            lsnr,
            size: phy.len() as u32,
            data: BASE64.encode(phy),
        }
    }

    pub fn data_rate(&self) -> Result<LoraDataRate, UdpError> {
        self.datr.parse().map_err(|e: crate::region::DatrError| UdpError::BadField(e.to_string()))
    }

    /// Decoded PHYPayload. At least 12 bytes, the smallest data frame.
    pub fn payload(&self) -> Result<Vec<u8>, UdpError> {
        let raw = BASE64
            .decode(self.data.as_bytes())
            .map_err(|e| UdpError::BadField(format!("data: {e}")))?;
        if raw.len() < 12 {
            return Err(UdpError::BadField(format!("data decodes to {} bytes", raw.len())));
        }
        Ok(raw)
    }

    pub fn validate(&self) -> Result<Vec<u8>, UdpError> {
        self.data_rate()?;
        self.payload()
    }
}

/// A `txpk` object: one transmission request for the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxRequest {
    #[serde(default)]
    pub imme: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tmst: Option<u32>,
    pub freq: f64,
    #[serde(default)]
    pub rfch: u8,
    pub powe: i32,
    #[serde(default = "lora")]
    pub modu: String,
    pub datr: String,
    pub codr: String,
    #[serde(default)]
    pub ipol: bool,
    pub size: u32,
    pub data: String,
}

impl TxRequest {
    pub fn new(phy: &[u8], tmst: Option<u32>, freq: f64, datr: LoraDataRate, powe: i32) -> Self {
        TxRequest {
            imme: tmst.is_none(),
            tmst,
            freq,
            rfch: 0,
            powe,
            modu: lora(),
            datr: datr.to_string(),
            codr: "4/5".to_string(),
            ipol: true,
            size: phy.len() as u32,
            data: BASE64.encode(phy),
        }
    }

    pub fn payload(&self) -> Result<Vec<u8>, UdpError> {
        let raw = BASE64
            .decode(self.data.as_bytes())
            .map_err(|e| UdpError::BadField(format!("data: {e}")))?;
        if raw.len() != self.size as usize {
            return Err(UdpError::BadField(format!("size {} but data has {} bytes", self.size, raw.len())));
        }
        Ok(raw)
    }
}

fn object(key: &str, value: Value) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert(key.to_string(), value);
    m
}

impl ForwarderDatagram {
    pub fn push_data(token: u16, gateway_eui: Eui64, rxpk: &[RxMetadata]) -> Self {
        let rxpk = serde_json::to_value(rxpk).expect("rxpk serializes");
        ForwarderDatagram {
            token,
            kind: Kind::PushData,
            gateway_eui: Some(gateway_eui),
            json: Some(object("rxpk", rxpk)),
        }
    }

    pub fn pull_data(token: u16, gateway_eui: Eui64) -> Self {
        ForwarderDatagram {
            token,
            kind: Kind::PullData,
            gateway_eui: Some(gateway_eui),
            json: None,
        }
    }

    pub fn pull_resp(token: u16, txpk: &TxRequest) -> Self {
        let txpk = serde_json::to_value(txpk).expect("txpk serializes");
        ForwarderDatagram {
            token,
            kind: Kind::PullResp,
            gateway_eui: None,
            json: Some(object("txpk", txpk)),
        }
    }

    /// `error` of `None` reports success ("NONE").
    pub fn tx_ack(token: u16, gateway_eui: Eui64, error: Option<&str>) -> Self {
        let ack = serde_json::json!({ "error": error.unwrap_or("NONE") });
        ForwarderDatagram {
            token,
            kind: Kind::TxAck,
            gateway_eui: Some(gateway_eui),
            json: Some(object("txpk_ack", ack)),
        }
    }

    pub fn ack(kind: Kind, token: u16) -> Self {
        ForwarderDatagram {
            token,
            kind,
            gateway_eui: None,
            json: None,
        }
    }

    /// The `rxpk` entries of a PUSH_DATA, each validated on its own so one
    /// bad entry does not hide the rest. Stat-only datagrams yield none.
    pub fn rxpk_entries(&self) -> Vec<Result<RxMetadata, UdpError>> {
        let Some(Value::Array(items)) = self.json.as_ref().and_then(|j| j.get("rxpk")) else {
            return Vec::new();
        };
        items
            .iter()
            .map(|v| serde_json::from_value::<RxMetadata>(v.clone()).map_err(|e| UdpError::BadField(e.to_string())))
            .collect()
    }

    pub fn txpk(&self) -> Result<TxRequest, UdpError> {
        let v = self
            .json
            .as_ref()
            .and_then(|j| j.get("txpk"))
            .ok_or_else(|| UdpError::BadField("missing txpk".into()))?;
        serde_json::from_value(v.clone()).map_err(|e| UdpError::BadField(e.to_string()))
    }

    /// Error string of a TX_ACK; "NONE" means the transmission was accepted.
    pub fn tx_ack_error(&self) -> String {
        self.json
            .as_ref()
            .and_then(|j| j.get("txpk_ack"))
            .and_then(|a| a.get("error"))
            .and_then(Value::as_str)
            .unwrap_or("NONE")
            .to_string()
    }
}

pub fn decode_datagram(raw: &[u8]) -> Result<ForwarderDatagram, UdpError> {
    if raw.len() < 4 {
        return Err(UdpError::TooShort(raw.len()));
    }
    if raw[0] != PROTOCOL_VERSION {
        return Err(UdpError::BadVersion(raw[0]));
    }
    let token = u16::from_be_bytes([raw[1], raw[2]]);
    let kind = Kind::from_id(raw[3])?;
    let mut rest = &raw[4..];

    let gateway_eui = if kind.has_eui() {
        if rest.len() < 8 {
            return Err(UdpError::TooShort(raw.len()));
        }
        let eui = Eui64::from_be_bytes(rest[..8].try_into().unwrap());
        rest = &rest[8..];
        Some(eui)
    } else {
        None
    };

    let json = match kind.json_rule() {
        JsonRule::Forbidden => None,
        JsonRule::Optional if rest.iter().all(|b| b.is_ascii_whitespace() || *b == 0) => None,
        _ => {
            let v: Value = serde_json::from_slice(rest).map_err(|e| UdpError::BadJson(e.to_string()))?;
            match v {
                Value::Object(m) => Some(m),
                _ => return Err(UdpError::BadJson("top level is not an object".into())),
            }
        }
    };

    Ok(ForwarderDatagram {
        token,
        kind,
        gateway_eui,
        json,
    })
}

pub fn encode_datagram(d: &ForwarderDatagram) -> Result<Vec<u8>, UdpError> {
    if d.kind.has_eui() != d.gateway_eui.is_some() {
        return Err(UdpError::InvariantViolation("gateway EUI presence does not match kind"));
    }
    match d.kind.json_rule() {
        JsonRule::Required if d.json.is_none() => return Err(UdpError::InvariantViolation("JSON body required")),
        JsonRule::Forbidden if d.json.is_some() => return Err(UdpError::InvariantViolation("JSON body not allowed")),
        _ => {}
    }
    let mut out = Vec::with_capacity(64);
    out.push(PROTOCOL_VERSION);
    out.extend_from_slice(&d.token.to_be_bytes());
    out.push(d.kind.id());
    if let Some(eui) = d.gateway_eui {
        out.extend_from_slice(&eui.to_be_bytes());
    }
    if let Some(json) = &d.json {
        serde_json::to_writer(&mut out, json).map_err(|e| UdpError::BadJson(e.to_string()))?;
    }
    Ok(out)
}

/// The acknowledgement a server owes for `d`: PUSH_ACK for PUSH_DATA,
/// PULL_ACK for PULL_DATA, both echoing the token.
pub fn ack_for(d: &ForwarderDatagram) -> Option<ForwarderDatagram> {
    match d.kind {
        Kind::PushData => Some(ForwarderDatagram::ack(Kind::PushAck, d.token)),
        Kind::PullData => Some(ForwarderDatagram::ack(Kind::PullAck, d.token)),
        _ => None,
    }
}
