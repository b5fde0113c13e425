//! PHYPayload parsing and serialization.
//!
//! Layouts (all multi-byte integers little-endian):
//!
//! ```text
//! data frame    MHDR(1) | DevAddr(4) | FCtrl(1) | FCnt(2) | FOpts(0..15) | [FPort(1) | FRMPayload] | MIC(4)
//! join request  MHDR(1) | AppEUI(8) | DevEUI(8) | DevNonce(2) | MIC(4)
//! join accept   MHDR(1) | AppNonce(3) | NetID(3) | DevAddr(4) | DLSettings(1) | RxDelay(1) | [CFList(16)] | MIC(4)
//! ```
//!
//! A join accept is handled here in its *plaintext* form; the encryption
//! of everything after the MHDR is a separate step (see
//! [`crate::crypto::encrypt_join_accept`]). FRMPayload bytes are carried as
//! they appear on the wire, i.e. encrypted.

use serde::{Deserialize, Serialize};

use crate::crypto::{self, Mic};
use crate::types::{AesKey, DevAddr, Direction, Eui64};

pub const MIC_LEN: usize = 4;
pub const DATA_MIN_LEN: usize = 12;
pub const JOIN_REQUEST_LEN: usize = 23;
pub const JOIN_ACCEPT_LEN: usize = 17;
pub const JOIN_ACCEPT_CFLIST_LEN: usize = 33;
pub const MAX_FOPTS_LEN: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PhyError {
    #[error("frame too short: need {need} bytes, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("unsupported mtype {0:#05b}")]
    UnknownMType(u8),
    #[error("FOpts length {fopts_len} exceeds the {available} bytes available")]
    MalformedFOpts { fopts_len: usize, available: usize },
    #[error("{0:?} frame is not valid in the {1:?} direction")]
    WrongDirection(MType, Direction),
    #[error("join accept of {0} bytes (expected 17 or 33)")]
    BadLength(usize),
    #[error("frame invariant violated: {0}")]
    InvariantViolation(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MType {
    JoinRequest,
    JoinAccept,
    UnconfirmedDataUp,
    UnconfirmedDataDown,
    ConfirmedDataUp,
    ConfirmedDataDown,
}

impl MType {
    pub fn bits(self) -> u8 {
        match self {
            MType::JoinRequest => 0b000,
            MType::JoinAccept => 0b001,
            MType::UnconfirmedDataUp => 0b010,
            MType::UnconfirmedDataDown => 0b011,
            MType::ConfirmedDataUp => 0b100,
            MType::ConfirmedDataDown => 0b101,
        }
    }

    /// Rejoin requests (0b110) belong to 1.1 and proprietary frames (0b111)
    /// are never handled, so both are rejected.
    pub fn from_bits(bits: u8) -> Result<Self, PhyError> {
        Ok(match bits {
            0b000 => MType::JoinRequest,
            0b001 => MType::JoinAccept,
            0b010 => MType::UnconfirmedDataUp,
            0b011 => MType::UnconfirmedDataDown,
            0b100 => MType::ConfirmedDataUp,
            0b101 => MType::ConfirmedDataDown,
            other => return Err(PhyError::UnknownMType(other)),
        })
    }

    pub fn direction(self) -> Direction {
        match self {
            MType::JoinRequest | MType::UnconfirmedDataUp | MType::ConfirmedDataUp => Direction::Uplink,
            _ => Direction::Downlink,
        }
    }

    pub fn is_data(self) -> bool {
        !matches!(self, MType::JoinRequest | MType::JoinAccept)
    }

    pub fn is_confirmed(self) -> bool {
        matches!(self, MType::ConfirmedDataUp | MType::ConfirmedDataDown)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mhdr {
    pub mtype: MType,
    pub major: u8,
}

impl Mhdr {
    pub fn new(mtype: MType) -> Self {
        Mhdr { mtype, major: 0 }
    }

    pub fn to_byte(self) -> u8 {
        (self.mtype.bits() << 5) | (self.major & 0x03)
    }
}

/// Frame control byte.
///
/// Bit 6 is ADRACKReq on uplinks and RFU on downlinks; bit 4 is FPending on
/// downlinks and the Class B flag on uplinks. Both are kept verbatim in
/// `adr_ack_req` / `fpending` so a frame always re-encodes to its wire bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FCtrl {
    pub adr: bool,
    pub adr_ack_req: bool,
    pub ack: bool,
    pub fpending: bool,
    pub fopts_len: u8,
}

impl FCtrl {
    pub fn to_byte(self) -> u8 {
        (self.adr as u8) << 7
            | (self.adr_ack_req as u8) << 6
            | (self.ack as u8) << 5
            | (self.fpending as u8) << 4
            | (self.fopts_len & 0x0f)
    }

    pub fn from_byte(b: u8) -> Self {
        FCtrl {
            adr: b & 0x80 != 0,
            adr_ack_req: b & 0x40 != 0,
            ack: b & 0x20 != 0,
            fpending: b & 0x10 != 0,
            fopts_len: b & 0x0f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPayload {
    pub dev_addr: DevAddr,
    pub fctrl: FCtrl,
    /// Low 16 bits of the logical frame counter.
    pub fcnt: u16,
    pub fopts: Vec<u8>,
    pub fport: Option<u8>,
    /// FRMPayload as carried on the wire (encrypted).
    pub frm_payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinRequestPayload {
    pub app_eui: Eui64,
    pub dev_eui: Eui64,
    pub dev_nonce: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinAcceptPayload {
    /// 24-bit server nonce.
    pub app_nonce: u32,
    /// 24-bit network identifier.
    pub net_id: u32,
    pub dev_addr: DevAddr,
    pub dl_settings: u8,
    pub rx_delay: u8,
    pub cf_list: Option<[u8; 16]>,
}

impl JoinAcceptPayload {
    pub fn rx1_dr_offset(&self) -> u8 {
        (self.dl_settings >> 4) & 0x07
    }

    pub fn rx2_dr(&self) -> u8 {
        self.dl_settings & 0x0f
    }

    pub fn dl_settings_for(rx1_dr_offset: u8, rx2_dr: u8) -> u8 {
        ((rx1_dr_offset & 0x07) << 4) | (rx2_dr & 0x0f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Body {
    Data(DataPayload),
    JoinRequest(JoinRequestPayload),
    JoinAccept(JoinAcceptPayload),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhyPayload {
    pub mhdr: Mhdr,
    pub body: Body,
    pub mic: Mic,
}

impl PhyPayload {
    pub fn data(&self) -> Option<&DataPayload> {
        match &self.body {
            Body::Data(d) => Some(d),
            _ => None,
        }
    }

    pub fn join_request(&self) -> Option<&JoinRequestPayload> {
        match &self.body {
            Body::JoinRequest(j) => Some(j),
            _ => None,
        }
    }

    pub fn join_accept(&self) -> Option<&JoinAcceptPayload> {
        match &self.body {
            Body::JoinAccept(j) => Some(j),
            _ => None,
        }
    }

    /// The bytes covered by the MIC: the serialized frame without its
    /// trailing four MIC bytes.
    pub fn mic_input(&self) -> Result<Vec<u8>, PhyError> {
        let mut out = serialize_phy(self)?;
        out.truncate(out.len() - MIC_LEN);
        Ok(out)
    }

    /// Recompute the MIC of a data frame with `nwk_skey` and the widened
    /// counter, storing it in `self.mic`.
    pub fn sign_data(&mut self, nwk_skey: &AesKey, fcnt32: u32) -> Result<(), PhyError> {
        let dev_addr = self
            .data()
            .ok_or(PhyError::InvariantViolation("sign_data on a non-data frame"))?
            .dev_addr;
        let msg = self.mic_input()?;
        self.mic = crypto::mic_data(&msg, nwk_skey, self.mhdr.mtype.direction(), dev_addr, fcnt32);
        Ok(())
    }

    pub fn verify_data(&self, nwk_skey: &AesKey, fcnt32: u32) -> bool {
        let Some(d) = self.data() else { return false };
        match self.mic_input() {
            Ok(msg) => crypto::mic_data(&msg, nwk_skey, self.mhdr.mtype.direction(), d.dev_addr, fcnt32) == self.mic,
            Err(_) => false,
        }
    }

    /// Recompute the MIC of a join request / plaintext join accept.
    pub fn sign_join(&mut self, app_key: &AesKey) -> Result<(), PhyError> {
        let msg = self.mic_input()?;
        self.mic = crypto::mic_join(&msg, app_key);
        Ok(())
    }

    pub fn verify_join(&self, app_key: &AesKey) -> bool {
        match self.mic_input() {
            Ok(msg) => crypto::mic_join(&msg, app_key) == self.mic,
            Err(_) => false,
        }
    }
}

fn check_data(d: &DataPayload) -> Result<(), PhyError> {
    if d.fopts.len() > MAX_FOPTS_LEN {
        return Err(PhyError::InvariantViolation("fopts longer than 15 bytes"));
    }
    if d.fctrl.fopts_len as usize != d.fopts.len() {
        return Err(PhyError::InvariantViolation("fopts_len does not match fopts"));
    }
    match d.fport {
        None if !d.frm_payload.is_empty() => Err(PhyError::InvariantViolation("frm_payload without fport")),
        Some(0) if !d.fopts.is_empty() => Err(PhyError::InvariantViolation("fport 0 with non-empty fopts")),
        _ => Ok(()),
    }
}

pub fn serialize_phy(frame: &PhyPayload) -> Result<Vec<u8>, PhyError> {
    let mut out = Vec::with_capacity(32);
    out.push(frame.mhdr.to_byte());
    match (&frame.body, frame.mhdr.mtype) {
        (Body::Data(d), m) if m.is_data() => {
            check_data(d)?;
            out.extend_from_slice(&d.dev_addr.to_le_bytes());
            out.push(d.fctrl.to_byte());
            out.extend_from_slice(&d.fcnt.to_le_bytes());
            out.extend_from_slice(&d.fopts);
            if let Some(port) = d.fport {
                out.push(port);
                out.extend_from_slice(&d.frm_payload);
            }
        }
        (Body::JoinRequest(j), MType::JoinRequest) => {
            out.extend_from_slice(&j.app_eui.to_le_bytes());
            out.extend_from_slice(&j.dev_eui.to_le_bytes());
            out.extend_from_slice(&j.dev_nonce.to_le_bytes());
        }
        (Body::JoinAccept(j), MType::JoinAccept) => {
            if j.app_nonce > 0x00ff_ffff || j.net_id > 0x00ff_ffff {
                return Err(PhyError::InvariantViolation("app_nonce/net_id exceed 24 bits"));
            }
            out.extend_from_slice(&j.app_nonce.to_le_bytes()[..3]);
            out.extend_from_slice(&j.net_id.to_le_bytes()[..3]);
            out.extend_from_slice(&j.dev_addr.to_le_bytes());
            out.push(j.dl_settings);
            out.push(j.rx_delay);
            if let Some(cf) = &j.cf_list {
                out.extend_from_slice(cf);
            }
        }
        _ => return Err(PhyError::InvariantViolation("mtype does not match body")),
    }
    out.extend_from_slice(&frame.mic);
    Ok(out)
}

fn le_u24(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], 0])
}

/// Parse a PHYPayload. The MIC is returned uninterpreted; `direction`
/// rejects frames that cannot travel that way.
pub fn parse_phy(raw: &[u8], direction: Direction) -> Result<PhyPayload, PhyError> {
    let first = *raw.first().ok_or(PhyError::TooShort { need: 1, got: 0 })?;
    let mtype = MType::from_bits(first >> 5)?;
    if mtype.direction() != direction {
        return Err(PhyError::WrongDirection(mtype, direction));
    }
    let mhdr = Mhdr {
        mtype,
        major: first & 0x03,
    };
    let too_short = |need: usize| PhyError::TooShort { need, got: raw.len() };

    let body = match mtype {
        MType::JoinRequest => {
            if raw.len() < JOIN_REQUEST_LEN {
                return Err(too_short(JOIN_REQUEST_LEN));
            }
            if raw.len() > JOIN_REQUEST_LEN {
                return Err(PhyError::InvariantViolation("join request longer than 23 bytes"));
            }
            Body::JoinRequest(JoinRequestPayload {
                app_eui: Eui64::from_le_bytes(raw[1..9].try_into().unwrap()),
                dev_eui: Eui64::from_le_bytes(raw[9..17].try_into().unwrap()),
                dev_nonce: u16::from_le_bytes([raw[17], raw[18]]),
            })
        }
        MType::JoinAccept => {
            if raw.len() < JOIN_ACCEPT_LEN {
                return Err(too_short(JOIN_ACCEPT_LEN));
            }
            if raw.len() != JOIN_ACCEPT_LEN && raw.len() != JOIN_ACCEPT_CFLIST_LEN {
                return Err(PhyError::BadLength(raw.len()));
            }
            let cf_list = (raw.len() == JOIN_ACCEPT_CFLIST_LEN).then(|| raw[13..29].try_into().unwrap());
            Body::JoinAccept(JoinAcceptPayload {
                app_nonce: le_u24(&raw[1..4]),
                net_id: le_u24(&raw[4..7]),
                dev_addr: DevAddr(u32::from_le_bytes(raw[7..11].try_into().unwrap())),
                dl_settings: raw[11],
                rx_delay: raw[12],
                cf_list,
            })
        }
        _ => {
            if raw.len() < DATA_MIN_LEN {
                return Err(too_short(DATA_MIN_LEN));
            }
            let fctrl = FCtrl::from_byte(raw[5]);
            let fopts_len = fctrl.fopts_len as usize;
            let payload_end = raw.len() - MIC_LEN;
            let available = payload_end - 8;
            if fopts_len > available {
                return Err(PhyError::MalformedFOpts { fopts_len, available });
            }
            let fopts = raw[8..8 + fopts_len].to_vec();
            let rest = &raw[8 + fopts_len..payload_end];
            let (fport, frm_payload) = match rest.split_first() {
                None => (None, Vec::new()),
                Some((port, frm)) => (Some(*port), frm.to_vec()),
            };
            if fport == Some(0) && !fopts.is_empty() {
                return Err(PhyError::MalformedFOpts { fopts_len, available });
            }
            Body::Data(DataPayload {
                dev_addr: DevAddr(u32::from_le_bytes(raw[1..5].try_into().unwrap())),
                fctrl,
                fcnt: u16::from_le_bytes([raw[6], raw[7]]),
                fopts,
                fport,
                frm_payload,
            })
        }
    };

    let mic = raw[raw.len() - MIC_LEN..].try_into().unwrap();
    Ok(PhyPayload { mhdr, body, mic })
}

/// Build a data frame (MIC zeroed; call [`PhyPayload::sign_data`]).
pub fn data_frame(mtype: MType, dev_addr: DevAddr, fctrl: FCtrl, fcnt: u16, fopts: Vec<u8>, fport: Option<u8>, frm_payload: Vec<u8>) -> PhyPayload {
    let fctrl = FCtrl {
        fopts_len: fopts.len() as u8,
        ..fctrl
    };
    PhyPayload {
        mhdr: Mhdr::new(mtype),
        body: Body::Data(DataPayload {
            dev_addr,
            fctrl,
            fcnt,
            fopts,
            fport,
            frm_payload,
        }),
        mic: [0; 4],
    }
}
