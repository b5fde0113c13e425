//! MAC command streams (FOpts or FPort-0 FRMPayload).
//!
//! Each command is a CID byte followed by a payload whose length is fixed
//! by the CID and the direction. A CID outside the table makes the rest of
//! the stream undecodable.

use serde::{Deserialize, Serialize};

use crate::types::Direction;

pub const LINK_CHECK: u8 = 0x02;
pub const LINK_ADR: u8 = 0x03;
pub const DUTY_CYCLE: u8 = 0x04;
pub const RX_PARAM_SETUP: u8 = 0x05;
pub const DEV_STATUS: u8 = 0x06;
pub const NEW_CHANNEL: u8 = 0x07;
pub const RX_TIMING_SETUP: u8 = 0x08;
pub const TX_PARAM_SETUP: u8 = 0x09;
pub const DL_CHANNEL: u8 = 0x0A;
pub const DEVICE_TIME: u8 = 0x0D;

/// Payload length for `cid` in `dir`, `None` for CIDs outside the table.
pub fn payload_len(cid: u8, dir: Direction) -> Option<usize> {
    let (up, down) = match cid {
        LINK_CHECK => (0, 2),
        LINK_ADR => (1, 4),
        DUTY_CYCLE => (0, 1),
        RX_PARAM_SETUP => (1, 4),
        DEV_STATUS => (2, 0),
        NEW_CHANNEL => (1, 5),
        RX_TIMING_SETUP => (0, 1),
        TX_PARAM_SETUP => (0, 1),
        DL_CHANNEL => (1, 4),
        DEVICE_TIME => (0, 5),
        _ => return None,
    };
    Some(match dir {
        Direction::Uplink => up,
        Direction::Downlink => down,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MacCommand {
    pub cid: u8,
    pub payload: Vec<u8>,
}

impl MacCommand {
    pub fn new(cid: u8, payload: Vec<u8>) -> Self {
        MacCommand { cid, payload }
    }

    pub fn wire_len(&self) -> usize {
        1 + self.payload.len()
    }

    pub fn name(&self, dir: Direction) -> &'static str {
        let up = dir == Direction::Uplink;
        match (self.cid, up) {
            (LINK_CHECK, true) => "LinkCheckReq",
            (LINK_CHECK, false) => "LinkCheckAns",
            (LINK_ADR, true) => "LinkADRAns",
            (LINK_ADR, false) => "LinkADRReq",
            (DUTY_CYCLE, true) => "DutyCycleAns",
            (DUTY_CYCLE, false) => "DutyCycleReq",
            (RX_PARAM_SETUP, true) => "RXParamSetupAns",
            (RX_PARAM_SETUP, false) => "RXParamSetupReq",
            (DEV_STATUS, true) => "DevStatusAns",
            (DEV_STATUS, false) => "DevStatusReq",
            (NEW_CHANNEL, true) => "NewChannelAns",
            (NEW_CHANNEL, false) => "NewChannelReq",
            (RX_TIMING_SETUP, true) => "RXTimingSetupAns",
            (RX_TIMING_SETUP, false) => "RXTimingSetupReq",
            (TX_PARAM_SETUP, true) => "TxParamSetupAns",
            (TX_PARAM_SETUP, false) => "TxParamSetupReq",
            (DL_CHANNEL, true) => "DlChannelAns",
            (DL_CHANNEL, false) => "DlChannelReq",
            (DEVICE_TIME, true) => "DeviceTimeReq",
            (DEVICE_TIME, false) => "DeviceTimeAns",
            _ => "Unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MacErrorKind {
    #[error("unknown cid {cid:#04x} at offset {offset}")]
    UnknownCid { cid: u8, offset: usize },
    #[error("cid {cid:#04x} needs {need} payload bytes, {got} left")]
    TruncatedPayload { cid: u8, need: usize, got: usize },
}

/// Parse failure carrying the commands decoded before the bad byte.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind} (after {} decoded commands)", decoded.len())]
pub struct MacParseError {
    pub decoded: Vec<MacCommand>,
    pub kind: MacErrorKind,
}

pub fn parse_mac_commands(stream: &[u8], dir: Direction) -> Result<Vec<MacCommand>, MacParseError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < stream.len() {
        let cid = stream[i];
        let Some(need) = payload_len(cid, dir) else {
            return Err(MacParseError {
                decoded: out,
                kind: MacErrorKind::UnknownCid { cid, offset: i },
            });
        };
        let got = stream.len() - i - 1;
        if got < need {
            return Err(MacParseError {
                decoded: out,
                kind: MacErrorKind::TruncatedPayload { cid, need, got },
            });
        }
        out.push(MacCommand::new(cid, stream[i + 1..i + 1 + need].to_vec()));
        i += 1 + need;
    }
    Ok(out)
}

pub fn serialize_mac_commands(cmds: &[MacCommand]) -> Vec<u8> {
    let mut out = Vec::with_capacity(cmds.iter().map(MacCommand::wire_len).sum());
    for c in cmds {
        out.push(c.cid);
        out.extend_from_slice(&c.payload);
    }
    out
}

/// LinkADRReq: DR/TXPower nibbles, 16-bit channel mask, redundancy byte
/// (ChMaskCntl in bits 6..4, NbTrans in bits 3..0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkAdrReq {
    pub data_rate: u8,
    pub tx_power: u8,
    pub ch_mask: u16,
    pub redundancy: u8,
}

impl LinkAdrReq {
    pub fn to_command(self) -> MacCommand {
        let mask = self.ch_mask.to_le_bytes();
        MacCommand::new(
            LINK_ADR,
            vec![(self.data_rate & 0x0f) << 4 | (self.tx_power & 0x0f), mask[0], mask[1], self.redundancy],
        )
    }

    pub fn from_command(cmd: &MacCommand) -> Option<Self> {
        if cmd.cid != LINK_ADR || cmd.payload.len() != 4 {
            return None;
        }
        let p = &cmd.payload;
        Some(LinkAdrReq {
            data_rate: p[0] >> 4,
            tx_power: p[0] & 0x0f,
            ch_mask: u16::from_le_bytes([p[1], p[2]]),
            redundancy: p[3],
        })
    }

    pub fn nb_trans(&self) -> u8 {
        self.redundancy & 0x0f
    }
}

/// LinkADRAns status bits: power ACK (2), data-rate ACK (1), channel-mask ACK (0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkAdrAns {
    pub power_ack: bool,
    pub data_rate_ack: bool,
    pub channel_mask_ack: bool,
}

impl LinkAdrAns {
    pub const ALL_OK: LinkAdrAns = LinkAdrAns {
        power_ack: true,
        data_rate_ack: true,
        channel_mask_ack: true,
    };

    pub fn is_ok(&self) -> bool {
        self.power_ack && self.data_rate_ack && self.channel_mask_ack
    }

    pub fn to_command(self) -> MacCommand {
        let status = (self.power_ack as u8) << 2 | (self.data_rate_ack as u8) << 1 | self.channel_mask_ack as u8;
        MacCommand::new(LINK_ADR, vec![status])
    }

    pub fn from_command(cmd: &MacCommand) -> Option<Self> {
        if cmd.cid != LINK_ADR || cmd.payload.len() != 1 {
            return None;
        }
        let s = cmd.payload[0];
        Some(LinkAdrAns {
            power_ack: s & 0x04 != 0,
            data_rate_ack: s & 0x02 != 0,
            channel_mask_ack: s & 0x01 != 0,
        })
    }
}

pub fn dev_status_req() -> MacCommand {
    MacCommand::new(DEV_STATUS, vec![])
}

pub fn duty_cycle_req(max_duty_cycle: u8) -> MacCommand {
    MacCommand::new(DUTY_CYCLE, vec![max_duty_cycle & 0x0f])
}
