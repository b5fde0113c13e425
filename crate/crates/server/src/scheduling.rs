//! Gateway choice and RX window parameters shared by the central server and
//! the join server.

use std::cmp::Ordering;

use lorans_codec::{LoraDataRate, Region, TxRequest};

use crate::model::Reception;
use crate::topics::Rx2Params;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("no reception to answer through")]
    NoGateway,
    #[error("uplink data rate {0} is not in the region table")]
    UnknownDataRate(String),
}

/// Best reception: highest SNR, then highest RSSI, then the smaller EUI.
pub fn select_gateway(receptions: &[Reception]) -> Option<&Reception> {
    receptions.iter().max_by(|a, b| compare_receptions(a, b))
}

/// Orders receptions so that the preferred one is greatest.
pub fn compare_receptions(a: &Reception, b: &Reception) -> Ordering {
    a.meta.lsnr.total_cmp(&b.meta.lsnr).then(a.meta.rssi.cmp(&b.meta.rssi)).then(b.gateway_eui.cmp(&a.gateway_eui))
}

pub fn uplink_dr(rx: &Reception, region: &Region) -> Result<u8, ScheduleError> {
    rx.meta
        .data_rate()
        .ok()
        .and_then(|d| region.dr_of(d))
        .ok_or_else(|| ScheduleError::UnknownDataRate(rx.meta.datr.clone()))
}

/// Window parameters for one downlink.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub dr: u8,
    pub datr: LoraDataRate,
    pub tmst: u32,
    pub freq: f64,
}

/// RX1: same channel, `delay_s` after the uplink, DR lowered by `dr_offset`.
pub fn rx1_window(rx: &Reception, delay_s: u32, dr_offset: u8, region: &Region) -> Result<Window, ScheduleError> {
    let dr = region.rx1_dr(uplink_dr(rx, region)?, dr_offset);
    Ok(Window {
        dr,
        datr: region.datr(dr).expect("rx1 dr within table"),
        tmst: rx.meta.tmst.wrapping_add(delay_s.wrapping_mul(1_000_000)),
        freq: rx.meta.freq,
    })
}

pub fn rx2_params(rx: &Reception, delay_s: u32, rx2_dr: u8, region: &Region) -> Rx2Params {
    let datr = region.datr(rx2_dr).or_else(|| region.datr(region.rx2_dr)).expect("rx2 dr within table");
    Rx2Params {
        tmst: rx.meta.tmst.wrapping_add(delay_s.wrapping_mul(1_000_000)),
        freq: region.rx2_freq_mhz,
        datr: datr.to_string(),
    }
}

pub fn tx_request(phy: &[u8], w: &Window, power_dbm: i32) -> TxRequest {
    TxRequest::new(phy, Some(w.tmst), w.freq, w.datr, power_dbm)
}
