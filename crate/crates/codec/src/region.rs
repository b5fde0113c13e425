//! Regional parameters for the 433 MHz band used by the server and the
//! simulator: data-rate table, TX power steps, default channels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// LoRa modulation parameters, rendered as the forwarder's `datr` string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoraDataRate {
    pub sf: u8,
    pub bw_khz: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid datr {0:?} (expected SF7..SF12 with BW125/250/500)")]
pub struct DatrError(pub String);

impl fmt::Display for LoraDataRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SF{}BW{}", self.sf, self.bw_khz)
    }
}

impl FromStr for LoraDataRate {
    type Err = DatrError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || DatrError(s.to_string());
        let rest = s.strip_prefix("SF").ok_or_else(err)?;
        let (sf, bw) = rest.split_once("BW").ok_or_else(err)?;
        let sf: u8 = sf.parse().map_err(|_| err())?;
        let bw_khz: u16 = bw.parse().map_err(|_| err())?;
        if !(7..=12).contains(&sf) || !matches!(bw_khz, 125 | 250 | 500) {
            return Err(err());
        }
        Ok(LoraDataRate { sf, bw_khz })
    }
}

/// Channel plan and DR/power tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// Index = DR.
    pub data_rates: Vec<LoraDataRate>,
    /// Maximum FRMPayload size (no FOpts) per DR.
    pub max_payload: Vec<usize>,
    pub max_tx_power_dbm: f64,
    pub tx_power_step_db: f64,
    /// Highest TXPower index (lowest power).
    pub max_tx_power_index: u8,
    pub uplink_channels_mhz: Vec<f64>,
    pub rx2_freq_mhz: f64,
    pub rx2_dr: u8,
    pub default_ch_mask: u16,
}

impl Region {
    pub fn eu433() -> Self {
        Region {
            data_rates: (7..=12)
                .rev()
                .map(|sf| LoraDataRate { sf, bw_khz: 125 })
                .collect(),
            max_payload: vec![51, 51, 51, 115, 222, 222],
            max_tx_power_dbm: 20.0,
            tx_power_step_db: 3.0,
            max_tx_power_index: 5,
            uplink_channels_mhz: vec![433.175, 433.375, 433.575],
            rx2_freq_mhz: 434.665,
            rx2_dr: 0,
            default_ch_mask: 0x0007,
        }
    }

    pub fn max_dr(&self) -> u8 {
        (self.data_rates.len() - 1) as u8
    }

    pub fn datr(&self, dr: u8) -> Option<LoraDataRate> {
        self.data_rates.get(dr as usize).copied()
    }

    pub fn dr_of(&self, datr: LoraDataRate) -> Option<u8> {
        self.data_rates.iter().position(|d| *d == datr).map(|i| i as u8)
    }

    pub fn tx_power_dbm(&self, index: u8) -> f64 {
        self.max_tx_power_dbm - self.tx_power_step_db * index as f64
    }

    pub fn max_payload(&self, dr: u8) -> usize {
        self.max_payload.get(dr as usize).copied().unwrap_or(0)
    }

    /// RX1 downlink DR for an uplink DR and offset, clamped at DR0.
    pub fn rx1_dr(&self, uplink_dr: u8, offset: u8) -> u8 {
        uplink_dr.saturating_sub(offset)
    }
}

impl Default for Region {
    fn default() -> Self {
        Region::eu433()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datr_strings() {
        let d: LoraDataRate = "SF12BW125".parse().unwrap();
        assert_eq!(d, LoraDataRate { sf: 12, bw_khz: 125 });
        assert_eq!(d.to_string(), "SF12BW125");
        for bad in ["SF6BW125", "SF13BW125", "SF7BW200", "FSK50", "SF7", ""] {
            assert!(bad.parse::<LoraDataRate>().is_err(), "{bad}");
        }
    }

    #[test]
    fn eu433_table() {
        let r = Region::eu433();
        assert_eq!(r.max_dr(), 5);
        assert_eq!(r.datr(0).unwrap().to_string(), "SF12BW125");
        assert_eq!(r.datr(2).unwrap().to_string(), "SF10BW125");
        assert_eq!(r.datr(5).unwrap().to_string(), "SF7BW125");
        assert_eq!(r.dr_of("SF9BW125".parse().unwrap()), Some(3));
        assert_eq!(r.tx_power_dbm(0), 20.0);
        assert_eq!(r.tx_power_dbm(5), 5.0);
        assert_eq!(r.rx1_dr(1, 3), 0);
    }
}
