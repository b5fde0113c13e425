//! Identifiers and key material shared by every layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Frame direction. The numeric value is the `Dir` byte of the crypto
/// blocks (0 uplink, 1 downlink).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uplink,
    Downlink,
}

impl Direction {
    pub fn as_byte(self) -> u8 {
        match self {
            Direction::Uplink => 0,
            Direction::Downlink => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HexError {
    #[error("expected {expected} hex digits, got {got}")]
    Length { expected: usize, got: usize },
    #[error("invalid hex digit in {0:?}")]
    Digit(String),
}

fn parse_hex_u64(s: &str, digits: usize) -> Result<u64, HexError> {
    let s = s.trim();
    let s = s.strip_prefix("0x").unwrap_or(s);
    let cleaned: String = s.chars().filter(|c| *c != ':' && *c != '-').collect();
    if cleaned.len() != digits {
        return Err(HexError::Length {
            expected: digits,
            got: cleaned.len(),
        });
    }
    u64::from_str_radix(&cleaned, 16).map_err(|_| HexError::Digit(s.to_string()))
}

macro_rules! hex_serde {
    ($ty:ident) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

/// 64-bit extended unique identifier (DevEUI, AppEUI, gateway EUI).
///
/// Displayed and parsed MSB first; carried little-endian on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Eui64(pub u64);

impl Eui64 {
    pub fn to_le_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(b: [u8; 8]) -> Self {
        Eui64(u64::from_le_bytes(b))
    }

    /// MSB-first bytes, the order used by the forwarder protocol header.
    pub fn to_be_bytes(self) -> [u8; 8] {
        self.0.to_be_bytes()
    }

    pub fn from_be_bytes(b: [u8; 8]) -> Self {
        Eui64(u64::from_be_bytes(b))
    }
}

impl fmt::Display for Eui64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for Eui64 {
    type Err = HexError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hex_u64(s, 16).map(Eui64)
    }
}

hex_serde!(Eui64);

/// 32-bit device address: 7-bit NwkID in the top bits, 25-bit NwkAddr below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct DevAddr(pub u32);

impl DevAddr {
    pub const NWK_ADDR_BITS: u32 = 25;

    pub fn new(nwk_id: u8, nwk_addr: u32) -> Self {
        DevAddr(((nwk_id as u32 & 0x7f) << Self::NWK_ADDR_BITS) | (nwk_addr & 0x01ff_ffff))
    }

    pub fn nwk_id(self) -> u8 {
        (self.0 >> Self::NWK_ADDR_BITS) as u8
    }

    pub fn nwk_addr(self) -> u32 {
        self.0 & 0x01ff_ffff
    }

    pub fn to_le_bytes(self) -> [u8; 4] {
        self.0.to_le_bytes()
    }
}

impl fmt::Display for DevAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}

impl FromStr for DevAddr {
    type Err = HexError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hex_u64(s, 8).map(|v| DevAddr(v as u32))
    }
}

hex_serde!(DevAddr);

/// AES-128 key. Hex encoded MSB first, used as-is by the block cipher.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AesKey(pub [u8; 16]);

impl AesKey {
    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for AesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AesKey(..)")
    }
}

impl fmt::Display for AesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl FromStr for AesKey {
    type Err = HexError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.len() != 32 {
            return Err(HexError::Length {
                expected: 32,
                got: s.len(),
            });
        }
        let mut out = [0u8; 16];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let pair = std::str::from_utf8(chunk).map_err(|_| HexError::Digit(s.to_string()))?;
            out[i] = u8::from_str_radix(pair, 16).map_err(|_| HexError::Digit(s.to_string()))?;
        }
        Ok(AesKey(out))
    }
}

impl From<[u8; 16]> for AesKey {
    fn from(b: [u8; 16]) -> Self {
        AesKey(b)
    }
}

hex_serde!(AesKey);

/// Session keys produced by an OTAA join or provisioned for ABP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionKeys {
    pub nwk_skey: AesKey,
    pub app_skey: AesKey,
}
