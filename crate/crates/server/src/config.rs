//! Server configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use lorans_codec::Region;
use serde::{Deserialize, Serialize};

use crate::topics;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {err}")]
    Read { path: PathBuf, err: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub connector: ConnectorConfig,
    pub central: CentralConfig,
    pub join: JoinConfig,
    pub controller: ControllerConfig,
    pub admin: AdminConfig,
    pub store: StoreConfig,
    pub bus: BusConfig,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectorConfig {
    pub listen: String,
    /// Verifier workers consuming `gateway.up`.
    pub verifiers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentralConfig {
    pub instances: usize,
    /// Time to wait for other gateways' copies before answering.
    pub collection_window_ms: u64,
    pub dedup_ttl_ms: u64,
    /// Accepted forward jump of the uplink counter.
    pub max_fcnt_gap: u32,
    pub rx1_delay_s: u32,
    pub rx2_delay_s: u32,
    pub downlink_power_dbm: i32,
    /// Emulated per-message processing cost of one instance.
    pub service_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JoinConfig {
    pub instances: usize,
    pub net_id: u32,
    pub join_accept_delay1_s: u32,
    pub join_accept_delay2_s: u32,
    pub rx1_dr_offset: u8,
    pub rx2_dr: u8,
    pub rx_delay_s: u8,
    pub dev_nonce_history: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub instances: usize,
    pub installation_margin_db: f64,
    pub history_len: usize,
    pub max_attempts: u32,
    pub redundancy: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdminConfig {
    pub listen: String,
    /// Bearer token. No authentication when unset.
    pub token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    /// Registry journal. In-memory registry when unset.
    pub registry_path: Option<PathBuf>,
    pub retention_s: u64,
    pub frame_log_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicConfig {
    pub name: String,
    pub schema: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusConfig {
    pub capacity: usize,
    pub topics: Vec<TopicConfig>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            connector: ConnectorConfig::default(),
            central: CentralConfig::default(),
            join: JoinConfig::default(),
            controller: ControllerConfig::default(),
            admin: AdminConfig::default(),
            store: StoreConfig::default(),
            bus: BusConfig::default(),
            region: Region::eu433(),
        }
    }
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        ConnectorConfig {
            listen: "0.0.0.0:1700".into(),
            verifiers: 1,
        }
    }
}

impl Default for CentralConfig {
    fn default() -> Self {
        CentralConfig {
            instances: 1,
            collection_window_ms: 200,
            dedup_ttl_ms: 10_000,
            max_fcnt_gap: 16_384,
            rx1_delay_s: 1,
            rx2_delay_s: 2,
            downlink_power_dbm: 14,
            service_time_ms: 0,
        }
    }
}

impl Default for JoinConfig {
    fn default() -> Self {
        JoinConfig {
            instances: 1,
            net_id: 0x000013,
            join_accept_delay1_s: 5,
            join_accept_delay2_s: 6,
            rx1_dr_offset: 0,
            rx2_dr: 0,
            rx_delay_s: 1,
            dev_nonce_history: 64,
        }
    }
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            instances: 1,
            installation_margin_db: 10.0,
            history_len: 20,
            max_attempts: 3,
            redundancy: 1,
        }
    }
}

impl Default for AdminConfig {
    fn default() -> Self {
        AdminConfig {
            listen: "127.0.0.1:8080".into(),
            token: None,
        }
    }
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            registry_path: None,
            retention_s: 24 * 3600,
            frame_log_cap: 256,
        }
    }
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            capacity: lorans_bus::DEFAULT_CAPACITY,
            topics: topics::REQUIRED
                .iter()
                .map(|(n, s)| TopicConfig {
                    name: n.to_string(),
                    schema: s.to_string(),
                })
                .collect(),
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: ServerConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|err| ConfigError::Read {
            path: path.to_path_buf(),
            err,
        })?;
        Self::from_toml(&text)
    }

    /// Config for tests and the load harness: loopback, ephemeral ports.
    pub fn ephemeral() -> Self {
        let mut c = ServerConfig::default();
        c.connector.listen = "127.0.0.1:0".into();
        c.admin.listen = "127.0.0.1:0".into();
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (name, schema) in topics::REQUIRED {
            match self.bus.topics.iter().find(|t| t.name == name) {
                None => return bad(format!("topic {name} is not configured")),
                Some(t) if t.schema != schema => return bad(format!("topic {name} must use schema {schema}, not {}", t.schema)),
                _ => {}
            }
        }
        if self.central.instances == 0 || self.join.instances == 0 || self.controller.instances == 0 || self.connector.verifiers == 0 {
            return bad("every module needs at least one instance".into());
        }
        if self.join.net_id > 0x00ff_ffff {
            return bad("net_id is 24 bits".into());
        }
        if self.join.rx1_dr_offset > 7 || self.join.rx2_dr > 15 {
            return bad("rx1_dr_offset is 3 bits and rx2_dr 4 bits".into());
        }
        if self.region.data_rates.is_empty() || self.region.max_payload.len() != self.region.data_rates.len() {
            return bad("region tables are inconsistent".into());
        }
        if self.bus.capacity == 0 {
            return bad("bus capacity must be positive".into());
        }
        if self.controller.history_len == 0 {
            return bad("controller.history_len must be positive".into());
        }
        Ok(())
    }

    /// 7-bit network identifier carried in device addresses.
    pub fn nwk_id(&self) -> u8 {
        (self.join.net_id & 0x7f) as u8
    }
}
