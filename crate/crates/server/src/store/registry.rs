//! Durable tier: device and gateway registrations.
//!
//! [`FileRegistry`] keeps everything in memory and appends every mutation
//! to a line-delimited JSON journal. The journal is replayed and compacted
//! on open.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use lorans_codec::Eui64;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::model::{DeviceRecord, GatewayRecord};

pub trait Registry: Send + Sync {
    /// Fails with `DuplicateEui` if the device exists.
    fn put_device(&self, device: DeviceRecord) -> Result<(), StoreError>;
    fn get_device(&self, dev_eui: Eui64) -> Option<DeviceRecord>;
    fn delete_device(&self, dev_eui: Eui64) -> Result<DeviceRecord, StoreError>;
    fn list_devices(&self) -> Vec<DeviceRecord>;

    fn put_gateway(&self, gateway: GatewayRecord) -> Result<(), StoreError>;
    fn get_gateway(&self, gateway_eui: Eui64) -> Option<GatewayRecord>;
    fn delete_gateway(&self, gateway_eui: Eui64) -> Result<GatewayRecord, StoreError>;
    fn list_gateways(&self) -> Vec<GatewayRecord>;

    /// Update liveness of a registered gateway. Not journaled.
    /// Returns false for an unknown gateway.
    fn touch_gateway(&self, gateway_eui: Eui64, now_ms: u64, pull_endpoint: Option<String>) -> bool;
}

/// One line of an import/export file or of the journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegistryLine {
    Device(DeviceRecord),
    Gateway(GatewayRecord),
    DeleteDevice { dev_eui: Eui64 },
    DeleteGateway { gateway_eui: Eui64 },
}

#[derive(Default)]
struct Tables {
    devices: BTreeMap<Eui64, DeviceRecord>,
    gateways: BTreeMap<Eui64, GatewayRecord>,
}

impl Tables {
    fn apply(&mut self, line: RegistryLine) {
        match line {
            RegistryLine::Device(d) => {
                self.devices.insert(d.dev_eui, d);
            }
            RegistryLine::Gateway(g) => {
                self.gateways.insert(g.gateway_eui, g);
            }
            RegistryLine::DeleteDevice { dev_eui } => {
                self.devices.remove(&dev_eui);
            }
            RegistryLine::DeleteGateway { gateway_eui } => {
                self.gateways.remove(&gateway_eui);
            }
        }
    }

    fn snapshot(&self) -> Vec<RegistryLine> {
        let mut out: Vec<RegistryLine> = self.gateways.values().cloned().map(strip_runtime).map(RegistryLine::Gateway).collect();
        out.extend(self.devices.values().cloned().map(RegistryLine::Device));
        out
    }
}

fn strip_runtime(mut g: GatewayRecord) -> GatewayRecord {
    g.last_seen_ms = None;
    g.last_pull_endpoint = None;
    g
}

pub struct FileRegistry {
    tables: RwLock<Tables>,
    journal: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl FileRegistry {
    /// Registry with no backing file.
    pub fn in_memory() -> Self {
        FileRegistry {
            tables: RwLock::new(Tables::default()),
            journal: None,
            path: None,
        }
    }

    /// Open (or create) the journal at `path`, replay it and compact it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut tables = Tables::default();
        if path.exists() {
            let file = File::open(&path).map_err(io)?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: RegistryLine =
                    serde_json::from_str(&line).map_err(|e| StoreError::Corrupt(format!("{}:{}: {e}", path.display(), n + 1)))?;
                tables.apply(rec);
            }
        }
        let tmp = path.with_extension("compact");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
            write_lines(&mut w, &tables.snapshot())?;
            w.flush().map_err(io)?;
        }
        fs::rename(&tmp, &path).map_err(io)?;
        let file = OpenOptions::new().append(true).open(&path).map_err(io)?;
        Ok(FileRegistry {
            tables: RwLock::new(tables),
            journal: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn append(&self, line: &RegistryLine) -> Result<(), StoreError> {
        if let Some(j) = &self.journal {
            let mut w = j.lock();
            write_lines(&mut *w, std::slice::from_ref(line))?;
            w.flush().map_err(io)?;
        }
        Ok(())
    }
}

fn io(e: std::io::Error) -> StoreError {
    StoreError::Io(e.to_string())
}

pub fn write_lines(w: &mut impl Write, lines: &[RegistryLine]) -> Result<(), StoreError> {
    for l in lines {
        serde_json::to_writer(&mut *w, l).map_err(|e| StoreError::Io(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

/// Parse an import file. Blank lines are skipped.
pub fn parse_lines(text: &str) -> Result<Vec<RegistryLine>, StoreError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| StoreError::Corrupt(format!("line {}: {e}", n + 1))))
        .collect()
}

impl Registry for FileRegistry {
    fn put_device(&self, device: DeviceRecord) -> Result<(), StoreError> {
        let mut t = self.tables.write();
        if t.devices.contains_key(&device.dev_eui) {
            return Err(StoreError::DuplicateEui(device.dev_eui));
        }
        let line = RegistryLine::Device(device);
        self.append(&line)?;
        t.apply(line);
        Ok(())
    }

    fn get_device(&self, dev_eui: Eui64) -> Option<DeviceRecord> {
        self.tables.read().devices.get(&dev_eui).cloned()
    }

    fn delete_device(&self, dev_eui: Eui64) -> Result<DeviceRecord, StoreError> {
        let mut t = self.tables.write();
        let d = t.devices.get(&dev_eui).cloned().ok_or(StoreError::NotFound)?;
        let line = RegistryLine::DeleteDevice { dev_eui };
        self.append(&line)?;
        t.apply(line);
        Ok(d)
    }

    fn list_devices(&self) -> Vec<DeviceRecord> {
        self.tables.read().devices.values().cloned().collect()
    }

    fn put_gateway(&self, gateway: GatewayRecord) -> Result<(), StoreError> {
        let mut t = self.tables.write();
        if t.gateways.contains_key(&gateway.gateway_eui) {
            return Err(StoreError::DuplicateEui(gateway.gateway_eui));
        }
        let line = RegistryLine::Gateway(strip_runtime(gateway));
        self.append(&line)?;
        t.apply(line);
        Ok(())
    }

    fn get_gateway(&self, gateway_eui: Eui64) -> Option<GatewayRecord> {
        self.tables.read().gateways.get(&gateway_eui).cloned()
    }

    fn delete_gateway(&self, gateway_eui: Eui64) -> Result<GatewayRecord, StoreError> {
        let mut t = self.tables.write();
        let g = t.gateways.get(&gateway_eui).cloned().ok_or(StoreError::NotFound)?;
        let line = RegistryLine::DeleteGateway { gateway_eui };
        self.append(&line)?;
        t.apply(line);
        Ok(g)
    }

    fn list_gateways(&self) -> Vec<GatewayRecord> {
        self.tables.read().gateways.values().cloned().collect()
    }

    fn touch_gateway(&self, gateway_eui: Eui64, now_ms: u64, pull_endpoint: Option<String>) -> bool {
        let mut t = self.tables.write();
        match t.gateways.get_mut(&gateway_eui) {
            Some(g) => {
                g.last_seen_ms = Some(now_ms);
                if pull_endpoint.is_some() {
                    g.last_pull_endpoint = pull_endpoint;
                }
                true
            }
            None => false,
        }
    }
}
