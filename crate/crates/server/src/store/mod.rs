//! Two-tier storage: a durable registry and a volatile runtime tier, both
//! behind traits so other backends can be plugged in.

pub mod registry;
pub mod volatile;

use std::sync::Arc;

use lorans_codec::{DevAddr, Eui64};

pub use registry::{parse_lines, write_lines, FileRegistry, Registry, RegistryLine};
pub use volatile::{MemoryVolatile, Volatile, VolatileLimits};

use crate::clock::SharedClock;
use crate::model::{Activation, AppItem, DeviceRecord, DeviceSession, GatewayRecord};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("EUI {0} already registered")]
    DuplicateEui(Eui64),
    #[error("device address {0} already in use")]
    DuplicateDevAddr(DevAddr),
    #[error("not found")]
    NotFound,
    #[error("no active session")]
    NoSession,
    #[error("uplink counter would go back from {stored} to {got}")]
    StaleCounter { stored: u32, got: u32 },
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("corrupt registry: {0}")]
    Corrupt(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// Handle bundling both tiers; cheap to clone.
#[derive(Clone)]
pub struct Store {
    pub registry: Arc<dyn Registry>,
    pub volatile: Arc<dyn Volatile>,
    pub clock: SharedClock,
}

impl Store {
    pub fn new(registry: Arc<dyn Registry>, volatile: Arc<dyn Volatile>, clock: SharedClock) -> Self {
        Store { registry, volatile, clock }
    }

    pub fn in_memory(clock: SharedClock) -> Self {
        let volatile = Arc::new(MemoryVolatile::new(clock.clone(), VolatileLimits::default()));
        Store::new(Arc::new(FileRegistry::in_memory()), volatile, clock)
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Register a device. ABP devices get their session installed at once.
    pub fn register_device(&self, mut device: DeviceRecord) -> Result<(), StoreError> {
        match device.activation {
            Activation::Otaa => {
                if device.app_key.is_none() {
                    return Err(StoreError::Invalid("OTAA device needs app_key".into()));
                }
                if device.fixed_session.is_some() {
                    return Err(StoreError::Invalid("OTAA device cannot carry a fixed session".into()));
                }
            }
            Activation::Abp => {
                let abp = device.fixed_session.ok_or_else(|| StoreError::Invalid("ABP device needs dev_addr and session keys".into()))?;
                if self.volatile.get_session(abp.dev_addr).is_some() {
                    return Err(StoreError::DuplicateDevAddr(abp.dev_addr));
                }
            }
        }
        if device.created_at_ms == 0 {
            device.created_at_ms = self.now_ms();
        }
        self.registry.put_device(device.clone())?;
        if let Some(abp) = device.fixed_session {
            let s = DeviceSession::new(abp.dev_addr, device.dev_eui, abp.keys, self.now_ms());
            if let Err(e) = self.volatile.insert_session(s) {
                let _ = self.registry.delete_device(device.dev_eui);
                return Err(e);
            }
        }
        Ok(())
    }

    /// Reinstall sessions of ABP devices, e.g. after a restart.
    pub fn restore_abp_sessions(&self) -> usize {
        let mut n = 0;
        for d in self.registry.list_devices() {
            if let Some(abp) = d.fixed_session {
                if self.volatile.session_by_eui(d.dev_eui).is_none() {
                    let s = DeviceSession::new(abp.dev_addr, d.dev_eui, abp.keys, self.now_ms());
                    if self.volatile.insert_session(s).is_ok() {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    pub fn delete_device(&self, dev_eui: Eui64) -> Result<DeviceRecord, StoreError> {
        let d = self.registry.delete_device(dev_eui)?;
        self.volatile.remove_session_by_eui(dev_eui);
        Ok(d)
    }

    pub fn register_gateway(&self, gateway: GatewayRecord) -> Result<(), StoreError> {
        self.registry.put_gateway(gateway)
    }

    /// Queue an application downlink for the device's current session.
    pub fn enqueue_downlink(&self, dev_eui: Eui64, item: AppItem) -> Result<DevAddr, StoreError> {
        if self.registry.get_device(dev_eui).is_none() {
            return Err(StoreError::NotFound);
        }
        let s = self.volatile.session_by_eui(dev_eui).ok_or(StoreError::NoSession)?;
        self.volatile.enqueue_app(s.dev_addr, item);
        Ok(s.dev_addr)
    }

    /// Apply import lines in order. Returns the number applied.
    pub fn import(&self, lines: Vec<RegistryLine>) -> Result<usize, StoreError> {
        let mut n = 0;
        for l in lines {
            match l {
                RegistryLine::Device(d) => self.register_device(d)?,
                RegistryLine::Gateway(g) => self.register_gateway(g)?,
                RegistryLine::DeleteDevice { dev_eui } => {
                    self.delete_device(dev_eui)?;
                }
                RegistryLine::DeleteGateway { gateway_eui } => {
                    self.registry.delete_gateway(gateway_eui)?;
                }
            }
            n += 1;
        }
        Ok(n)
    }

    pub fn export(&self) -> Vec<RegistryLine> {
        let mut out: Vec<_> = self.registry.list_gateways().into_iter().map(RegistryLine::Gateway).collect();
        out.extend(self.registry.list_devices().into_iter().map(RegistryLine::Device));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::model::AbpSession;
    use lorans_codec::SessionKeys;

    fn abp(eui: u64, addr: u32) -> DeviceRecord {
        DeviceRecord {
            dev_eui: Eui64(eui),
            app_eui: Eui64(0),
            activation: Activation::Abp,
            app_key: None,
            fixed_session: Some(AbpSession {
                dev_addr: DevAddr(addr),
                keys: SessionKeys {
                    nwk_skey: [1; 16].into(),
                    app_skey: [2; 16].into(),
                },
            }),
            description: String::new(),
            created_at_ms: 0,
        }
    }

    #[test]
    fn abp_registration_creates_session() {
        let st = Store::in_memory(ManualClock::new(5));
        st.register_device(abp(1, 0x100)).unwrap();
        assert_eq!(st.volatile.session_by_eui(Eui64(1)).unwrap().dev_addr, DevAddr(0x100));
        assert_eq!(st.registry.get_device(Eui64(1)).unwrap().created_at_ms, 5);
        assert!(matches!(st.register_device(abp(2, 0x100)), Err(StoreError::DuplicateDevAddr(_))));
        assert!(st.registry.get_device(Eui64(2)).is_none());
        assert!(matches!(st.register_device(abp(1, 0x101)), Err(StoreError::DuplicateEui(_))));
    }

    #[test]
    fn downlink_needs_device_and_session() {
        let st = Store::in_memory(ManualClock::new(5));
        let item = AppItem { fport: 1, payload: vec![1], confirmed: false };
        assert_eq!(st.enqueue_downlink(Eui64(1), item.clone()), Err(StoreError::NotFound));
        st.register_device(abp(1, 0x100)).unwrap();
        assert_eq!(st.enqueue_downlink(Eui64(1), item).unwrap(), DevAddr(0x100));
        assert_eq!(st.volatile.app_queue_len(DevAddr(0x100)), 1);
        st.delete_device(Eui64(1)).unwrap();
        assert!(st.volatile.get_session(DevAddr(0x100)).is_none());
    }

    #[test]
    fn otaa_needs_key() {
        let st = Store::in_memory(ManualClock::new(5));
        let mut d = abp(1, 1);
        d.activation = Activation::Otaa;
        assert!(matches!(st.register_device(d.clone()), Err(StoreError::Invalid(_))));
        d.fixed_session = None;
        d.app_key = Some([3; 16].into());
        st.register_device(d).unwrap();
        assert_eq!(st.export().len(), 1);
    }
}
