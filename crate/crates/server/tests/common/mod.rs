#![allow(dead_code)]

use std::sync::Arc;

use lorans_bus::Broker;
use lorans_codec::phy::data_frame;
use lorans_codec::{crypt_frm, serialize_phy, AesKey, Body, DevAddr, Direction, Eui64, FCtrl, JoinRequestPayload, MType, Mhdr, PhyPayload, RxMetadata, SessionKeys};
use lorans_server::clock::{ManualClock, SharedClock};
use lorans_server::metrics::Metrics;
use lorans_server::model::{AbpSession, Activation, DeviceRecord, Reception};
use lorans_server::runtime::build_bus;
use lorans_server::store::Store;
use lorans_server::topics::UplinkEnvelope;
use lorans_server::ServerConfig;

pub const APP_KEY: [u8; 16] = [0x2b, 0x7e, 0x15, 0x16, 0x28, 0xae, 0xd2, 0xa6, 0xab, 0xf7, 0x15, 0x88, 0x09, 0xcf, 0x4f, 0x3c];

pub struct Env {
    pub clock: Arc<ManualClock>,
    pub store: Store,
    pub bus: Broker,
    pub metrics: Arc<Metrics>,
    pub cfg: ServerConfig,
}

pub fn env() -> Env {
    let clock = ManualClock::new(1_700_000_000_000);
    let shared: SharedClock = clock.clone();
    let cfg = ServerConfig::ephemeral();
    Env {
        store: Store::in_memory(shared),
        bus: build_bus(&cfg).unwrap(),
        metrics: Arc::new(Metrics::default()),
        clock,
        cfg,
    }
}

pub fn keys(seed: u8) -> SessionKeys {
    SessionKeys {
        nwk_skey: AesKey([seed; 16]),
        app_skey: AesKey([seed.wrapping_add(1); 16]),
    }
}

pub fn abp_device(dev_eui: u64, dev_addr: u32, keys: SessionKeys) -> DeviceRecord {
    DeviceRecord {
        dev_eui: Eui64(dev_eui),
        app_eui: Eui64(0x70b3_d500_0000_0001),
        activation: Activation::Abp,
        app_key: None,
        fixed_session: Some(AbpSession {
            dev_addr: DevAddr(dev_addr),
            keys,
        }),
        description: String::new(),
        created_at_ms: 0,
    }
}

pub fn otaa_device(dev_eui: u64, app_key: [u8; 16]) -> DeviceRecord {
    DeviceRecord {
        dev_eui: Eui64(dev_eui),
        app_eui: Eui64(0x70b3_d500_0000_0001),
        activation: Activation::Otaa,
        app_key: Some(AesKey(app_key)),
        fixed_session: None,
        description: String::new(),
        created_at_ms: 0,
    }
}

pub struct Up<'a> {
    pub keys: &'a SessionKeys,
    pub addr: DevAddr,
    pub fcnt32: u32,
    pub confirmed: bool,
    pub fport: Option<u8>,
    pub payload: &'a [u8],
    pub fopts: Vec<u8>,
    pub adr: bool,
}

impl<'a> Up<'a> {
    pub fn new(keys: &'a SessionKeys, addr: u32, fcnt32: u32) -> Self {
        Up {
            keys,
            addr: DevAddr(addr),
            fcnt32,
            confirmed: false,
            fport: Some(1),
            payload: b"hello",
            fopts: Vec::new(),
            adr: false,
        }
    }

    pub fn frame(&self) -> PhyPayload {
        let mtype = if self.confirmed { MType::ConfirmedDataUp } else { MType::UnconfirmedDataUp };
        let key = if self.fport == Some(0) { &self.keys.nwk_skey } else { &self.keys.app_skey };
        let frm = if self.fport.is_some() { crypt_frm(self.payload, key, self.addr, self.fcnt32, Direction::Uplink) } else { Vec::new() };
        let fctrl = FCtrl {
            adr: self.adr,
            ..Default::default()
        };
        let mut f = data_frame(mtype, self.addr, fctrl, self.fcnt32 as u16, self.fopts.clone(), self.fport, frm);
        f.sign_data(&self.keys.nwk_skey, self.fcnt32).unwrap();
        f
    }

    pub fn bytes(&self) -> Vec<u8> {
        serialize_phy(&self.frame()).unwrap()
    }
}

pub fn join_request(app_key: &[u8; 16], dev_eui: u64, dev_nonce: u16) -> Vec<u8> {
    let mut f = PhyPayload {
        mhdr: Mhdr::new(MType::JoinRequest),
        body: Body::JoinRequest(JoinRequestPayload {
            app_eui: Eui64(0x70b3_d500_0000_0001),
            dev_eui: Eui64(dev_eui),
            dev_nonce,
        }),
        mic: [0; 4],
    };
    f.sign_join(&AesKey(*app_key)).unwrap();
    serialize_phy(&f).unwrap()
}

pub fn meta(phy: &[u8], lsnr: f64, rssi: i32) -> RxMetadata {
    RxMetadata::new(phy, 1_000_000, 433.175, "SF9BW125".parse().unwrap(), rssi, lsnr)
}

pub fn reception(gw: u64, phy: &[u8], lsnr: f64, rssi: i32) -> Reception {
    Reception {
        gateway_eui: Eui64(gw),
        meta: meta(phy, lsnr, rssi),
    }
}

pub fn envelope(raw: Vec<u8>, rx: Reception, fcnt32: Option<u32>, received_at_ms: u64) -> UplinkEnvelope {
    let dir = Direction::Uplink;
    UplinkEnvelope {
        phy: lorans_codec::parse_phy(&raw, dir).unwrap(),
        raw,
        rx,
        received_at_ms,
        fcnt32,
    }
}
