//! Join server: OTAA activation.

use std::sync::Arc;
use std::time::{Duration, Instant};

use lorans_bus::{record, Broker, BusError, Subscription};
use lorans_codec::{derive_session_keys, encrypt_join_accept, serialize_phy, AesKey, Body, DevAddr, Eui64, JoinAcceptPayload, MType, Mhdr, PhyPayload, Region};
use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::config::{CentralConfig, JoinConfig};
use crate::metrics::Metrics;
use crate::model::{Activation, DeviceSession, FrameLogEntry};
use crate::scheduling::{self, ScheduleError};
use crate::store::{Store, StoreError};
use crate::topics::{self, DownlinkKind, DownlinkTx, JoinForward, UplinkEnvelope};

/// Address draws before giving up on finding a free one.
const ADDR_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JoinError {
    #[error("unknown or non-OTAA device {0}")]
    UnknownDevice(Eui64),
    #[error("join request MIC mismatch")]
    BadMic,
    #[error("DevNonce {0} was already used")]
    ReplayedDevNonce(u16),
    #[error("no free device address")]
    AddressExhausted,
    #[error("malformed join request")]
    Malformed,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

impl JoinError {
    pub fn metric(&self) -> &'static str {
        match self {
            JoinError::UnknownDevice(_) => "join.drop.unknown_device",
            JoinError::BadMic => "join.drop.bad_mic",
            JoinError::ReplayedDevNonce(_) => "join.drop.replayed_nonce",
            JoinError::AddressExhausted => "join.drop.address_exhausted",
            JoinError::Malformed => "join.drop.malformed",
            JoinError::Schedule(_) => "join.drop.schedule",
            JoinError::Store(_) => "join.drop.store",
            JoinError::Bus(_) => "join.drop.bus",
        }
    }
}

/// A join that has been accepted; the frame is ready to transmit.
#[derive(Debug, Clone, PartialEq)]
pub struct Accepted {
    pub session: DeviceSession,
    pub app_nonce: u32,
    /// Encrypted join-accept PHYPayload.
    pub frame: Vec<u8>,
}

pub struct JoinServer {
    store: Store,
    bus: Broker,
    metrics: Arc<Metrics>,
    cfg: JoinConfig,
    nwk_id: u8,
    region: Region,
    downlink_power_dbm: i32,
    rng: Mutex<StdRng>,
}

impl JoinServer {
    pub fn new(store: Store, bus: Broker, metrics: Arc<Metrics>, cfg: JoinConfig, central: &CentralConfig, region: Region) -> Self {
        JoinServer {
            nwk_id: (cfg.net_id & 0x7f) as u8,
            store,
            bus,
            metrics,
            cfg,
            region,
            downlink_power_dbm: central.downlink_power_dbm,
            rng: Mutex::new(StdRng::from_os_rng()),
        }
    }

    /// Use a fixed seed for nonce and address draws.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = Mutex::new(StdRng::seed_from_u64(seed));
        self
    }

    pub fn handle_join_request(&self, env: &UplinkEnvelope) -> Result<Accepted, JoinError> {
        let req = env.phy.join_request().ok_or(JoinError::Malformed)?;
        let device = self
            .store
            .registry
            .get_device(req.dev_eui)
            .filter(|d| d.activation == Activation::Otaa && d.app_eui == req.app_eui)
            .ok_or(JoinError::UnknownDevice(req.dev_eui))?;
        let app_key: AesKey = device.app_key.ok_or(JoinError::UnknownDevice(req.dev_eui))?;
        if !env.phy.verify_join(&app_key) {
            return Err(JoinError::BadMic);
        }
        if !self.store.volatile.check_insert_dev_nonce(req.dev_eui, req.dev_nonce, self.cfg.dev_nonce_history) {
            return Err(JoinError::ReplayedDevNonce(req.dev_nonce));
        }

        let app_nonce = self.rng.lock().random::<u32>() & 0x00ff_ffff;
        let keys = derive_session_keys(&app_key, app_nonce, self.cfg.net_id, req.dev_nonce);
        let mut session = None;
        for _ in 0..ADDR_ATTEMPTS {
            let addr = DevAddr::new(self.nwk_id, self.rng.lock().random::<u32>());
            let mut s = DeviceSession::new(addr, req.dev_eui, keys, self.store.now_ms());
            s.rx1_dr_offset = self.cfg.rx1_dr_offset;
            s.rx2_dr = self.cfg.rx2_dr;
            s.rx_delay_s = self.cfg.rx_delay_s;
            match self.store.volatile.insert_session(s.clone()) {
                Ok(_) => {
                    session = Some(s);
                    break;
                }
                Err(StoreError::DuplicateDevAddr(_)) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        let session = session.ok_or(JoinError::AddressExhausted)?;

        let mut accept = PhyPayload {
            mhdr: Mhdr::new(MType::JoinAccept),
            body: Body::JoinAccept(JoinAcceptPayload {
                app_nonce,
                net_id: self.cfg.net_id,
                dev_addr: session.dev_addr,
                dl_settings: JoinAcceptPayload::dl_settings_for(self.cfg.rx1_dr_offset, self.cfg.rx2_dr),
                rx_delay: self.cfg.rx_delay_s,
                cf_list: None,
            }),
            mic: [0; 4],
        };
        accept.sign_join(&app_key).map_err(|_| JoinError::Malformed)?;
        let plain = serialize_phy(&accept).map_err(|_| JoinError::Malformed)?;
        let mut frame = vec![plain[0]];
        frame.extend(encrypt_join_accept(&plain[1..], &app_key).map_err(|_| JoinError::Malformed)?);
        self.metrics.inc("join.accepted");
        Ok(Accepted {
            session,
            app_nonce,
            frame,
        })
    }

    /// Publish the accept through the best gateway seen for the request.
    pub fn schedule_accept(&self, fwd: &JoinForward, acc: &Accepted) -> Result<DownlinkTx, JoinError> {
        let mut receptions = self.store.volatile.dedup_receptions(&fwd.dedup_key);
        if receptions.is_empty() {
            receptions.push(fwd.uplink.rx.clone());
        }
        let rx = scheduling::select_gateway(&receptions).cloned().ok_or(ScheduleError::NoGateway)?;
        let w = scheduling::rx1_window(&rx, self.cfg.join_accept_delay1_s, self.cfg.rx1_dr_offset, &self.region)?;
        let tx = DownlinkTx {
            gateway_eui: rx.gateway_eui,
            kind: DownlinkKind::JoinAccept,
            dev_eui: acc.session.dev_eui,
            txpk: scheduling::tx_request(&acc.frame, &w, self.downlink_power_dbm),
            rx2: scheduling::rx2_params(&rx, self.cfg.join_accept_delay2_s, self.cfg.rx2_dr, &self.region),
        };
        self.bus.publish(topics::DOWNLINK_TX, Some(&rx.gateway_eui.to_be_bytes()), record::encode(topics::DOWNLINK_V1, &tx))?;
        self.store.volatile.log_frame(
            acc.session.dev_eui,
            FrameLogEntry {
                ts_ms: self.store.now_ms(),
                direction: lorans_codec::Direction::Downlink,
                mtype: "JoinAccept".into(),
                dev_addr: Some(acc.session.dev_addr),
                fcnt: None,
                fport: None,
                size: acc.frame.len(),
                gateway_eui: rx.gateway_eui,
                rssi: None,
                lsnr: None,
                phy: acc.frame.clone(),
            },
        );
        Ok(tx)
    }
}

pub async fn run_join(js: Arc<JoinServer>, mut sub: Subscription, name: String) {
    while let Some(d) = sub.recv().await {
        let t0 = Instant::now();
        match d.decode::<JoinForward>(topics::JOIN_V1) {
            Ok(fwd) => match js.handle_join_request(&fwd.uplink) {
                Ok(acc) => {
                    let js2 = js.clone();
                    tokio::spawn(async move {
                        let wait = fwd.window_end_ms.saturating_sub(js2.store.now_ms());
                        if wait > 0 {
                            tokio::time::sleep(Duration::from_millis(wait)).await;
                        }
                        if let Err(e) = js2.schedule_accept(&fwd, &acc) {
                            js2.metrics.inc(e.metric());
                        }
                    });
                }
                Err(e) => {
                    tracing::debug!("{name}: {e}");
                    js.metrics.inc(e.metric());
                }
            },
            Err(_) => js.metrics.inc("join.drop.bad_record"),
        }
        sub.ack(d.seq());
        js.metrics.add_busy(&name, t0.elapsed());
    }
}
