//! Central server: deduplication, counter checks, decryption and dispatch
//! of uplinks, plus downlink scheduling.

use std::sync::Arc;
use std::time::{Duration, Instant};

use lorans_bus::{record, Broker, BusError, Subscription};
use lorans_codec::phy::data_frame;
use lorans_codec::{crypt_frm, serialize_phy, DevAddr, Direction, FCtrl, MType, Region};

use crate::config::CentralConfig;
use crate::metrics::Metrics;
use crate::model::{AppPayloadEntry, DedupKey, DedupOutcome, DeviceSession, FrameLogEntry, Reception};
use crate::scheduling::{self, ScheduleError};
use crate::store::{Store, StoreError};
use crate::topics::{self, AppDownlink, AppUplink, DownlinkKind, DownlinkTx, JoinForward, MacUplink, UplinkEnvelope};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CentralError {
    #[error("no session for {0}")]
    NoSession(DevAddr),
    #[error("stale or out-of-window counter {got} (next expected {expected})")]
    StaleCounter { expected: u32, got: u32 },
    #[error("malformed envelope: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

impl CentralError {
    pub fn metric(&self) -> &'static str {
        match self {
            CentralError::NoSession(_) => "central.drop.no_session",
            CentralError::StaleCounter { .. } => "central.drop.stale_counter",
            CentralError::Malformed(_) => "central.drop.malformed",
            CentralError::Schedule(_) => "central.drop.schedule",
            CentralError::Store(_) => "central.drop.store",
            CentralError::Bus(_) => "central.drop.bus",
        }
    }
}

/// A downlink opportunity to evaluate once the collection window closes.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingDownlink {
    pub dev_addr: DevAddr,
    pub key: DedupKey,
    pub fcnt_up: u32,
    /// The uplink was confirmed and needs an ACK.
    pub ack: bool,
    pub due_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UplinkOutcome {
    Duplicate,
    Dispatched(PendingDownlink),
}

pub struct CentralServer {
    store: Store,
    bus: Broker,
    metrics: Arc<Metrics>,
    cfg: CentralConfig,
    region: Region,
}

impl CentralServer {
    pub fn new(store: Store, bus: Broker, metrics: Arc<Metrics>, cfg: CentralConfig, region: Region) -> Self {
        CentralServer {
            store,
            bus,
            metrics,
            cfg,
            region,
        }
    }

    pub fn config(&self) -> &CentralConfig {
        &self.cfg
    }

    pub fn process_uplink(&self, env: &UplinkEnvelope) -> Result<UplinkOutcome, CentralError> {
        let d = env.phy.data().ok_or(CentralError::Malformed("not a data frame"))?;
        let fcnt32 = env.fcnt32.ok_or(CentralError::Malformed("missing widened counter"))?;
        let key = DedupKey::data(d.dev_addr, fcnt32, env.phy.mic);
        if self.store.volatile.dedup_check_insert(&key, env.rx.clone(), self.cfg.dedup_ttl_ms) == DedupOutcome::DuplicateCopy {
            self.metrics.inc("central.duplicates");
            return Ok(UplinkOutcome::Duplicate);
        }

        let gap = self.cfg.max_fcnt_gap;
        let mut verdict = Ok(());
        let session = self
            .store
            .volatile
            .update_session(d.dev_addr, &mut |s: &mut DeviceSession| {
                if fcnt32 < s.fcnt_up || fcnt32 - s.fcnt_up >= gap {
                    verdict = Err(CentralError::StaleCounter {
                        expected: s.fcnt_up,
                        got: fcnt32,
                    });
                    return;
                }
                s.fcnt_up = fcnt32.wrapping_add(1);
                s.last_uplink = Some(env.rx.clone());
            })
            .map_err(|_| CentralError::NoSession(d.dev_addr))?;
        verdict?;

        let confirmed = env.phy.mhdr.mtype.is_confirmed();
        let mut mac = d.fopts.clone();
        match d.fport {
            Some(0) => mac = crypt_frm(&d.frm_payload, &session.keys.nwk_skey, d.dev_addr, fcnt32, Direction::Uplink),
            Some(fport) => {
                let payload = crypt_frm(&d.frm_payload, &session.keys.app_skey, d.dev_addr, fcnt32, Direction::Uplink);
                let up = AppUplink {
                    dev_eui: session.dev_eui,
                    dev_addr: d.dev_addr,
                    fcnt32,
                    fport,
                    payload,
                    confirmed,
                    rx: env.rx.clone(),
                    received_at_ms: env.received_at_ms,
                };
                self.bus.publish(topics::APPSERVER_IN, Some(&session.dev_eui.to_be_bytes()), record::encode(topics::APP_UPLINK_V1, &up))?;
            }
            None => {}
        }

        let dr = scheduling::uplink_dr(&env.rx, &self.region)?;
        let m = MacUplink {
            dev_addr: d.dev_addr,
            dev_eui: session.dev_eui,
            fcnt32,
            commands: mac,
            lsnr: env.rx.meta.lsnr,
            rssi: env.rx.meta.rssi,
            dr,
            adr: d.fctrl.adr,
            adr_ack_req: d.fctrl.adr_ack_req,
        };
        self.bus.publish(topics::UPLINK_MAC, Some(&d.dev_addr.to_le_bytes()), record::encode(topics::MAC_UPLINK_V1, &m))?;

        self.store.volatile.log_frame(
            session.dev_eui,
            FrameLogEntry {
                ts_ms: self.store.now_ms(),
                direction: Direction::Uplink,
                mtype: format!("{:?}", env.phy.mhdr.mtype),
                dev_addr: Some(d.dev_addr),
                fcnt: Some(fcnt32),
                fport: d.fport,
                size: env.raw.len(),
                gateway_eui: env.rx.gateway_eui,
                rssi: Some(env.rx.meta.rssi),
                lsnr: Some(env.rx.meta.lsnr),
                phy: env.raw.clone(),
            },
        );
        self.metrics.inc("central.uplinks");
        self.metrics.observe_ms("central.dispatch_ms", self.store.now_ms().saturating_sub(env.received_at_ms) as f64);

        Ok(UplinkOutcome::Dispatched(PendingDownlink {
            dev_addr: d.dev_addr,
            key,
            fcnt_up: fcnt32,
            ack: confirmed,
            due_at_ms: env.received_at_ms + self.cfg.collection_window_ms,
        }))
    }

    /// First copy of a join request goes on to the join server.
    pub fn process_join(&self, env: &UplinkEnvelope) -> Result<Option<JoinForward>, CentralError> {
        let j = env.phy.join_request().ok_or(CentralError::Malformed("not a join request"))?;
        let key = DedupKey::join(j.dev_eui, j.dev_nonce, env.phy.mic);
        if self.store.volatile.dedup_check_insert(&key, env.rx.clone(), self.cfg.dedup_ttl_ms) == DedupOutcome::DuplicateCopy {
            self.metrics.inc("central.duplicates");
            return Ok(None);
        }
        let fwd = JoinForward {
            uplink: env.clone(),
            dedup_key: key,
            window_end_ms: env.received_at_ms + self.cfg.collection_window_ms,
        };
        self.bus.publish(topics::JOIN_REQUEST, Some(&j.dev_eui.to_be_bytes()), record::encode(topics::JOIN_V1, &fwd))?;
        self.metrics.inc("central.joins");
        Ok(Some(fwd))
    }

    pub fn handle_app_downlink(&self, req: &AppDownlink) -> Result<DevAddr, CentralError> {
        Ok(self.store.enqueue_downlink(req.dev_eui, req.item.clone())?)
    }

    /// Build and publish the downlink for an uplink, if there is anything
    /// to send. Call after the collection window has closed.
    pub fn schedule_downlink(&self, p: &PendingDownlink) -> Result<Option<DownlinkTx>, CentralError> {
        let session = self.store.volatile.get_session(p.dev_addr).ok_or(CentralError::NoSession(p.dev_addr))?;
        let mut receptions = self.store.volatile.dedup_receptions(&p.key);
        if receptions.is_empty() {
            receptions.extend(session.last_uplink.clone());
        }
        let rx: Reception = scheduling::select_gateway(&receptions).cloned().ok_or(ScheduleError::NoGateway)?;
        let w = scheduling::rx1_window(&rx, self.cfg.rx1_delay_s, session.rx1_dr_offset, &self.region)?;
        let content = self.store.volatile.dequeue_for_frame(p.dev_addr, self.region.max_payload(w.dr), p.fcnt_up);
        if !p.ack && content.is_empty() {
            return Ok(None);
        }

        let mut fcnt_down = 0;
        let session = self.store.volatile.update_session(p.dev_addr, &mut |s: &mut DeviceSession| {
            fcnt_down = s.fcnt_down;
            s.fcnt_down = s.fcnt_down.wrapping_add(1);
        })?;
        let keys = session.keys;
        let mtype = if content.app.as_ref().is_some_and(|a| a.confirmed) {
            MType::ConfirmedDataDown
        } else {
            MType::UnconfirmedDataDown
        };
        let fctrl = FCtrl {
            adr: true,
            ack: p.ack,
            fpending: content.fpending,
            ..Default::default()
        };
        let (fopts, fport, frm) = if content.mac_as_payload {
            (Vec::new(), Some(0), crypt_frm(&content.mac, &keys.nwk_skey, p.dev_addr, fcnt_down, Direction::Downlink))
        } else {
            match &content.app {
                Some(a) => (content.mac.clone(), Some(a.fport), crypt_frm(&a.payload, &keys.app_skey, p.dev_addr, fcnt_down, Direction::Downlink)),
                None => (content.mac.clone(), None, Vec::new()),
            }
        };
        let mut frame = data_frame(mtype, p.dev_addr, fctrl, fcnt_down as u16, fopts, fport, frm);
        frame.sign_data(&keys.nwk_skey, fcnt_down).map_err(|_| CentralError::Malformed("downlink frame"))?;
        let phy = serialize_phy(&frame).map_err(|_| CentralError::Malformed("downlink frame"))?;

        let tx = DownlinkTx {
            gateway_eui: rx.gateway_eui,
            kind: DownlinkKind::Data,
            dev_eui: session.dev_eui,
            txpk: scheduling::tx_request(&phy, &w, self.cfg.downlink_power_dbm),
            rx2: scheduling::rx2_params(&rx, self.cfg.rx2_delay_s, session.rx2_dr, &self.region),
        };
        self.bus.publish(topics::DOWNLINK_TX, Some(&rx.gateway_eui.to_be_bytes()), record::encode(topics::DOWNLINK_V1, &tx))?;
        self.store.volatile.log_frame(
            session.dev_eui,
            FrameLogEntry {
                ts_ms: self.store.now_ms(),
                direction: Direction::Downlink,
                mtype: format!("{mtype:?}"),
                dev_addr: Some(p.dev_addr),
                fcnt: Some(fcnt_down),
                fport,
                size: phy.len(),
                gateway_eui: rx.gateway_eui,
                rssi: None,
                lsnr: None,
                phy,
            },
        );
        self.metrics.inc("central.downlinks");
        Ok(Some(tx))
    }

    fn spawn_downlink(self: &Arc<Self>, p: PendingDownlink) {
        let me = self.clone();
        tokio::spawn(async move {
            let wait = p.due_at_ms.saturating_sub(me.store.now_ms());
            if wait > 0 {
                tokio::time::sleep(Duration::from_millis(wait)).await;
            }
            if let Err(e) = me.schedule_downlink(&p) {
                me.metrics.inc(e.metric());
            }
        });
    }
}

/// Application stub: records decrypted payloads for retrieval.
pub async fn run_app_stub(store: Store, metrics: Arc<Metrics>, mut sub: Subscription) {
    while let Some(d) = sub.recv().await {
        if let Ok(up) = d.decode::<AppUplink>(topics::APP_UPLINK_V1) {
            store.volatile.record_app_payload(
                up.dev_eui,
                AppPayloadEntry {
                    ts_ms: store.now_ms(),
                    fcnt: up.fcnt32,
                    fport: up.fport,
                    payload: up.payload,
                },
            );
            metrics.inc("app.uplinks");
        }
        sub.ack(d.seq());
    }
}

/// Subscriptions of one central instance.
pub struct CentralInputs {
    pub uplinks: Subscription,
    pub joins: Subscription,
    pub app_downlinks: Subscription,
}

/// One central instance: handles its messages one at a time. A message is
/// acknowledged only after its effects are in the store and on the bus.
pub async fn run_central(central: Arc<CentralServer>, mut inputs: CentralInputs, name: String) {
    let service = Duration::from_millis(central.cfg.service_time_ms);
    loop {
        let (which, d) = tokio::select! {
            Some(d) = inputs.uplinks.recv() => (0, d),
            Some(d) = inputs.joins.recv() => (1, d),
            Some(d) = inputs.app_downlinks.recv() => (2, d),
            else => break,
        };
        let t0 = Instant::now();
        if !service.is_zero() {
            tokio::time::sleep(service).await;
        }
        let result = match which {
            0 => match d.decode::<UplinkEnvelope>(topics::UPLINK_V1) {
                Ok(env) => central.process_uplink(&env).map(|o| {
                    if let UplinkOutcome::Dispatched(p) = o {
                        central.spawn_downlink(p);
                    }
                }),
                Err(_) => Err(CentralError::Malformed("record")),
            },
            1 => match d.decode::<UplinkEnvelope>(topics::UPLINK_V1) {
                Ok(env) => central.process_join(&env).map(|_| ()),
                Err(_) => Err(CentralError::Malformed("record")),
            },
            _ => match d.decode::<AppDownlink>(topics::APP_DOWNLINK_V1) {
                Ok(req) => central.handle_app_downlink(&req).map(|_| ()),
                Err(_) => Err(CentralError::Malformed("record")),
            },
        };
        if let Err(e) = result {
            tracing::debug!("{name}: {e}");
            central.metrics.inc(e.metric());
        }
        match which {
            0 => inputs.uplinks.ack(d.seq()),
            1 => inputs.joins.ack(d.seq()),
            _ => inputs.app_downlinks.ack(d.seq()),
        }
        central.metrics.add_busy(&name, t0.elapsed());
    }
}
