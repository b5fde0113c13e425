//! Gateway-facing UDP endpoint.
//!
//! The endpoint task acknowledges datagrams and hands each received frame
//! to the verifier pool over `gateway.up`. Verifiers parse the frame, look
//! up the session and check the MIC before publishing to `uplink.raw` (data)
//! or `uplink.join` (join requests). A third task turns `downlink.tx`
//! records into PULL_RESP datagrams for the gateway's last pull address.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU16, Ordering};
use std::sync::Arc;
use std::time::Instant;

use lorans_bus::{record, Broker, Subscription};
use lorans_codec::{ack_for, decode_datagram, encode_datagram, parse_phy, Direction, Eui64, ForwarderDatagram, Kind, MType, PhyPayload};
use parking_lot::RwLock;
use tokio::net::UdpSocket;

use crate::metrics::Metrics;
use crate::model::Reception;
use crate::store::Store;
use crate::topics::{self, DownlinkTx, GatewayRx, UplinkEnvelope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum DropReason {
    #[error("malformed datagram")]
    BadDatagram,
    #[error("gateway not registered")]
    UnregisteredGateway,
    #[error("malformed rxpk entry")]
    BadRxpk,
    #[error("CRC failed at the gateway")]
    CrcBad,
    #[error("malformed PHY payload")]
    BadFrame,
    #[error("no session for device address")]
    UnknownDevAddr,
    #[error("MIC check failed")]
    BadMic,
    #[error("no pull route to gateway")]
    NoRoute,
    #[error("bus rejected the record")]
    Bus,
}

impl DropReason {
    pub fn metric(self) -> &'static str {
        match self {
            DropReason::BadDatagram => "connector.drop.bad_datagram",
            DropReason::UnregisteredGateway => "connector.drop.unregistered_gateway",
            DropReason::BadRxpk => "connector.drop.bad_rxpk",
            DropReason::CrcBad => "connector.drop.crc_bad",
            DropReason::BadFrame => "connector.drop.bad_frame",
            DropReason::UnknownDevAddr => "connector.drop.unknown_dev_addr",
            DropReason::BadMic => "connector.drop.bad_mic",
            DropReason::NoRoute => "connector.drop.no_route",
            DropReason::Bus => "connector.drop.bus",
        }
    }
}

pub struct Connector {
    store: Store,
    bus: Broker,
    metrics: Arc<Metrics>,
    routes: RwLock<HashMap<Eui64, SocketAddr>>,
    next_token: AtomicU16,
}

impl Connector {
    pub fn new(store: Store, bus: Broker, metrics: Arc<Metrics>) -> Self {
        Connector {
            store,
            bus,
            metrics,
            routes: RwLock::new(HashMap::new()),
            next_token: AtomicU16::new(1),
        }
    }

    fn drop(&self, reason: DropReason) -> DropReason {
        self.metrics.inc(reason.metric());
        reason
    }

    /// Handle one datagram from `src`; returns the encoded reply, if any.
    pub fn handle_datagram(&self, raw: &[u8], src: SocketAddr) -> Option<Vec<u8>> {
        let d = match decode_datagram(raw) {
            Ok(d) => d,
            Err(e) => {
                tracing::debug!(%src, "bad datagram: {e}");
                self.drop(DropReason::BadDatagram);
                return None;
            }
        };
        let reply = match d.kind {
            Kind::PushData => self.handle_push_data(&d).ok(),
            Kind::PullData => self.handle_pull_data(&d, src).ok(),
            Kind::TxAck => {
                self.handle_tx_ack(&d);
                None
            }
            _ => {
                self.drop(DropReason::BadDatagram);
                None
            }
        };
        reply.and_then(|r| encode_datagram(&r).ok())
    }

    fn registered(&self, d: &ForwarderDatagram, pull_endpoint: Option<String>) -> Result<Eui64, DropReason> {
        let eui = d.gateway_eui.ok_or(DropReason::BadDatagram)?;
        if self.store.registry.touch_gateway(eui, self.store.now_ms(), pull_endpoint) {
            Ok(eui)
        } else {
            Err(self.drop(DropReason::UnregisteredGateway))
        }
    }

    /// Acknowledge a PUSH_DATA and publish each valid rxpk entry to
    /// `gateway.up`. Unregistered gateways get no ack.
    pub fn handle_push_data(&self, d: &ForwarderDatagram) -> Result<ForwarderDatagram, DropReason> {
        let eui = self.registered(d, None)?;
        let now = self.store.now_ms();
        for entry in d.rxpk_entries() {
            let meta = match entry.and_then(|m| m.validate().map(|_| m)) {
                Ok(m) => m,
                Err(_) => {
                    self.drop(DropReason::BadRxpk);
                    continue;
                }
            };
            if meta.stat != 1 {
                self.drop(DropReason::CrcBad);
                continue;
            }
            let rec = GatewayRx {
                gateway_eui: eui,
                meta,
                received_at_ms: now,
            };
            if self.bus.publish(topics::GATEWAY_UP, Some(&eui.to_be_bytes()), record::encode(topics::GATEWAY_RX_V1, &rec)).is_err() {
                self.drop(DropReason::Bus);
            } else {
                self.metrics.inc("connector.rxpk");
            }
        }
        Ok(ack_for(d).expect("push data has an ack"))
    }

    /// Remember `src` as the downlink route of the gateway.
    pub fn handle_pull_data(&self, d: &ForwarderDatagram, src: SocketAddr) -> Result<ForwarderDatagram, DropReason> {
        let eui = self.registered(d, Some(src.to_string()))?;
        self.routes.write().insert(eui, src);
        self.metrics.inc("connector.pull_data");
        Ok(ack_for(d).expect("pull data has an ack"))
    }

    pub fn handle_tx_ack(&self, d: &ForwarderDatagram) {
        let status = d.tx_ack_error();
        self.metrics.inc(&format!("connector.tx_ack.{}", status.to_ascii_lowercase()));
    }

    pub fn route(&self, gateway_eui: Eui64) -> Option<SocketAddr> {
        self.routes.read().get(&gateway_eui).copied()
    }

    /// Parse and authenticate one received frame, then publish it.
    /// Returns the topic it went to.
    pub fn verify(&self, rx: GatewayRx) -> Result<&'static str, DropReason> {
        let raw = rx.meta.payload().map_err(|_| self.drop(DropReason::BadRxpk))?;
        let phy = parse_phy(&raw, Direction::Uplink).map_err(|_| self.drop(DropReason::BadFrame))?;
        let (topic, schema, fcnt32, key) = match phy.mhdr.mtype {
            MType::JoinRequest => {
                let j = phy.join_request().expect("join request body");
                (topics::UPLINK_JOIN, topics::UPLINK_V1, None, j.dev_eui.to_be_bytes().to_vec())
            }
            _ => {
                let fcnt32 = self.check_mic(&phy)?;
                let addr = phy.data().expect("data body").dev_addr;
                (topics::UPLINK_RAW, topics::UPLINK_V1, Some(fcnt32), addr.to_le_bytes().to_vec())
            }
        };
        let env = UplinkEnvelope {
            phy,
            raw,
            rx: Reception {
                gateway_eui: rx.gateway_eui,
                meta: rx.meta,
            },
            received_at_ms: rx.received_at_ms,
            fcnt32,
        };
        self.bus.publish(topic, Some(&key), record::encode(schema, &env)).map_err(|_| self.drop(DropReason::Bus))?;
        self.metrics.inc("connector.uplinks");
        Ok(topic)
    }

    /// Widen the 16-bit counter against the session and check the MIC.
    /// The current high half is tried first, then the next one.
    fn check_mic(&self, phy: &PhyPayload) -> Result<u32, DropReason> {
        let d = phy.data().expect("data body");
        let session = self.store.volatile.get_session(d.dev_addr).ok_or_else(|| self.drop(DropReason::UnknownDevAddr))?;
        let low = (session.fcnt_up & 0xffff_0000) | d.fcnt as u32;
        for candidate in [low, low.wrapping_add(0x1_0000)] {
            if phy.verify_data(&session.keys.nwk_skey, candidate) {
                return Ok(candidate);
            }
        }
        Err(self.drop(DropReason::BadMic))
    }

    /// Encode a downlink as PULL_RESP addressed to the gateway's route.
    pub fn prepare_downlink(&self, tx: &DownlinkTx) -> Result<(Vec<u8>, SocketAddr), DropReason> {
        let dest = self.route(tx.gateway_eui).ok_or_else(|| self.drop(DropReason::NoRoute))?;
        let token = self.next_token.fetch_add(1, Ordering::Relaxed);
        let bytes = encode_datagram(&ForwarderDatagram::pull_resp(token, &tx.txpk)).map_err(|_| self.drop(DropReason::BadDatagram))?;
        Ok((bytes, dest))
    }
}

pub async fn run_udp(connector: Arc<Connector>, socket: Arc<UdpSocket>) {
    let mut buf = vec![0u8; 65_535];
    loop {
        let (n, src) = match socket.recv_from(&mut buf).await {
            Ok(v) => v,
            Err(e) => {
                // ICMP errors from earlier sends surface here on some platforms.
                tracing::debug!("udp recv: {e}");
                continue;
            }
        };
        if let Some(reply) = connector.handle_datagram(&buf[..n], src) {
            if let Err(e) = socket.send_to(&reply, src).await {
                tracing::debug!(%src, "udp send: {e}");
            }
        }
    }
}

pub async fn run_verifier(connector: Arc<Connector>, mut sub: Subscription, name: String) {
    while let Some(d) = sub.recv().await {
        let t0 = Instant::now();
        match d.decode::<GatewayRx>(topics::GATEWAY_RX_V1) {
            Ok(rx) => {
                let _ = connector.verify(rx);
            }
            Err(_) => connector.metrics.inc("connector.drop.bad_record"),
        }
        sub.ack(d.seq());
        connector.metrics.add_busy(&name, t0.elapsed());
    }
}

pub async fn run_downlink_sender(connector: Arc<Connector>, socket: Arc<UdpSocket>, mut sub: Subscription) {
    while let Some(d) = sub.recv().await {
        match d.decode::<DownlinkTx>(topics::DOWNLINK_V1) {
            Ok(tx) => {
                if let Ok((bytes, dest)) = connector.prepare_downlink(&tx) {
                    match socket.send_to(&bytes, dest).await {
                        Ok(_) => connector.metrics.inc("connector.pull_resp"),
                        Err(e) => tracing::debug!(%dest, "pull_resp send: {e}"),
                    }
                }
            }
            Err(_) => connector.metrics.inc("connector.drop.bad_record"),
        }
        sub.ack(d.seq());
    }
}
