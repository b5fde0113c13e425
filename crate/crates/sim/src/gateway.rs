//! A virtual packet-forwarder gateway: one UDP socket, PUSH_DATA for
//! receptions, PULL_DATA keepalives, TX_ACK for every PULL_RESP.

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU16, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use lorans_codec::{decode_datagram, encode_datagram, DevAddr, Eui64, ForwarderDatagram, Kind, LoraDataRate, MType, RxMetadata};
use parking_lot::{Mutex, RwLock};
use tokio::net::UdpSocket;
use tokio::sync::mpsc::UnboundedSender;
use tokio::task::JoinHandle;

use crate::radio::Demodulator;

/// A downlink frame as heard by a node.
#[derive(Debug, Clone)]
pub struct Downlink {
    pub gateway_eui: Eui64,
    pub phy: Vec<u8>,
    /// Concentrator time the server asked for; `None` for immediate sends.
    pub tmst: Option<u32>,
    /// The gateway answered TOO_LATE; the frame is still handed over so
    /// the server's response time stays observable under overload.
    pub late: bool,
}

/// Maps downlinks to node tasks: data frames by DevAddr, join accepts to
/// every node still waiting for one (only the right key decrypts it).
#[derive(Default)]
pub struct Router {
    by_addr: RwLock<HashMap<DevAddr, UnboundedSender<Downlink>>>,
    joining: RwLock<HashMap<Eui64, UnboundedSender<Downlink>>>,
}

impl Router {
    pub fn new() -> Arc<Self> {
        Arc::new(Router::default())
    }

    pub fn set_joining(&self, dev_eui: Eui64, tx: UnboundedSender<Downlink>) {
        self.joining.write().insert(dev_eui, tx);
    }

    pub fn set_joined(&self, dev_eui: Eui64, dev_addr: DevAddr, tx: UnboundedSender<Downlink>) {
        self.joining.write().remove(&dev_eui);
        self.by_addr.write().insert(dev_addr, tx);
    }

    pub fn remove(&self, dev_eui: Eui64, dev_addr: Option<DevAddr>) {
        self.joining.write().remove(&dev_eui);
        if let Some(a) = dev_addr {
            self.by_addr.write().remove(&a);
        }
    }

    /// Returns how many nodes the frame was offered to.
    pub fn deliver(&self, dl: Downlink) -> usize {
        let Some(&mhdr) = dl.phy.first() else { return 0 };
        if mhdr >> 5 == MType::JoinAccept.bits() {
            let joining = self.joining.read();
            for tx in joining.values() {
                let _ = tx.send(dl.clone());
            }
            return joining.len();
        }
        if dl.phy.len() < 5 {
            return 0;
        }
        let addr = DevAddr(u32::from_le_bytes([dl.phy[1], dl.phy[2], dl.phy[3], dl.phy[4]]));
        match self.by_addr.read().get(&addr) {
            Some(tx) => tx.send(dl).is_ok() as usize,
            None => 0,
        }
    }
}

#[derive(Debug, Default)]
pub struct GatewayStats {
    pub push_sent: AtomicU64,
    pub push_acked: AtomicU64,
    pub pull_acked: AtomicU64,
    pub pull_resp: AtomicU64,
    pub too_late: AtomicU64,
    pub demod_dropped: AtomicU64,
    pub undeliverable: AtomicU64,
}

impl GatewayStats {
    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }
}

pub struct VirtualGateway {
    pub eui: Eui64,
    socket: UdpSocket,
    started: Instant,
    token: AtomicU16,
    demod: Mutex<Demodulator>,
    pub stats: GatewayStats,
}

impl VirtualGateway {
    pub async fn connect(eui: Eui64, server: SocketAddr, demod_limit: usize) -> io::Result<Arc<Self>> {
        let bind: SocketAddr = if server.is_ipv6() { "[::]:0" } else { "0.0.0.0:0" }.parse().expect("bind addr");
        let socket = UdpSocket::bind(bind).await?;
        socket.connect(server).await?;
        Ok(Arc::new(VirtualGateway {
            eui,
            socket,
            started: Instant::now(),
            token: AtomicU16::new(eui.0 as u16),
            demod: Mutex::new(Demodulator::new(demod_limit)),
            stats: GatewayStats::default(),
        }))
    }

    /// Concentrator counter, microseconds, wrapping.
    pub fn tmst(&self) -> u32 {
        self.started.elapsed().as_micros() as u32
    }

    fn next_token(&self) -> u16 {
        self.token.fetch_add(1, Ordering::Relaxed)
    }

    async fn send(&self, d: &ForwarderDatagram) -> io::Result<()> {
        let raw = encode_datagram(d).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        self.socket.send(&raw).await.map(|_| ())
    }

    pub async fn pull(&self) -> io::Result<()> {
        self.send(&ForwarderDatagram::pull_data(self.next_token(), self.eui)).await
    }

    /// Receive a frame over the air and forward it. Returns the reception
    /// timestamp, or `None` when the demodulators were all busy.
    pub async fn receive(&self, phy: &[u8], freq_mhz: f64, datr: LoraDataRate, rssi: i32, lsnr: f64, airtime_ms: f64) -> io::Result<Option<u32>> {
        let now_ms = self.started.elapsed().as_secs_f64() * 1000.0;
        if !self.demod.lock().admit(now_ms, airtime_ms) {
            self.stats.demod_dropped.fetch_add(1, Ordering::Relaxed);
            return Ok(None);
        }
        let tmst = self.tmst();
        let meta = RxMetadata::new(phy, tmst, freq_mhz, datr, rssi, lsnr);
        self.send(&ForwarderDatagram::push_data(self.next_token(), self.eui, &[meta])).await?;
        self.stats.push_sent.fetch_add(1, Ordering::Relaxed);
        Ok(Some(tmst))
    }

    /// Keepalive plus receive loop. Runs until aborted.
    pub fn spawn(self: &Arc<Self>, router: Arc<Router>, keepalive: Duration) -> JoinHandle<()> {
        let me = self.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(keepalive);
            let mut buf = vec![0u8; 65_536];
            loop {
                tokio::select! {
                    _ = tick.tick() => {
                        if let Err(e) = me.pull().await {
                            tracing::debug!(gateway = %me.eui, "pull failed: {e}");
                        }
                    }
                    r = me.socket.recv(&mut buf) => match r {
                        Ok(n) => me.on_datagram(&buf[..n], &router).await,
                        // ICMP unreachable surfaces here while the server is down
                        Err(e) => {
                            tracing::debug!(gateway = %me.eui, "recv: {e}");
                            tokio::time::sleep(Duration::from_millis(50)).await;
                        }
                    }
                }
            }
        })
    }

    async fn on_datagram(&self, raw: &[u8], router: &Router) {
        let Ok(d) = decode_datagram(raw) else { return };
        match d.kind {
            Kind::PushAck => {
                self.stats.push_acked.fetch_add(1, Ordering::Relaxed);
            }
            Kind::PullAck => {
                self.stats.pull_acked.fetch_add(1, Ordering::Relaxed);
            }
            Kind::PullResp => {
                self.stats.pull_resp.fetch_add(1, Ordering::Relaxed);
                let Ok(txpk) = d.txpk() else {
                    let _ = self.send(&ForwarderDatagram::tx_ack(d.token, self.eui, Some("TX_FREQ"))).await;
                    return;
                };
                let late = match (txpk.imme, txpk.tmst) {
                    (true, _) | (_, None) => false,
                    (false, Some(at)) => (at.wrapping_sub(self.tmst()) as i32) < 0,
                };
                let status = if late { "TOO_LATE" } else { "NONE" };
                if late {
                    self.stats.too_late.fetch_add(1, Ordering::Relaxed);
                }
                let _ = self.send(&ForwarderDatagram::tx_ack(d.token, self.eui, Some(status))).await;
                if let Ok(phy) = txpk.payload() {
                    let dl = Downlink {
                        gateway_eui: self.eui,
                        phy,
                        tmst: if txpk.imme { None } else { txpk.tmst },
                        late,
                    };
                    if router.deliver(dl) == 0 {
                        self.stats.undeliverable.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::sync::mpsc::unbounded_channel;

    #[test]
    fn router_by_addr_and_join() {
        let r = Router::new();
        let (tx_a, mut rx_a) = unbounded_channel();
        let (tx_b, mut rx_b) = unbounded_channel();
        r.set_joined(Eui64(1), DevAddr(0x0102_0304), tx_a);
        r.set_joining(Eui64(2), tx_b);
        let data = vec![0x60, 0x04, 0x03, 0x02, 0x01, 0, 0, 0, 1, 2, 3, 4];
        let dl = |phy: Vec<u8>| Downlink {
            gateway_eui: Eui64(9),
            phy,
            tmst: None,
            late: false,
        };
        assert_eq!(r.deliver(dl(data.clone())), 1);
        assert_eq!(rx_a.try_recv().unwrap().phy, data);
        assert!(rx_b.try_recv().is_err());
        assert_eq!(r.deliver(dl(vec![0x20; 17])), 1);
        assert!(rx_b.try_recv().is_ok());
        let mut other = data.clone();
        other[1] = 0xff;
        assert_eq!(r.deliver(dl(other)), 0);
    }
}
