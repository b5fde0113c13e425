//! Closed-loop load scenarios against a running server, over real UDP.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use lorans_codec::{AesKey, DevAddr, Eui64, Region, SessionKeys};
use lorans_server::admin::{DeviceInput, GatewayInput};
use lorans_server::client::{AdminClient, ClientError};
use lorans_server::model::Activation;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc::unbounded_channel;
use tokio::time::sleep_until;

use crate::gateway::{GatewayStats, Router, VirtualGateway};
use crate::node::{AdrPolicy, Credentials, NodeConfig, NodeEvent, TxKind, VirtualNode};
use crate::radio::{airtime_s, snr_floor_db, Link, SNR_RANGE};

pub const DEFAULT_PERIOD_S: f64 = 40.0;
pub const DEFAULT_RESPONSE_TIMEOUT_S: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("server unreachable at {target}: {reason}")]
    ServerUnreachable { target: String, reason: String },
    #[error("registering {what} failed: {reason}")]
    RegistrationFailed { what: String, reason: String },
    #[error("gateway socket: {0}")]
    Socket(#[from] io::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct ServerTarget {
    pub udp: SocketAddr,
    pub admin_url: String,
    pub token: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub target: ServerTarget,
    pub nodes: usize,
    pub gateways: usize,
    pub period_s: f64,
    pub response_timeout_s: f64,
    /// How long a node waits before abandoning a confirmed uplink.
    pub give_up_s: f64,
    pub warmup_s: f64,
    /// Length of the measurement window.
    pub duration_s: f64,
    pub confirmed: bool,
    pub activation: Activation,
    pub seed: u64,
    /// Create the devices and gateways through the admin API first.
    pub register: bool,
    pub initial_dr: u8,
    pub payload_len: usize,
    pub adr: bool,
    pub adr_policy: AdrPolicy,
    /// Range of per-link mean SNR.
    pub snr_range: (f64, f64),
    pub rssi_sigma_db: f64,
    pub snr_sigma_db: f64,
    pub demod_limit: usize,
    pub keepalive_s: f64,
    pub cpu_sample_s: f64,
    /// Namespace for generated EUIs and addresses, so several scenarios
    /// can share one server.
    pub id_prefix: u16,
}

impl ScenarioConfig {
    pub fn new(target: ServerTarget) -> Self {
        ScenarioConfig {
            target,
            nodes: 10,
            gateways: 1,
            period_s: DEFAULT_PERIOD_S,
            response_timeout_s: DEFAULT_RESPONSE_TIMEOUT_S,
            give_up_s: 60.0,
            warmup_s: 0.0,
            duration_s: 300.0,
            confirmed: true,
            activation: Activation::Otaa,
            seed: 1,
            register: true,
            initial_dr: 0,
            payload_len: 8,
            adr: true,
            adr_policy: AdrPolicy::Accept,
            snr_range: SNR_RANGE,
            rssi_sigma_db: 2.0,
            snr_sigma_db: 1.0,
            demod_limit: 8,
            keepalive_s: 5.0,
            cpu_sample_s: 5.0,
            id_prefix: 0x5100,
        }
    }

    pub fn dev_eui(&self, i: usize) -> Eui64 {
        Eui64(0x00AA_0000_0000_0000 | (self.id_prefix as u64) << 32 | i as u64)
    }

    pub fn gateway_eui(&self, i: usize) -> Eui64 {
        Eui64(0x00BB_0000_0000_0000 | (self.id_prefix as u64) << 32 | i as u64)
    }

    pub fn app_eui(&self) -> Eui64 {
        Eui64(0x00CC_0000_0000_0000 | (self.id_prefix as u64) << 32)
    }

    fn abp_addr(&self, i: usize) -> DevAddr {
        DevAddr::new(0x7f, (self.id_prefix as u32 & 0x1ff) << 16 | i as u32)
    }

    fn node_rng(&self, i: usize) -> StdRng {
        StdRng::seed_from_u64(self.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (self.id_prefix as u64) << 48)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        if self.nodes > 0 && self.gateways == 0 {
            return bad("nodes need at least one gateway");
        }
        if self.nodes > 0xffff {
            return bad("at most 65535 nodes per scenario");
        }
        if !(self.period_s > 0.0 && self.duration_s > 0.0 && self.response_timeout_s > 0.0) {
            return bad("period, duration and timeout must be positive");
        }
        if self.give_up_s < self.response_timeout_s {
            return bad("give-up time must not be shorter than the response timeout");
        }
        if self.snr_range.0 > self.snr_range.1 {
            return bad("empty SNR range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Answered within the response timeout.
    Ok,
    /// Answered, but after the timeout.
    Late,
    NoResponse,
    /// Still unanswered when the scenario ended.
    InFlight,
    /// Unconfirmed uplink heard by at least one gateway.
    Delivered,
    /// Unconfirmed uplink no gateway heard.
    Unheard,
}

/// One uplink request, one NDJSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub node: usize,
    pub fcnt: u32,
    pub sent_at_ms: u64,
    pub in_window: bool,
    pub heard_by: usize,
    pub dr: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_ms: Option<u64>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub nodes: usize,
    pub gateways: usize,
    pub period_s: f64,
    pub response_timeout_s: f64,
    pub window_s: f64,
    pub confirmed: bool,
    /// Requests per second the population would generate with instant answers.
    pub offered_rate: f64,
    /// In-window requests that were answered (confirmed) or heard
    /// (unconfirmed), per second of window.
    pub achieved_throughput: f64,
    /// Over in-window confirmed requests; unanswered ones count as the
    /// give-up time.
    pub median_response_ms: Option<f64>,
    pub p95_response_ms: Option<f64>,
    pub sent: u64,
    pub answered: u64,
    pub late: u64,
    pub no_response: u64,
    pub in_flight: u64,
    pub delivered: u64,
    pub unheard: u64,
    pub failure_count: u64,
    pub joins_sent: u64,
    pub nodes_joined: u64,
    pub too_late_downlinks: u64,
    pub demod_dropped: u64,
    /// Busy fraction of each central instance per sample interval.
    pub cpu_samples: BTreeMap<String, Vec<f64>>,
}

impl LoadReport {
    /// Every in-window request has exactly one outcome.
    pub fn conserved(&self) -> bool {
        self.sent == self.answered + self.late + self.no_response + self.in_flight + self.delivered + self.unheard
    }

    pub fn cpu_mean(&self) -> BTreeMap<String, f64> {
        self.cpu_samples
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k.clone(), v.iter().sum::<f64>() / v.len() as f64))
            .collect()
    }

    /// Summarise rows; only in-window rows count.
    pub fn from_rows(cfg: &ScenarioConfig, rows: &[RequestRow]) -> LoadReport {
        let mut r = LoadReport {
            nodes: cfg.nodes,
            gateways: cfg.gateways,
            period_s: cfg.period_s,
            response_timeout_s: cfg.response_timeout_s,
            window_s: cfg.duration_s,
            confirmed: cfg.confirmed,
            offered_rate: cfg.nodes as f64 / cfg.period_s,
            ..LoadReport::default()
        };
        let give_up_ms = cfg.give_up_s * 1000.0;
        let mut times = Vec::new();
        for row in rows.iter().filter(|r| r.in_window) {
            r.sent += 1;
            match row.outcome {
                Outcome::Ok => r.answered += 1,
                Outcome::Late => r.late += 1,
                Outcome::NoResponse => r.no_response += 1,
                Outcome::InFlight => r.in_flight += 1,
                Outcome::Delivered => r.delivered += 1,
                Outcome::Unheard => r.unheard += 1,
            }
            if !matches!(row.outcome, Outcome::Delivered | Outcome::Unheard) {
                times.push(row.response_ms.map_or(give_up_ms, |t| t as f64));
            }
        }
        r.failure_count = r.late + r.no_response + r.in_flight + r.unheard;
        r.achieved_throughput = (r.answered + r.late + r.delivered) as f64 / cfg.duration_s;
        times.sort_by(f64::total_cmp);
        r.median_response_ms = quantile(&times, 0.5);
        r.p95_response_ms = quantile(&times, 0.95);
        r
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v["type"] = "summary".into();
        v["cpu_mean"] = serde_json::to_value(self.cpu_mean()).expect("map serializes");
        v
    }
}

/// Nearest-rank quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Request rows then the summary, one JSON object per line.
pub fn write_ndjson<W: Write>(mut out: W, rows: &[RequestRow], report: &LoadReport) -> io::Result<()> {
    for row in rows {
        let mut v = serde_json::to_value(row).expect("row serializes");
        v["type"] = "request".into();
        writeln!(out, "{v}")?;
    }
    writeln!(out, "{}", report.to_json())?;
    out.flush()
}

pub struct ScenarioOutput {
    pub report: LoadReport,
    pub rows: Vec<RequestRow>,
}

pub async fn run_scenario(cfg: ScenarioConfig) -> Result<LoadReport, ScenarioError> {
    Ok(run_scenario_detailed(cfg).await?.report)
}

struct NodeResult {
    rows: Vec<RequestRow>,
    joins_sent: u64,
    joined: bool,
}

struct Shared {
    gateways: Vec<Arc<VirtualGateway>>,
    router: Arc<Router>,
    region: Region,
    t0: Instant,
    window: (u64, u64),
    drain_end: u64,
    response_timeout_ms: u64,
}

impl Shared {
    fn now_ms(&self) -> u64 {
        self.t0.elapsed().as_millis() as u64
    }
}

pub async fn run_scenario_detailed(cfg: ScenarioConfig) -> Result<ScenarioOutput, ScenarioError> {
    cfg.validate()?;
    let client = AdminClient::new(cfg.target.admin_url.clone(), cfg.target.token.clone());
    let unreachable = |reason: String| ScenarioError::ServerUnreachable {
        target: cfg.target.admin_url.clone(),
        reason,
    };
    client.stats().await.map_err(|e| unreachable(e.to_string()))?;
    if cfg.nodes == 0 {
        return Ok(ScenarioOutput {
            report: LoadReport::from_rows(&cfg, &[]),
            rows: Vec::new(),
        });
    }

    let region = Region::eu433();
    let mut nodes = Vec::with_capacity(cfg.nodes);
    let mut start_rng = StdRng::seed_from_u64(cfg.seed ^ 0x5EED);
    for i in 0..cfg.nodes {
        let mut rng = cfg.node_rng(i);
        let credentials = match cfg.activation {
            Activation::Otaa => Credentials::Otaa {
                app_eui: cfg.app_eui(),
                app_key: AesKey(rng.random()),
            },
            Activation::Abp => Credentials::Abp {
                dev_addr: cfg.abp_addr(i),
                keys: SessionKeys {
                    nwk_skey: AesKey(rng.random()),
                    app_skey: AesKey(rng.random()),
                },
            },
        };
        let mut nc = NodeConfig::new(cfg.dev_eui(i), credentials);
        nc.period_ms = (cfg.period_s * 1000.0) as u64;
        nc.response_timeout_ms = (cfg.response_timeout_s * 1000.0) as u64;
        nc.give_up_ms = (cfg.give_up_s * 1000.0) as u64;
        nc.confirmed = cfg.confirmed;
        nc.payload_len = cfg.payload_len;
        nc.initial_dr = cfg.initial_dr;
        nc.adr = cfg.adr;
        nc.adr_policy = cfg.adr_policy;
        nc.seed = rng.random();
        // spread first transmissions over one period
        nc.start_at_ms = start_rng.random_range(0..nc.period_ms.max(1));
        nodes.push(VirtualNode::new(nc, region.clone()));
    }

    if cfg.register {
        register(&client, &cfg, &nodes).await?;
    }

    let router = Router::new();
    let mut gateways = Vec::with_capacity(cfg.gateways);
    let mut gw_tasks = Vec::new();
    for g in 0..cfg.gateways {
        let gw = VirtualGateway::connect(cfg.gateway_eui(g), cfg.target.udp, cfg.demod_limit).await?;
        gw_tasks.push(gw.spawn(router.clone(), Duration::from_secs_f64(cfg.keepalive_s)));
        gateways.push(gw);
    }
    let deadline = Instant::now() + Duration::from_secs(3);
    while gateways.iter().any(|g| GatewayStats::get(&g.stats.pull_acked) == 0) {
        if Instant::now() > deadline {
            gw_tasks.iter().for_each(|t| t.abort());
            return Err(unreachable(format!("no PULL_ACK from {}", cfg.target.udp)));
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }

    let warmup_ms = (cfg.warmup_s * 1000.0) as u64;
    let window_end = warmup_ms + (cfg.duration_s * 1000.0) as u64;
    let shared = Arc::new(Shared {
        gateways,
        router,
        region,
        t0: Instant::now(),
        window: (warmup_ms, window_end),
        drain_end: window_end + (cfg.give_up_s * 1000.0) as u64,
        response_timeout_ms: (cfg.response_timeout_s * 1000.0) as u64,
    });

    let sampler = tokio::spawn(sample_cpu(client.clone(), shared.clone(), Duration::from_secs_f64(cfg.cpu_sample_s)));
    let mut handles = Vec::with_capacity(cfg.nodes);
    for (i, node) in nodes.into_iter().enumerate() {
        let links = (0..cfg.gateways)
            .map(|g| {
                let seed = cfg.seed ^ ((i as u64) << 20 | g as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
                Link::random_in(seed, cfg.snr_range, cfg.rssi_sigma_db, cfg.snr_sigma_db)
            })
            .collect();
        handles.push(tokio::spawn(drive_node(i, node, links, shared.clone())));
    }

    let mut rows = Vec::new();
    let (mut joins_sent, mut nodes_joined) = (0, 0);
    for h in handles {
        let res = h.await.expect("node task panicked");
        rows.extend(res.rows);
        joins_sent += res.joins_sent;
        nodes_joined += res.joined as u64;
    }
    let cpu_samples = sampler.await.unwrap_or_default();
    gw_tasks.iter().for_each(|t| t.abort());

    let mut report = LoadReport::from_rows(&cfg, &rows);
    report.joins_sent = joins_sent;
    report.nodes_joined = nodes_joined;
    report.cpu_samples = cpu_samples;
    for g in &shared.gateways {
        report.too_late_downlinks += GatewayStats::get(&g.stats.too_late);
        report.demod_dropped += GatewayStats::get(&g.stats.demod_dropped);
    }
    rows.sort_by_key(|r| (r.sent_at_ms, r.node));
    Ok(ScenarioOutput { report, rows })
}

async fn register(client: &AdminClient, cfg: &ScenarioConfig, nodes: &[VirtualNode]) -> Result<(), ScenarioError> {
    let fail = |what: String, e: ClientError| match e {
        ClientError::Unreachable(m) => ScenarioError::ServerUnreachable {
            target: cfg.target.admin_url.clone(),
            reason: m,
        },
        other => ScenarioError::RegistrationFailed {
            what,
            reason: other.to_string(),
        },
    };
    for g in 0..cfg.gateways {
        let eui = cfg.gateway_eui(g);
        let input = GatewayInput {
            gateway_eui: eui.to_string(),
            description: "simulated".into(),
            location: None,
        };
        client.add_gateway(&input).await.map_err(|e| fail(format!("gateway {eui}"), e))?;
    }
    for n in nodes {
        let mut input = DeviceInput {
            dev_eui: n.dev_eui().to_string(),
            activation: cfg.activation,
            description: "simulated".into(),
            ..DeviceInput::default()
        };
        match &n.cfg.credentials {
            Credentials::Otaa { app_eui, app_key } => {
                input.app_eui = Some(app_eui.to_string());
                input.app_key = Some(app_key.to_string());
            }
            Credentials::Abp { dev_addr, keys } => {
                input.dev_addr = Some(dev_addr.to_string());
                input.nwk_skey = Some(keys.nwk_skey.to_string());
                input.app_skey = Some(keys.app_skey.to_string());
            }
        }
        client.add_device(&input).await.map_err(|e| fail(format!("device {}", n.dev_eui()), e))?;
    }
    Ok(())
}

async fn drive_node(idx: usize, mut node: VirtualNode, mut links: Vec<Link>, sh: Arc<Shared>) -> NodeResult {
    let (tx, mut rx) = unbounded_channel();
    let eui = node.dev_eui();
    if let Some(s) = &node.session {
        sh.router.set_joined(eui, s.dev_addr, tx.clone());
    }
    let mut res = NodeResult {
        rows: Vec::new(),
        joins_sent: 0,
        joined: node.is_joined(),
    };
    let mut open: HashMap<u32, usize> = HashMap::new();
    loop {
        let now = sh.now_ms();
        let sending = now < sh.window.1;
        if now >= sh.drain_end || (!sending && open.is_empty()) {
            break;
        }
        let mut heard = 0;
        if sending {
            if let Some(t) = node.step(now) {
                if node.is_joining() {
                    sh.router.set_joining(eui, tx.clone());
                }
                let datr = sh.region.datr(t.dr).expect("node DR in table");
                let airtime_ms = airtime_s(datr.sf, datr.bw_khz, t.phy.len()) * 1000.0;
                for (gw, link) in sh.gateways.iter().zip(links.iter_mut()) {
                    let (rssi, snr) = link.sample();
                    if snr < snr_floor_db(datr.sf) {
                        continue;
                    }
                    match gw.receive(&t.phy, t.freq_mhz, datr, rssi, snr, airtime_ms).await {
                        Ok(Some(_)) => heard += 1,
                        Ok(None) => {}
                        Err(e) => tracing::debug!("gateway send: {e}"),
                    }
                }
            }
        }
        for ev in node.take_events() {
            match ev {
                NodeEvent::Sent {
                    kind: TxKind::Data { fcnt, confirmed },
                    at_ms,
                } => {
                    let outcome = match (confirmed, heard > 0) {
                        (true, _) => Outcome::InFlight,
                        (false, true) => Outcome::Delivered,
                        (false, false) => Outcome::Unheard,
                    };
                    if confirmed {
                        open.insert(fcnt, res.rows.len());
                    }
                    res.rows.push(RequestRow {
                        node: idx,
                        fcnt,
                        sent_at_ms: at_ms,
                        in_window: at_ms >= sh.window.0 && at_ms < sh.window.1,
                        heard_by: heard,
                        dr: node.dr,
                        response_ms: None,
                        outcome,
                    });
                }
                NodeEvent::Sent { kind: TxKind::Join { .. }, .. } => res.joins_sent += 1,
                NodeEvent::Answered { fcnt, latency_ms, .. } => {
                    if let Some(i) = open.remove(&fcnt) {
                        let row = &mut res.rows[i];
                        row.response_ms = Some(latency_ms);
                        row.outcome = if latency_ms <= sh.response_timeout_ms { Outcome::Ok } else { Outcome::Late };
                    }
                }
                NodeEvent::GaveUp { fcnt, .. } => {
                    if let Some(i) = open.remove(&fcnt) {
                        res.rows[i].outcome = Outcome::NoResponse;
                    }
                }
                NodeEvent::Joined { dev_addr, .. } => {
                    sh.router.set_joined(eui, dev_addr, tx.clone());
                    res.joined = true;
                }
                _ => {}
            }
        }
        if !sending && open.is_empty() {
            break;
        }
        let wake = if sending { node.next_wake_ms().min(sh.window.1) } else { sh.drain_end };
        tokio::select! {
            _ = sleep_until((sh.t0 + Duration::from_millis(wake)).into()) => {}
            Some(dl) = rx.recv() => {
                node.handle_downlink(&dl.phy, sh.now_ms());
            }
        }
    }
    sh.router.remove(eui, node.session.as_ref().map(|s| s.dev_addr));
    res
}

/// Per-interval busy fraction of each central instance, during the window.
async fn sample_cpu(client: AdminClient, sh: Arc<Shared>, every: Duration) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut last: Option<(Instant, BTreeMap<String, f64>)> = None;
    let window_start = sh.t0 + Duration::from_millis(sh.window.0);
    let window_end = sh.t0 + Duration::from_millis(sh.window.1);
    tokio::time::sleep_until(window_start.into()).await;
    loop {
        let now = Instant::now();
        if let Ok(snap) = client.stats().await {
            let busy: BTreeMap<String, f64> = snap
                .workers
                .iter()
                .filter(|(k, _)| k.starts_with("central-"))
                .map(|(k, w)| (k.clone(), w.busy_ms))
                .collect();
            if let Some((t_prev, prev)) = &last {
                let wall_ms = now.duration_since(*t_prev).as_secs_f64() * 1000.0;
                for (k, b) in &busy {
                    let delta = b - prev.get(k).copied().unwrap_or(0.0);
                    out.entry(k.clone()).or_default().push((delta / wall_ms).clamp(0.0, 1.0));
                }
            }
            last = Some((now, busy));
        }
        if now >= window_end {
            return out;
        }
        let next = (now + every).min(window_end);
        tokio::time::sleep_until(next.into()).await;
    }
}
