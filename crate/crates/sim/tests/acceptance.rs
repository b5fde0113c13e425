//! Exit-gate checks. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion does.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine;
use lorans_bus::{record, Broker, DEFAULT_CAPACITY};
use lorans_codec::mac::LinkAdrAns;
use lorans_codec::{
    crypt_frm, decrypt_join_accept, derive_session_keys, encrypt_join_accept, mic_data, mic_join, parse_phy, serialize_mac_commands, serialize_phy,
    AesKey, Body, DevAddr, Direction, Eui64, FCtrl, JoinAcceptPayload, JoinRequestPayload, MType, Mhdr, PhyPayload, Region, SessionKeys,
};
use lorans_server::admin::{DeviceInput, DownlinkInput, GatewayInput};
use lorans_server::client::AdminClient;
use lorans_server::clock::{ManualClock, SharedClock};
use lorans_server::controller::{run_adr, AnsOutcome, NetworkController};
use lorans_server::metrics::Metrics;
use lorans_server::model::{Activation, AdrState, MacState};
use lorans_server::runtime::build_bus;
use lorans_server::store::Store;
use lorans_server::topics::MacUplink;
use lorans_server::{ServerConfig, ServerHandle};
use lorans_sim::gateway::{Downlink, GatewayStats, Router, VirtualGateway};
use lorans_sim::node::{DownlinkResult, Transmission};
use lorans_sim::radio::airtime_s;
use lorans_sim::{run_scenario, Credentials, LoadReport, NodeConfig, NodeEvent, ScenarioConfig, ServerTarget, SweepConfig, VirtualNode};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;
use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver};

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- helpers

async fn server(centrals: usize) -> ServerHandle {
    let mut cfg = ServerConfig::ephemeral();
    cfg.central.instances = centrals;
    lorans_server::start(cfg).await.expect("server starts")
}

async fn gateway(h: &ServerHandle, client: &AdminClient, eui: Eui64, router: &Arc<Router>) -> Result<Arc<VirtualGateway>, String> {
    client
        .add_gateway(&GatewayInput {
            gateway_eui: eui.to_string(),
            description: String::new(),
            location: None,
        })
        .await
        .map_err(|e| e.to_string())?;
    let gw = VirtualGateway::connect(eui, h.udp_addr, 8).await.map_err(|e| e.to_string())?;
    gw.spawn(router.clone(), Duration::from_secs(1));
    let deadline = Instant::now() + Duration::from_secs(3);
    while GatewayStats::get(&gw.stats.pull_acked) == 0 {
        ensure!(Instant::now() < deadline, "gateway {eui} got no PULL_ACK");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    Ok(gw)
}

async fn air(gw: &VirtualGateway, t: &Transmission, rssi: i32, lsnr: f64) -> Option<u32> {
    let datr = Region::eu433().datr(t.dr).unwrap();
    let airtime = airtime_s(datr.sf, datr.bw_khz, t.phy.len()) * 1000.0;
    gw.receive(&t.phy, t.freq_mhz, datr, rssi, lsnr, airtime).await.ok().flatten()
}

/// Feed downlinks to the node until one is accepted.
async fn await_downlink(node: &mut VirtualNode, rx: &mut UnboundedReceiver<Downlink>, t0: Instant, limit: Duration) -> Option<Downlink> {
    let deadline = tokio::time::Instant::now() + limit;
    loop {
        let dl = tokio::time::timeout_at(deadline, rx.recv()).await.ok()??;
        if node.handle_downlink(&dl.phy, t0.elapsed().as_millis() as u64) == DownlinkResult::Accepted {
            return Some(dl);
        }
    }
}

fn ms(t0: Instant) -> u64 {
    t0.elapsed().as_millis() as u64
}

fn key_hex(k: &AesKey) -> String {
    k.to_string()
}

// ------------------------------------------------------------ criterion 1

fn hex(v: &Value, field: &str) -> Vec<u8> {
    hex::decode(v[field].as_str().unwrap()).unwrap()
}

fn vkey(v: &Value, field: &str) -> AesKey {
    AesKey(hex(v, field).try_into().unwrap())
}

fn vnum(v: &Value, field: &str) -> u32 {
    v[field].as_u64().unwrap() as u32
}

fn vdir(v: &Value) -> Direction {
    if v["direction"].as_u64().unwrap() == 0 {
        Direction::Uplink
    } else {
        Direction::Downlink
    }
}

fn random_frame(rng: &mut StdRng, mtype: MType) -> PhyPayload {
    let body = match mtype {
        MType::JoinRequest => Body::JoinRequest(JoinRequestPayload {
            app_eui: Eui64(rng.random()),
            dev_eui: Eui64(rng.random()),
            dev_nonce: rng.random(),
        }),
        MType::JoinAccept => Body::JoinAccept(JoinAcceptPayload {
            app_nonce: rng.random::<u32>() & 0xff_ffff,
            net_id: rng.random::<u32>() & 0xff_ffff,
            dev_addr: DevAddr(rng.random()),
            dl_settings: rng.random(),
            rx_delay: rng.random(),
            cf_list: rng.random_bool(0.5).then(|| rng.random()),
        }),
        _ => {
            let fport = match rng.random_range(0..3) {
                0 => None,
                1 => Some(0),
                _ => Some(rng.random_range(1..=255)),
            };
            let fopts_len = if fport == Some(0) { 0 } else { rng.random_range(0..=15) };
            let fopts: Vec<u8> = (0..fopts_len).map(|_| rng.random()).collect();
            let frm: Vec<u8> = match fport {
                None => vec![],
                Some(_) => (0..rng.random_range(0..=64)).map(|_| rng.random()).collect(),
            };
            Body::Data(lorans_codec::DataPayload {
                dev_addr: DevAddr(rng.random()),
                fctrl: FCtrl {
                    adr: rng.random(),
                    adr_ack_req: rng.random(),
                    ack: rng.random(),
                    fpending: rng.random(),
                    fopts_len: fopts_len as u8,
                },
                fcnt: rng.random(),
                fopts,
                fport,
                frm_payload: frm,
            })
        }
    };
    PhyPayload {
        mhdr: Mhdr::new(mtype),
        body,
        mic: rng.random(),
    }
}

fn codec_conformance() -> Verdict {
    let started = Instant::now();
    let mtypes = [
        MType::JoinRequest,
        MType::JoinAccept,
        MType::UnconfirmedDataUp,
        MType::UnconfirmedDataDown,
        MType::ConfirmedDataUp,
        MType::ConfirmedDataDown,
    ];
    let mut rng = StdRng::seed_from_u64(0xC0DEC);
    let mut per_type = [0usize; 6];
    for i in 0..1200 {
        let mtype = mtypes[i % 6];
        let frame = random_frame(&mut rng, mtype);
        let raw = serialize_phy(&frame).map_err(|e| format!("serialize {mtype:?}: {e}"))?;
        let back = parse_phy(&raw, mtype.direction()).map_err(|e| format!("parse {mtype:?}: {e}"))?;
        ensure!(back == frame, "parse(serialize(f)) != f for {frame:?}");
        ensure!(serialize_phy(&back).unwrap() == raw, "serialize(parse(b)) != b for {raw:02x?}");
        per_type[i % 6] += 1;
    }

    let vectors: Vec<Value> = serde_json::from_str(include_str!("../../codec/tests/fixtures/crypto_vectors.json")).unwrap();
    let mut ops: BTreeMap<String, usize> = BTreeMap::new();
    for v in &vectors {
        let name = v["name"].as_str().unwrap();
        let op = v["op"].as_str().unwrap();
        let ok = match op {
            "mic_data" => mic_data(&hex(v, "msg"), &vkey(v, "key"), vdir(v), DevAddr(vnum(v, "dev_addr")), vnum(v, "fcnt32")).to_vec() == hex(v, "mic"),
            "mic_join" => mic_join(&hex(v, "msg"), &vkey(v, "key")).to_vec() == hex(v, "mic"),
            "crypt_frm" => crypt_frm(&hex(v, "plain"), &vkey(v, "key"), DevAddr(vnum(v, "dev_addr")), vnum(v, "fcnt32"), vdir(v)) == hex(v, "cipher"),
            "derive_session_keys" => {
                let k = derive_session_keys(&vkey(v, "app_key"), vnum(v, "app_nonce"), vnum(v, "net_id"), vnum(v, "dev_nonce") as u16);
                k.nwk_skey.0.to_vec() == hex(v, "nwk_skey") && k.app_skey.0.to_vec() == hex(v, "app_skey")
            }
            "encrypt_join_accept" => encrypt_join_accept(&hex(v, "plain"), &vkey(v, "app_key")).unwrap() == hex(v, "cipher"),
            "join_accept" => {
                let k = vkey(v, "app_key");
                let mut msg = vec![0x20];
                msg.extend(hex(v, "body"));
                let mic = mic_join(&msg, &k);
                let mut plain = hex(v, "body");
                plain.extend_from_slice(&mic);
                let cipher = encrypt_join_accept(&plain, &k).unwrap();
                mic.to_vec() == hex(v, "mic") && cipher == hex(v, "cipher") && decrypt_join_accept(&cipher, &k).unwrap() == plain
            }
            other => return Err(format!("unknown vector op {other}")),
        };
        ensure!(ok, "vector {name} ({op}) does not match the oracle");
        *ops.entry(op.to_string()).or_default() += 1;
    }
    ensure!(vectors.len() >= 10, "only {} vectors", vectors.len());
    for needed in ["mic_data", "crypt_frm", "derive_session_keys", "join_accept"] {
        ensure!(ops.contains_key(needed), "no {needed} vector");
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{} frames ({per_type:?} per MType), {} vectors {ops:?}, {elapsed:.2?}", per_type.iter().sum::<usize>(), vectors.len()))
}

// ------------------------------------------------------------ criterion 2

async fn otaa_joins() -> Verdict {
    const N: usize = 100;
    let h = server(1).await;
    let client = AdminClient::new(h.admin_url(), None);
    let router = Router::new();
    let gw = gateway(&h, &client, Eui64(0x00DD_0000_0000_0001), &router).await?;
    let mut rng = StdRng::seed_from_u64(2);
    let mut nodes = Vec::new();
    for i in 0..N {
        let app_key = AesKey(rng.random());
        let dev_eui = Eui64(0x00EE_0000_0000_0000 | i as u64);
        client
            .add_device(&DeviceInput {
                dev_eui: dev_eui.to_string(),
                app_eui: Some("0000000000000001".into()),
                activation: Activation::Otaa,
                app_key: Some(key_hex(&app_key)),
                ..DeviceInput::default()
            })
            .await
            .map_err(|e| e.to_string())?;
        let mut cfg = NodeConfig::new(
            dev_eui,
            Credentials::Otaa {
                app_eui: Eui64(1),
                app_key,
            },
        );
        cfg.period_ms = 0;
        cfg.initial_dr = 5;
        cfg.seed = rng.random();
        nodes.push(VirtualNode::new(cfg, Region::eu433()));
    }

    let t0 = Instant::now();
    let mut tasks = Vec::new();
    for (i, mut node) in nodes.into_iter().enumerate() {
        let gw = gw.clone();
        let router = router.clone();
        tasks.push(tokio::spawn(async move {
            tokio::time::sleep(Duration::from_millis(i as u64 * 70)).await;
            let (tx, mut rx) = unbounded_channel();
            router.set_joining(node.dev_eui(), tx.clone());
            let join = node.step(ms(t0)).expect("join due");
            air(&gw, &join, -90, 5.0).await.ok_or("join not forwarded")?;
            await_downlink(&mut node, &mut rx, t0, Duration::from_secs(5)).await.ok_or("no join accept")?;
            let addr = node.session.as_ref().ok_or("accepted but not joined")?.dev_addr;
            router.set_joined(node.dev_eui(), addr, tx);
            let up = node.step(ms(t0)).expect("data due after join");
            air(&gw, &up, -90, 5.0).await.ok_or("uplink not forwarded")?;
            await_downlink(&mut node, &mut rx, t0, Duration::from_secs(5)).await.ok_or("no ack")?;
            let answered = node.take_events().iter().any(|e| matches!(e, NodeEvent::Answered { fcnt: 0, .. }));
            if !answered {
                return Err("downlink did not acknowledge the uplink");
            }
            Ok::<_, &'static str>((node, join.phy))
        }));
    }
    let mut joined = Vec::new();
    let mut failures = BTreeMap::new();
    for t in tasks {
        match t.await.unwrap() {
            Ok(v) => joined.push(v),
            Err(e) => *failures.entry(e).or_insert(0) += 1,
        }
    }
    ensure!(joined.len() == N, "{}/{N} joins completed; failures {failures:?}", joined.len());
    for (node, _) in &joined {
        let s = h.store.volatile.session_by_eui(node.dev_eui()).ok_or("server has no session")?;
        let mine = node.session.as_ref().unwrap();
        ensure!(s.keys == mine.keys && s.dev_addr == mine.dev_addr, "key mismatch for {}", node.dev_eui());
        ensure!(s.fcnt_up == 1, "server did not accept the uplink of {}", node.dev_eui());
    }
    let accepts = h.metrics.get("join.accepted");
    ensure!(accepts == N as u64, "{accepts} accepts for {N} joins");

    // replay every join request once dedup has forgotten them
    tokio::time::sleep(Duration::from_millis(h.config.central.dedup_ttl_ms + 1000)).await;
    let resp_before = GatewayStats::get(&gw.stats.pull_resp);
    for (node, phy) in &joined {
        let t = Transmission {
            phy: phy.clone(),
            dr: node.cfg.initial_dr,
            freq_mhz: 433.175,
            kind: lorans_sim::node::TxKind::Join { dev_nonce: 0 },
        };
        air(&gw, &t, -90, 5.0).await.ok_or("replay not forwarded")?;
        tokio::time::sleep(Duration::from_millis(70)).await;
    }
    tokio::time::sleep(Duration::from_millis(1500)).await;
    let extra = h.metrics.get("join.accepted") - accepts;
    let replays_seen = h.metrics.get("join.drop.replayed_nonce");
    let resp_extra = GatewayStats::get(&gw.stats.pull_resp) - resp_before;
    ensure!(extra == 0 && resp_extra == 0, "replays produced {extra} accepts, {resp_extra} downlinks");
    ensure!(replays_seen == N as u64, "only {replays_seen} replays rejected by nonce");
    Ok(format!("{N}/{N} joins, keys identical, acks decrypted; {N} replays -> 0 accepts"))
}

// ------------------------------------------------------------ criterion 3

struct Lane {
    node: VirtualNode,
    rx: UnboundedReceiver<Downlink>,
    gws: Vec<Arc<VirtualGateway>>,
}

async fn dedup_and_selection() -> Verdict {
    const LANES: usize = 10;
    const TRIALS_PER_LANE: usize = 20;
    let h = server(1).await;
    let client = AdminClient::new(h.admin_url(), None);
    let mut lanes = Vec::new();
    for l in 0..LANES {
        let router = Router::new();
        let mut gws = Vec::new();
        for g in 0..8 {
            // EUIs deliberately not in index order
            let eui = Eui64(0x00DD_0000_0001_0000 | (l as u64) << 8 | ((g * 5) % 8) as u64);
            gws.push(gateway(&h, &client, eui, &router).await?);
        }
        let keys = SessionKeys {
            nwk_skey: AesKey([l as u8 + 1; 16]),
            app_skey: AesKey([l as u8 + 101; 16]),
        };
        let dev_addr = DevAddr(0x2700_0000 | l as u32);
        let dev_eui = Eui64(0x00EF_0000_0000_0000 | l as u64);
        client
            .add_device(&DeviceInput {
                dev_eui: dev_eui.to_string(),
                activation: Activation::Abp,
                dev_addr: Some(dev_addr.to_string()),
                nwk_skey: Some(key_hex(&keys.nwk_skey)),
                app_skey: Some(key_hex(&keys.app_skey)),
                ..DeviceInput::default()
            })
            .await
            .map_err(|e| e.to_string())?;
        let mut cfg = NodeConfig::new(dev_eui, Credentials::Abp { dev_addr, keys });
        cfg.period_ms = 0;
        cfg.adr = false;
        let node = VirtualNode::new(cfg, Region::eu433());
        let (tx, rx) = unbounded_channel();
        router.set_joined(dev_eui, dev_addr, tx);
        lanes.push(Lane { node, rx, gws });
    }

    let t0 = Instant::now();
    let app = h.store.clone();
    let mut tasks = Vec::new();
    for (l, mut lane) in lanes.into_iter().enumerate() {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            let mut rng = StdRng::seed_from_u64(300 + l as u64);
            let mut violations = Vec::new();
            let mut ties = 0;
            for trial in 0..TRIALS_PER_LANE {
                let g = [2, 3, 5, 8][(trial + l) % 4];
                let mut lsnr: Vec<f64> = (0..g).map(|_| rng.random_range(-40i32..=40) as f64 * 0.25).collect();
                let mut rssi: Vec<i32> = (0..g).map(|_| rng.random_range(-120..=-60)).collect();
                match rng.random_range(0..3) {
                    // equal best SNR, decided by RSSI
                    0 => {
                        let (a, b) = (rng.random_range(0..g), rng.random_range(0..g));
                        lsnr[b] = lsnr[a];
                        lsnr[a] = 12.0;
                        lsnr[b] = 12.0;
                    }
                    // equal SNR and RSSI, decided by EUI
                    1 => {
                        for i in 0..g {
                            lsnr[i] = 9.5;
                            rssi[i] = -70;
                        }
                    }
                    _ => {}
                }
                let gw_euis: Vec<Eui64> = lane.gws[..g].iter().map(|gw| gw.eui).collect();
                let mut order: Vec<usize> = (0..g).collect();
                order.sort_by(|&a, &b| lsnr[b].total_cmp(&lsnr[a]).then(rssi[b].cmp(&rssi[a])).then(gw_euis[a].cmp(&gw_euis[b])));
                let expected = gw_euis[order[0]];
                if g > 1 && lsnr[order[0]] == lsnr[order[1]] {
                    ties += 1;
                }
                let resp_before: u64 = lane.gws.iter().map(|gw| GatewayStats::get(&gw.stats.pull_resp)).sum();

                let up = lane.node.step(ms(t0)).expect("uplink due");
                let lorans_sim::node::TxKind::Data { fcnt, .. } = up.kind else { unreachable!() };
                for i in 0..g {
                    if air(&lane.gws[i], &up, rssi[i], lsnr[i]).await.is_none() {
                        violations.push(format!("lane {l} trial {trial}: gateway {i} dropped the frame"));
                    }
                }
                let Some(dl) = await_downlink(&mut lane.node, &mut lane.rx, t0, Duration::from_secs(5)).await else {
                    violations.push(format!("lane {l} trial {trial}: no downlink"));
                    continue;
                };
                tokio::time::sleep(Duration::from_millis(400)).await;
                let resp_after: u64 = lane.gws.iter().map(|gw| GatewayStats::get(&gw.stats.pull_resp)).sum();
                let deliveries = app.volatile.app_payloads(lane.node.dev_eui(), 10_000).iter().filter(|p| p.fcnt == fcnt).count();
                if dl.gateway_eui != expected {
                    violations.push(format!("lane {l} trial {trial}: downlink via {} expected {expected} (lsnr {lsnr:?} rssi {rssi:?})", dl.gateway_eui));
                }
                if resp_after - resp_before != 1 {
                    violations.push(format!("lane {l} trial {trial}: {} downlinks", resp_after - resp_before));
                }
                if deliveries != 1 {
                    violations.push(format!("lane {l} trial {trial}: {deliveries} application deliveries"));
                }
                while let Ok(extra) = lane.rx.try_recv() {
                    violations.push(format!("lane {l} trial {trial}: extra downlink via {}", extra.gateway_eui));
                }
                lane.node.take_events();
            }
            (violations, ties)
        }));
    }
    let mut violations = Vec::new();
    let mut ties = 0;
    for t in tasks {
        let (v, n) = t.await.unwrap();
        violations.extend(v);
        ties += n;
    }
    let trials = LANES * TRIALS_PER_LANE;
    ensure!(violations.is_empty(), "{} violations in {trials} trials, first: {}", violations.len(), violations[0]);
    Ok(format!("{trials} trials over G in {{2,3,5,8}}, {ties} with tied best SNR, 0 violations"))
}

// ------------------------------------------------------------ criterion 4

fn round_robin_and_failover() -> Verdict {
    const MSGS: u64 = 10_000;
    let broker = Broker::new(DEFAULT_CAPACITY);
    broker.register_topic("balance", "n.v1").unwrap();
    let mut subs: Vec<_> = (0..4).map(|_| broker.subscribe("balance", "workers").unwrap()).collect();
    for i in 0..MSGS {
        broker.publish("balance", None, record::encode("n.v1", &i)).map_err(|e| e.to_string())?;
    }
    let mut counts = Vec::new();
    let mut seen = BTreeSet::new();
    for s in &mut subs {
        let mut n = 0u64;
        while let Some(d) = s.try_recv() {
            let v: u64 = d.decode("n.v1").unwrap();
            ensure!(seen.insert(v), "message {v} delivered twice");
            s.ack(d.seq());
            n += 1;
        }
        counts.push(n);
    }
    let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
    ensure!(seen.len() as u64 == MSGS, "{} of {MSGS} delivered", seen.len());
    ensure!(spread <= 1, "per-member counts {counts:?}");

    // fail-over: one member stops acking and leaves mid-stream
    broker.register_topic("failover", "n.v1").unwrap();
    let mut subs: Vec<_> = (0..4).map(|_| broker.subscribe("failover", "workers").unwrap()).collect();
    let mut acked: HashMap<u64, usize> = HashMap::new();
    let drain = |subs: &mut Vec<lorans_bus::Subscription>, skip: Option<usize>, acked: &mut HashMap<u64, usize>| {
        for (i, s) in subs.iter_mut().enumerate() {
            if Some(i) == skip {
                continue;
            }
            while let Some(d) = s.try_recv() {
                let v: u64 = d.decode("n.v1").unwrap();
                *acked.entry(v).or_default() += 1;
                s.ack(d.seq());
            }
        }
    };
    for i in 0..MSGS / 2 {
        broker.publish("failover", None, record::encode("n.v1", &i)).unwrap();
        if i % 1000 == 999 {
            drain(&mut subs, Some(3), &mut acked);
        }
    }
    // the failing member takes some work and never acknowledges it
    let mut taken = 0;
    while subs[3].try_recv().is_some() {
        taken += 1;
    }
    let mut failed = subs.remove(3);
    failed.leave();
    for i in MSGS / 2..MSGS {
        broker.publish("failover", None, record::encode("n.v1", &i)).unwrap();
    }
    drain(&mut subs, None, &mut acked);
    let lost = (0..MSGS).filter(|v| !acked.contains_key(v)).count();
    let dup = acked.values().filter(|n| **n > 1).count();
    ensure!(taken > 0, "failing member received nothing");
    ensure!(lost == 0 && dup == 0, "{lost} lost, {dup} duplicated after fail-over");
    Ok(format!("per-member counts {counts:?}; member left holding {taken} unacked, 0 lost of {MSGS}"))
}

// ------------------------------------------------------------ criterion 5

fn adr_workflow() -> Verdict {
    #[derive(serde::Deserialize)]
    struct Case {
        name: String,
        snr: Vec<f64>,
        dr: u8,
        power: u8,
        expect: Option<BTreeMap<String, u8>>,
    }
    let cases: Vec<Case> = serde_json::from_str(include_str!("../../server/tests/fixtures/adr_oracle.json")).unwrap();
    ensure!(cases.len() >= 12, "only {} oracle cases", cases.len());
    let region = Region::eu433();
    for c in &cases {
        let st = AdrState {
            history: c.snr.iter().map(|s| (*s, c.dr)).collect(),
            current_dr: c.dr,
            current_tx_power: c.power,
            initialized: true,
            dev_status: None,
        };
        let got = run_adr(&st, 10.0, 1, &region).map(|r| (r.data_rate, r.tx_power));
        let want = c.expect.as_ref().map(|e| (e["dr"], e["power"]));
        ensure!(got == want, "{}: expected {want:?}, got {got:?}", c.name);
    }

    let clock = ManualClock::new(1_700_000_000_000);
    let shared: SharedClock = clock.clone();
    let cfg = ServerConfig::ephemeral();
    let store = Store::in_memory(shared);
    let addr = DevAddr(0x2600_0042);
    let rec = lorans_server::admin::DeviceInput {
        dev_eui: "00000000000000aa".into(),
        activation: Activation::Abp,
        dev_addr: Some(addr.to_string()),
        nwk_skey: Some("01".repeat(16)),
        app_skey: Some("02".repeat(16)),
        ..DeviceInput::default()
    }
    .into_record()
    .map_err(|e| format!("{e:?}"))?;
    store.register_device(rec).map_err(|e| e.to_string())?;
    let metrics = Arc::new(Metrics::default());
    let nc = NetworkController::new(store.clone(), build_bus(&cfg).unwrap(), metrics.clone(), cfg.controller.clone(), region.clone());
    let up = |fcnt32: u32, dr: u8, cmds: Vec<lorans_codec::MacCommand>| MacUplink {
        dev_addr: addr,
        dev_eui: Eui64(0xaa),
        fcnt32,
        commands: serialize_mac_commands(&cmds),
        lsnr: 5.0,
        rssi: -100,
        dr,
        adr: true,
        adr_ack_req: false,
    };
    let send = |fcnt_up: u32| {
        store.volatile.dequeue_for_frame(addr, 51, fcnt_up);
    };
    let nack = LinkAdrAns {
        power_ack: true,
        data_rate_ack: false,
        channel_mask_ack: true,
    };

    // nack: retained with attempts+1, until the cap drops it
    ensure!(nc.handle_mac_uplink(&up(0, 0, vec![])).adr_request.is_some(), "no LinkADRReq for a 15 dB margin");
    let first = store.volatile.mac_queue(addr)[0].id;
    let mut outcomes = Vec::new();
    for f in 1..=4u32 {
        send(f - 1);
        let r = nc.handle_mac_uplink(&up(f, 0, vec![nack.to_command()]));
        outcomes.extend(r.answers);
        let q = store.volatile.mac_queue(addr);
        if f <= 3 {
            ensure!(
                q.len() == 1 && q[0].attempts == f && q[0].state == MacState::Pending,
                "after nack {f}: queue {:?}",
                q.iter().map(|e| (e.state, e.attempts)).collect::<Vec<_>>()
            );
        } else {
            // the still-good margin may queue a fresh request straight away
            ensure!(q.iter().all(|e| e.id != first && e.attempts == 0), "entry kept past the cap");
        }
    }
    let want = vec![
        Ok(AnsOutcome::Retry { attempts: 1 }),
        Ok(AnsOutcome::Retry { attempts: 2 }),
        Ok(AnsOutcome::Retry { attempts: 3 }),
        Ok(AnsOutcome::Dropped),
    ];
    ensure!(outcomes == want, "nack outcomes {outcomes:?}");
    ensure!(metrics.get("controller.alarm.mac_dropped") == 1, "no alarm on drop");

    // ack: removes the entry and commits the new rate
    if store.volatile.mac_queue(addr).is_empty() {
        nc.handle_mac_uplink(&up(5, 0, vec![]));
    }
    ensure!(store.volatile.mac_queue(addr).len() == 1, "no fresh request");
    send(5);
    let r = nc.handle_mac_uplink(&up(6, 5, vec![LinkAdrAns::ALL_OK.to_command()]));
    ensure!(r.answers == vec![Ok(AnsOutcome::Committed)], "ack outcome {:?}", r.answers);
    ensure!(store.volatile.mac_queue(addr).is_empty(), "acked entry still queued");
    let s = store.volatile.get_session(addr).unwrap();
    ensure!((s.adr.current_dr, s.adr.current_tx_power) == (5, 0), "committed {:?}", (s.adr.current_dr, s.adr.current_tx_power));
    Ok(format!("{} oracle cases exact; ack removes, nack retries 1..3, 4th nack drops", cases.len()))
}

// ------------------------------------------------------------ criterion 6

fn linear_r2(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

async fn sweep_shape(reports: &mut Vec<LoadReport>) -> Verdict {
    let k1 = SweepConfig::new(vec![50, 100, 150, 200, 300, 480, 560, 640], 1);
    let k2 = SweepConfig::new(vec![100, 200, 300, 400, 600, 960, 1120, 1280], 2);
    let started = Instant::now();
    let results = lorans_sim::sweep_concurrent(&[k1, k2]).await.map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let mut summary = Vec::new();
    let mut knees = Vec::new();
    for r in &results {
        reports.extend(r.points.iter().map(|p| p.report.clone()));
        let fit = r.fit.ok_or("no knee fit")?;
        let knee_nodes = r.knee_nodes().unwrap();
        let below: Vec<(f64, f64)> = r
            .points
            .iter()
            .filter(|p| p.report.offered_rate < fit.knee_x)
            .map(|p| (p.report.offered_rate, p.report.achieved_throughput))
            .collect();
        let above: Vec<f64> = r.points.iter().filter(|p| p.report.offered_rate > fit.knee_x).map(|p| p.report.achieved_throughput).collect();
        ensure!(below.len() >= 3 && above.len() >= 2, "k={}: knee {knee_nodes:.0} leaves too few points on a side", r.instances);
        let r2 = linear_r2(&below);
        ensure!(r2 >= 0.98, "k={}: below-knee R^2 {r2:.4}", r.instances);
        let plateau = above.iter().sum::<f64>() / above.len() as f64;
        for y in &above {
            ensure!((y - plateau).abs() <= 0.1 * plateau, "k={}: throughput {y:.2} vs plateau {plateau:.2}", r.instances);
        }
        let mut light = 0;
        let mut heavy = 0;
        for p in &r.points {
            let med = p.report.median_response_ms.unwrap_or(f64::INFINITY);
            if (p.nodes as f64) <= 0.5 * knee_nodes {
                ensure!(med < 500.0, "k={} n={}: median {med} ms at light load", r.instances, p.nodes);
                light += 1;
            }
            if (p.nodes as f64) > 1.2 * knee_nodes {
                ensure!(med > 5000.0, "k={} n={}: median {med} ms beyond the knee", r.instances, p.nodes);
                heavy += 1;
            }
        }
        ensure!(light > 0 && heavy > 0, "k={}: no points to test latency ({light} light, {heavy} heavy)", r.instances);
        knees.push(knee_nodes);
        summary.push(format!(
            "k={} knee {knee_nodes:.0} nodes, R^2 {r2:.4} (hinge {:.4}), plateau {plateau:.2}/s",
            r.instances, fit.r_squared
        ));
    }
    let ratio = knees[1] / knees[0];
    ensure!(ratio >= 1.6, "knee ratio {ratio:.2}");
    ensure!(elapsed <= Duration::from_secs(15 * 60), "sweep took {elapsed:?}");
    Ok(format!("{}; knee ratio {ratio:.2}; {:.0} s", summary.join("; "), elapsed.as_secs_f64()))
}

// ------------------------------------------------------------ criterion 7

async fn parameter_defaults(mut reports: Vec<LoadReport>) -> Verdict {
    let h = server(1).await;
    let mut cfg = ScenarioConfig::new(ServerTarget {
        udp: h.udp_addr,
        admin_url: h.admin_url(),
        token: None,
    });
    ensure!((cfg.period_s, cfg.response_timeout_s) == (40.0, 5.0), "defaults are {} s / {} s", cfg.period_s, cfg.response_timeout_s);
    cfg.nodes = 3;
    cfg.duration_s = 2.0;
    reports.push(run_scenario(cfg.clone()).await.map_err(|e| e.to_string())?);
    cfg.nodes = 0;
    cfg.id_prefix += 1;
    reports.push(run_scenario(cfg).await.map_err(|e| e.to_string())?);
    for r in &reports {
        let v = r.to_json();
        ensure!(v["period_s"] == 40.0 && v["response_timeout_s"] == 5.0, "report echoes {} / {}", v["period_s"], v["response_timeout_s"]);
    }
    Ok(format!("40 s / 5 s echoed in all {} reports", reports.len()))
}

// ------------------------------------------------------------ criterion 8

async fn downlink_injection() -> Verdict {
    let h = server(1).await;
    let client = AdminClient::new(h.admin_url(), None);
    let router = Router::new();
    let gw = gateway(&h, &client, Eui64(0x00DD_0000_0000_0008), &router).await?;
    let keys = SessionKeys {
        nwk_skey: AesKey([0x31; 16]),
        app_skey: AesKey([0x32; 16]),
    };
    let dev_addr = DevAddr(0x2600_0808);
    let dev_eui = Eui64(0x00EE_0000_0000_0808);
    client
        .add_device(&DeviceInput {
            dev_eui: dev_eui.to_string(),
            activation: Activation::Abp,
            dev_addr: Some(dev_addr.to_string()),
            nwk_skey: Some(key_hex(&keys.nwk_skey)),
            app_skey: Some(key_hex(&keys.app_skey)),
            ..DeviceInput::default()
        })
        .await
        .map_err(|e| e.to_string())?;
    let mut cfg = NodeConfig::new(dev_eui, Credentials::Abp { dev_addr, keys });
    cfg.period_ms = 0;
    cfg.adr = false;
    let mut node = VirtualNode::new(cfg, Region::eu433());
    let (tx, mut rx) = unbounded_channel();
    router.set_joined(dev_eui, dev_addr, tx);
    let t0 = Instant::now();

    let up = node.step(ms(t0)).unwrap();
    air(&gw, &up, -80, 7.0).await.ok_or("uplink dropped")?;
    await_downlink(&mut node, &mut rx, t0, Duration::from_secs(5)).await.ok_or("no ack")?;
    let before = node.session.as_ref().unwrap().last_fcnt_down.ok_or("no downlink counter")?;
    node.take_events();

    let payload = b"open the valve".to_vec();
    client
        .downlink(
            dev_eui,
            &DownlinkInput {
                fport: 7,
                payload: base64::engine::general_purpose::STANDARD.encode(&payload),
                confirmed: false,
            },
        )
        .await
        .map_err(|e| e.to_string())?;

    let up = node.step(ms(t0)).unwrap();
    let up_tmst = air(&gw, &up, -80, 7.0).await.ok_or("uplink dropped")?;
    let dl = await_downlink(&mut node, &mut rx, t0, Duration::from_secs(5)).await.ok_or("no downlink")?;
    let rx1 = up_tmst.wrapping_add(h.config.central.rx1_delay_s * 1_000_000);
    ensure!(dl.tmst == Some(rx1) && !dl.late, "downlink at {:?} (late {}), RX1 is {rx1}", dl.tmst, dl.late);
    let got = node.take_events().into_iter().find_map(|e| match e {
        NodeEvent::AppData { fport, payload, fcnt_down } => Some((fport, payload, fcnt_down)),
        _ => None,
    });
    let (fport, plain, fcnt_down) = got.ok_or("downlink carried no application data")?;
    ensure!(fport == 7 && plain == payload, "decrypted port {fport} payload {plain:02x?}");
    ensure!(fcnt_down == before + 1, "fcnt_down {before} -> {fcnt_down}");
    Ok(format!("delivered in RX1 of the next uplink, {} bytes decrypt intact, fcnt_down {before} -> {fcnt_down}", plain.len()))
}

// ------------------------------------------------------------------ driver

#[test]
fn acceptance() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let mut reports = Vec::new();
    let results: Vec<(&str, Verdict)> = vec![
        ("1 codec conformance", codec_conformance()),
        ("2 closed-loop OTAA", rt.block_on(otaa_joins())),
        ("3 dedup and gateway selection", rt.block_on(dedup_and_selection())),
        ("4 round-robin balance", round_robin_and_failover()),
        ("5 ADR workflow", adr_workflow()),
        ("6 experiment shape", rt.block_on(sweep_shape(&mut reports))),
        ("7 parameter defaults", rt.block_on(parameter_defaults(reports))),
        ("8 downlink injection", rt.block_on(downlink_injection())),
    ];
    // written to the raw handle so the lines show up even when output is captured
    let mut err = std::io::stderr().lock();
    let mut failed = 0;
    for (name, verdict) in &results {
        match verdict {
            Ok(detail) => writeln!(err, "ACCEPTANCE {name}: PASS ({detail})").unwrap(),
            Err(why) => {
                failed += 1;
                writeln!(err, "ACCEPTANCE {name}: FAIL ({why})").unwrap();
            }
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
