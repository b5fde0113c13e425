//! A virtual end device: a pure state machine driven by `step(now)` and
//! `handle_downlink(frame, now)`, with no I/O and no clock of its own.
//!
//! Behaviour is a closed loop: send, wait for the network's answer (or
//! give up), wait one period, send again.

use std::collections::VecDeque;

use lorans_codec::mac::{self, DEV_STATUS, DUTY_CYCLE, LINK_ADR, RX_PARAM_SETUP, RX_TIMING_SETUP};
use lorans_codec::phy::data_frame;
use lorans_codec::{
    decrypt_join_accept, derive_session_keys, parse_mac_commands, parse_phy, serialize_mac_commands, serialize_phy, AesKey, Body, DevAddr,
    Direction, Eui64, FCtrl, JoinRequestPayload, LinkAdrAns, LinkAdrReq, MType, MacCommand, Mhdr, PhyPayload, Region, SessionKeys,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// How the node answers a LinkADRReq.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdrPolicy {
    Accept,
    /// Reply with these status bits and keep the current settings.
    Reject(LinkAdrAns),
}

#[derive(Debug, Clone)]
pub enum Credentials {
    Otaa { app_eui: Eui64, app_key: AesKey },
    Abp { dev_addr: DevAddr, keys: SessionKeys },
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub dev_eui: Eui64,
    pub credentials: Credentials,
    pub period_ms: u64,
    /// An answer later than this counts as a failure.
    pub response_timeout_ms: u64,
    /// Stop waiting for an answer after this long.
    pub give_up_ms: u64,
    pub join_retry_ms: u64,
    pub confirmed: bool,
    pub fport: u8,
    pub payload_len: usize,
    pub initial_dr: u8,
    pub adr: bool,
    pub adr_policy: AdrPolicy,
    /// First transmission time.
    pub start_at_ms: u64,
    pub seed: u64,
}

impl NodeConfig {
    pub fn new(dev_eui: Eui64, credentials: Credentials) -> Self {
        NodeConfig {
            dev_eui,
            credentials,
            period_ms: 40_000,
            response_timeout_ms: 5_000,
            give_up_ms: 60_000,
            join_retry_ms: 10_000,
            confirmed: true,
            fport: 1,
            payload_len: 8,
            initial_dr: 0,
            adr: true,
            adr_policy: AdrPolicy::Accept,
            start_at_ms: 0,
            seed: dev_eui.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    pub dev_addr: DevAddr,
    pub keys: SessionKeys,
    /// Counter of the next uplink.
    pub fcnt_up: u32,
    /// Counter of the last accepted downlink.
    pub last_fcnt_down: Option<u32>,
    pub rx1_dr_offset: u8,
    pub rx2_dr: u8,
}

/// A frame ready to leave the radio.
#[derive(Debug, Clone)]
pub struct Transmission {
    pub phy: Vec<u8>,
    pub dr: u8,
    pub freq_mhz: f64,
    pub kind: TxKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxKind {
    Join { dev_nonce: u16 },
    Data { fcnt: u32, confirmed: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeEvent {
    Sent { kind: TxKind, at_ms: u64 },
    Joined { dev_addr: DevAddr, at_ms: u64, latency_ms: u64 },
    JoinTimedOut { dev_nonce: u16, at_ms: u64 },
    /// The network answered a confirmed uplink.
    Answered { fcnt: u32, sent_at_ms: u64, latency_ms: u64 },
    GaveUp { fcnt: u32, sent_at_ms: u64 },
    AppData { fport: u8, payload: Vec<u8>, fcnt_down: u32 },
    AdrApplied { dr: u8, tx_power: u8 },
    AdrRejected(LinkAdrAns),
    FcntDownGap { expected: u32, got: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DownlinkResult {
    Accepted,
    /// Some other device's frame; not an error on a shared channel.
    NotForMe,
    Rejected(&'static str),
}

#[derive(Debug, Clone, Copy)]
enum Awaiting {
    Join { dev_nonce: u16, since_ms: u64 },
    Ack { fcnt: u32, since_ms: u64 },
}

#[derive(Debug)]
pub struct VirtualNode {
    pub cfg: NodeConfig,
    pub region: Region,
    pub session: Option<Session>,
    pub dr: u8,
    pub tx_power: u8,
    awaiting: Option<Awaiting>,
    next_tx_ms: u64,
    dev_nonce: u16,
    pending_answers: Vec<MacCommand>,
    /// Set by a confirmed downlink; acknowledged on the next uplink.
    ack_downlink: bool,
    pub last_payload: Vec<u8>,
    events: VecDeque<NodeEvent>,
    rng: StdRng,
}

impl VirtualNode {
    pub fn new(cfg: NodeConfig, region: Region) -> Self {
        let mut rng = StdRng::seed_from_u64(cfg.seed);
        let session = match &cfg.credentials {
            Credentials::Abp { dev_addr, keys } => Some(Session {
                dev_addr: *dev_addr,
                keys: *keys,
                fcnt_up: 0,
                last_fcnt_down: None,
                rx1_dr_offset: 0,
                rx2_dr: region.rx2_dr,
            }),
            Credentials::Otaa { .. } => None,
        };
        VirtualNode {
            dr: cfg.initial_dr.min(region.max_dr()),
            tx_power: 0,
            next_tx_ms: cfg.start_at_ms,
            dev_nonce: rng.random(),
            region,
            session,
            awaiting: None,
            pending_answers: Vec::new(),
            ack_downlink: false,
            last_payload: Vec::new(),
            events: VecDeque::new(),
            rng,
            cfg,
        }
    }

    pub fn dev_eui(&self) -> Eui64 {
        self.cfg.dev_eui
    }

    pub fn is_joined(&self) -> bool {
        self.session.is_some()
    }

    /// Waiting for a join accept.
    pub fn is_joining(&self) -> bool {
        matches!(self.awaiting, Some(Awaiting::Join { .. }))
    }

    pub fn take_events(&mut self) -> Vec<NodeEvent> {
        self.events.drain(..).collect()
    }

    /// When `step` next has something to do.
    pub fn next_wake_ms(&self) -> u64 {
        match self.awaiting {
            Some(Awaiting::Join { since_ms, .. }) => since_ms + self.cfg.join_retry_ms,
            Some(Awaiting::Ack { since_ms, .. }) => since_ms + self.cfg.give_up_ms,
            None => self.next_tx_ms,
        }
    }

    /// Advance to `now_ms`; returns a frame to send if one is due.
    pub fn step(&mut self, now_ms: u64) -> Option<Transmission> {
        match self.awaiting {
            Some(Awaiting::Join { dev_nonce, since_ms }) if now_ms >= since_ms + self.cfg.join_retry_ms => {
                self.awaiting = None;
                self.events.push_back(NodeEvent::JoinTimedOut { dev_nonce, at_ms: now_ms });
                self.next_tx_ms = now_ms;
            }
            Some(Awaiting::Ack { fcnt, since_ms }) if now_ms >= since_ms + self.cfg.give_up_ms => {
                self.awaiting = None;
                self.events.push_back(NodeEvent::GaveUp { fcnt, sent_at_ms: since_ms });
                self.next_tx_ms = now_ms + self.cfg.period_ms;
            }
            Some(_) => return None,
            None => {}
        }
        if now_ms < self.next_tx_ms {
            return None;
        }
        let tx = if self.session.is_some() { self.data_uplink(now_ms) } else { self.join_request(now_ms) };
        self.events.push_back(NodeEvent::Sent { kind: tx.kind, at_ms: now_ms });
        Some(tx)
    }

    fn channel(&mut self) -> f64 {
        let chans = &self.region.uplink_channels_mhz;
        chans[self.rng.random_range(0..chans.len())]
    }

    fn join_request(&mut self, now_ms: u64) -> Transmission {
        let Credentials::Otaa { app_eui, app_key } = self.cfg.credentials.clone() else {
            unreachable!("ABP nodes start with a session")
        };
        self.dev_nonce = self.dev_nonce.wrapping_add(1);
        let mut frame = PhyPayload {
            mhdr: Mhdr::new(MType::JoinRequest),
            body: Body::JoinRequest(JoinRequestPayload {
                app_eui,
                dev_eui: self.cfg.dev_eui,
                dev_nonce: self.dev_nonce,
            }),
            mic: [0; 4],
        };
        frame.sign_join(&app_key).expect("join request signs");
        self.awaiting = Some(Awaiting::Join {
            dev_nonce: self.dev_nonce,
            since_ms: now_ms,
        });
        Transmission {
            phy: serialize_phy(&frame).expect("join request serializes"),
            dr: self.dr,
            freq_mhz: self.channel(),
            kind: TxKind::Join { dev_nonce: self.dev_nonce },
        }
    }

    fn data_uplink(&mut self, now_ms: u64) -> Transmission {
        let confirmed = self.cfg.confirmed;
        let mut payload = vec![0u8; self.cfg.payload_len];
        self.rng.fill(&mut payload[..]);
        let s = self.session.as_mut().expect("session");
        let fcnt = s.fcnt_up;
        s.fcnt_up = s.fcnt_up.wrapping_add(1);

        let answers = std::mem::take(&mut self.pending_answers);
        let fopts = serialize_mac_commands(&answers);
        // answers that do not fit FOpts are dropped; the network retries
        let fopts = if fopts.len() <= 15 { fopts } else { Vec::new() };
        let mtype = if confirmed { MType::ConfirmedDataUp } else { MType::UnconfirmedDataUp };
        let fctrl = FCtrl {
            adr: self.cfg.adr,
            ack: std::mem::take(&mut self.ack_downlink),
            ..FCtrl::default()
        };
        let frm = lorans_codec::crypt_frm(&payload, &s.keys.app_skey, s.dev_addr, fcnt, Direction::Uplink);
        let mut frame = data_frame(mtype, s.dev_addr, fctrl, fcnt as u16, fopts, Some(self.cfg.fport), frm);
        frame.sign_data(&s.keys.nwk_skey, fcnt).expect("data frame signs");
        self.last_payload = payload;

        if confirmed {
            self.awaiting = Some(Awaiting::Ack { fcnt, since_ms: now_ms });
        } else {
            self.next_tx_ms = now_ms + self.cfg.period_ms;
        }
        Transmission {
            phy: serialize_phy(&frame).expect("data frame serializes"),
            dr: self.dr,
            freq_mhz: self.channel(),
            kind: TxKind::Data { fcnt, confirmed },
        }
    }

    /// Process a frame heard in a receive window.
    pub fn handle_downlink(&mut self, raw: &[u8], now_ms: u64) -> DownlinkResult {
        let Some(&mhdr) = raw.first() else {
            return DownlinkResult::Rejected("empty frame");
        };
        if mhdr >> 5 == MType::JoinAccept.bits() {
            return self.handle_join_accept(raw, now_ms);
        }
        let Ok(frame) = parse_phy(raw, Direction::Downlink) else {
            return DownlinkResult::Rejected("malformed frame");
        };
        let Some(d) = frame.data() else {
            return DownlinkResult::Rejected("not a data frame");
        };
        let Some(s) = self.session.as_mut() else {
            return DownlinkResult::NotForMe;
        };
        if d.dev_addr != s.dev_addr {
            return DownlinkResult::NotForMe;
        }
        let expected = s.last_fcnt_down.map_or(0, |c| c.wrapping_add(1));
        let mut fcnt32 = (expected & 0xffff_0000) | d.fcnt as u32;
        if fcnt32 < expected {
            fcnt32 = fcnt32.wrapping_add(0x1_0000);
        }
        if !frame.verify_data(&s.keys.nwk_skey, fcnt32) {
            return DownlinkResult::Rejected("bad MIC");
        }
        if fcnt32 != expected {
            self.events.push_back(NodeEvent::FcntDownGap { expected, got: fcnt32 });
        }
        s.last_fcnt_down = Some(fcnt32);
        let (dev_addr, keys) = (s.dev_addr, s.keys);

        let mut commands = match parse_mac_commands(&d.fopts, Direction::Downlink) {
            Ok(c) => c,
            Err(e) => e.decoded,
        };
        match d.fport {
            Some(0) => {
                let plain = lorans_codec::crypt_frm(&d.frm_payload, &keys.nwk_skey, dev_addr, fcnt32, Direction::Downlink);
                match parse_mac_commands(&plain, Direction::Downlink) {
                    Ok(c) => commands.extend(c),
                    Err(e) => commands.extend(e.decoded),
                }
            }
            Some(port) => {
                let plain = lorans_codec::crypt_frm(&d.frm_payload, &keys.app_skey, dev_addr, fcnt32, Direction::Downlink);
                self.events.push_back(NodeEvent::AppData {
                    fport: port,
                    payload: plain,
                    fcnt_down: fcnt32,
                });
            }
            None => {}
        }
        for cmd in &commands {
            self.apply_mac(cmd);
        }
        if frame.mhdr.mtype == MType::ConfirmedDataDown {
            self.ack_downlink = true;
        }
        if d.fctrl.ack {
            if let Some(Awaiting::Ack { fcnt, since_ms }) = self.awaiting {
                self.awaiting = None;
                self.events.push_back(NodeEvent::Answered {
                    fcnt,
                    sent_at_ms: since_ms,
                    latency_ms: now_ms.saturating_sub(since_ms),
                });
                self.next_tx_ms = now_ms + self.cfg.period_ms;
            }
        }
        DownlinkResult::Accepted
    }

    fn apply_mac(&mut self, cmd: &MacCommand) {
        match cmd.cid {
            LINK_ADR => {
                let Some(req) = LinkAdrReq::from_command(cmd) else { return };
                let ans = match self.cfg.adr_policy {
                    AdrPolicy::Accept if req.data_rate <= self.region.max_dr() && req.tx_power <= self.region.max_tx_power_index => {
                        self.dr = req.data_rate;
                        self.tx_power = req.tx_power;
                        self.events.push_back(NodeEvent::AdrApplied {
                            dr: req.data_rate,
                            tx_power: req.tx_power,
                        });
                        LinkAdrAns::ALL_OK
                    }
                    AdrPolicy::Accept => LinkAdrAns {
                        power_ack: req.tx_power <= self.region.max_tx_power_index,
                        data_rate_ack: req.data_rate <= self.region.max_dr(),
                        channel_mask_ack: true,
                    },
                    AdrPolicy::Reject(ans) => ans,
                };
                if !ans.is_ok() {
                    self.events.push_back(NodeEvent::AdrRejected(ans));
                }
                self.pending_answers.push(ans.to_command());
            }
            DEV_STATUS => {
                // battery 255: unable to measure; margin 10 dB
                self.pending_answers.push(MacCommand::new(DEV_STATUS, vec![255, 10]));
            }
            DUTY_CYCLE => self.pending_answers.push(MacCommand::new(DUTY_CYCLE, vec![])),
            RX_PARAM_SETUP => self.pending_answers.push(MacCommand::new(RX_PARAM_SETUP, vec![0x07])),
            RX_TIMING_SETUP => self.pending_answers.push(MacCommand::new(RX_TIMING_SETUP, vec![])),
            mac::LINK_CHECK => {}
            _ => {}
        }
    }

    fn handle_join_accept(&mut self, raw: &[u8], now_ms: u64) -> DownlinkResult {
        let Some(Awaiting::Join { dev_nonce, since_ms }) = self.awaiting else {
            return DownlinkResult::NotForMe;
        };
        let Credentials::Otaa { app_key, .. } = &self.cfg.credentials else {
            return DownlinkResult::NotForMe;
        };
        let Ok(body) = decrypt_join_accept(&raw[1..], app_key) else {
            return DownlinkResult::Rejected("bad join accept length");
        };
        let mut plain = vec![raw[0]];
        plain.extend_from_slice(&body);
        let Ok(frame) = parse_phy(&plain, Direction::Downlink) else {
            return DownlinkResult::Rejected("malformed join accept");
        };
        // someone else's accept decrypts to noise and fails the MIC
        if !frame.verify_join(app_key) {
            return DownlinkResult::NotForMe;
        }
        let Some(ja) = frame.join_accept() else {
            return DownlinkResult::Rejected("not a join accept");
        };
        let keys = derive_session_keys(app_key, ja.app_nonce, ja.net_id, dev_nonce);
        self.session = Some(Session {
            dev_addr: ja.dev_addr,
            keys,
            fcnt_up: 0,
            last_fcnt_down: None,
            rx1_dr_offset: ja.rx1_dr_offset(),
            rx2_dr: ja.rx2_dr(),
        });
        self.awaiting = None;
        self.pending_answers.clear();
        self.events.push_back(NodeEvent::Joined {
            dev_addr: ja.dev_addr,
            at_ms: now_ms,
            latency_ms: now_ms.saturating_sub(since_ms),
        });
        self.next_tx_ms = now_ms;
        DownlinkResult::Accepted
    }
}

/// `step` a node at `now_ms`; the form used by the scheduler.
pub fn node_step(node: &mut VirtualNode, now_ms: u64) -> Option<Transmission> {
    node.step(now_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lorans_codec::mac::dev_status_req;
    use lorans_codec::{encrypt_join_accept, JoinAcceptPayload};

    fn keys() -> SessionKeys {
        SessionKeys {
            nwk_skey: AesKey([1; 16]),
            app_skey: AesKey([2; 16]),
        }
    }

    fn abp() -> VirtualNode {
        let cfg = NodeConfig::new(
            Eui64(0xAA),
            Credentials::Abp {
                dev_addr: DevAddr(0x2600_0001),
                keys: keys(),
            },
        );
        VirtualNode::new(cfg, Region::eu433())
    }

    fn downlink(fcnt: u32, ack: bool, fopts: Vec<u8>, port: Option<(u8, &[u8])>) -> Vec<u8> {
        let k = keys();
        let addr = DevAddr(0x2600_0001);
        let (fport, frm) = match port {
            Some((p, data)) => {
                let key = if p == 0 { &k.nwk_skey } else { &k.app_skey };
                (Some(p), lorans_codec::crypt_frm(data, key, addr, fcnt, Direction::Downlink))
            }
            None => (None, vec![]),
        };
        let fctrl = FCtrl { ack, ..FCtrl::default() };
        let mut f = data_frame(MType::UnconfirmedDataDown, addr, fctrl, fcnt as u16, fopts, fport, frm);
        f.sign_data(&k.nwk_skey, fcnt).unwrap();
        serialize_phy(&f).unwrap()
    }

    #[test]
    fn closed_loop_in_virtual_time() {
        let mut n = abp();
        assert_eq!(n.next_wake_ms(), 0);
        let tx = node_step(&mut n, 0).unwrap();
        assert_eq!(tx.kind, TxKind::Data { fcnt: 0, confirmed: true });
        // waiting: nothing to send
        assert!(n.step(1000).is_none());
        assert_eq!(n.handle_downlink(&downlink(0, true, vec![], None), 1200), DownlinkResult::Accepted);
        assert!(n.step(1201).is_none());
        assert_eq!(n.next_wake_ms(), 41_200);
        let tx = n.step(41_200).unwrap();
        assert_eq!(tx.kind, TxKind::Data { fcnt: 1, confirmed: true });
        // no answer: give up after 60 s
        assert!(n.step(101_199).is_none());
        assert!(n.step(101_200).is_none());
        let ev = n.take_events();
        assert!(ev.contains(&NodeEvent::Answered {
            fcnt: 0,
            sent_at_ms: 0,
            latency_ms: 1200
        }));
        assert!(ev.contains(&NodeEvent::GaveUp {
            fcnt: 1,
            sent_at_ms: 41_200
        }));
        assert_eq!(n.next_wake_ms(), 141_200);
    }

    #[test]
    fn uplink_decrypts_and_verifies() {
        let mut n = abp();
        let tx = n.step(0).unwrap();
        let f = parse_phy(&tx.phy, Direction::Uplink).unwrap();
        assert!(f.verify_data(&keys().nwk_skey, 0));
        let d = f.data().unwrap();
        let plain = lorans_codec::crypt_frm(&d.frm_payload, &keys().app_skey, d.dev_addr, 0, Direction::Uplink);
        assert_eq!(plain, n.last_payload);
        assert!(d.fctrl.adr);
    }

    #[test]
    fn link_adr_applied_and_answered() {
        let mut n = abp();
        n.step(0);
        let req = LinkAdrReq {
            data_rate: 2,
            tx_power: 1,
            ch_mask: 0x0007,
            redundancy: 1,
        };
        let fopts = serialize_mac_commands(&[req.to_command(), dev_status_req()]);
        n.handle_downlink(&downlink(0, true, fopts, None), 500);
        assert_eq!((n.dr, n.tx_power), (2, 1));
        let tx = n.step(40_500).unwrap();
        assert_eq!(n.region.datr(tx.dr).unwrap().to_string(), "SF10BW125");
        let f = parse_phy(&tx.phy, Direction::Uplink).unwrap();
        let cmds = parse_mac_commands(&f.data().unwrap().fopts, Direction::Uplink).unwrap();
        assert_eq!(LinkAdrAns::from_command(&cmds[0]), Some(LinkAdrAns::ALL_OK));
        assert_eq!(cmds[1], MacCommand::new(DEV_STATUS, vec![255, 10]));
    }

    #[test]
    fn reject_policy_keeps_settings() {
        let mut n = abp();
        let nack = LinkAdrAns {
            power_ack: true,
            data_rate_ack: false,
            channel_mask_ack: true,
        };
        n.cfg.adr_policy = AdrPolicy::Reject(nack);
        n.step(0);
        let req = LinkAdrReq {
            data_rate: 5,
            tx_power: 0,
            ch_mask: 7,
            redundancy: 1,
        };
        n.handle_downlink(&downlink(0, true, serialize_mac_commands(&[req.to_command()]), None), 10);
        assert_eq!(n.dr, 0);
        let tx = n.step(50_000).unwrap();
        let f = parse_phy(&tx.phy, Direction::Uplink).unwrap();
        let cmds = parse_mac_commands(&f.data().unwrap().fopts, Direction::Uplink).unwrap();
        assert_eq!(LinkAdrAns::from_command(&cmds[0]), Some(nack));
    }

    #[test]
    fn fcnt_down_tracking() {
        let mut n = abp();
        n.step(0);
        assert_eq!(n.handle_downlink(&downlink(0, false, vec![], Some((5, b"hi"))), 1), DownlinkResult::Accepted);
        assert_eq!(n.handle_downlink(&downlink(3, false, vec![], None), 2), DownlinkResult::Accepted);
        // replay of an old counter widens into the next epoch and fails the MIC
        assert_eq!(n.handle_downlink(&downlink(3, false, vec![], None), 3), DownlinkResult::Rejected("bad MIC"));
        let ev = n.take_events();
        assert!(ev.contains(&NodeEvent::AppData {
            fport: 5,
            payload: b"hi".to_vec(),
            fcnt_down: 0
        }));
        assert!(ev.contains(&NodeEvent::FcntDownGap { expected: 1, got: 3 }));
        assert_eq!(n.session.as_ref().unwrap().last_fcnt_down, Some(3));
    }

    #[test]
    fn otaa_join_then_data() {
        let app_key = AesKey([9; 16]);
        let cfg = NodeConfig::new(
            Eui64(0xBB),
            Credentials::Otaa {
                app_eui: Eui64(1),
                app_key,
            },
        );
        let mut n = VirtualNode::new(cfg, Region::eu433());
        let tx = n.step(0).unwrap();
        let TxKind::Join { dev_nonce } = tx.kind else { panic!() };
        let jr = parse_phy(&tx.phy, Direction::Uplink).unwrap();
        assert!(jr.verify_join(&app_key));
        assert!(n.is_joining());

        let mut ja = PhyPayload {
            mhdr: Mhdr::new(MType::JoinAccept),
            body: Body::JoinAccept(JoinAcceptPayload {
                app_nonce: 0x123,
                net_id: 0x13,
                dev_addr: DevAddr(0x2600_0042),
                dl_settings: JoinAcceptPayload::dl_settings_for(1, 0),
                rx_delay: 1,
                cf_list: None,
            }),
            mic: [0; 4],
        };
        ja.sign_join(&app_key).unwrap();
        let plain = serialize_phy(&ja).unwrap();
        let mut wire = vec![plain[0]];
        wire.extend(encrypt_join_accept(&plain[1..], &app_key).unwrap());

        // a different key sees noise
        let mut other = VirtualNode::new(
            NodeConfig::new(
                Eui64(0xCC),
                Credentials::Otaa {
                    app_eui: Eui64(1),
                    app_key: AesKey([8; 16]),
                },
            ),
            Region::eu433(),
        );
        other.step(0);
        assert_eq!(other.handle_downlink(&wire, 10), DownlinkResult::NotForMe);

        assert_eq!(n.handle_downlink(&wire, 5000), DownlinkResult::Accepted);
        let s = n.session.clone().unwrap();
        assert_eq!(s.dev_addr, DevAddr(0x2600_0042));
        assert_eq!(s.keys, derive_session_keys(&app_key, 0x123, 0x13, dev_nonce));
        assert_eq!(s.rx1_dr_offset, 1);
        let tx = n.step(5000).unwrap();
        assert_eq!(tx.kind, TxKind::Data { fcnt: 0, confirmed: true });
    }

    #[test]
    fn join_retry_uses_fresh_nonce() {
        let cfg = NodeConfig::new(
            Eui64(0xBB),
            Credentials::Otaa {
                app_eui: Eui64(1),
                app_key: AesKey([9; 16]),
            },
        );
        let mut n = VirtualNode::new(cfg, Region::eu433());
        let a = n.step(0).unwrap().kind;
        assert!(n.step(9_999).is_none());
        let b = n.step(10_000).unwrap().kind;
        assert_ne!(a, b);
    }
}
