//! Network controller: adaptive data rate and the MAC command queue.

use std::sync::Arc;
use std::time::Instant;

use lorans_bus::{record, Broker, Subscription};
use lorans_codec::mac::{self, LinkAdrAns, LinkAdrReq, MacCommand};
use lorans_codec::{parse_mac_commands, DevAddr, Direction, Region};

use crate::config::ControllerConfig;
use crate::metrics::Metrics;
use crate::model::{AdrState, DevStatus, DeviceSession, MacQueueEntry, MacState};
use crate::store::Store;
use crate::topics::{self, ControllerCmd, MacUplink};

/// Required SNR (dB) to demodulate at a spreading factor.
pub fn demod_floor_db(sf: u8) -> f64 {
    match sf {
        7 => -7.5,
        8 => -10.0,
        9 => -12.5,
        10 => -15.0,
        11 => -17.5,
        _ => -20.0,
    }
}

/// Pure ADR decision. Returns a request when the target DR or TX power
/// index differs from the committed one.
pub fn run_adr(state: &AdrState, installation_margin_db: f64, redundancy: u8, region: &Region) -> Option<LinkAdrReq> {
    let max_snr = state.history.iter().map(|(snr, _)| *snr).reduce(f64::max)?;
    let sf = region.datr(state.current_dr)?.sf;
    let margin = max_snr - demod_floor_db(sf) - installation_margin_db;
    let mut steps = (margin / 3.0).floor() as i64;
    let mut dr = state.current_dr;
    let mut power = state.current_tx_power;
    while steps > 0 && dr < region.max_dr() {
        dr += 1;
        steps -= 1;
    }
    while steps > 0 && power < region.max_tx_power_index {
        power += 1;
        steps -= 1;
    }
    while steps < 0 && power > 0 {
        power -= 1;
        steps += 1;
    }
    if (dr, power) == (state.current_dr, state.current_tx_power) {
        return None;
    }
    Some(LinkAdrReq {
        data_rate: dr,
        tx_power: power,
        ch_mask: region.default_ch_mask,
        redundancy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnsOutcome {
    /// The request was applied; state committed.
    Committed,
    /// Rejected; will be retried.
    Retry { attempts: u32 },
    /// Rejected too often; dropped.
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("answer with CID {0:#04x} matches no outstanding request")]
pub struct UnmatchedAns(pub u8);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MacReport {
    pub answers: Vec<Result<AnsOutcome, UnmatchedAns>>,
    /// Sent requests that got no answer in this uplink.
    pub unanswered: usize,
    pub adr_request: Option<LinkAdrReq>,
}

pub struct NetworkController {
    store: Store,
    bus: Broker,
    metrics: Arc<Metrics>,
    cfg: ControllerConfig,
    region: Region,
}

impl NetworkController {
    pub fn new(store: Store, bus: Broker, metrics: Arc<Metrics>, cfg: ControllerConfig, region: Region) -> Self {
        NetworkController {
            store,
            bus,
            metrics,
            cfg,
            region,
        }
    }

    pub fn handle_mac_uplink(&self, m: &MacUplink) -> MacReport {
        let mut report = MacReport::default();
        let cmds = match parse_mac_commands(&m.commands, Direction::Uplink) {
            Ok(c) => c,
            Err(e) => {
                self.metrics.inc("controller.mac_parse_errors");
                e.decoded
            }
        };
        let mut answered = Vec::new();
        for cmd in &cmds {
            match cmd.cid {
                mac::LINK_ADR | mac::DEV_STATUS | mac::DUTY_CYCLE => {
                    let r = self.handle_mac_ans(m.dev_addr, cmd, &mut answered);
                    if r.is_err() {
                        self.metrics.inc("controller.unmatched_ans");
                    }
                    report.answers.push(r);
                }
                _ => self.metrics.inc("controller.mac_ignored"),
            }
        }
        report.unanswered = self.expire_unanswered(m.dev_addr, m.fcnt32, &answered);

        if m.adr {
            report.adr_request = self.ingest_uplink(m);
        }
        report
    }

    /// Apply one answer to the oldest matching `Sent` entry.
    pub fn handle_mac_ans(&self, dev_addr: DevAddr, ans: &MacCommand, answered: &mut Vec<u64>) -> Result<AnsOutcome, UnmatchedAns> {
        let mut found: Option<MacQueueEntry> = None;
        self.store.volatile.update_mac_queue(dev_addr, &mut |q: &mut Vec<MacQueueEntry>| {
            if let Some(i) = q.iter().position(|e| e.state == MacState::Sent && e.cmd.cid == ans.cid && !answered.contains(&e.id)) {
                found = Some(q[i].clone());
            }
        });
        let entry = found.ok_or(UnmatchedAns(ans.cid))?;
        answered.push(entry.id);
        match ans.cid {
            mac::LINK_ADR => {
                let ok = LinkAdrAns::from_command(ans).is_some_and(|a| a.is_ok());
                if ok {
                    self.remove(dev_addr, entry.id);
                    if let Some(req) = LinkAdrReq::from_command(&entry.cmd) {
                        let _ = self.store.volatile.update_session(dev_addr, &mut |s: &mut DeviceSession| {
                            s.adr.current_dr = req.data_rate;
                            s.adr.current_tx_power = req.tx_power;
                        });
                    }
                    self.metrics.inc("controller.adr_committed");
                    Ok(AnsOutcome::Committed)
                } else {
                    Ok(self.fail(dev_addr, entry.id))
                }
            }
            mac::DEV_STATUS => {
                self.remove(dev_addr, entry.id);
                if let [battery, margin] = ans.payload[..] {
                    // 6-bit two's complement SNR margin
                    let margin = ((margin << 2) as i8) >> 2;
                    let _ = self.store.volatile.update_session(dev_addr, &mut |s: &mut DeviceSession| {
                        s.adr.dev_status = Some(DevStatus { battery, margin });
                    });
                }
                Ok(AnsOutcome::Committed)
            }
            _ => {
                self.remove(dev_addr, entry.id);
                Ok(AnsOutcome::Committed)
            }
        }
    }

    fn remove(&self, dev_addr: DevAddr, id: u64) {
        self.store.volatile.update_mac_queue(dev_addr, &mut |q: &mut Vec<MacQueueEntry>| q.retain(|e| e.id != id));
    }

    /// Count a failed attempt: back to `Pending`, or dropped past the limit.
    fn fail(&self, dev_addr: DevAddr, id: u64) -> AnsOutcome {
        let max = self.cfg.max_attempts;
        let mut outcome = AnsOutcome::Dropped;
        self.store.volatile.update_mac_queue(dev_addr, &mut |q: &mut Vec<MacQueueEntry>| {
            if let Some(i) = q.iter().position(|e| e.id == id) {
                q[i].attempts += 1;
                if q[i].attempts > max {
                    q.remove(i);
                } else {
                    q[i].state = MacState::Pending;
                    q[i].sent_with_fcnt_up = None;
                    outcome = AnsOutcome::Retry { attempts: q[i].attempts };
                }
            }
        });
        if outcome == AnsOutcome::Dropped {
            self.metrics.inc("controller.alarm.mac_dropped");
        } else {
            self.metrics.inc("controller.mac_retries");
        }
        outcome
    }

    /// Entries sent with an earlier uplink and not answered now have failed.
    fn expire_unanswered(&self, dev_addr: DevAddr, fcnt_up: u32, answered: &[u64]) -> usize {
        let stale: Vec<u64> = self
            .store
            .volatile
            .mac_queue(dev_addr)
            .iter()
            .filter(|e| e.state == MacState::Sent && e.sent_with_fcnt_up.is_some_and(|f| f < fcnt_up) && !answered.contains(&e.id))
            .map(|e| e.id)
            .collect();
        for id in &stale {
            self.fail(dev_addr, *id);
        }
        stale.len()
    }

    /// Record the uplink's SNR and enqueue a LinkADRReq if the decision
    /// changed.
    pub fn ingest_uplink(&self, m: &MacUplink) -> Option<LinkAdrReq> {
        let cap = self.cfg.history_len;
        let state = self
            .store
            .volatile
            .update_session(m.dev_addr, &mut |s: &mut DeviceSession| {
                let a = &mut s.adr;
                if !a.initialized {
                    a.current_dr = m.dr;
                    a.current_tx_power = 0;
                    a.initialized = true;
                }
                a.history.push_back((m.lsnr, m.dr));
                while a.history.len() > cap {
                    a.history.pop_front();
                }
            })
            .ok()?
            .adr;
        let req = run_adr(&state, self.cfg.installation_margin_db, self.cfg.redundancy, &self.region)?;
        self.enqueue_adr(m.dev_addr, req).then_some(req)
    }

    /// Queue a LinkADRReq unless one is already in flight. A pending one is
    /// replaced by the newer decision. Returns true if the queue changed.
    fn enqueue_adr(&self, dev_addr: DevAddr, req: LinkAdrReq) -> bool {
        let cmd = req.to_command();
        let mut handled = false;
        let mut changed = false;
        self.store.volatile.update_mac_queue(dev_addr, &mut |q: &mut Vec<MacQueueEntry>| {
            if let Some(e) = q.iter_mut().find(|e| e.cmd.cid == mac::LINK_ADR) {
                handled = true;
                if e.state == MacState::Pending && e.cmd != cmd {
                    e.cmd = cmd.clone();
                    changed = true;
                }
            }
        });
        if !handled {
            self.store.volatile.enqueue_mac(dev_addr, cmd.clone());
            changed = true;
        }
        if changed {
            self.publish(dev_addr, cmd, "adr");
            self.metrics.inc("controller.adr_requests");
        }
        changed
    }

    /// Queue a command originated by an operator (DevStatusReq, DutyCycleReq).
    pub fn enqueue_command(&self, dev_addr: DevAddr, cmd: MacCommand, reason: &str) -> u64 {
        let id = self.store.volatile.enqueue_mac(dev_addr, cmd.clone());
        self.publish(dev_addr, cmd, reason);
        id
    }

    fn publish(&self, dev_addr: DevAddr, cmd: MacCommand, reason: &str) {
        let rec = ControllerCmd {
            dev_addr,
            cmd,
            reason: reason.to_string(),
        };
        if self.bus.publish(topics::CONTROLLER_CMDS, Some(&dev_addr.to_le_bytes()), record::encode(topics::CONTROLLER_CMD_V1, &rec)).is_err() {
            self.metrics.inc("controller.drop.bus");
        }
    }
}

pub async fn run_controller(nc: Arc<NetworkController>, mut sub: Subscription, name: String) {
    while let Some(d) = sub.recv().await {
        let t0 = Instant::now();
        match d.decode::<MacUplink>(topics::MAC_UPLINK_V1) {
            Ok(m) => {
                nc.handle_mac_uplink(&m);
            }
            Err(_) => nc.metrics.inc("controller.drop.bad_record"),
        }
        sub.ack(d.seq());
        nc.metrics.add_busy(&name, t0.elapsed());
    }
}
