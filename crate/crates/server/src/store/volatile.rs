//! Volatile tier: sessions, dedup entries, downlink queues, DevNonce
//! history and the frame log. Everything here may be lost on restart.

use std::collections::{HashMap, VecDeque};

use lorans_codec::mac::MacCommand;
use lorans_codec::phy::MAX_FOPTS_LEN;
use lorans_codec::{serialize_mac_commands, DevAddr, Eui64};
use parking_lot::Mutex;

use super::StoreError;
use crate::clock::SharedClock;
use crate::model::{AppItem, AppPayloadEntry, DedupKey, DedupOutcome, DeviceSession, FrameContent, FrameLogEntry, MacQueueEntry, MacState, Reception};

pub trait Volatile: Send + Sync {
    fn get_session(&self, dev_addr: DevAddr) -> Option<DeviceSession>;
    fn session_by_eui(&self, dev_eui: Eui64) -> Option<DeviceSession>;
    fn list_sessions(&self) -> Vec<DeviceSession>;
    /// Install a session, atomically replacing any older session of the
    /// same device (and dropping its queues). Fails with
    /// `DuplicateDevAddr` if another device holds the address.
    fn insert_session(&self, session: DeviceSession) -> Result<Option<DeviceSession>, StoreError>;
    /// Overwrite an existing session. The uplink counter may not go back.
    fn put_session(&self, session: DeviceSession) -> Result<(), StoreError>;
    /// Apply `f` to the session under the store lock and return the result.
    fn update_session(&self, dev_addr: DevAddr, f: &mut dyn FnMut(&mut DeviceSession)) -> Result<DeviceSession, StoreError>;
    fn remove_session_by_eui(&self, dev_eui: Eui64) -> Option<DeviceSession>;

    /// Record one reception of `key`. The first call within `ttl_ms`
    /// returns `FirstCopy`.
    fn dedup_check_insert(&self, key: &DedupKey, rx: Reception, ttl_ms: u64) -> DedupOutcome;
    fn dedup_receptions(&self, key: &DedupKey) -> Vec<Reception>;

    /// Insert `nonce` into the device's history unless already present.
    /// Returns false for a replayed nonce. History is capped at `cap`.
    fn check_insert_dev_nonce(&self, dev_eui: Eui64, nonce: u16, cap: usize) -> bool;
    fn dev_nonces(&self, dev_eui: Eui64) -> Vec<u16>;

    fn enqueue_app(&self, dev_addr: DevAddr, item: AppItem);
    fn app_queue_len(&self, dev_addr: DevAddr) -> usize;
    fn enqueue_mac(&self, dev_addr: DevAddr, cmd: MacCommand) -> u64;
    fn mac_queue(&self, dev_addr: DevAddr) -> Vec<MacQueueEntry>;
    fn update_mac_queue(&self, dev_addr: DevAddr, f: &mut dyn FnMut(&mut Vec<MacQueueEntry>));
    /// Choose the content of the next downlink. Pending MAC commands are
    /// marked `Sent` with `fcnt_up`.
    fn dequeue_for_frame(&self, dev_addr: DevAddr, max_app_bytes: usize, fcnt_up: u32) -> FrameContent;

    fn log_frame(&self, dev_eui: Eui64, entry: FrameLogEntry);
    fn frames(&self, dev_eui: Eui64, limit: usize) -> Vec<FrameLogEntry>;
    fn record_app_payload(&self, dev_eui: Eui64, entry: AppPayloadEntry);
    fn app_payloads(&self, dev_eui: Eui64, limit: usize) -> Vec<AppPayloadEntry>;
}

#[derive(Debug, Clone, Copy)]
pub struct VolatileLimits {
    pub retention_ms: u64,
    pub frame_log_cap: usize,
}

impl Default for VolatileLimits {
    fn default() -> Self {
        VolatileLimits {
            retention_ms: 24 * 3600 * 1000,
            frame_log_cap: 256,
        }
    }
}

struct DedupEntry {
    receptions: Vec<Reception>,
    expires_ms: u64,
}

#[derive(Default)]
struct Queues {
    app: VecDeque<AppItem>,
    mac: Vec<MacQueueEntry>,
}

#[derive(Default)]
struct Sessions {
    by_addr: HashMap<DevAddr, DeviceSession>,
    by_eui: HashMap<Eui64, DevAddr>,
    queues: HashMap<DevAddr, Queues>,
    next_mac_id: u64,
}

#[derive(Default)]
struct Dedup {
    entries: HashMap<DedupKey, DedupEntry>,
    expiry: VecDeque<(u64, DedupKey)>,
}

#[derive(Default)]
struct Logs {
    frames: HashMap<Eui64, VecDeque<FrameLogEntry>>,
    payloads: HashMap<Eui64, VecDeque<AppPayloadEntry>>,
}

pub struct MemoryVolatile {
    clock: SharedClock,
    limits: VolatileLimits,
    sessions: Mutex<Sessions>,
    dedup: Mutex<Dedup>,
    nonces: Mutex<HashMap<Eui64, VecDeque<u16>>>,
    logs: Mutex<Logs>,
}

impl MemoryVolatile {
    pub fn new(clock: SharedClock, limits: VolatileLimits) -> Self {
        MemoryVolatile {
            clock,
            limits,
            sessions: Mutex::new(Sessions::default()),
            dedup: Mutex::new(Dedup::default()),
            nonces: Mutex::new(HashMap::new()),
            logs: Mutex::new(Logs::default()),
        }
    }

    pub fn dedup_len(&self) -> usize {
        let mut d = self.dedup.lock();
        purge_dedup(&mut d, self.clock.now_ms());
        d.entries.len()
    }
}

fn purge_dedup(d: &mut Dedup, now: u64) {
    while let Some((exp, _)) = d.expiry.front() {
        if *exp > now {
            break;
        }
        let (exp, key) = d.expiry.pop_front().unwrap();
        if d.entries.get(&key).is_some_and(|e| e.expires_ms == exp) {
            d.entries.remove(&key);
        }
    }
}

fn push_capped<T>(q: &mut VecDeque<T>, item: T, cap: usize, too_old: impl Fn(&T) -> bool) {
    q.push_back(item);
    while q.len() > cap || q.front().is_some_and(&too_old) {
        q.pop_front();
    }
}

fn newest<T: Clone>(q: Option<&VecDeque<T>>, limit: usize) -> Vec<T> {
    q.map(|q| q.iter().rev().take(limit).cloned().collect()).unwrap_or_default()
}

impl Volatile for MemoryVolatile {
    fn get_session(&self, dev_addr: DevAddr) -> Option<DeviceSession> {
        self.sessions.lock().by_addr.get(&dev_addr).cloned()
    }

    fn session_by_eui(&self, dev_eui: Eui64) -> Option<DeviceSession> {
        let s = self.sessions.lock();
        s.by_eui.get(&dev_eui).and_then(|a| s.by_addr.get(a)).cloned()
    }

    fn list_sessions(&self) -> Vec<DeviceSession> {
        self.sessions.lock().by_addr.values().cloned().collect()
    }

    fn insert_session(&self, session: DeviceSession) -> Result<Option<DeviceSession>, StoreError> {
        let mut s = self.sessions.lock();
        if let Some(holder) = s.by_addr.get(&session.dev_addr) {
            if holder.dev_eui != session.dev_eui {
                return Err(StoreError::DuplicateDevAddr(session.dev_addr));
            }
        }
        let old = match s.by_eui.remove(&session.dev_eui) {
            Some(addr) => {
                s.queues.remove(&addr);
                s.by_addr.remove(&addr)
            }
            None => None,
        };
        s.by_eui.insert(session.dev_eui, session.dev_addr);
        s.by_addr.insert(session.dev_addr, session);
        Ok(old)
    }

    fn put_session(&self, session: DeviceSession) -> Result<(), StoreError> {
        let mut s = self.sessions.lock();
        let cur = s.by_addr.get_mut(&session.dev_addr).ok_or(StoreError::NoSession)?;
        if cur.dev_eui != session.dev_eui {
            return Err(StoreError::DuplicateDevAddr(session.dev_addr));
        }
        if session.fcnt_up < cur.fcnt_up {
            return Err(StoreError::StaleCounter {
                stored: cur.fcnt_up,
                got: session.fcnt_up,
            });
        }
        *cur = session;
        Ok(())
    }

    fn update_session(&self, dev_addr: DevAddr, f: &mut dyn FnMut(&mut DeviceSession)) -> Result<DeviceSession, StoreError> {
        let mut s = self.sessions.lock();
        let cur = s.by_addr.get_mut(&dev_addr).ok_or(StoreError::NoSession)?;
        f(cur);
        Ok(cur.clone())
    }

    fn remove_session_by_eui(&self, dev_eui: Eui64) -> Option<DeviceSession> {
        let mut s = self.sessions.lock();
        let addr = s.by_eui.remove(&dev_eui)?;
        s.queues.remove(&addr);
        s.by_addr.remove(&addr)
    }

    fn dedup_check_insert(&self, key: &DedupKey, rx: Reception, ttl_ms: u64) -> DedupOutcome {
        let now = self.clock.now_ms();
        let mut d = self.dedup.lock();
        purge_dedup(&mut d, now);
        match d.entries.get_mut(key) {
            Some(e) => {
                e.receptions.push(rx);
                DedupOutcome::DuplicateCopy
            }
            None => {
                let expires_ms = now + ttl_ms;
                d.entries.insert(
                    key.clone(),
                    DedupEntry {
                        receptions: vec![rx],
                        expires_ms,
                    },
                );
                // Keep the expiry queue ordered even if TTLs differ.
                let pos = d.expiry.partition_point(|(e, _)| *e <= expires_ms);
                d.expiry.insert(pos, (expires_ms, key.clone()));
                DedupOutcome::FirstCopy
            }
        }
    }

    fn dedup_receptions(&self, key: &DedupKey) -> Vec<Reception> {
        let mut d = self.dedup.lock();
        purge_dedup(&mut d, self.clock.now_ms());
        d.entries.get(key).map(|e| e.receptions.clone()).unwrap_or_default()
    }

    fn check_insert_dev_nonce(&self, dev_eui: Eui64, nonce: u16, cap: usize) -> bool {
        let mut n = self.nonces.lock();
        let h = n.entry(dev_eui).or_default();
        if h.contains(&nonce) {
            return false;
        }
        push_capped(h, nonce, cap.max(1), |_| false);
        true
    }

    fn dev_nonces(&self, dev_eui: Eui64) -> Vec<u16> {
        self.nonces.lock().get(&dev_eui).map(|h| h.iter().copied().collect()).unwrap_or_default()
    }

    fn enqueue_app(&self, dev_addr: DevAddr, item: AppItem) {
        self.sessions.lock().queues.entry(dev_addr).or_default().app.push_back(item);
    }

    fn app_queue_len(&self, dev_addr: DevAddr) -> usize {
        self.sessions.lock().queues.get(&dev_addr).map_or(0, |q| q.app.len())
    }

    fn enqueue_mac(&self, dev_addr: DevAddr, cmd: MacCommand) -> u64 {
        let now = self.clock.now_ms();
        let mut s = self.sessions.lock();
        s.next_mac_id += 1;
        let id = s.next_mac_id;
        s.queues.entry(dev_addr).or_default().mac.push(MacQueueEntry {
            id,
            cmd,
            state: MacState::Pending,
            attempts: 0,
            created_at_ms: now,
            sent_with_fcnt_up: None,
        });
        id
    }

    fn mac_queue(&self, dev_addr: DevAddr) -> Vec<MacQueueEntry> {
        self.sessions.lock().queues.get(&dev_addr).map(|q| q.mac.clone()).unwrap_or_default()
    }

    fn update_mac_queue(&self, dev_addr: DevAddr, f: &mut dyn FnMut(&mut Vec<MacQueueEntry>)) {
        let mut s = self.sessions.lock();
        f(&mut s.queues.entry(dev_addr).or_default().mac);
    }

    fn dequeue_for_frame(&self, dev_addr: DevAddr, max_app_bytes: usize, fcnt_up: u32) -> FrameContent {
        let mut s = self.sessions.lock();
        let Some(q) = s.queues.get_mut(&dev_addr) else {
            return FrameContent::default();
        };
        let pending: Vec<usize> = q.mac.iter().enumerate().filter(|(_, e)| e.state == MacState::Pending).map(|(i, _)| i).collect();
        let total: usize = pending.iter().map(|&i| q.mac[i].cmd.wire_len()).sum();
        let mac_as_payload = total > MAX_FOPTS_LEN;
        let budget = if mac_as_payload { max_app_bytes } else { MAX_FOPTS_LEN };

        let mut out = FrameContent {
            mac_as_payload,
            ..Default::default()
        };
        let mut taken = Vec::new();
        let mut used = 0;
        for i in pending {
            let len = q.mac[i].cmd.wire_len();
            if used + len > budget {
                continue;
            }
            used += len;
            let e = &mut q.mac[i];
            e.state = MacState::Sent;
            e.sent_with_fcnt_up = Some(fcnt_up);
            out.mac_ids.push(e.id);
            taken.push(e.cmd.clone());
        }
        out.mac = serialize_mac_commands(&taken);
        if !mac_as_payload {
            let room = max_app_bytes.saturating_sub(out.mac.len());
            if q.app.front().is_some_and(|a| a.payload.len() <= room) {
                out.app = q.app.pop_front();
            }
        }
        out.fpending = !q.app.is_empty() || q.mac.iter().any(|e| e.state == MacState::Pending);
        out
    }

    fn log_frame(&self, dev_eui: Eui64, entry: FrameLogEntry) {
        let cutoff = self.clock.now_ms().saturating_sub(self.limits.retention_ms);
        let mut l = self.logs.lock();
        push_capped(l.frames.entry(dev_eui).or_default(), entry, self.limits.frame_log_cap, |e| e.ts_ms < cutoff);
    }

    fn frames(&self, dev_eui: Eui64, limit: usize) -> Vec<FrameLogEntry> {
        newest(self.logs.lock().frames.get(&dev_eui), limit)
    }

    fn record_app_payload(&self, dev_eui: Eui64, entry: AppPayloadEntry) {
        let cutoff = self.clock.now_ms().saturating_sub(self.limits.retention_ms);
        let mut l = self.logs.lock();
        push_capped(l.payloads.entry(dev_eui).or_default(), entry, self.limits.frame_log_cap, |e| e.ts_ms < cutoff);
    }

    fn app_payloads(&self, dev_eui: Eui64, limit: usize) -> Vec<AppPayloadEntry> {
        newest(self.logs.lock().payloads.get(&dev_eui), limit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, ManualClock};
    use lorans_codec::mac::{dev_status_req, LinkAdrReq};
    use lorans_codec::{RxMetadata, SessionKeys};
    use std::sync::Arc;

    fn store() -> (Arc<ManualClock>, MemoryVolatile) {
        let clock = ManualClock::new(1_000);
        let v = MemoryVolatile::new(clock.clone(), VolatileLimits::default());
        (clock, v)
    }

    fn session(addr: u32, eui: u64) -> DeviceSession {
        let keys = SessionKeys {
            nwk_skey: [1; 16].into(),
            app_skey: [2; 16].into(),
        };
        DeviceSession::new(DevAddr(addr), Eui64(eui), keys, 0)
    }

    fn rx(gw: u64) -> Reception {
        Reception {
            gateway_eui: Eui64(gw),
            meta: RxMetadata::new(&[0u8; 12], 0, 433.175, "SF7BW125".parse().unwrap(), -80, 5.0),
        }
    }

    #[test]
    fn dedup_window_and_ttl() {
        let (clock, v) = store();
        let k = DedupKey::data(DevAddr(1), 7, [1, 2, 3, 4]);
        assert_eq!(v.dedup_check_insert(&k, rx(1), 10_000), DedupOutcome::FirstCopy);
        assert_eq!(v.dedup_check_insert(&k, rx(2), 10_000), DedupOutcome::DuplicateCopy);
        assert_eq!(v.dedup_receptions(&k).len(), 2);
        clock.advance(10_000);
        assert_eq!(v.dedup_len(), 0);
        assert_eq!(v.dedup_check_insert(&k, rx(3), 10_000), DedupOutcome::FirstCopy);
    }

    #[test]
    fn session_replace_and_addr_conflict() {
        let (_, v) = store();
        v.insert_session(session(10, 1)).unwrap();
        v.enqueue_app(DevAddr(10), AppItem { fport: 1, payload: vec![1], confirmed: false });
        assert!(matches!(v.insert_session(session(10, 2)), Err(StoreError::DuplicateDevAddr(_))));
        let old = v.insert_session(session(11, 1)).unwrap().unwrap();
        assert_eq!(old.dev_addr, DevAddr(10));
        assert!(v.get_session(DevAddr(10)).is_none());
        assert_eq!(v.app_queue_len(DevAddr(10)), 0);
        assert_eq!(v.session_by_eui(Eui64(1)).unwrap().dev_addr, DevAddr(11));
    }

    #[test]
    fn counter_never_regresses() {
        let (_, v) = store();
        let mut s = session(10, 1);
        s.fcnt_up = 5;
        v.insert_session(s.clone()).unwrap();
        s.fcnt_up = 4;
        assert!(matches!(v.put_session(s.clone()), Err(StoreError::StaleCounter { stored: 5, got: 4 })));
        s.fcnt_up = 6;
        v.put_session(s).unwrap();
        assert!(matches!(v.put_session(session(99, 1)), Err(StoreError::NoSession)));
    }

    #[test]
    fn nonce_history_is_capped() {
        let (_, v) = store();
        assert!(v.check_insert_dev_nonce(Eui64(1), 5, 3));
        assert!(!v.check_insert_dev_nonce(Eui64(1), 5, 3));
        for n in 6..9 {
            assert!(v.check_insert_dev_nonce(Eui64(1), n, 3));
        }
        assert_eq!(v.dev_nonces(Eui64(1)), vec![6, 7, 8]);
        assert!(v.check_insert_dev_nonce(Eui64(2), 5, 3));
    }

    #[test]
    fn frame_content_mac_in_fopts() {
        let (_, v) = store();
        let a = DevAddr(3);
        let req = LinkAdrReq { data_rate: 5, tx_power: 1, ch_mask: 7, redundancy: 1 };
        v.enqueue_mac(a, req.to_command());
        v.enqueue_app(a, AppItem { fport: 2, payload: vec![9; 10], confirmed: false });
        let f = v.dequeue_for_frame(a, 51, 4);
        assert_eq!(f.mac.len(), 5);
        assert!(!f.mac_as_payload);
        assert_eq!(f.app.unwrap().fport, 2);
        assert!(!f.fpending);
        let q = v.mac_queue(a);
        assert_eq!(q[0].state, MacState::Sent);
        assert_eq!(q[0].sent_with_fcnt_up, Some(4));
        // nothing new to send
        assert!(v.dequeue_for_frame(a, 51, 5).is_empty());
    }

    #[test]
    fn frame_content_mac_overflow_defers_app() {
        let (_, v) = store();
        let a = DevAddr(3);
        for _ in 0..4 {
            v.enqueue_mac(a, LinkAdrReq { data_rate: 1, tx_power: 1, ch_mask: 7, redundancy: 1 }.to_command());
        }
        v.enqueue_app(a, AppItem { fport: 2, payload: vec![1], confirmed: false });
        let f = v.dequeue_for_frame(a, 51, 0);
        assert!(f.mac_as_payload);
        assert_eq!(f.mac.len(), 20);
        assert!(f.app.is_none());
        assert!(f.fpending);
        let f = v.dequeue_for_frame(a, 51, 1);
        assert_eq!(f.app.unwrap().payload, vec![1]);
        assert!(!f.fpending);
    }

    #[test]
    fn app_item_too_large_stays_queued() {
        let (_, v) = store();
        let a = DevAddr(3);
        v.enqueue_mac(a, dev_status_req());
        v.enqueue_app(a, AppItem { fport: 2, payload: vec![0; 51], confirmed: false });
        let f = v.dequeue_for_frame(a, 51, 0);
        assert_eq!(f.mac, vec![0x06]);
        assert!(f.app.is_none());
        assert!(f.fpending);
    }

    #[test]
    fn frame_log_retention() {
        let (clock, v) = store();
        let entry = |ts| FrameLogEntry {
            ts_ms: ts,
            direction: lorans_codec::Direction::Uplink,
            mtype: "UnconfirmedDataUp".into(),
            dev_addr: None,
            fcnt: None,
            fport: None,
            size: 12,
            gateway_eui: Eui64(1),
            rssi: None,
            lsnr: None,
            phy: vec![],
        };
        v.log_frame(Eui64(1), entry(1_000));
        clock.advance(25 * 3600 * 1000);
        v.log_frame(Eui64(1), entry(clock.now_ms()));
        let f = v.frames(Eui64(1), 10);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].ts_ms, clock.now_ms());
    }
}
