//! In-process broker.
//!
//! Every subscribing group of a topic gets its own copy of each message;
//! inside a group the message goes to exactly one member, chosen
//! round-robin at publish time. Deliveries stay in the member's in-flight
//! set until acknowledged. When a member leaves (or its handle is
//! dropped) its queued and unacknowledged messages are handed to the
//! surviving members, so nothing is lost; consumers must tolerate
//! redelivery.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use parking_lot::{Mutex, RwLock};
use tokio::sync::Notify;

use crate::record;

pub const DEFAULT_CAPACITY: usize = 65_536;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BusError {
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("topic {0:?} is already registered")]
    DuplicateTopic(String),
    #[error("buffer full on topic {topic:?} (group {group:?})")]
    BufferFull { topic: String, group: String },
    #[error("topic {topic:?} carries schema {expected:?}, payload has {got:?}")]
    SchemaMismatch { topic: String, expected: String, got: String },
    #[error("consumer group is empty")]
    EmptyGroup,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusMessage {
    pub topic: String,
    pub key: Option<Vec<u8>>,
    pub payload: Vec<u8>,
    /// Per-topic, strictly increasing from 0.
    pub seq: u64,
    /// Publish time, milliseconds since the Unix epoch.
    pub ts_ms: u64,
}

#[derive(Debug, Clone)]
pub struct Delivery {
    pub message: Arc<BusMessage>,
    /// Number of earlier deliveries of this message to this group.
    pub redeliveries: u32,
}

impl Delivery {
    pub fn seq(&self) -> u64 {
        self.message.seq
    }

    pub fn decode<T: serde::de::DeserializeOwned>(&self, schema: &str) -> Result<T, record::RecordError> {
        record::decode(schema, &self.message.payload)
    }
}

/// The pub/sub contract the server modules are written against.
pub trait Bus: Send + Sync {
    fn publish(&self, topic: &str, key: Option<&[u8]>, payload: Vec<u8>) -> Result<u64, BusError>;
    fn subscribe(&self, topic: &str, group: &str) -> Result<Box<dyn Consumer>, BusError>;
}

#[async_trait]
pub trait Consumer: Send {
    /// Next delivery; `None` once the broker is closed and the queue drained.
    async fn recv(&mut self) -> Option<Delivery>;
    fn try_recv(&mut self) -> Option<Delivery>;
    fn ack(&mut self, seq: u64);
    fn member_id(&self) -> u64;
}

struct Member {
    id: u64,
    queue: VecDeque<(Arc<BusMessage>, u32)>,
    inflight: BTreeMap<u64, (Arc<BusMessage>, u32)>,
    notify: Arc<Notify>,
    delivered: u64,
}

impl Member {
    fn pending(&self) -> usize {
        self.queue.len() + self.inflight.len()
    }
}

#[derive(Default)]
struct Group {
    members: Vec<Member>,
    rr_cursor: usize,
    /// Messages retained while the group has no members.
    backlog: VecDeque<(Arc<BusMessage>, u32)>,
}

impl Group {
    fn pending(&self) -> usize {
        self.backlog.len() + self.members.iter().map(Member::pending).sum::<usize>()
    }

    /// Round-robin choice of the next member; advances the cursor.
    fn assign(&mut self) -> Result<usize, BusError> {
        if self.members.is_empty() {
            return Err(BusError::EmptyGroup);
        }
        let idx = self.rr_cursor % self.members.len();
        self.rr_cursor = (idx + 1) % self.members.len();
        Ok(idx)
    }

    fn dispatch(&mut self, msg: Arc<BusMessage>, redeliveries: u32) {
        match self.assign() {
            Ok(idx) => {
                let m = &mut self.members[idx];
                m.queue.push_back((msg, redeliveries));
                m.notify.notify_one();
            }
            Err(_) => self.backlog.push_back((msg, redeliveries)),
        }
    }
}

struct TopicState {
    next_seq: u64,
    groups: BTreeMap<String, Group>,
}

struct Topic {
    name: String,
    schema: String,
    state: Mutex<TopicState>,
}

struct Inner {
    topics: RwLock<HashMap<String, Arc<Topic>>>,
    capacity: usize,
    next_member: AtomicU64,
    closed: AtomicBool,
    all_notifies: Mutex<Vec<std::sync::Weak<Notify>>>,
}

/// Handle to the in-process broker; cheap to clone.
#[derive(Clone)]
pub struct Broker {
    inner: Arc<Inner>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemberStats {
    pub member_id: u64,
    pub delivered: u64,
    pub queued: usize,
    pub inflight: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupStats {
    pub members: Vec<MemberStats>,
    pub backlog: usize,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl Default for Broker {
    fn default() -> Self {
        Broker::new(DEFAULT_CAPACITY)
    }
}

impl Broker {
    pub fn new(capacity: usize) -> Self {
        Broker {
            inner: Arc::new(Inner {
                topics: RwLock::new(HashMap::new()),
                capacity,
                next_member: AtomicU64::new(1),
                closed: AtomicBool::new(false),
                all_notifies: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn register_topic(&self, name: &str, schema: &str) -> Result<(), BusError> {
        let mut topics = self.inner.topics.write();
        if topics.contains_key(name) {
            return Err(BusError::DuplicateTopic(name.to_string()));
        }
        topics.insert(
            name.to_string(),
            Arc::new(Topic {
                name: name.to_string(),
                schema: schema.to_string(),
                state: Mutex::new(TopicState {
                    next_seq: 0,
                    groups: BTreeMap::new(),
                }),
            }),
        );
        Ok(())
    }

    pub fn topic_names(&self) -> Vec<String> {
        let mut v: Vec<_> = self.inner.topics.read().keys().cloned().collect();
        v.sort();
        v
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>, BusError> {
        self.inner
            .topics
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| BusError::UnknownTopic(name.to_string()))
    }

    pub fn publish(&self, topic: &str, key: Option<&[u8]>, payload: Vec<u8>) -> Result<u64, BusError> {
        let t = self.topic(topic)?;
        let got = record::schema_of(&payload).unwrap_or("");
        if got != t.schema {
            return Err(BusError::SchemaMismatch {
                topic: topic.to_string(),
                expected: t.schema.clone(),
                got: got.to_string(),
            });
        }
        let mut st = t.state.lock();
        if let Some((name, _)) = st.groups.iter().find(|(_, g)| g.pending() >= self.inner.capacity) {
            return Err(BusError::BufferFull {
                topic: topic.to_string(),
                group: name.clone(),
            });
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        let msg = Arc::new(BusMessage {
            topic: t.name.clone(),
            key: key.map(<[u8]>::to_vec),
            payload,
            seq,
            ts_ms: now_ms(),
        });
        for g in st.groups.values_mut() {
            g.dispatch(msg.clone(), 0);
        }
        Ok(seq)
    }

    /// Join `group` on `topic`. The group is created on first use and sees
    /// only messages published after that point.
    pub fn subscribe(&self, topic: &str, group: &str) -> Result<Subscription, BusError> {
        let t = self.topic(topic)?;
        let id = self.inner.next_member.fetch_add(1, Ordering::Relaxed);
        let notify = Arc::new(Notify::new());
        {
            let mut st = t.state.lock();
            let g = st.groups.entry(group.to_string()).or_default();
            g.members.push(Member {
                id,
                queue: VecDeque::new(),
                inflight: BTreeMap::new(),
                notify: notify.clone(),
                delivered: 0,
            });
            let backlog: Vec<_> = g.backlog.drain(..).collect();
            for (msg, n) in backlog {
                g.dispatch(msg, n);
            }
        }
        self.inner.all_notifies.lock().push(Arc::downgrade(&notify));
        Ok(Subscription {
            broker: self.clone(),
            topic: t,
            group: group.to_string(),
            id,
            notify,
            left: false,
        })
    }

    pub fn group_stats(&self, topic: &str, group: &str) -> Option<GroupStats> {
        let t = self.topic(topic).ok()?;
        let st = t.state.lock();
        let g = st.groups.get(group)?;
        Some(GroupStats {
            members: g
                .members
                .iter()
                .map(|m| MemberStats {
                    member_id: m.id,
                    delivered: m.delivered,
                    queued: m.queue.len(),
                    inflight: m.inflight.len(),
                })
                .collect(),
            backlog: g.backlog.len(),
        })
    }

    /// Messages waiting in `group` (queued, in flight or in backlog).
    pub fn lag(&self, topic: &str, group: &str) -> usize {
        self.topic(topic)
            .ok()
            .and_then(|t| t.state.lock().groups.get(group).map(Group::pending))
            .unwrap_or(0)
    }

    /// Wake every consumer; `recv` returns `None` once its queue is empty.
    pub fn close(&self) {
        self.inner.closed.store(true, Ordering::SeqCst);
        for n in self.inner.all_notifies.lock().iter().filter_map(std::sync::Weak::upgrade) {
            n.notify_one();
        }
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::SeqCst)
    }
}

impl Bus for Broker {
    fn publish(&self, topic: &str, key: Option<&[u8]>, payload: Vec<u8>) -> Result<u64, BusError> {
        Broker::publish(self, topic, key, payload)
    }

    fn subscribe(&self, topic: &str, group: &str) -> Result<Box<dyn Consumer>, BusError> {
        Ok(Box::new(Broker::subscribe(self, topic, group)?))
    }
}

/// A member of a consumer group. Dropping it leaves the group.
pub struct Subscription {
    broker: Broker,
    topic: Arc<Topic>,
    group: String,
    id: u64,
    notify: Arc<Notify>,
    left: bool,
}

impl Subscription {
    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn topic(&self) -> &str {
        &self.topic.name
    }

    fn with_member<R>(&self, f: impl FnOnce(&mut Member) -> R) -> Option<R> {
        let mut st = self.topic.state.lock();
        let g = st.groups.get_mut(&self.group)?;
        g.members.iter_mut().find(|m| m.id == self.id).map(f)
    }

    fn pop(&self) -> Option<Delivery> {
        self.with_member(|m| {
            let (msg, redeliveries) = m.queue.pop_front()?;
            m.inflight.insert(msg.seq, (msg.clone(), redeliveries));
            m.delivered += 1;
            Some(Delivery {
                message: msg,
                redeliveries,
            })
        })
        .flatten()
    }

    pub fn try_recv(&mut self) -> Option<Delivery> {
        self.pop()
    }

    pub async fn recv(&mut self) -> Option<Delivery> {
        loop {
            let notified = self.notify.notified();
            if let Some(d) = self.pop() {
                return Some(d);
            }
            if self.broker.is_closed() || self.left {
                return None;
            }
            notified.await;
        }
    }

    pub fn ack(&mut self, seq: u64) {
        self.with_member(|m| m.inflight.remove(&seq));
    }

    /// Leave the group. Queued and unacknowledged messages are redistributed
    /// round-robin over the remaining members, lowest seq first.
    pub fn leave(&mut self) {
        if self.left {
            return;
        }
        self.left = true;
        let mut st = self.topic.state.lock();
        let Some(g) = st.groups.get_mut(&self.group) else { return };
        let Some(pos) = g.members.iter().position(|m| m.id == self.id) else { return };
        let member = g.members.remove(pos);
        if !g.members.is_empty() {
            if pos < g.rr_cursor {
                g.rr_cursor -= 1;
            }
            g.rr_cursor %= g.members.len();
        } else {
            g.rr_cursor = 0;
        }
        let mut orphans: Vec<(Arc<BusMessage>, u32)> = member
            .inflight
            .into_values()
            .map(|(m, n)| (m, n + 1))
            .chain(member.queue)
            .collect();
        orphans.sort_by_key(|(m, _)| m.seq);
        for (msg, n) in orphans {
            g.dispatch(msg, n);
        }
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.leave();
    }
}

#[async_trait]
impl Consumer for Subscription {
    async fn recv(&mut self) -> Option<Delivery> {
        Subscription::recv(self).await
    }

    fn try_recv(&mut self) -> Option<Delivery> {
        Subscription::try_recv(self)
    }

    fn ack(&mut self, seq: u64) {
        Subscription::ack(self, seq)
    }

    fn member_id(&self) -> u64 {
        self.id
    }
}
