use std::collections::HashMap;

use lorans_bus::{record, Broker, Subscription};
use proptest::prelude::*;

fn broker() -> Broker {
    let b = Broker::default();
    b.register_topic("uplink.raw", "n").unwrap();
    b
}

fn drain(s: &mut Subscription) -> Vec<u64> {
    let mut out = vec![];
    while let Some(d) = s.try_recv() {
        out.push(d.seq());
        s.ack(d.seq());
    }
    out
}

#[test]
fn single_subscriber_gets_everything() {
    let b = broker();
    let mut s = b.subscribe("uplink.raw", "cs").unwrap();
    for i in 0..100u32 {
        b.publish("uplink.raw", None, record::encode("n", &i)).unwrap();
    }
    assert_eq!(drain(&mut s), (0..100).collect::<Vec<_>>());
}

#[test]
fn four_members_ten_thousand_messages() {
    let b = broker();
    let mut subs: Vec<_> = (0..4).map(|_| b.subscribe("uplink.raw", "cs").unwrap()).collect();
    for i in 0..10_000u32 {
        b.publish("uplink.raw", None, record::encode("n", &i)).unwrap();
    }
    let counts: Vec<usize> = subs.iter_mut().map(|s| drain(s).len()).collect();
    assert_eq!(counts, vec![2500; 4]);
}

#[test]
fn second_subscriber_alternates() {
    let b = broker();
    let mut a = b.subscribe("uplink.raw", "cs").unwrap();
    b.publish("uplink.raw", None, record::encode("n", &0)).unwrap();
    let mut c = b.subscribe("uplink.raw", "cs").unwrap();
    for i in 1..=10u32 {
        b.publish("uplink.raw", None, record::encode("n", &i)).unwrap();
    }
    let got_a = drain(&mut a);
    let got_c = drain(&mut c);
    assert_eq!(got_a.len() + got_c.len(), 11);
    assert_eq!(got_c.len(), 5);
    // strictly alternating after the join
    let mut merged: Vec<(u64, char)> = got_a.iter().map(|s| (*s, 'a')).chain(got_c.iter().map(|s| (*s, 'c'))).collect();
    merged.sort();
    for w in merged[1..].windows(2) {
        assert_ne!(w[0].1, w[1].1);
    }
}

#[test]
fn member_leaves_after_five_of_ten() {
    let b = broker();
    let mut subs: Vec<_> = (0..3).map(|_| b.subscribe("uplink.raw", "cs").unwrap()).collect();
    for i in 0..5u32 {
        b.publish("uplink.raw", None, record::encode("n", &i)).unwrap();
    }
    let first: Vec<Vec<u64>> = subs.iter_mut().map(drain).collect();
    subs.remove(1);
    for i in 5..10u32 {
        b.publish("uplink.raw", None, record::encode("n", &i)).unwrap();
    }
    let rest: Vec<Vec<u64>> = subs.iter_mut().map(drain).collect();
    let mut all: Vec<u64> = first.into_iter().flatten().chain(rest.iter().flatten().copied()).collect();
    all.sort();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert_eq!(rest[0].len() + rest[1].len(), 5);
    assert!(rest[0].len().abs_diff(rest[1].len()) <= 1);
}

#[test]
fn independent_groups_each_get_a_copy() {
    let b = broker();
    let mut cs = b.subscribe("uplink.raw", "central").unwrap();
    let mut log = b.subscribe("uplink.raw", "logger").unwrap();
    for i in 0..7u32 {
        b.publish("uplink.raw", None, record::encode("n", &i)).unwrap();
    }
    assert_eq!(drain(&mut cs).len(), 7);
    assert_eq!(drain(&mut log).len(), 7);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_workers_fail_over_without_loss() {
    let b = broker();
    let seen = std::sync::Arc::new(parking_lot_free::Seen::default());
    let mut handles = vec![];
    for w in 0..3 {
        let mut s = b.subscribe("uplink.raw", "cs").unwrap();
        let seen = seen.clone();
        handles.push(tokio::spawn(async move {
            while let Some(d) = s.recv().await {
                if w == 0 && d.seq() == 500 {
                    // Die holding an unacknowledged delivery.
                    return;
                }
                seen.add(d.seq());
                s.ack(d.seq());
            }
        }));
    }
    for i in 0..2000u32 {
        b.publish("uplink.raw", None, record::encode("n", &i)).unwrap();
        if i % 100 == 0 {
            tokio::task::yield_now().await;
        }
    }
    tokio::time::timeout(std::time::Duration::from_secs(10), async {
        while seen.len() < 2000 {
            tokio::time::sleep(std::time::Duration::from_millis(5)).await;
        }
    })
    .await
    .expect("all messages processed");
    b.close();
    for h in handles {
        h.await.unwrap();
    }
    assert_eq!(seen.distinct(), 2000);
}

mod parking_lot_free {
    use std::collections::HashSet;
    use std::sync::Mutex;

    #[derive(Default)]
    pub struct Seen(Mutex<Vec<u64>>);

    impl Seen {
        pub fn add(&self, s: u64) {
            self.0.lock().unwrap().push(s);
        }
        pub fn len(&self) -> usize {
            self.distinct()
        }
        pub fn distinct(&self) -> usize {
            self.0.lock().unwrap().iter().collect::<HashSet<_>>().len()
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Exactly-once per group, per-member FIFO and balance within one.
    #[test]
    fn stable_group_invariants(k in 1usize..8, n in 0u32..400) {
        let b = broker();
        let mut subs: Vec<_> = (0..k).map(|_| b.subscribe("uplink.raw", "g").unwrap()).collect();
        for i in 0..n {
            b.publish("uplink.raw", Some(&i.to_le_bytes()), record::encode("n", &i)).unwrap();
        }
        let mut owner: HashMap<u64, usize> = HashMap::new();
        let mut counts = vec![];
        for (idx, s) in subs.iter_mut().enumerate() {
            let got = drain(s);
            prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
            for seq in &got {
                prop_assert!(owner.insert(*seq, idx).is_none());
            }
            counts.push(got.len());
        }
        prop_assert_eq!(owner.len(), n as usize);
        let max = *counts.iter().max().unwrap();
        let min = *counts.iter().min().unwrap();
        prop_assert!(max - min <= 1);
    }

    /// Removing members at random points never loses or duplicates a message.
    #[test]
    fn fail_over_conserves(k in 2usize..6, n in 1u32..300, cut in 0u32..300, victim in 0usize..6) {
        let b = broker();
        let mut subs: Vec<_> = (0..k).map(|_| b.subscribe("uplink.raw", "g").unwrap()).collect();
        let mut seen = vec![];
        for i in 0..n {
            if i == cut.min(n - 1) {
                // victim takes one delivery without acking, then dies
                let v = victim % subs.len();
                let _ = subs[v].try_recv();
                subs.remove(v);
            }
            b.publish("uplink.raw", None, record::encode("n", &i)).unwrap();
        }
        for s in subs.iter_mut() {
            seen.extend(drain(s));
        }
        seen.sort();
        prop_assert_eq!(seen, (0..n as u64).collect::<Vec<_>>());
    }
}
