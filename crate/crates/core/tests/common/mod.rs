#![allow(dead_code)]

pub mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use tetris_core::{
    create_event, CryptoProvider, Digest, Event, Insert, KeyedHashSigner, Membership, Tetris,
    ValidatorId,
};

pub fn v(x: u32) -> ValidatorId {
    ValidatorId(x)
}

/// Builds named events into a single tetris, checking that each is accepted.
pub struct Dag {
    pub crypto: KeyedHashSigner,
    pub tetris: Tetris,
    named: BTreeMap<String, Event>,
    latest: BTreeMap<ValidatorId, String>,
    order: Vec<Event>,
}

impl Dag {
    pub fn new(n: usize) -> Self {
        Self::with_membership(Membership::first(n).unwrap())
    }

    pub fn with_membership(m: Membership) -> Self {
        Self {
            crypto: KeyedHashSigner::new(7),
            tetris: Tetris::new(m),
            named: BTreeMap::new(),
            latest: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    pub fn ev(&mut self, name: &str, vid: u32, self_parent: Option<&str>, others: &[&str]) -> Digest {
        self.ev_tx(name, vid, self_parent, others, &[])
    }

    pub fn ev_tx(
        &mut self,
        name: &str,
        vid: u32,
        self_parent: Option<&str>,
        others: &[&str],
        txs: &[Digest],
    ) -> Digest {
        let e = self.make(vid, self_parent, others, txs);
        self.add(name, e)
    }

    pub fn make(&self, vid: u32, self_parent: Option<&str>, others: &[&str], txs: &[Digest]) -> Event {
        let sp = self_parent.map(|n| self.get(n));
        let os: Vec<&Event> = others.iter().map(|n| self.get(n)).collect();
        create_event(v(vid), sp, &os, txs.iter().copied(), &self.crypto).unwrap()
    }

    /// Inserts a prebuilt event under `name`.
    pub fn add(&mut self, name: &str, e: Event) -> Digest {
        let d = e.digest();
        match self.tetris.insert(e.clone()) {
            Insert::Accepted(_) => {}
            other => panic!("{name} not accepted: {other:?}"),
        }
        self.latest.insert(e.vid(), name.to_string());
        self.named.insert(name.to_string(), e.clone());
        self.order.push(e);
        d
    }

    pub fn get(&self, name: &str) -> &Event {
        self.named.get(name).unwrap_or_else(|| panic!("no event named {name}"))
    }

    pub fn d(&self, name: &str) -> Digest {
        self.get(name).digest()
    }

    pub fn latest(&self, vid: u32) -> Option<&str> {
        self.latest.get(&v(vid)).map(String::as_str)
    }

    /// One event per listed creator, each referencing its own latest event
    /// and the latest event of every other listed creator as of the start of
    /// the layer. Names are `{prefix}{vid}`.
    pub fn layer(&mut self, prefix: &str, creators: &[u32]) {
        self.layer_tx(prefix, creators, &BTreeMap::new());
    }

    pub fn layer_tx(&mut self, prefix: &str, creators: &[u32], txs: &BTreeMap<u32, Vec<Digest>>) {
        let before: BTreeMap<u32, Option<String>> =
            creators.iter().map(|&c| (c, self.latest(c).map(str::to_string))).collect();
        for &c in creators {
            let others: Vec<&str> = creators
                .iter()
                .filter(|&&o| o != c)
                .filter_map(|o| before[o].as_deref())
                .collect();
            let others: Vec<String> = others.iter().map(|s| s.to_string()).collect();
            let refs: Vec<&str> = others.iter().map(String::as_str).collect();
            let sp = before[&c].clone();
            let tx = txs.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            self.ev_tx(&format!("{prefix}{c}"), c, sp.as_deref(), &refs, tx);
        }
    }

    pub fn genesis(&mut self, creators: &[u32]) {
        for &c in creators {
            self.ev(&format!("g{c}"), c, None, &[]);
        }
    }

    /// Every event inserted so far, in insertion order.
    pub fn events(&self) -> &[Event] {
        &self.order
    }

    pub fn coin_bit(&self, name: &str) -> bool {
        self.crypto.coin_bit(self.get(name).signature()) == 1
    }
}

pub fn digests(ds: &[Digest]) -> BTreeSet<Digest> {
    ds.iter().copied().collect()
}

/// Fork-free DAG produced by honest gossip. Each step `(c, mask)` lets
/// validator `c` learn everything the validators in `mask` know, then create
/// an event referencing their latest events. Returned in creation order.
pub fn gossip(n: usize, steps: &[(usize, u64)], crypto: &dyn CryptoProvider) -> Vec<Event> {
    let mut known: Vec<BTreeSet<Digest>> = vec![BTreeSet::new(); n];
    let mut latest: Vec<Option<Event>> = vec![None; n];
    let mut out = Vec::new();
    for &(c, mask) in steps {
        let c = c % n;
        let mut others = Vec::new();
        for p in (0..n).filter(|&p| p != c && mask & (1 << p) != 0) {
            if let Some(e) = &latest[p] {
                if !known[c].contains(&e.digest()) {
                    others.push(e.clone());
                }
            }
            let theirs = known[p].clone();
            known[c].extend(theirs);
        }
        let refs: Vec<&Event> = others.iter().collect();
        let e = create_event(v(c as u32), latest[c].as_ref(), &refs, [], crypto).unwrap();
        known[c].insert(e.digest());
        latest[c] = Some(e.clone());
        out.push(e);
    }
    out
}

pub fn tetris_of(m: Membership, events: &[Event]) -> Tetris {
    let mut t = Tetris::new(m);
    for e in events {
        assert!(matches!(t.insert(e.clone()), Insert::Accepted(_)));
    }
    t
}
