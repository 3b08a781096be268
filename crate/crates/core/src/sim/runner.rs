use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crypto::KeyedHashSigner;
use crate::engine::BlockHeader;
use crate::event::{verify_event, Digest, Event, Transaction, ValidatorId};
use crate::node::{Mutation, Validator};
use crate::tetris::Insert;

use super::config::{ConfigError, DelayModel, ScenarioConfig, StrategyKind};
use super::dht::{DhtItem, TempDht};
use super::net::{schedule_broadcast, MessageKind, NetMessage, Network};
use super::report::RunReport;

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    #[doc(hidden)]
    pub mutation: Option<Mutation>,
}

/// Scheduling while a vote splitter is active. Events that carry knowledge
/// of a splitter's events reach half B of the honest validators as late as
/// the delay window allows and everything else arrives as early as possible,
/// so that the halves disagree about whether the splitter's base is known.
struct Split {
    splitters: BTreeSet<ValidatorId>,
    half_b: BTreeSet<ValidatorId>,
}

impl Split {
    fn new(cfg: &ScenarioConfig) -> Option<Self> {
        let splitters: BTreeSet<ValidatorId> = cfg
            .adversaries
            .iter()
            .filter(|(_, s)| matches!(s, StrategyKind::VoteSplitter))
            .map(|(v, _)| *v)
            .collect();
        if splitters.is_empty() {
            return None;
        }
        let honest = cfg.honest_ids();
        let cut = honest.len().div_ceil(2);
        Some(Self { splitters, half_b: honest[cut..].iter().copied().collect() })
    }

    fn delay(&self, d: &DelayModel, to: ValidatorId, carries: bool) -> u64 {
        if carries && self.half_b.contains(&to) {
            d.max_steps
        } else {
            d.min_steps
        }
    }
}

/// `carries` is set for event messages that descend from a splitter's event;
/// other traffic passes `false`.
fn draw_delay(
    rng: &mut ChaCha8Rng,
    d: &DelayModel,
    split: &Option<Split>,
    to: ValidatorId,
    carries: bool,
) -> u64 {
    match split {
        Some(s) => s.delay(d, to, carries),
        None => rng.gen_range(d.min_steps..=d.max_steps),
    }
}

/// Whether an event message descends from a splitter's event, judged by the
/// sender's own store.
fn carries_split(nodes: &BTreeMap<ValidatorId, Node>, split: &Option<Split>, m: &NetMessage) -> bool {
    let Some(split) = split else { return false };
    if m.kind != MessageKind::EventAnnounce {
        return false;
    }
    let digest = match <[u8; 32]>::try_from(&m.body[..]) {
        Ok(d) => Digest(d),
        Err(_) => match Event::from_wire(&m.body) {
            Ok(e) => e.digest(),
            Err(_) => return false,
        },
    };
    nodes
        .get(&m.from)
        .is_some_and(|n| n.v.tetris().descends_from_any(&digest, &split.splitters))
}

struct Node {
    v: Validator,
    strategy: StrategyKind,
    /// Event digests to fetch: (first wanted at, next attempt at).
    wanted: BTreeMap<Digest, (u64, u64)>,
    /// Same for transaction bodies.
    wanted_txs: BTreeMap<Digest, (u64, u64)>,
    fork_seqs: Vec<u64>,
    forks_done: usize,
    fake_txs: u64,
    outbox: Vec<BlockHeader>,
}

/// A deterministic discrete-step run of one scenario.
pub struct Simulation {
    cfg: ScenarioConfig,
    crypto: KeyedHashSigner,
    rng: ChaCha8Rng,
    step: u64,
    nodes: BTreeMap<ValidatorId, Node>,
    ids: Vec<ValidatorId>,
    dht: TempDht,
    net: Network,
    split: Option<Split>,
    txs_injected: u32,
    done: bool,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, opts: RunOptions) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let membership = cfg.initial_membership()?;
        let ids = cfg.all_ids();
        let mut nodes = BTreeMap::new();
        for &id in &ids {
            let mut v = Validator::new(id, membership.clone(), cfg.params.clone());
            for other in &ids {
                v.register(*other);
            }
            for r in &cfg.rotations {
                v.schedule_rotation(r.after_stage, r.delta.clone());
            }
            v.set_mutation(opts.mutation);
            let strategy = cfg.strategy(id).clone();
            let mut fork_seqs = match &strategy {
                StrategyKind::Forker { fork_seqs, .. } => fork_seqs.clone(),
                _ => Vec::new(),
            };
            fork_seqs.sort_unstable();
            fork_seqs.dedup();
            nodes.insert(
                id,
                Node {
                    v,
                    strategy,
                    wanted: BTreeMap::new(),
                    wanted_txs: BTreeMap::new(),
                    fork_seqs,
                    forks_done: 0,
                    fake_txs: 0,
                    outbox: Vec::new(),
                },
            );
        }
        Ok(Self {
            crypto: KeyedHashSigner::new(cfg.seed),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            nodes,
            ids,
            dht: TempDht::new(),
            net: Network::new(cfg.drop_rate, cfg.retransmit_interval, cfg.partitions.clone()),
            split: Split::new(cfg),
            txs_injected: 0,
            done: false,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn crypto(&self) -> &KeyedHashSigner {
        &self.crypto
    }

    pub fn steps_run(&self) -> u64 {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.done
    }

    pub fn validator(&self, id: ValidatorId) -> Option<&Validator> {
        self.nodes.get(&id).map(|n| &n.v)
    }

    pub fn validator_mut(&mut self, id: ValidatorId) -> Option<&mut Validator> {
        self.nodes.get_mut(&id).map(|n| &mut n.v)
    }

    pub fn validators(&self) -> impl Iterator<Item = &Validator> + '_ {
        self.nodes.values().map(|n| &n.v)
    }

    pub fn network_stats(&self) -> &super::net::NetStats {
        &self.net.stats
    }

    /// Runs until every honest validator has finished the target stages with
    /// confirmed blocks, or `max_steps` is reached.
    pub fn run(&mut self) {
        while !self.done && self.step < self.cfg.max_steps {
            self.tick();
        }
    }

    pub fn report(&self) -> RunReport {
        RunReport::build(self)
    }

    fn tick(&mut self) {
        let now = self.step;
        self.dht.set_now(now);
        let delay = self.cfg.delay;
        let split = &self.split;
        let nodes = &self.nodes;
        let msgs = self.net.due(now, &mut self.rng, &mut |rng, m| {
            draw_delay(rng, &delay, split, m.to, carries_split(nodes, split, m))
        });
        for m in msgs {
            self.deliver(m);
        }
        for id in self.ids.clone() {
            self.fetch_missing(id);
        }
        self.inject_txs();
        for id in self.ids.clone() {
            self.create(id);
        }
        for id in self.ids.clone() {
            self.flush_headers(id);
        }
        self.step += 1;
        self.done = self.targets_met();
    }

    fn targets_met(&self) -> bool {
        let target = self.cfg.target_stages;
        self.nodes.values().filter(|n| n.strategy.is_honest()).all(|n| {
            n.v.completed_stages() >= target
                && (0..target).all(|h| {
                    let t = n.v.finished_stage(h).map(|s| s.membership().t()).unwrap_or(0);
                    n.v.blocks().get(&h).is_some_and(|b| b.is_confirmed(t))
                })
        })
    }

    fn deliver(&mut self, m: NetMessage) {
        let now = self.step;
        match m.kind {
            MessageKind::EventAnnounce => {
                if m.body.len() == 32 {
                    let d = Digest(m.body[..].try_into().expect("32 bytes"));
                    let node = self.nodes.get_mut(&m.to).expect("known recipient");
                    let t = node.v.tetris();
                    if !t.contains(&d) && !t.is_pending(&d) && t.rejection(&d).is_none() {
                        node.wanted.entry(d).or_insert((now, now));
                    }
                } else if let Ok(e) = Event::from_wire(&m.body) {
                    self.accept(m.to, e);
                }
            }
            MessageKind::TxAnnounce => {
                if let Ok(d) = <[u8; 32]>::try_from(&m.body[..]) {
                    let node = self.nodes.get_mut(&m.to).expect("known recipient");
                    node.wanted_txs.entry(Digest(d)).or_insert((now, now));
                }
            }
            MessageKind::HeaderAnnounce => {
                if let Some(h) = BlockHeader::from_bytes(&m.body) {
                    let node = self.nodes.get_mut(&m.to).expect("known recipient");
                    node.v.receive_header(h, &self.crypto);
                }
            }
            MessageKind::PullRequest | MessageKind::PullResponse => {}
        }
    }

    /// Verifies and inserts a received event; returns whether it was new.
    fn accept(&mut self, to: ValidatorId, e: Event) -> bool {
        if verify_event(&e, &self.crypto).is_err() {
            return false;
        }
        let now = self.step;
        let node = self.nodes.get_mut(&to).expect("known recipient");
        let d = e.digest();
        if node.v.tetris().contains(&d) || node.v.tetris().is_pending(&d) {
            return false;
        }
        let (outcome, headers) = node.v.ingest(e, &self.crypto);
        node.outbox.extend(headers);
        node.wanted.remove(&d);
        if let Insert::Pending(missing) = outcome {
            for p in missing {
                node.wanted.entry(p).or_insert((now, now));
            }
        }
        true
    }

    /// Pulls missing event and transaction bodies from the DHT until nothing
    /// more can be fetched this step.
    fn fetch_missing(&mut self, id: ValidatorId) {
        let now = self.step;
        let ttl = self.cfg.dht_ttl;
        let retry = self.cfg.retransmit_interval;
        loop {
            let node = self.nodes.get_mut(&id).expect("known node");
            for d in node.v.tetris().missing_parents() {
                node.wanted.entry(d).or_insert((now, now));
            }
            let t = node.v.tetris();
            node.wanted.retain(|d, (first, _)| {
                !t.contains(d) && !t.is_pending(d) && t.rejection(d).is_none() && now < *first + ttl
            });
            let due: Vec<Digest> =
                node.wanted.iter().filter(|(_, (_, next))| *next <= now).map(|(d, _)| *d).collect();
            if due.is_empty() {
                break;
            }
            let mut progressed = false;
            for d in due {
                self.net.count(MessageKind::PullRequest, 32);
                match self.dht.get(&d) {
                    Some(DhtItem::Event(e)) => {
                        let e = e.clone();
                        self.net.count(MessageKind::PullResponse, e.to_wire().len());
                        progressed |= self.accept(id, e);
                        if let Some(w) = self.nodes.get_mut(&id).expect("known node").wanted.get_mut(&d) {
                            w.1 = now + retry;
                        }
                    }
                    _ => {
                        if let Some(w) = self.nodes.get_mut(&id).expect("known node").wanted.get_mut(&d) {
                            w.1 = now + retry;
                        }
                    }
                }
            }
            if !progressed {
                break;
            }
        }

        let node = self.nodes.get_mut(&id).expect("known node");
        node.wanted_txs.retain(|_, (first, _)| now < *first + ttl);
        let due: Vec<Digest> =
            node.wanted_txs.iter().filter(|(_, (_, next))| *next <= now).map(|(d, _)| *d).collect();
        for d in due {
            self.net.count(MessageKind::PullRequest, 32);
            let node = self.nodes.get_mut(&id).expect("known node");
            match self.dht.get(&d) {
                Some(DhtItem::Tx(tx)) => {
                    self.net.count(MessageKind::PullResponse, tx.payload().len());
                    node.v.add_tx(d);
                    node.wanted_txs.remove(&d);
                }
                _ => {
                    if let Some(w) = node.wanted_txs.get_mut(&d) {
                        w.1 = now + retry;
                    }
                }
            }
        }
    }

    fn inject_txs(&mut self) {
        let inj = self.cfg.tx_injection;
        let count = inj.rate_per_step.min(inj.total - self.txs_injected.min(inj.total));
        if count == 0 {
            return;
        }
        let entries: Vec<ValidatorId> = self
            .nodes
            .iter()
            .filter(|(_, n)| n.strategy.is_honest() && n.v.is_member())
            .map(|(id, _)| *id)
            .collect();
        if entries.is_empty() {
            return;
        }
        for _ in 0..count {
            let tx = Transaction::new(format!("tx:{}:{}", self.cfg.seed, self.txs_injected).into_bytes());
            self.txs_injected += 1;
            let txid = tx.txid();
            self.dht.put(txid, DhtItem::Tx(tx), self.cfg.dht_ttl).expect("key is the txid");
            let entry = entries[self.rng.gen_range(0..entries.len())];
            self.nodes.get_mut(&entry).expect("known node").v.add_tx(txid);
            self.announce_tx(entry, txid);
        }
    }

    fn announce_tx(&mut self, from: ValidatorId, txid: Digest) {
        let now = self.step;
        for &to in self.ids.iter().filter(|v| **v != from) {
            let delay = draw_delay(&mut self.rng, &self.cfg.delay, &self.split, to, false);
            let msg = NetMessage {
                kind: MessageKind::TxAnnounce,
                from,
                to,
                body: txid.as_bytes().to_vec(),
                deliver_at: now + delay,
            };
            self.net.send(msg, now, &mut self.rng);
        }
    }

    fn create(&mut self, id: ValidatorId) {
        let now = self.step;
        let ttl = self.cfg.dht_ttl;
        let node = self.nodes.get_mut(&id).expect("known node");
        if !node.v.is_member() || !node.v.has_news() {
            return;
        }
        if let StrategyKind::Silent { after_step } = node.strategy {
            if now >= after_step {
                return;
            }
        }
        let mut fake_tx = None;
        if matches!(node.strategy, StrategyKind::DhtWithholder) {
            fake_tx = Some(Digest::of(format!("withheld:{}:{}", id, node.fake_txs).as_bytes()));
            node.fake_txs += 1;
        }
        let extra: Vec<Digest> = fake_tx.into_iter().collect();
        let (e, headers) = node.v.create_event(&extra, &self.crypto);
        node.outbox.extend(headers);

        let mut twin = None;
        if node.forks_done < node.fork_seqs.len() && e.seq() >= node.fork_seqs[node.forks_done] {
            node.forks_done += 1;
            let tx = Transaction::new(format!("fork:{}:{}", id, e.seq()).into_bytes());
            let mut draft = e.draft().clone();
            draft.tx_hashes.insert(tx.txid());
            self.dht.put(tx.txid(), DhtItem::Tx(tx), ttl).expect("key is the txid");
            let b = draft.sign(&self.crypto);
            let headers = node.v.ingest_own_side_event(b.clone(), &self.crypto);
            node.outbox.extend(headers);
            twin = Some(b);
        }

        if !matches!(node.strategy, StrategyKind::DhtWithholder) {
            self.dht.put(e.digest(), DhtItem::Event(e.clone()), ttl).expect("key is the digest");
            if let Some(b) = &twin {
                self.dht.put(b.digest(), DhtItem::Event(b.clone()), ttl).expect("key is the digest");
            }
        }

        let strategy = self.nodes[&id].strategy.clone();
        let carries = self
            .split
            .as_ref()
            .is_some_and(|sp| self.nodes[&id].v.tetris().descends_from_any(&e.digest(), &sp.splitters));
        let delay = self.cfg.delay;
        let split = &self.split;
        let rng = &mut self.rng;
        let msgs = schedule_broadcast(id, &e, twin.as_ref(), &strategy, &self.ids, now, &mut |_, t| {
            draw_delay(rng, &delay, split, t, carries)
        });
        for m in msgs {
            self.net.send(m, now, &mut self.rng);
        }
        if let Some(fake) = fake_tx {
            self.announce_tx(id, fake);
        }
    }

    fn flush_headers(&mut self, id: ValidatorId) {
        let now = self.step;
        let node = self.nodes.get_mut(&id).expect("known node");
        let headers = std::mem::take(&mut node.outbox);
        if let StrategyKind::Silent { after_step } = node.strategy {
            if now >= after_step {
                return;
            }
        }
        for h in headers {
            let body = h.to_bytes();
            for &to in self.ids.iter().filter(|v| **v != id) {
                let delay = draw_delay(&mut self.rng, &self.cfg.delay, &self.split, to, false);
                let msg = NetMessage {
                    kind: MessageKind::HeaderAnnounce,
                    from: id,
                    to,
                    body: body.clone(),
                    deliver_at: now + delay,
                };
                self.net.send(msg, now, &mut self.rng);
            }
        }
    }
}

/// Runs a scenario to completion and returns its report.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunReport, ConfigError> {
    run_scenario_with(cfg, RunOptions::default()).map(|sim| sim.report())
}

/// Runs a scenario and hands back the finished simulation for inspection.
pub fn run_scenario_with(cfg: &ScenarioConfig, opts: RunOptions) -> Result<Simulation, ConfigError> {
    let mut sim = Simulation::new(cfg, opts)?;
    sim.run();
    Ok(sim)
}
