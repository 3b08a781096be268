//! Message scheduling: delays, drops with retransmission, partitions.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::event::{Event, ValidatorId};

use super::config::{Partition, StrategyKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    EventAnnounce,
    TxAnnounce,
    HeaderAnnounce,
    PullRequest,
    PullResponse,
}

impl MessageKind {
    pub fn name(self) -> &'static str {
        match self {
            MessageKind::EventAnnounce => "event_announce",
            MessageKind::TxAnnounce => "tx_announce",
            MessageKind::HeaderAnnounce => "header_announce",
            MessageKind::PullRequest => "pull_request",
            MessageKind::PullResponse => "pull_response",
        }
    }
}

/// An event announce body is either the full wire encoding or, from a
/// withholder, just the 32-byte digest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetMessage {
    pub kind: MessageKind,
    pub from: ValidatorId,
    pub to: ValidatorId,
    pub body: Vec<u8>,
    pub deliver_at: u64,
}

/// Turns one freshly created event into per-recipient messages according to
/// the creator's strategy. `twin` is the second branch of a fork.
pub fn schedule_broadcast(
    from: ValidatorId,
    e: &Event,
    twin: Option<&Event>,
    strategy: &StrategyKind,
    peers: &[ValidatorId],
    step: u64,
    delay: &mut dyn FnMut(ValidatorId, ValidatorId) -> u64,
) -> Vec<NetMessage> {
    let mut out = Vec::new();
    let mut push = |to: ValidatorId, body: Vec<u8>, delay: &mut dyn FnMut(ValidatorId, ValidatorId) -> u64| {
        out.push(NetMessage {
            kind: MessageKind::EventAnnounce,
            from,
            to,
            body,
            deliver_at: step + delay(from, to),
        })
    };
    for &to in peers.iter().filter(|p| **p != from) {
        match strategy {
            StrategyKind::Silent { after_step } if step >= *after_step => {}
            StrategyKind::Selective { omit } if omit.contains(&to) => {}
            StrategyKind::DhtWithholder => push(to, e.digest().as_bytes().to_vec(), delay),
            StrategyKind::Forker { branch_a, branch_b, .. } => match twin {
                Some(b) if branch_b.contains(&to) => push(to, b.to_wire(), delay),
                Some(_) if !branch_a.contains(&to) => {}
                _ => push(to, e.to_wire(), delay),
            },
            _ => push(to, e.to_wire(), delay),
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetStats {
    pub messages: u64,
    pub bytes: u64,
    pub by_kind: BTreeMap<String, u64>,
    pub dropped: u64,
    pub held_by_partition: u64,
    pub max_latency: u64,
}

enum Queued {
    Deliver { msg: NetMessage, sent_at: u64 },
    Retransmit { msg: NetMessage, sent_at: u64 },
}

pub struct Network {
    queue: BTreeMap<(u64, u64), Queued>,
    next_id: u64,
    drop_rate: f64,
    retransmit_interval: u64,
    partitions: Vec<Partition>,
    pub stats: NetStats,
}

impl Network {
    pub fn new(drop_rate: f64, retransmit_interval: u64, partitions: Vec<Partition>) -> Self {
        Self {
            queue: BTreeMap::new(),
            next_id: 0,
            drop_rate,
            retransmit_interval,
            partitions,
            stats: NetStats::default(),
        }
    }

    fn push(&mut self, at: u64, q: Queued) {
        self.queue.insert((at, self.next_id), q);
        self.next_id += 1;
    }

    /// Accounts for a message that is delivered synchronously (DHT traffic).
    pub fn count(&mut self, kind: MessageKind, bytes: usize) {
        self.stats.messages += 1;
        self.stats.bytes += bytes as u64;
        *self.stats.by_kind.entry(kind.name().to_string()).or_default() += 1;
    }

    /// Puts a message on the wire at `now`; its `deliver_at` was already
    /// drawn by the sender's delay model.
    pub fn send(&mut self, msg: NetMessage, now: u64, rng: &mut ChaCha8Rng) {
        self.transmit(msg, now, now, rng)
    }

    fn transmit(&mut self, msg: NetMessage, now: u64, sent_at: u64, rng: &mut ChaCha8Rng) {
        self.count(msg.kind, msg.body.len());
        if self.drop_rate > 0.0 && rng.gen::<f64>() < self.drop_rate {
            self.stats.dropped += 1;
            self.push(now + self.retransmit_interval, Queued::Retransmit { msg, sent_at });
        } else {
            let at = msg.deliver_at.max(now + 1);
            self.push(at, Queued::Deliver { msg, sent_at });
        }
    }

    /// Messages due at `now`, in scheduling order. Retransmissions and
    /// partition releases are redrawn with `delay`.
    pub fn due(
        &mut self,
        now: u64,
        rng: &mut ChaCha8Rng,
        delay: &mut dyn FnMut(&mut ChaCha8Rng, &NetMessage) -> u64,
    ) -> Vec<NetMessage> {
        let mut out = Vec::new();
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > now {
                break;
            }
            match entry.remove() {
                Queued::Retransmit { mut msg, sent_at } => {
                    msg.deliver_at = now + delay(rng, &msg);
                    self.transmit(msg, now, sent_at, rng);
                }
                Queued::Deliver { mut msg, sent_at } => {
                    let heal = self
                        .partitions
                        .iter()
                        .filter(|p| p.blocks(now, msg.from, msg.to))
                        .map(|p| p.to_step)
                        .max();
                    match heal {
                        Some(h) => {
                            self.stats.held_by_partition += 1;
                            msg.deliver_at = h + delay(rng, &msg);
                            self.push(msg.deliver_at, Queued::Deliver { msg, sent_at });
                        }
                        None => {
                            self.stats.max_latency = self.stats.max_latency.max(now - sent_at);
                            out.push(msg);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}
