//! Slow reference implementation of the DAG predicates and the voting
//! procedure, written straight from the definitions. Only meant for small
//! fork-free DAGs in tests.

use std::collections::{BTreeMap, BTreeSet};

use tetris_core::{Digest, Event, EventDraft, Membership, ValidatorId};

#[derive(Clone, Debug)]
pub struct OEvent {
    pub vid: ValidatorId,
    pub seq: u64,
    pub parents: Vec<Digest>,
}

pub struct Oracle {
    pub membership: Membership,
    pub events: BTreeMap<Digest, OEvent>,
    /// Topological order, placeholders included.
    pub order: Vec<Digest>,
    anc: BTreeMap<Digest, BTreeSet<Digest>>,
    /// Creators with two distinct events at one seq inside each ancestry.
    forked: BTreeMap<Digest, BTreeSet<ValidatorId>>,
}

impl Oracle {
    /// `events` must be real (signed) events in an order where parents come
    /// first. Gaps in a creator's chain are filled with empty events that
    /// carry only the self-parent link.
    pub fn new(membership: Membership, events: &[Event]) -> Self {
        let mut o = Self {
            membership,
            events: BTreeMap::new(),
            order: Vec::new(),
            anc: BTreeMap::new(),
            forked: BTreeMap::new(),
        };
        for e in events {
            let mut parents: Vec<Digest> =
                e.parent_hashes().iter().copied().filter(|p| !p.is_zero()).collect();
            if let Some(sp) = e.self_parent() {
                let sp_seq = o.events[&sp].seq;
                let mut prev = sp;
                for seq in sp_seq + 1..e.seq() {
                    let draft = EventDraft {
                        vid: e.vid(),
                        seq,
                        parent_hashes: vec![prev],
                        tx_hashes: BTreeSet::new(),
                    };
                    let d = draft.digest();
                    if !o.events.contains_key(&d) {
                        o.push(d, OEvent { vid: e.vid(), seq, parents: vec![prev] });
                    }
                    prev = d;
                }
                parents[0] = prev;
            }
            o.push(e.digest(), OEvent { vid: e.vid(), seq: e.seq(), parents });
        }
        o
    }

    fn push(&mut self, d: Digest, e: OEvent) {
        let mut anc = BTreeSet::from([d]);
        let mut stack = e.parents.clone();
        while let Some(p) = stack.pop() {
            if anc.insert(p) {
                stack.extend(self.events[&p].parents.iter().copied());
            }
        }
        self.events.insert(d, e);
        let mut slots: BTreeMap<(ValidatorId, u64), usize> = BTreeMap::new();
        for a in &anc {
            let ev = &self.events[a];
            *slots.entry((ev.vid, ev.seq)).or_default() += 1;
        }
        let forked = slots.into_iter().filter(|(_, k)| *k > 1).map(|((c, _), _)| c).collect();
        self.forked.insert(d, forked);
        self.anc.insert(d, anc);
        self.order.push(d);
    }

    pub fn ancestors(&self, x: &Digest) -> &BTreeSet<Digest> {
        &self.anc[x]
    }

    fn forked_in(&self, x: &Digest, c: ValidatorId) -> bool {
        self.forked[x].contains(&c)
    }

    pub fn know(&self, x: &Digest, y: &Digest) -> bool {
        self.anc[x].contains(y) && !self.forked_in(x, self.events[y].vid)
    }

    pub fn know_well(&self, x: &Digest, y: &Digest) -> bool {
        if !self.know(x, y) {
            return false;
        }
        let creators: BTreeSet<ValidatorId> = self.anc[x]
            .iter()
            .filter(|e| self.membership.contains(self.events[*e].vid))
            .filter(|e| self.know(x, e) && self.know(e, y))
            .map(|e| self.events[e].vid)
            .collect();
        creators.len() >= self.membership.quorum()
    }

    /// Rounds and witnesses of one stage. The round-0 witnesses are the base
    /// events; above that a witness is an event with the smallest seq among
    /// its creator's events of that round.
    pub fn rounds(&self, stage: u64) -> (BTreeMap<Digest, u32>, BTreeMap<u32, BTreeSet<Digest>>) {
        let mut round: BTreeMap<Digest, u32> = BTreeMap::new();
        let mut witnesses: BTreeMap<u32, BTreeSet<Digest>> = BTreeMap::new();
        let in_stage = |e: &OEvent| e.seq >= stage && self.membership.contains(e.vid);
        for d in &self.order {
            let e = &self.events[d];
            if !in_stage(e) {
                continue;
            }
            let r = if e.seq == stage {
                0
            } else {
                let r = e
                    .parents
                    .iter()
                    .filter(|p| in_stage(&self.events[*p]))
                    .map(|p| round[p])
                    .max()
                    .unwrap_or(0);
                let known = witnesses
                    .get(&r)
                    .map_or(0, |ws| ws.iter().filter(|w| self.know_well(d, w)).count());
                if known >= self.membership.quorum() {
                    r + 1
                } else {
                    r
                }
            };
            round.insert(*d, r);
            let first = if r == 0 {
                e.seq == stage
            } else {
                !round.iter().any(|(o, &ro)| {
                    ro == r && self.events[o].vid == e.vid && self.events[o].seq < e.seq
                })
            };
            if first {
                witnesses.entry(r).or_default().insert(*d);
            }
        }
        (round, witnesses)
    }

    /// Plain decide procedure for base `b`. Returns the verdict and the round
    /// of the first deciding witness, or `None` if undecided.
    pub fn decide(&self, stage: u64, b: ValidatorId, round2_threshold: usize) -> Option<(bool, u32)> {
        let (_, witnesses) = self.rounds(stage);
        let quorum = self.membership.quorum();
        let bases: Vec<Digest> = self
            .order
            .iter()
            .filter(|d| self.events[*d].vid == b && self.events[*d].seq == stage)
            .copied()
            .collect();
        let mut votes: BTreeMap<Digest, bool> = BTreeMap::new();
        let max_round = witnesses.keys().copied().max().unwrap_or(0);
        for r in 1..=max_round {
            let mut decided = None;
            for w in &witnesses[&r] {
                let prev: Vec<bool> = witnesses
                    .get(&(r - 1))
                    .map(|ws| {
                        ws.iter()
                            .filter(|x| self.know_well(w, x))
                            .map(|x| votes.get(x).copied().unwrap_or(false))
                            .collect()
                    })
                    .unwrap_or_default();
                let yes = prev.iter().filter(|v| **v).count();
                let no = prev.len() - yes;
                let vote = match r {
                    1 => bases.iter().any(|y| self.know_well(w, y)),
                    2 => yes >= round2_threshold,
                    _ => {
                        let v = yes >= no;
                        let n = if v { yes } else { no };
                        if n >= quorum && decided.is_none() {
                            decided = Some((v, r));
                        }
                        v
                    }
                };
                votes.insert(*w, vote);
            }
            if decided.is_some() {
                return decided;
            }
        }
        None
    }
}
