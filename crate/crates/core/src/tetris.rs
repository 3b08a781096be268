//! A validator's local event DAG.
//!
//! Events are accepted only once every parent is accepted, so the store is
//! closed under parents and node indices are a topological order. Each node
//! memoizes its ancestor set as a bitset over local indices, together with
//! the set of creators that have a fork somewhere inside that ancestry.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use fixedbitset::FixedBitSet;
use thiserror::Error;

use crate::event::{materialize_placeholders, Digest, Event, ValidatorId};
use crate::membership::{Membership, MAX_VALIDATOR_ID};

pub const DEFAULT_PENDING_CAP: usize = 10_000;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DagError {
    #[error("event {0:?} is not accepted")]
    NotAccepted(Digest),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    #[error("creator is not a known member")]
    UnknownMember,
    #[error("seq {found} but parents imply {expected}")]
    BadSequence { expected: u64, found: u64 },
    #[error("self-parent slot holds another creator's event")]
    SelfParentMismatch,
    #[error("other-parent created by the event's own creator")]
    OtherParentBySelf,
    #[error("a parent was rejected")]
    ParentRejected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Insert {
    /// Digests newly accepted by this call, in acceptance order. Includes
    /// derived placeholders and pending events released by the cascade.
    /// Empty for a duplicate.
    Accepted(Vec<Digest>),
    /// Parents still missing; the caller should pull them.
    Pending(BTreeSet<Digest>),
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MissingParentRequest {
    pub wanted: Digest,
    pub requested_by: ValidatorId,
}

struct Node {
    event: Event,
    /// Effective parents: slot-0 self-parent replaced by the last placeholder
    /// when the event skipped sequence numbers.
    parents: Vec<usize>,
    self_parent: Option<usize>,
    ancestors: FixedBitSet,
    /// Bit `c` set iff two events by creator `c` at one seq are both ancestors.
    forked: u64,
}

struct PendingEntry {
    event: Event,
    missing: BTreeSet<Digest>,
    order: u64,
}

pub struct Tetris {
    nodes: Vec<Node>,
    index: HashMap<Digest, usize>,
    by_creator_seq: BTreeMap<(ValidatorId, u64), Vec<usize>>,
    pending: HashMap<Digest, PendingEntry>,
    waiting_on: HashMap<Digest, BTreeSet<Digest>>,
    pending_order: BTreeMap<u64, Digest>,
    pending_counter: u64,
    pending_cap: usize,
    evicted: usize,
    fork_records: BTreeSet<(ValidatorId, u64)>,
    rejected: HashMap<Digest, RejectReason>,
    membership: Membership,
    registry: BTreeSet<ValidatorId>,
}

impl Tetris {
    pub fn new(membership: Membership) -> Self {
        Self::with_pending_cap(membership, DEFAULT_PENDING_CAP)
    }

    pub fn with_pending_cap(membership: Membership, pending_cap: usize) -> Self {
        let registry = membership.members().clone();
        Self {
            nodes: Vec::new(),
            index: HashMap::new(),
            by_creator_seq: BTreeMap::new(),
            pending: HashMap::new(),
            waiting_on: HashMap::new(),
            pending_order: BTreeMap::new(),
            pending_counter: 0,
            pending_cap: pending_cap.max(1),
            evicted: 0,
            fork_records: BTreeSet::new(),
            rejected: HashMap::new(),
            membership,
            registry,
        }
    }

    pub fn membership(&self) -> &Membership {
        &self.membership
    }

    pub fn t(&self) -> usize {
        self.membership.t()
    }

    /// Switches the quorum used by [`Tetris::know_well`]. Creators from
    /// earlier memberships stay registered so that their events can still
    /// be accepted as ancestors.
    pub fn set_membership(&mut self, membership: Membership) {
        self.registry.extend(membership.iter());
        self.membership = membership;
    }

    /// Lets events by `vid` be accepted without making it a quorum member.
    pub fn register(&mut self, vid: ValidatorId) {
        if vid.0 <= MAX_VALIDATOR_ID {
            self.registry.insert(vid);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, d: &Digest) -> bool {
        self.index.contains_key(d)
    }

    pub fn is_pending(&self, d: &Digest) -> bool {
        self.pending.contains_key(d)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn evicted(&self) -> usize {
        self.evicted
    }

    pub fn rejection(&self, d: &Digest) -> Option<RejectReason> {
        self.rejected.get(d).copied()
    }

    pub fn get(&self, d: &Digest) -> Option<&Event> {
        self.index.get(d).map(|&i| &self.nodes[i].event)
    }

    /// Accepted events in acceptance (topological) order.
    pub fn events(&self) -> impl Iterator<Item = &Event> + '_ {
        self.nodes.iter().map(|n| &n.event)
    }

    pub fn fork_records(&self) -> &BTreeSet<(ValidatorId, u64)> {
        &self.fork_records
    }

    /// Accepted events by `vid` at `seq`; more than one means a fork.
    pub fn events_at(&self, vid: ValidatorId, seq: u64) -> Vec<Digest> {
        self.idx_at(vid, seq).iter().map(|&i| self.nodes[i].event.digest()).collect()
    }

    pub fn insert(&mut self, e: Event) -> Insert {
        let d = e.digest();
        if self.index.contains_key(&d) {
            return Insert::Accepted(Vec::new());
        }
        if let Some(r) = self.rejected.get(&d) {
            return Insert::Rejected(*r);
        }
        if let Some(p) = self.pending.get(&d) {
            return Insert::Pending(p.missing.clone());
        }
        if !self.registry.contains(&e.vid()) {
            self.rejected.insert(d, RejectReason::UnknownMember);
            return Insert::Rejected(RejectReason::UnknownMember);
        }
        if e.parent_hashes().iter().any(|p| self.rejected.contains_key(p)) {
            self.rejected.insert(d, RejectReason::ParentRejected);
            return Insert::Rejected(RejectReason::ParentRejected);
        }
        let missing: BTreeSet<Digest> = e
            .parent_hashes()
            .iter()
            .filter(|p| !p.is_zero() && !self.index.contains_key(*p))
            .copied()
            .collect();
        if !missing.is_empty() {
            for m in &missing {
                self.waiting_on.entry(*m).or_default().insert(d);
            }
            let order = self.pending_counter;
            self.pending_counter += 1;
            self.pending_order.insert(order, d);
            self.pending.insert(d, PendingEntry { event: e, missing: missing.clone(), order });
            self.evict_overflow();
            return Insert::Pending(missing);
        }
        let mut accepted = Vec::new();
        match self.cascade(e, &mut accepted) {
            Some(reason) if accepted.is_empty() => Insert::Rejected(reason),
            _ => Insert::Accepted(accepted),
        }
    }

    /// Accepts `first` and every pending event it unblocks. Returns the
    /// rejection reason of `first` if it failed its structural checks.
    fn cascade(&mut self, first: Event, accepted: &mut Vec<Digest>) -> Option<RejectReason> {
        let first_digest = first.digest();
        let mut first_rejection = None;
        let mut work = VecDeque::from([first]);
        while let Some(e) = work.pop_front() {
            let d = e.digest();
            match self.try_accept(e, accepted) {
                Ok(()) => {
                    for child in self.waiting_on.remove(&d).unwrap_or_default() {
                        let ready = match self.pending.get_mut(&child) {
                            Some(p) => {
                                p.missing.remove(&d);
                                p.missing.is_empty()
                            }
                            None => false,
                        };
                        if ready {
                            let p = self.pending.remove(&child).unwrap();
                            self.pending_order.remove(&p.order);
                            work.push_back(p.event);
                        }
                    }
                }
                Err(reason) => {
                    if d == first_digest {
                        first_rejection = Some(reason);
                    }
                    self.reject_with_descendants(d, reason);
                }
            }
        }
        first_rejection
    }

    fn reject_with_descendants(&mut self, d: Digest, reason: RejectReason) {
        self.rejected.insert(d, reason);
        let mut stack = vec![d];
        while let Some(x) = stack.pop() {
            for child in self.waiting_on.remove(&x).unwrap_or_default() {
                if let Some(p) = self.pending.remove(&child) {
                    self.pending_order.remove(&p.order);
                    for m in &p.missing {
                        if let Some(w) = self.waiting_on.get_mut(m) {
                            w.remove(&child);
                        }
                    }
                    self.rejected.insert(child, RejectReason::ParentRejected);
                    stack.push(child);
                }
            }
        }
    }

    fn evict_overflow(&mut self) {
        while self.pending.len() > self.pending_cap {
            let Some((_, d)) = self.pending_order.pop_first() else { break };
            if let Some(p) = self.pending.remove(&d) {
                for m in &p.missing {
                    if let Some(w) = self.waiting_on.get_mut(m) {
                        w.remove(&d);
                        if w.is_empty() {
                            self.waiting_on.remove(m);
                        }
                    }
                }
                self.evicted += 1;
            }
        }
    }

    fn try_accept(&mut self, e: Event, accepted: &mut Vec<Digest>) -> Result<(), RejectReason> {
        let vid = e.vid();
        let self_parent = match e.self_parent() {
            Some(sp) => {
                let i = self.index[&sp];
                if self.nodes[i].event.vid() != vid {
                    return Err(RejectReason::SelfParentMismatch);
                }
                Some(i)
            }
            None => None,
        };
        let mut others = Vec::with_capacity(e.other_parents().len());
        for p in e.other_parents() {
            let i = self.index[p];
            if self.nodes[i].event.vid() == vid {
                return Err(RejectReason::OtherParentBySelf);
            }
            others.push(i);
        }
        let expected = self_parent
            .iter()
            .chain(&others)
            .map(|&i| self.nodes[i].event.seq() + 1)
            .max()
            .unwrap_or(0);
        if expected != e.seq() {
            return Err(RejectReason::BadSequence { expected, found: e.seq() });
        }

        let mut effective_self = self_parent;
        if let Some(sp) = self_parent {
            if self.nodes[sp].event.seq() + 1 < e.seq() {
                let sp_event = self.nodes[sp].event.clone();
                let placeholders = materialize_placeholders(&e, &sp_event)
                    .expect("gap checked above");
                let mut prev = sp;
                for ph in placeholders {
                    prev = match self.index.get(&ph.digest()) {
                        Some(&i) => i,
                        None => {
                            accepted.push(ph.digest());
                            self.push_node(ph, vec![prev], Some(prev))
                        }
                    };
                }
                effective_self = Some(prev);
            }
        }

        let mut parents = Vec::with_capacity(others.len() + 1);
        parents.extend(effective_self);
        parents.extend(others);
        accepted.push(e.digest());
        self.push_node(e, parents, effective_self);
        Ok(())
    }

    fn push_node(&mut self, event: Event, parents: Vec<usize>, self_parent: Option<usize>) -> usize {
        let idx = self.nodes.len();
        let mut ancestors = FixedBitSet::with_capacity(idx + 1);
        for &p in &parents {
            ancestors.union_with(&self.nodes[p].ancestors);
        }
        ancestors.grow(idx + 1);
        ancestors.insert(idx);

        let key = (event.vid(), event.seq());
        let slot = self.by_creator_seq.entry(key).or_default();
        slot.push(idx);
        if slot.len() >= 2 {
            self.fork_records.insert(key);
        }

        let mut forked = 0u64;
        for &(c, s) in &self.fork_records {
            let inside = self.by_creator_seq[&(c, s)]
                .iter()
                .filter(|&&j| j <= idx && ancestors.contains(j))
                .count();
            if inside >= 2 {
                forked |= 1 << c.0;
            }
        }

        self.index.insert(event.digest(), idx);
        self.nodes.push(Node { event, parents, self_parent, ancestors, forked });
        idx
    }

    /// Digests referenced by pending events that are neither accepted nor
    /// pending themselves.
    pub fn missing_parents(&self) -> BTreeSet<Digest> {
        self.waiting_on
            .keys()
            .filter(|d| !self.index.contains_key(*d) && !self.pending.contains_key(*d))
            .copied()
            .collect()
    }

    pub fn pull_requests(&self, requested_by: ValidatorId) -> Vec<MissingParentRequest> {
        self.missing_parents()
            .into_iter()
            .map(|wanted| MissingParentRequest { wanted, requested_by })
            .collect()
    }

    fn idx(&self, d: &Digest) -> Result<usize, DagError> {
        self.index.get(d).copied().ok_or(DagError::NotAccepted(*d))
    }

    pub fn ancestors(&self, x: &Digest) -> Result<BTreeSet<Digest>, DagError> {
        let i = self.idx(x)?;
        Ok(self.nodes[i].ancestors.ones().map(|j| self.nodes[j].event.digest()).collect())
    }

    pub fn know(&self, x: &Digest, y: &Digest) -> Result<bool, DagError> {
        Ok(self.know_idx(self.idx(x)?, self.idx(y)?))
    }

    pub fn know_well(&self, x: &Digest, y: &Digest) -> Result<bool, DagError> {
        Ok(self.know_well_idx(self.idx(x)?, self.idx(y)?, &self.membership))
    }

    /// Every event held by both stores has the same
    /// ancestor set. Both stores are closed under parents, so by induction
    /// over topological order it suffices that every shared event has the
    /// same parent set in both.
    pub fn consistent_with(&self, other: &Tetris) -> bool {
        self.nodes.iter().all(|n| match other.index.get(&n.event.digest()) {
            None => true,
            Some(&j) => {
                let mine: BTreeSet<Digest> =
                    n.parents.iter().map(|&p| self.nodes[p].event.digest()).collect();
                let theirs: BTreeSet<Digest> =
                    other.nodes[j].parents.iter().map(|&p| other.nodes[p].event.digest()).collect();
                mine == theirs && n.ancestors.count_ones(..) == other.nodes[j].ancestors.count_ones(..)
            }
        })
    }

    /// Checks, across several honest stores, that no two conflicting events
    /// at a forked position are each known-well by some event. Returns one
    /// message per offending position.
    pub fn fork_exclusivity_violations(stores: &[&Tetris]) -> Vec<String> {
        let mut positions: BTreeSet<(ValidatorId, u64)> = BTreeSet::new();
        for t in stores {
            positions.extend(t.fork_records.iter().copied());
        }
        let mut out = Vec::new();
        for (c, s) in positions {
            let mut branches: BTreeSet<Digest> = BTreeSet::new();
            for t in stores {
                branches.extend(t.events_at(c, s));
            }
            let well_known: Vec<Digest> = branches
                .into_iter()
                .filter(|d| {
                    stores.iter().any(|t| match t.index.get(d) {
                        None => false,
                        Some(&y) => {
                            (y + 1..t.nodes.len()).any(|x| t.know_well_idx(x, y, &t.membership))
                        }
                    })
                })
                .collect();
            if well_known.len() > 1 {
                out.push(format!(
                    "creator {c} seq {s}: {} conflicting events are each known-well",
                    well_known.len()
                ));
            }
        }
        out
    }

    /// Whether `x` or one of its ancestors was created by any of `creators`.
    pub fn descends_from_any(&self, x: &Digest, creators: &BTreeSet<ValidatorId>) -> bool {
        match self.index.get(x) {
            None => false,
            Some(&i) => self.nodes[i]
                .ancestors
                .ones()
                .any(|j| creators.contains(&self.nodes[j].event.vid())),
        }
    }

    /// Read-only view restricted to the ancestry of `root`.
    pub fn sub_tetris(&self, root: &Digest) -> Result<SubTetris<'_>, DagError> {
        Ok(SubTetris { tetris: self, root: self.idx(root)? })
    }

    /// Graphviz rendering. Nodes are labeled `vid:seq`; events at a forked
    /// position are double-bordered and `witnesses` are filled.
    pub fn to_dot(&self, witnesses: &BTreeSet<Digest>) -> String {
        let mut out = String::from("digraph tetris {\n  rankdir=BT;\n  node [shape=box];\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let e = &n.event;
            let mut attrs = vec![format!("label=\"{}:{}\"", e.vid(), e.seq())];
            if self.fork_records.contains(&(e.vid(), e.seq())) {
                attrs.push("peripheries=2".into());
            }
            if witnesses.contains(&e.digest()) {
                attrs.push("style=filled".into());
                attrs.push("fillcolor=lightgray".into());
            }
            if e.is_placeholder() {
                attrs.push("color=gray".into());
            }
            let _ = writeln!(out, "  n{} [{}];", i, attrs.join(", "));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            for &p in &n.parents {
                let _ = writeln!(out, "  n{i} -> n{p};");
            }
        }
        out.push_str("}\n");
        out
    }

    // ---- index-level API for the consensus engine ----

    pub(crate) fn index_of(&self, d: &Digest) -> Option<usize> {
        self.index.get(d).copied()
    }

    pub(crate) fn event_at(&self, i: usize) -> &Event {
        &self.nodes[i].event
    }

    pub(crate) fn parents_of(&self, i: usize) -> &[usize] {
        &self.nodes[i].parents
    }

    pub(crate) fn self_parent_of(&self, i: usize) -> Option<usize> {
        self.nodes[i].self_parent
    }

    pub(crate) fn ancestor_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes[i].ancestors.ones()
    }

    pub(crate) fn idx_at(&self, vid: ValidatorId, seq: u64) -> &[usize] {
        self.by_creator_seq.get(&(vid, seq)).map_or(&[], Vec::as_slice)
    }

    pub(crate) fn is_ancestor(&self, x: usize, y: usize) -> bool {
        y <= x && self.nodes[x].ancestors.contains(y)
    }

    pub(crate) fn sees_any_fork(&self, x: usize) -> bool {
        self.nodes[x].forked != 0
    }

    pub(crate) fn forked_in(&self, x: usize, c: ValidatorId) -> bool {
        self.nodes[x].forked & (1 << c.0) != 0
    }

    pub(crate) fn know_idx(&self, x: usize, y: usize) -> bool {
        self.is_ancestor(x, y) && !self.forked_in(x, self.nodes[y].event.vid())
    }

    /// True iff `x` knows `y` and at least `2t+1` distinct members have an
    /// event that `x` knows and that knows `y`.
    pub(crate) fn know_well_idx(&self, x: usize, y: usize, quorum: &Membership) -> bool {
        if !self.know_idx(x, y) {
            return false;
        }
        let (ys, xs) = (self.nodes[y].event.seq(), self.nodes[x].event.seq());
        let mut count = 0;
        for c in quorum.iter() {
            if self.forked_in(x, c) {
                continue;
            }
            let witnessed = self
                .by_creator_seq
                .range((c, ys)..=(c, xs))
                .flat_map(|(_, idxs)| idxs.iter())
                .any(|&e| self.is_ancestor(x, e) && self.know_idx(e, y));
            if witnessed {
                count += 1;
                if count >= quorum.quorum() {
                    return true;
                }
            }
        }
        false
    }
}

pub struct SubTetris<'a> {
    tetris: &'a Tetris,
    root: usize,
}

impl<'a> SubTetris<'a> {
    pub fn root(&self) -> &'a Event {
        &self.tetris.nodes[self.root].event
    }

    pub fn contains(&self, d: &Digest) -> bool {
        self.tetris.index_of(d).is_some_and(|j| self.tetris.is_ancestor(self.root, j))
    }

    pub fn len(&self) -> usize {
        self.tetris.nodes[self.root].ancestors.count_ones(..)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn events(&self) -> impl Iterator<Item = &'a Event> + 'a {
        let t = self.tetris;
        t.nodes[self.root].ancestors.ones().map(move |j| &t.nodes[j].event)
    }
}
