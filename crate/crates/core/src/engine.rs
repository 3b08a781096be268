//! Per-stage virtual voting.
//!
//! A stage's base events are the members' events at `seq == stage`. Every
//! later event gets a round; the first event of a creator in a round is a
//! witness, and witnesses vote on each base event:
//!
//! * round 1 votes true iff it know-wells that base event;
//! * round 2 votes true iff at least `round2_threshold` of the round-1
//!   witnesses it know-wells voted true;
//! * round 3 and up take the majority (ties go to true) of the previous
//!   round's know-welled witnesses, and decide once `2t+1` of them agree.
//!
//! With coins enabled every `coin_interval`-th round never decides; there a
//! witness without a `2t+1` supermajority votes its signature's coin bit.
//!
//! A [`StageState`] refers to events by their index in one particular
//! [`Tetris`] and must only be used with that tetris.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::crypto::CryptoProvider;
use crate::event::{Digest, ValidatorId};
use crate::membership::{Membership, MembershipDelta, MembershipError};
use crate::tetris::Tetris;

fn default_coin_interval() -> u32 {
    10
}

fn default_ancestor_depth() -> u64 {
    10
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolParams {
    /// Every `coin_interval`-th round is a coin round.
    #[serde(default = "default_coin_interval")]
    pub coin_interval: u32,
    /// Transactions are collected from ancestors with `seq >= stage - depth`.
    #[serde(default = "default_ancestor_depth")]
    pub ancestor_depth: u64,
    /// `None` means `floor(t/2) + 1`.
    #[serde(default)]
    pub round2_threshold: Option<usize>,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            coin_interval: default_coin_interval(),
            ancestor_depth: default_ancestor_depth(),
            round2_threshold: None,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.coin_interval < 2 {
            return Err(EngineError::InvalidParams("coin_interval must be >= 2"));
        }
        if self.ancestor_depth < 1 {
            return Err(EngineError::InvalidParams("ancestor_depth must be >= 1"));
        }
        if self.round2_threshold == Some(0) {
            return Err(EngineError::InvalidParams("round2_threshold must be >= 1"));
        }
        Ok(())
    }

    pub fn round2_threshold_for(&self, t: usize) -> usize {
        self.round2_threshold.unwrap_or(t / 2 + 1)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("event {0:?} is not accepted")]
    NotAccepted(Digest),
    #[error("event {0:?} lies below the stage floor")]
    BelowStage(Digest),
    #[error("creator of {0:?} is not a member of this stage")]
    NotAMember(Digest),
    #[error("a parent of {0:?} has no round yet")]
    ParentUnassigned(Digest),
    #[error("stage {0} is not complete")]
    StageIncomplete(u64),
    #[error(transparent)]
    BadMembershipSize(#[from] MembershipError),
    #[error("invalid protocol parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Undecided,
    Decided(bool),
}

impl Verdict {
    pub fn value(self) -> Option<bool> {
        match self {
            Verdict::Decided(v) => Some(v),
            Verdict::Undecided => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Complete,
    Incomplete,
}

/// Round, witness and vote bookkeeping for one stage of one tetris.
#[derive(Clone, Debug)]
pub struct StageState {
    stage: u64,
    membership: Membership,
    round_of: HashMap<usize, u32>,
    witnesses: BTreeMap<u32, Vec<usize>>,
    prev_known: HashMap<usize, Vec<usize>>,
    votes: HashMap<(usize, ValidatorId, bool), bool>,
    committable: BTreeMap<ValidatorId, Verdict>,
    decided_round: BTreeMap<ValidatorId, u32>,
    next_index: usize,
}

impl StageState {
    pub fn new(stage: u64, membership: Membership) -> Self {
        let committable = membership.iter().map(|v| (v, Verdict::Undecided)).collect();
        Self {
            stage,
            membership,
            round_of: HashMap::new(),
            witnesses: BTreeMap::new(),
            prev_known: HashMap::new(),
            votes: HashMap::new(),
            committable,
            decided_round: BTreeMap::new(),
            next_index: 0,
        }
    }

    pub fn stage(&self) -> u64 {
        self.stage
    }

    pub fn membership(&self) -> &Membership {
        &self.membership
    }

    pub fn committable(&self) -> &BTreeMap<ValidatorId, Verdict> {
        &self.committable
    }

    pub fn verdict(&self, b: ValidatorId) -> Verdict {
        self.committable.get(&b).copied().unwrap_or(Verdict::Undecided)
    }

    /// Round at which each decided base event was decided.
    pub fn decided_rounds(&self) -> &BTreeMap<ValidatorId, u32> {
        &self.decided_round
    }

    pub fn max_round(&self) -> u32 {
        self.witnesses.keys().next_back().copied().unwrap_or(0)
    }

    pub fn round_of(&self, t: &Tetris, d: &Digest) -> Option<u32> {
        t.index_of(d).and_then(|i| self.round_of.get(&i).copied())
    }

    pub fn witnesses_in(&self, t: &Tetris, round: u32) -> Vec<Digest> {
        self.witnesses
            .get(&round)
            .map(|w| w.iter().map(|&i| t.event_at(i).digest()).collect())
            .unwrap_or_default()
    }

    pub fn witness_counts(&self) -> BTreeMap<u32, usize> {
        self.witnesses.iter().map(|(r, w)| (*r, w.len())).collect()
    }

    pub fn all_witnesses(&self, t: &Tetris) -> BTreeSet<Digest> {
        self.witnesses.values().flatten().map(|&i| t.event_at(i).digest()).collect()
    }

    /// Base events of `b` currently in the tetris (two or more on a fork).
    pub fn base_events(&self, t: &Tetris, b: ValidatorId) -> Vec<Digest> {
        t.events_at(b, self.stage)
    }

    /// Assigns rounds to every not-yet-seen accepted event that belongs to
    /// this stage. Acceptance order is topological, so parents always come
    /// first.
    pub fn sync(&mut self, t: &Tetris) {
        while self.next_index < t.len() {
            let i = self.next_index;
            self.next_index += 1;
            let e = t.event_at(i);
            if e.seq() >= self.stage && self.membership.contains(e.vid()) {
                self.assign_idx(t, i).expect("acceptance order is topological");
            }
        }
    }

    fn assign_idx(&mut self, t: &Tetris, i: usize) -> Result<u32, EngineError> {
        if let Some(&r) = self.round_of.get(&i) {
            return Ok(r);
        }
        let e = t.event_at(i);
        if e.seq() < self.stage {
            return Err(EngineError::BelowStage(e.digest()));
        }
        if !self.membership.contains(e.vid()) {
            return Err(EngineError::NotAMember(e.digest()));
        }
        if e.seq() == self.stage {
            self.round_of.insert(i, 0);
            self.witnesses.entry(0).or_default().push(i);
            return Ok(0);
        }
        let mut parent_round = 0;
        for &p in t.parents_of(i) {
            let pe = t.event_at(p);
            if pe.seq() < self.stage || !self.membership.contains(pe.vid()) {
                continue;
            }
            match self.round_of.get(&p) {
                Some(&r) => parent_round = parent_round.max(r),
                None => return Err(EngineError::ParentUnassigned(e.digest())),
            }
        }
        let quorum = self.membership.quorum();
        let known_well = self
            .witnesses
            .get(&parent_round)
            .map(|ws| {
                ws.iter()
                    .filter(|&&w| t.know_well_idx(i, w, &self.membership))
                    .take(quorum)
                    .count()
            })
            .unwrap_or(0);
        let round = if known_well >= quorum { parent_round + 1 } else { parent_round };
        self.round_of.insert(i, round);
        if round >= 1 && self.first_in_round(t, i, round) {
            self.witnesses.entry(round).or_default().push(i);
        }
        Ok(round)
    }

    fn first_in_round(&self, t: &Tetris, i: usize, round: u32) -> bool {
        match t.self_parent_of(i) {
            None => true,
            Some(sp) => {
                t.event_at(sp).seq() < self.stage
                    || self.round_of.get(&sp).is_none_or(|&r| r < round)
            }
        }
    }

    /// Witnesses of the previous round that `w` know-wells. Fixed once `w` is
    /// accepted, because all of them are among its ancestors.
    fn prev_known(&mut self, t: &Tetris, w: usize) -> Vec<usize> {
        if let Some(v) = self.prev_known.get(&w) {
            return v.clone();
        }
        let r = self.round_of[&w];
        let v: Vec<usize> = self
            .witnesses
            .get(&(r - 1))
            .map(|ws| {
                ws.iter().copied().filter(|&x| t.know_well_idx(w, x, &self.membership)).collect()
            })
            .unwrap_or_default();
        self.prev_known.insert(w, v.clone());
        v
    }

    fn tally(
        &mut self,
        t: &Tetris,
        w: usize,
        b: ValidatorId,
        params: &ProtocolParams,
        coin: Option<&dyn CryptoProvider>,
    ) -> (bool, usize) {
        let s = self.prev_known(t, w);
        let yes = s.iter().filter(|&&x| self.vote(t, x, b, params, coin)).count();
        let no = s.len() - yes;
        if yes >= no {
            (true, yes)
        } else {
            (false, no)
        }
    }

    fn vote(
        &mut self,
        t: &Tetris,
        w: usize,
        b: ValidatorId,
        params: &ProtocolParams,
        coin: Option<&dyn CryptoProvider>,
    ) -> bool {
        let key = (w, b, coin.is_some());
        if let Some(&v) = self.votes.get(&key) {
            return v;
        }
        let round = self.round_of[&w];
        let v = match round {
            0 => false,
            1 => t
                .idx_at(b, self.stage)
                .iter()
                .any(|&y| t.know_well_idx(w, y, &self.membership)),
            2 => {
                let s = self.prev_known(t, w);
                let yes = s.iter().filter(|&&x| self.vote(t, x, b, params, coin)).count();
                yes >= params.round2_threshold_for(self.membership.t())
            }
            r => {
                let (v, n) = self.tally(t, w, b, params, coin);
                match coin {
                    Some(c) if r % params.coin_interval == 0 && n < self.membership.quorum() => {
                        c.coin_bit(t.event_at(w).signature()) == 1
                    }
                    _ => v,
                }
            }
        };
        self.votes.insert(key, v);
        v
    }

    /// Runs the decision procedure over the current witnesses without
    /// consulting or updating the stored verdict. Returns the decided value
    /// and the round of the first deciding witness.
    pub fn evaluate(
        &mut self,
        t: &Tetris,
        b: ValidatorId,
        params: &ProtocolParams,
        coin: Option<&dyn CryptoProvider>,
    ) -> Option<(bool, u32)> {
        let quorum = self.membership.quorum();
        for r in 3..=self.max_round() {
            if coin.is_some() && r % params.coin_interval == 0 {
                continue;
            }
            let ws = self.witnesses.get(&r).cloned().unwrap_or_default();
            for w in ws {
                let (v, n) = self.tally(t, w, b, params, coin);
                if n >= quorum {
                    return Some((v, r));
                }
            }
        }
        None
    }

    fn decide_inner(
        &mut self,
        t: &Tetris,
        b: ValidatorId,
        params: &ProtocolParams,
        coin: Option<&dyn CryptoProvider>,
    ) -> Verdict {
        match self.verdict(b) {
            Verdict::Decided(v) => Verdict::Decided(v),
            Verdict::Undecided => {
                if !self.membership.contains(b) {
                    return Verdict::Undecided;
                }
                match self.evaluate(t, b, params, coin) {
                    Some((v, r)) => {
                        self.committable.insert(b, Verdict::Decided(v));
                        self.decided_round.insert(b, r);
                        Verdict::Decided(v)
                    }
                    None => Verdict::Undecided,
                }
            }
        }
    }

    /// Vote table for one base event: for each round, the witnesses in order
    /// with their vote and, from round 3 on, their tally.
    pub fn vote_table(
        &mut self,
        t: &Tetris,
        b: ValidatorId,
        params: &ProtocolParams,
        coin: Option<&dyn CryptoProvider>,
        up_to_round: u32,
    ) -> Vec<VoteRow> {
        let mut rows = Vec::new();
        for r in 1..=up_to_round.min(self.max_round()) {
            for w in self.witnesses.get(&r).cloned().unwrap_or_default() {
                let vote = self.vote(t, w, b, params, coin);
                let tally = (r >= 3).then(|| {
                    let s = self.prev_known(t, w);
                    let yes = s.iter().filter(|&&x| self.vote(t, x, b, params, coin)).count();
                    (yes, s.len() - yes)
                });
                let e = t.event_at(w);
                rows.push(VoteRow { round: r, creator: e.vid(), seq: e.seq(), vote, tally });
            }
        }
        rows
    }

    pub(crate) fn force_verdict(&mut self, b: ValidatorId, v: bool) {
        self.committable.insert(b, Verdict::Decided(v));
    }

    /// Checks that a witness of every round `r >= 1` know-wells `2t+1`
    /// witnesses of round `r-1`, and that a nonempty round `r+1` implies at
    /// least `2t+1` witnesses in round `r`.
    ///
    /// Know-well is only monotone along ancestry while no fork is visible, so
    /// a witness that sees a fork can inherit its round from a parent yet
    /// know-well fewer witnesses itself. Such cases are returned separately.
    pub fn witness_structure_check(&mut self, t: &Tetris) -> StructureReport {
        let quorum = self.membership.quorum();
        let mut out = StructureReport::default();
        let rounds: Vec<u32> = self.witnesses.keys().copied().collect();
        for &r in &rounds {
            if r == 0 {
                continue;
            }
            for w in self.witnesses[&r].clone() {
                let k = self.prev_known(t, w).len();
                if k < quorum {
                    let e = t.event_at(w);
                    let msg = format!(
                        "stage {} round {r}: witness {}:{} know-wells {k} < {quorum} previous witnesses",
                        self.stage,
                        e.vid(),
                        e.seq()
                    );
                    if t.sees_any_fork(w) {
                        out.fork_induced.push(msg);
                    } else {
                        out.violations.push(msg);
                    }
                }
            }
            let below = self.witnesses.get(&(r - 1)).map_or(0, Vec::len);
            if below < quorum {
                out.violations.push(format!(
                    "stage {} round {}: {below} witnesses below a nonempty round {r}",
                    self.stage,
                    r - 1
                ));
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StructureReport {
    pub violations: Vec<String>,
    /// Shortfalls at witnesses whose ancestry contains a fork.
    pub fork_induced: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteRow {
    pub round: u32,
    pub creator: ValidatorId,
    pub seq: u64,
    pub vote: bool,
    /// (true votes, false votes) among known-well previous-round witnesses.
    pub tally: Option<(usize, usize)>,
}

pub fn assign_round(t: &Tetris, s: &mut StageState, e: &Digest) -> Result<u32, EngineError> {
    let i = t.index_of(e).ok_or(EngineError::NotAccepted(*e))?;
    s.assign_idx(t, i)
}

/// Rebuilds the witness map from the assigned rounds. For each creator, an
/// event is a witness of its round if its self-parent is in an earlier
/// round (or outside the stage); base events are the round-0 witnesses.
pub fn find_witnesses(t: &Tetris, s: &mut StageState) -> BTreeMap<u32, BTreeSet<Digest>> {
    let mut assigned: Vec<(usize, u32)> = s.round_of.iter().map(|(&i, &r)| (i, r)).collect();
    assigned.sort_unstable();
    let mut witnesses: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in assigned {
        let is_witness = if r == 0 {
            t.event_at(i).seq() == s.stage
        } else {
            s.first_in_round(t, i, r)
        };
        if is_witness {
            witnesses.entry(r).or_default().push(i);
        }
    }
    s.witnesses = witnesses;
    s.prev_known.clear();
    s.votes.clear();
    s.witnesses
        .iter()
        .map(|(r, ws)| (*r, ws.iter().map(|&i| t.event_at(i).digest()).collect()))
        .collect()
}

/// The coin-free decision procedure. Once a verdict is reached it is stored
/// and returned unchanged by later calls.
pub fn decide(t: &Tetris, s: &mut StageState, b: ValidatorId, params: &ProtocolParams) -> Verdict {
    s.decide_inner(t, b, params, None)
}

/// [`decide`] with periodic coin rounds.
pub fn decide_with_coin(
    t: &Tetris,
    s: &mut StageState,
    b: ValidatorId,
    params: &ProtocolParams,
    crypto: &dyn CryptoProvider,
) -> Verdict {
    s.decide_inner(t, b, params, Some(crypto))
}

pub fn stage_verdict(s: &StageState) -> StageStatus {
    if s.membership.iter().all(|v| s.verdict(v) != Verdict::Undecided) {
        StageStatus::Complete
    } else {
        StageStatus::Incomplete
    }
}

/// The base event whose transactions count for `b`: its only base event,
/// or on a fork the branch some round-1 witness know-wells.
fn committed_base(t: &Tetris, s: &StageState, b: ValidatorId) -> Option<usize> {
    let bases = t.idx_at(b, s.stage);
    match bases {
        [] => None,
        [only] => Some(*only),
        _ => {
            let round1 = s.witnesses.get(&1).map(Vec::as_slice).unwrap_or(&[]);
            bases
                .iter()
                .copied()
                .find(|&y| round1.iter().any(|&w| t.know_well_idx(w, y, &s.membership)))
        }
    }
}

/// Transactions referenced by at least `t+1` distinct committable base
/// events (through the base event or its ancestors no deeper than
/// `stage - ancestor_depth`), minus those already committed. Sorted bytewise.
pub fn collect_committable_txs(
    t: &Tetris,
    s: &StageState,
    params: &ProtocolParams,
    already_committed: &BTreeSet<Digest>,
) -> Vec<Digest> {
    let floor = s.stage.saturating_sub(params.ancestor_depth);
    let mut seen_by: BTreeMap<Digest, BTreeSet<ValidatorId>> = BTreeMap::new();
    for (&b, verdict) in &s.committable {
        if *verdict != Verdict::Decided(true) {
            continue;
        }
        let Some(base) = committed_base(t, s, b) else { continue };
        for a in t.ancestor_indices(base) {
            let e = t.event_at(a);
            if e.seq() >= floor {
                for tx in e.tx_hashes() {
                    seen_by.entry(*tx).or_default().insert(b);
                }
            }
        }
    }
    let need = s.membership.t() + 1;
    seen_by
        .into_iter()
        .filter(|(tx, vs)| vs.len() >= need && !already_committed.contains(tx))
        .map(|(tx, _)| tx)
        .collect()
}

pub fn tx_root(txids: &[Digest]) -> Digest {
    let mut h = Sha256::new();
    for tx in txids {
        h.update(tx.as_bytes());
    }
    Digest(h.finalize().into())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: u64,
    pub tx_root: Digest,
    pub signer: ValidatorId,
    #[serde(with = "hex_bytes")]
    pub signature: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl BlockHeader {
    pub fn signing_digest(height: u64, tx_root: &Digest) -> Digest {
        let mut bytes = Vec::with_capacity(8 + 32);
        bytes.extend_from_slice(&height.to_be_bytes());
        bytes.extend_from_slice(tx_root.as_bytes());
        Digest::of(&bytes)
    }

    pub fn verify(&self, crypto: &dyn CryptoProvider) -> bool {
        crypto.verify(self.signer, &Self::signing_digest(self.height, &self.tx_root), &self.signature)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 32 + 4 + 4 + self.signature.len());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(self.tx_root.as_bytes());
        out.extend_from_slice(&self.signer.0.to_be_bytes());
        out.extend_from_slice(&(self.signature.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<BlockHeader> {
        let height = u64::from_be_bytes(b.get(0..8)?.try_into().ok()?);
        let tx_root = Digest(b.get(8..40)?.try_into().ok()?);
        let signer = ValidatorId(u32::from_be_bytes(b.get(40..44)?.try_into().ok()?));
        let len = u32::from_be_bytes(b.get(44..48)?.try_into().ok()?) as usize;
        let signature = b.get(48..48 + len)?.to_vec();
        (b.len() == 48 + len).then_some(BlockHeader { height, tx_root, signer, signature })
    }
}

pub fn build_block(
    s: &StageState,
    txids: &[Digest],
    signer: ValidatorId,
    crypto: &dyn CryptoProvider,
) -> BlockHeader {
    let root = tx_root(txids);
    let signature = crypto.sign(signer, &BlockHeader::signing_digest(s.stage, &root));
    BlockHeader { height: s.stage, tx_root: root, signer, signature }
}

/// A block and the headers gathered for it so far.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub txids: Vec<Digest>,
    pub tx_root: Digest,
    pub headers: BTreeMap<ValidatorId, BlockHeader>,
}

impl Block {
    pub fn new(height: u64, txids: Vec<Digest>) -> Self {
        let tx_root = tx_root(&txids);
        Self { height, txids, tx_root, headers: BTreeMap::new() }
    }

    /// Keeps `h` if it is validly signed and matches this block.
    pub fn add_header(&mut self, h: BlockHeader, crypto: &dyn CryptoProvider) -> bool {
        if h.height != self.height || h.tx_root != self.tx_root || !h.verify(crypto) {
            return false;
        }
        self.headers.insert(h.signer, h);
        true
    }

    /// `t+1` matching headers from distinct signers.
    pub fn is_confirmed(&self, t: usize) -> bool {
        self.headers.len() > t
    }
}

pub fn advance_stage(
    s: &StageState,
    rotation: Option<&MembershipDelta>,
) -> Result<StageState, EngineError> {
    if stage_verdict(s) != StageStatus::Complete {
        return Err(EngineError::StageIncomplete(s.stage));
    }
    let membership = match rotation {
        Some(delta) => s.membership.apply(delta)?,
        None => s.membership.clone(),
    };
    Ok(StageState::new(s.stage + 1, membership))
}
