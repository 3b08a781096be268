//! A validator: one tetris, the consensus state of its current stage, and
//! the blocks it has produced.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::CryptoProvider;
use crate::engine::{
    advance_stage, build_block, collect_committable_txs, decide_with_coin, stage_verdict, Block,
    BlockHeader, ProtocolParams, StageState, StageStatus, Verdict,
};
use crate::event::{create_event, Digest, Event, ValidatorId};
use crate::membership::{Membership, MembershipDelta};
use crate::tetris::{Insert, Tetris};

/// Deliberate engine faults for checking that the harness notices broken
/// consensus. Never enabled in normal runs.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    /// Records the negation of every verdict the engine reaches.
    InvertVerdicts,
}

/// Summary of a completed stage as seen by one validator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u64,
    pub committable: BTreeMap<ValidatorId, bool>,
    pub decided_rounds: BTreeMap<ValidatorId, u32>,
    pub rounds_to_decision: u32,
    pub committed_txids: Vec<Digest>,
    pub tx_root: Digest,
    pub witness_counts: BTreeMap<u32, usize>,
    /// Members that had a base event in this validator's tetris at completion.
    pub present_bases: BTreeSet<ValidatorId>,
}

pub struct Validator {
    id: ValidatorId,
    params: ProtocolParams,
    tetris: Tetris,
    stage: StageState,
    finished: Vec<StageState>,
    records: Vec<StageRecord>,
    committed: BTreeSet<Digest>,
    blocks: BTreeMap<u64, Block>,
    early_headers: BTreeMap<u64, Vec<BlockHeader>>,
    last_own: Option<Digest>,
    unreferenced: Vec<Digest>,
    tx_pool: BTreeSet<Digest>,
    rotations: BTreeMap<u64, MembershipDelta>,
    stability_violations: Vec<String>,
    structure_violations: Vec<String>,
    structure_findings: Vec<String>,
    mutation: Option<Mutation>,
}

impl Validator {
    pub fn new(id: ValidatorId, membership: Membership, params: ProtocolParams) -> Self {
        let tetris = Tetris::new(membership.clone());
        Self {
            id,
            params,
            tetris,
            stage: StageState::new(0, membership),
            finished: Vec::new(),
            records: Vec::new(),
            committed: BTreeSet::new(),
            blocks: BTreeMap::new(),
            early_headers: BTreeMap::new(),
            last_own: None,
            unreferenced: Vec::new(),
            tx_pool: BTreeSet::new(),
            rotations: BTreeMap::new(),
            stability_violations: Vec::new(),
            structure_violations: Vec::new(),
            structure_findings: Vec::new(),
            mutation: None,
        }
    }

    /// Membership change applied when `after_stage` completes.
    pub fn schedule_rotation(&mut self, after_stage: u64, delta: MembershipDelta) {
        for v in &delta.add {
            self.tetris.register(*v);
        }
        self.rotations.insert(after_stage, delta);
    }

    pub fn register(&mut self, vid: ValidatorId) {
        self.tetris.register(vid);
    }

    #[doc(hidden)]
    pub fn set_mutation(&mut self, m: Option<Mutation>) {
        self.mutation = m;
    }

    pub fn id(&self) -> ValidatorId {
        self.id
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn tetris(&self) -> &Tetris {
        &self.tetris
    }

    pub fn current_stage(&self) -> &StageState {
        &self.stage
    }

    pub fn is_member(&self) -> bool {
        self.stage.membership().contains(self.id)
    }

    pub fn completed_stages(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    /// Stage state as it stood when stage `s` completed.
    pub fn finished_stage(&self, s: u64) -> Option<&StageState> {
        self.finished.iter().find(|st| st.stage() == s)
    }

    pub fn finished_stage_mut(&mut self, s: u64) -> Option<(&Tetris, &mut StageState)> {
        let st = self.finished.iter_mut().find(|st| st.stage() == s)?;
        Some((&self.tetris, st))
    }

    pub fn blocks(&self) -> &BTreeMap<u64, Block> {
        &self.blocks
    }

    pub fn stability_violations(&self) -> &[String] {
        &self.stability_violations
    }

    pub fn structure_violations(&self) -> &[String] {
        &self.structure_violations
    }

    /// Witness-structure shortfalls explained by a visible fork.
    pub fn structure_findings(&self) -> &[String] {
        &self.structure_findings
    }

    pub fn last_own(&self) -> Option<&Event> {
        self.last_own.and_then(|d| self.tetris.get(&d))
    }

    /// Something new arrived since this validator's last event, or it has
    /// not created one yet.
    pub fn has_news(&self) -> bool {
        self.last_own.is_none() || !self.unreferenced.is_empty() || !self.tx_pool.is_empty()
    }

    pub fn add_tx(&mut self, txid: Digest) {
        if !self.committed.contains(&txid) {
            self.tx_pool.insert(txid);
        }
    }

    /// Inserts a verified event and runs consensus on whatever it unblocks.
    /// Returns the insert outcome and any block headers this validator
    /// signed as a result.
    pub fn ingest(&mut self, e: Event, crypto: &dyn CryptoProvider) -> (Insert, Vec<BlockHeader>) {
        let outcome = self.tetris.insert(e);
        let mut headers = Vec::new();
        if let Insert::Accepted(ds) = &outcome {
            if !ds.is_empty() {
                for d in ds {
                    let ev = self.tetris.get(d).expect("just accepted");
                    if ev.vid() != self.id && !ev.is_placeholder() {
                        self.unreferenced.push(*d);
                    }
                }
                headers = self.on_accepted(crypto);
            }
        }
        (outcome, headers)
    }

    /// Creates, signs and self-ingests the next event: self-parent is the
    /// previous own event, other-parents are everything from other creators
    /// accepted since then.
    pub fn create_event(
        &mut self,
        extra_txs: &[Digest],
        crypto: &dyn CryptoProvider,
    ) -> (Event, Vec<BlockHeader>) {
        let e = self.draft_event(extra_txs, crypto);
        self.unreferenced.clear();
        self.tx_pool.clear();
        self.last_own = Some(e.digest());
        let (outcome, headers) = self.ingest(e.clone(), crypto);
        debug_assert!(matches!(outcome, Insert::Accepted(_)), "own event not accepted: {outcome:?}");
        (e, headers)
    }

    /// Builds the next event without recording it.
    pub fn draft_event(&self, extra_txs: &[Digest], crypto: &dyn CryptoProvider) -> Event {
        let self_parent = self.last_own();
        let others: Vec<&Event> =
            self.unreferenced.iter().filter_map(|d| self.tetris.get(d)).collect();
        let txs = self.tx_pool.iter().chain(extra_txs).copied();
        create_event(self.id, self_parent, &others, txs, crypto).expect("own parents are well formed")
    }

    /// Records an event this validator created outside [`Validator::create_event`]
    /// (a second fork branch) without moving its own chain.
    pub fn ingest_own_side_event(&mut self, e: Event, crypto: &dyn CryptoProvider) -> Vec<BlockHeader> {
        self.ingest(e, crypto).1
    }

    pub fn receive_header(&mut self, h: BlockHeader, crypto: &dyn CryptoProvider) {
        match self.blocks.get_mut(&h.height) {
            Some(b) => {
                b.add_header(h, crypto);
            }
            None => self.early_headers.entry(h.height).or_default().push(h),
        }
    }

    fn on_accepted(&mut self, crypto: &dyn CryptoProvider) -> Vec<BlockHeader> {
        self.stage.sync(&self.tetris);
        self.check_stability(crypto);
        self.progress(crypto)
    }

    fn check_stability(&mut self, crypto: &dyn CryptoProvider) {
        if self.mutation.is_some() {
            return;
        }
        let decided: Vec<(ValidatorId, bool)> = self
            .stage
            .committable()
            .iter()
            .filter_map(|(b, v)| v.value().map(|v| (*b, v)))
            .collect();
        for (b, v) in decided {
            match self.stage.evaluate(&self.tetris, b, &self.params, Some(crypto)) {
                Some((now, _)) if now == v => {}
                other => self.stability_violations.push(format!(
                    "validator {} stage {} base {b}: stored {v}, re-evaluated {other:?}",
                    self.id,
                    self.stage.stage()
                )),
            }
        }
    }

    fn progress(&mut self, crypto: &dyn CryptoProvider) -> Vec<BlockHeader> {
        let mut headers = Vec::new();
        loop {
            let members: Vec<ValidatorId> = self.stage.membership().iter().collect();
            for b in members {
                if self.stage.verdict(b) == Verdict::Undecided {
                    let v = decide_with_coin(&self.tetris, &mut self.stage, b, &self.params, crypto);
                    if let (Some(Mutation::InvertVerdicts), Verdict::Decided(x)) = (self.mutation, v) {
                        self.stage.force_verdict(b, !x);
                    }
                }
            }
            if stage_verdict(&self.stage) != StageStatus::Complete {
                break;
            }
            let member = self.is_member();
            let h = self.finish_stage(crypto);
            if member {
                headers.push(h);
            }
        }
        headers
    }

    fn finish_stage(&mut self, crypto: &dyn CryptoProvider) -> BlockHeader {
        let s = self.stage.stage();
        let txids = collect_committable_txs(&self.tetris, &self.stage, &self.params, &self.committed);
        self.committed.extend(txids.iter().copied());
        self.tx_pool.retain(|tx| !self.committed.contains(tx));
        let header = build_block(&self.stage, &txids, self.id, crypto);

        let mut block = Block::new(s, txids.clone());
        if self.is_member() {
            block.add_header(header.clone(), crypto);
        }
        for h in self.early_headers.remove(&s).unwrap_or_default() {
            block.add_header(h, crypto);
        }
        let structure = self.stage.witness_structure_check(&self.tetris);
        self.structure_violations.extend(structure.violations);
        self.structure_findings.extend(structure.fork_induced);

        let committable = self
            .stage
            .committable()
            .iter()
            .filter_map(|(b, v)| v.value().map(|v| (*b, v)))
            .collect();
        let decided_rounds = self.stage.decided_rounds().clone();
        let present_bases = self
            .stage
            .membership()
            .iter()
            .filter(|b| !self.tetris.events_at(*b, s).is_empty())
            .collect();
        self.records.push(StageRecord {
            stage: s,
            committable,
            rounds_to_decision: decided_rounds.values().copied().max().unwrap_or(0),
            decided_rounds,
            committed_txids: txids,
            tx_root: block.tx_root,
            witness_counts: self.stage.witness_counts(),
            present_bases,
        });
        self.blocks.insert(s, block);

        let next = advance_stage(&self.stage, self.rotations.get(&s))
            .expect("rotations are validated when scheduled");
        if next.membership() != self.stage.membership() {
            self.tetris.set_membership(next.membership().clone());
        }
        let done = std::mem::replace(&mut self.stage, next);
        self.finished.push(done);
        self.stage.sync(&self.tetris);
        header
    }
}
