//! Asynchronous Byzantine-fault-tolerant consensus over per-validator event
//! DAGs ("tetrises"), with virtual voting on the bottom line of base events,
//! plus a deterministic discrete-event simulator for exercising it under
//! adversarial scheduling.

pub mod crypto;
pub mod engine;
pub mod event;
pub mod membership;
pub mod node;
pub mod sim;
pub mod tetris;

pub use crypto::{CryptoProvider, KeyedHashSigner};
pub use event::{
    canonical_encode, create_event, hash_event, materialize_placeholders, verify_event, Digest,
    Event, EventDraft, EventError, Transaction, ValidatorId, Violation,
};
pub use membership::{Membership, MembershipDelta, MembershipError};
pub use tetris::{DagError, Insert, MissingParentRequest, RejectReason, SubTetris, Tetris};
pub use engine::{
    advance_stage, assign_round, build_block, collect_committable_txs, decide, decide_with_coin,
    find_witnesses, stage_verdict, Block, BlockHeader, EngineError, ProtocolParams, StageState,
    StageStatus, StructureReport, Verdict,
};
pub use node::{StageRecord, Validator};
pub use sim::{run_scenario, RunReport, ScenarioConfig, StrategyKind};
