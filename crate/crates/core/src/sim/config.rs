use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::ProtocolParams;
use crate::event::ValidatorId;
use crate::membership::{Membership, MembershipDelta, MembershipError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid membership: {0}")]
    Membership(#[from] MembershipError),
    #[error("{count} non-honest validators exceed the fault bound t = {t}")]
    TooManyAdversaries { count: usize, t: usize },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot parse scenario: {0}")]
    Parse(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyKind {
    Honest,
    /// At the first own event with `seq >= s` for each `s` in `fork_seqs`,
    /// signs a second event with the same parents and an extra transaction,
    /// sending one branch to `branch_a` and the other to `branch_b`.
    Forker {
        fork_seqs: Vec<u64>,
        branch_a: Vec<ValidatorId>,
        branch_b: Vec<ValidatorId>,
    },
    /// Creates and sends nothing from `after_step` on.
    Silent {
        #[serde(default)]
        after_step: u64,
    },
    /// Never sends its own events to `omit`.
    Selective { omit: Vec<ValidatorId> },
    /// Announces hashes of its events and of made-up transactions but never
    /// stores the bodies anywhere retrievable.
    DhtWithholder,
    /// Controls delivery delays (within the legal window) to keep the two
    /// halves of the honest validators apart.
    VoteSplitter,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Honest => "honest",
            StrategyKind::Forker { .. } => "forker",
            StrategyKind::Silent { .. } => "silent",
            StrategyKind::Selective { .. } => "selective",
            StrategyKind::DhtWithholder => "dht_withholder",
            StrategyKind::VoteSplitter => "vote_splitter",
        }
    }

    pub fn is_honest(&self) -> bool {
        matches!(self, StrategyKind::Honest)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayModel {
    pub min_steps: u64,
    pub max_steps: u64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self { min_steps: 1, max_steps: 3 }
    }
}

/// Messages between `side` and everyone else are held while
/// `from_step <= step < to_step`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    pub from_step: u64,
    pub to_step: u64,
    pub side: Vec<ValidatorId>,
}

impl Partition {
    pub fn blocks(&self, step: u64, a: ValidatorId, b: ValidatorId) -> bool {
        step >= self.from_step
            && step < self.to_step
            && self.side.contains(&a) != self.side.contains(&b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxInjection {
    pub rate_per_step: u32,
    pub total: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationSpec {
    pub after_stage: u64,
    #[serde(flatten)]
    pub delta: MembershipDelta,
}

fn default_max_steps() -> u64 {
    400
}
fn default_target_stages() -> u64 {
    3
}
fn default_dht_ttl() -> u64 {
    500
}
fn default_retransmit() -> u64 {
    5
}

/// A complete, self-contained description of one simulated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Initial membership size; members are `0..n`.
    pub n: usize,
    #[serde(default)]
    pub adversaries: BTreeMap<ValidatorId, StrategyKind>,
    #[serde(default)]
    pub delay: DelayModel,
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub partitions: Vec<Partition>,
    #[serde(default)]
    pub tx_injection: TxInjection,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    /// The run ends once every honest validator has completed this many
    /// stages and seen each of its blocks confirmed.
    #[serde(default = "default_target_stages")]
    pub target_stages: u64,
    #[serde(default)]
    pub params: ProtocolParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dht_ttl")]
    pub dht_ttl: u64,
    #[serde(default = "default_retransmit")]
    pub retransmit_interval: u64,
    /// Non-member validators that observe from the start and may be added
    /// by a rotation.
    #[serde(default)]
    pub standby: Vec<ValidatorId>,
    #[serde(default)]
    pub rotations: Vec<RotationSpec>,
}

impl ScenarioConfig {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            adversaries: BTreeMap::new(),
            delay: DelayModel::default(),
            drop_rate: 0.0,
            partitions: Vec::new(),
            tx_injection: TxInjection::default(),
            max_steps: default_max_steps(),
            target_stages: default_target_stages(),
            params: ProtocolParams::default(),
            seed: 0,
            dht_ttl: default_dht_ttl(),
            retransmit_interval: default_retransmit(),
            standby: Vec::new(),
            rotations: Vec::new(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            serde_json::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn initial_membership(&self) -> Result<Membership, ConfigError> {
        Ok(Membership::first(self.n)?)
    }

    pub fn t(&self) -> usize {
        (self.n.saturating_sub(1)) / 3
    }

    /// Every simulated validator: members first, then standby.
    pub fn all_ids(&self) -> Vec<ValidatorId> {
        let mut ids: BTreeSet<ValidatorId> = (0..self.n as u32).map(ValidatorId).collect();
        ids.extend(self.standby.iter().copied());
        ids.into_iter().collect()
    }

    pub fn strategy(&self, v: ValidatorId) -> &StrategyKind {
        self.adversaries.get(&v).unwrap_or(&StrategyKind::Honest)
    }

    pub fn honest_ids(&self) -> Vec<ValidatorId> {
        self.all_ids().into_iter().filter(|v| self.strategy(*v).is_honest()).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let membership = self.initial_membership()?;
        let ids = self.all_ids();
        let t = membership.t();
        let faulty = self.adversaries.values().filter(|s| !s.is_honest()).count();
        if faulty > t {
            return Err(ConfigError::TooManyAdversaries { count: faulty, t });
        }
        let known = |v: &ValidatorId| ids.contains(v);
        for s in &self.standby {
            if membership.contains(*s) {
                return invalid(format!("standby validator {s} is already a member"));
            }
        }
        if ids.iter().any(|v| v.0 > crate::membership::MAX_VALIDATOR_ID) {
            return invalid("validator ids must be below 64");
        }
        for (v, s) in &self.adversaries {
            if !known(v) {
                return invalid(format!("adversary {v} is not a simulated validator"));
            }
            match s {
                StrategyKind::Forker { fork_seqs, branch_a, branch_b } => {
                    if fork_seqs.is_empty() {
                        return invalid("forker needs at least one fork seq");
                    }
                    if branch_a.is_empty() || branch_b.is_empty() {
                        return invalid("forker branches must be nonempty");
                    }
                    for x in branch_a.iter().chain(branch_b) {
                        if x == v || !known(x) {
                            return invalid(format!("forker branch target {x} is invalid"));
                        }
                    }
                    if branch_a.iter().any(|x| branch_b.contains(x)) {
                        return invalid("forker branches must be disjoint");
                    }
                }
                StrategyKind::Selective { omit } => {
                    if omit.iter().any(|x| x == v || !known(x)) {
                        return invalid("selective omit list is invalid");
                    }
                }
                _ => {}
            }
        }
        if self.delay.min_steps < 1 || self.delay.max_steps < self.delay.min_steps {
            return invalid("delays must satisfy 1 <= min_steps <= max_steps");
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return invalid("drop_rate must be in [0, 1)");
        }
        for p in &self.partitions {
            if p.from_step >= p.to_step {
                return invalid("partition interval is empty");
            }
            if p.side.is_empty() || p.side.len() >= ids.len() || !p.side.iter().all(known) {
                return invalid("partition side must be a proper nonempty subset");
            }
        }
        self.params.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.target_stages == 0 || self.max_steps == 0 {
            return invalid("target_stages and max_steps must be positive");
        }
        if self.retransmit_interval == 0 || self.dht_ttl == 0 {
            return invalid("retransmit_interval and dht_ttl must be positive");
        }
        let mut m = membership;
        let mut last = None;
        for r in &self.rotations {
            if last.is_some_and(|l| r.after_stage <= l) {
                return invalid("rotations must be in increasing stage order");
            }
            last = Some(r.after_stage);
            if !r.delta.add.iter().all(known) {
                return invalid("rotation adds a validator that is not simulated");
            }
            m = m.apply(&r.delta)?;
        }
        Ok(())
    }
}
