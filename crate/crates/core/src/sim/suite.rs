//! The standard scenario battery: one configuration per adversary kind.

use std::collections::BTreeMap;

use crate::event::ValidatorId;

use super::config::{DelayModel, Partition, ScenarioConfig, StrategyKind, TxInjection};

pub const SUITE_NAMES: [&str; 7] =
    ["fault_free", "forker", "silent", "selective", "dht_withholder", "vote_splitter", "partition"];

/// Scenario `name` for `n` validators, with the last validator as the
/// adversary. Returns `None` for an unknown name.
pub fn suite_scenario(name: &str, n: usize) -> Option<ScenarioConfig> {
    let last = ValidatorId(n as u32 - 1);
    let mut cfg = ScenarioConfig::new(n);
    cfg.tx_injection = TxInjection { rate_per_step: 2, total: 40 };
    cfg.max_steps = 2000;
    let adversary = match name {
        "fault_free" => None,
        "forker" => {
            let half = (n as u32 - 1) / 2;
            Some(StrategyKind::Forker {
                fork_seqs: vec![1, 4],
                branch_a: (0..half).map(ValidatorId).collect(),
                branch_b: (half..last.0).map(ValidatorId).collect(),
            })
        }
        "silent" => Some(StrategyKind::Silent { after_step: 0 }),
        "selective" => Some(StrategyKind::Selective { omit: vec![ValidatorId(0)] }),
        "dht_withholder" => Some(StrategyKind::DhtWithholder),
        "vote_splitter" => Some(StrategyKind::VoteSplitter),
        "partition" => {
            cfg.partitions =
                vec![Partition { from_step: 2, to_step: 30, side: vec![ValidatorId(0), ValidatorId(1)] }];
            cfg.drop_rate = 0.1;
            None
        }
        _ => return None,
    };
    if let Some(s) = adversary {
        cfg.adversaries = BTreeMap::from([(last, s)]);
    }
    Some(cfg)
}

/// Vote splitting against coin rounds every other round.
pub fn splitter_with_coin(n: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(n);
    cfg.params.coin_interval = 2;
    cfg.delay = DelayModel { min_steps: 1, max_steps: 10 };
    cfg.max_steps = 3000;
    cfg.adversaries = BTreeMap::from([(ValidatorId(n as u32 - 1), StrategyKind::VoteSplitter)]);
    cfg
}
