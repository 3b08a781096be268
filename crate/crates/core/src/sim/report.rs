use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::event::{Digest, ValidatorId};
use crate::node::{StageRecord, Validator};
use crate::tetris::Tetris;

use super::config::ScenarioConfig;
use super::net::NetStats;
use super::runner::Simulation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub status: Status,
    pub violations: Vec<String>,
}

impl Check {
    fn from_violations(violations: Vec<String>) -> Self {
        let status = if violations.is_empty() { Status::Pass } else { Status::Fail };
        Self { status, violations }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockReport {
    pub height: u64,
    pub tx_root: Digest,
    pub tx_count: usize,
    pub confirmed: bool,
    pub signers: Vec<ValidatorId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorReport {
    pub strategy: String,
    pub honest: bool,
    pub completed_stages: u64,
    pub tetris_size: usize,
    pub pending: usize,
    pub fork_positions: usize,
    pub stages: Vec<StageRecord>,
    pub blocks: Vec<BlockReport>,
}

/// Everything a run produced, in a deterministic serialization order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: ScenarioConfig,
    pub steps_run: u64,
    pub targets_met: bool,
    pub passed: bool,
    pub agreement: Status,
    pub lemma_checks: BTreeMap<String, Check>,
    /// Highest round at which an honest validator decided a base, per stage.
    pub rounds_to_decision: BTreeMap<u64, u32>,
    /// Observations that do not fail the run.
    pub findings: Vec<String>,
    pub message_count: u64,
    pub byte_count: u64,
    pub network: NetStats,
    pub validators: BTreeMap<ValidatorId, ValidatorReport>,
}

impl RunReport {
    pub fn build(sim: &Simulation) -> Self {
        let cfg = sim.config();
        let honest: Vec<&Validator> =
            sim.validators().filter(|v| cfg.strategy(v.id()).is_honest()).collect();

        let mut checks = BTreeMap::new();
        checks.insert("agreement".to_string(), Check::from_violations(agreement(&honest)));
        checks.insert("liveness_floor".to_string(), Check::from_violations(liveness_floor(&honest)));
        checks.insert("absent_base_false".to_string(), Check::from_violations(absent_base_false(&honest)));
        let stores: Vec<&Tetris> = honest.iter().map(|v| v.tetris()).collect();
        checks.insert(
            "fork_exclusivity".to_string(),
            Check::from_violations(Tetris::fork_exclusivity_violations(&stores)),
        );
        checks.insert(
            "decision_stability".to_string(),
            Check::from_violations(
                honest.iter().flat_map(|v| v.stability_violations().iter().cloned()).collect(),
            ),
        );
        checks.insert("consistency".to_string(), Check::from_violations(consistency(&honest)));
        checks.insert(
            "witness_structure".to_string(),
            Check::from_violations(
                honest.iter().flat_map(|v| v.structure_violations().iter().cloned()).collect(),
            ),
        );
        let termination = if sim.finished() {
            Vec::new()
        } else {
            honest
                .iter()
                .filter(|v| v.completed_stages() < cfg.target_stages)
                .map(|v| {
                    format!(
                        "validator {} completed {} of {} stages",
                        v.id(),
                        v.completed_stages(),
                        cfg.target_stages
                    )
                })
                .chain(std::iter::once(format!("targets not met within {} steps", cfg.max_steps)))
                .collect()
        };
        checks.insert("termination".to_string(), Check::from_violations(termination));

        let mut rounds_to_decision = BTreeMap::new();
        for v in &honest {
            for r in v.records() {
                let e = rounds_to_decision.entry(r.stage).or_insert(0);
                *e = (*e).max(r.rounds_to_decision);
            }
        }

        let validators = sim
            .validators()
            .map(|v| {
                let strategy = cfg.strategy(v.id());
                let blocks = v
                    .blocks()
                    .values()
                    .map(|b| {
                        let t = v.finished_stage(b.height).map(|s| s.membership().t()).unwrap_or(0);
                        BlockReport {
                            height: b.height,
                            tx_root: b.tx_root,
                            tx_count: b.txids.len(),
                            confirmed: b.is_confirmed(t),
                            signers: b.headers.keys().copied().collect(),
                        }
                    })
                    .collect();
                let report = ValidatorReport {
                    strategy: strategy.name().to_string(),
                    honest: strategy.is_honest(),
                    completed_stages: v.completed_stages(),
                    tetris_size: v.tetris().len(),
                    pending: v.tetris().pending_len(),
                    fork_positions: v.tetris().fork_records().len(),
                    stages: v.records().to_vec(),
                    blocks,
                };
                (v.id(), report)
            })
            .collect();

        let agreement = checks["agreement"].status;
        Self {
            seed: cfg.seed,
            config: cfg.clone(),
            steps_run: sim.steps_run(),
            targets_met: sim.finished(),
            passed: checks.values().all(Check::passed),
            agreement,
            lemma_checks: checks,
            rounds_to_decision,
            findings: honest
                .iter()
                .flat_map(|v| v.structure_findings().iter().map(move |f| format!("validator {}: {f}", v.id())))
                .collect(),
            message_count: sim.network_stats().messages,
            byte_count: sim.network_stats().bytes,
            network: sim.network_stats().clone(),
            validators,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.lemma_checks.iter().filter(|(_, c)| !c.passed()).map(|(k, _)| k.as_str()).collect()
    }
}

/// Honest validators that completed a stage agree on its committable map
/// and on the block contents.
fn agreement(honest: &[&Validator]) -> Vec<String> {
    let mut by_stage: BTreeMap<u64, Vec<(ValidatorId, &StageRecord)>> = BTreeMap::new();
    for v in honest {
        for r in v.records() {
            by_stage.entry(r.stage).or_default().push((v.id(), r));
        }
    }
    let mut out = Vec::new();
    for (s, recs) in by_stage {
        let (first_id, first) = recs[0];
        for (id, r) in &recs[1..] {
            if r.committable != first.committable {
                out.push(format!("stage {s}: committable differs between {first_id} and {id}"));
            }
            if r.committed_txids != first.committed_txids {
                out.push(format!("stage {s}: block contents differ between {first_id} and {id}"));
            }
        }
    }
    out
}

fn liveness_floor(honest: &[&Validator]) -> Vec<String> {
    let mut out = Vec::new();
    for v in honest {
        for r in v.records() {
            let t = r.committable.len().saturating_sub(1) / 3;
            let yes = r.committable.values().filter(|x| **x).count();
            if yes < t + 1 {
                out.push(format!(
                    "validator {} stage {}: only {yes} committable bases, need {}",
                    v.id(),
                    r.stage,
                    t + 1
                ));
            }
        }
    }
    out
}

/// A base that no honest validator ever received cannot be committable.
fn absent_base_false(honest: &[&Validator]) -> Vec<String> {
    let mut out = Vec::new();
    for v in honest {
        for r in v.records() {
            for (b, yes) in &r.committable {
                let seen = honest.iter().any(|w| !w.tetris().events_at(*b, r.stage).is_empty());
                if *yes && !seen {
                    out.push(format!(
                        "validator {} stage {}: base {b} never received but marked committable",
                        v.id(),
                        r.stage
                    ));
                }
            }
        }
    }
    out
}

fn consistency(honest: &[&Validator]) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen: BTreeSet<(ValidatorId, ValidatorId)> = BTreeSet::new();
    for a in honest {
        for b in honest {
            if a.id() < b.id() && seen.insert((a.id(), b.id())) && !a.tetris().consistent_with(b.tetris()) {
                out.push(format!("tetrises of {} and {} disagree on a shared event", a.id(), b.id()));
            }
        }
    }
    out
}
