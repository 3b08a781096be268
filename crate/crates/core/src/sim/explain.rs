use std::fmt::Write as _;

use thiserror::Error;

use crate::engine::Verdict;
use crate::event::ValidatorId;

use super::runner::Simulation;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExplainError {
    #[error("unknown validator {0}")]
    UnknownValidator(ValidatorId),
    #[error("unknown stage {stage}: validator {validator} reached stage {reached}")]
    UnknownStage { stage: u64, validator: ValidatorId, reached: u64 },
    #[error("validator {base} is not a member in stage {stage}")]
    NotAMember { stage: u64, base: ValidatorId },
}

/// Per-round witness vote table for `base` in `stage`, as seen by
/// `validator`, ending in the verdict line.
pub fn explain(
    sim: &Simulation,
    validator: ValidatorId,
    stage: u64,
    base: ValidatorId,
) -> Result<String, ExplainError> {
    let v = sim.validator(validator).ok_or(ExplainError::UnknownValidator(validator))?;
    let mut state = match v.finished_stage(stage) {
        Some(s) => s.clone(),
        None if v.current_stage().stage() == stage => v.current_stage().clone(),
        None => {
            return Err(ExplainError::UnknownStage {
                stage,
                validator,
                reached: v.current_stage().stage(),
            })
        }
    };
    if !state.membership().contains(base) {
        return Err(ExplainError::NotAMember { stage, base });
    }
    let params = v.params();
    let t = v.tetris();
    let rows = state.vote_table(t, base, params, Some(sim.crypto()), state.max_round());
    let present = !state.base_events(t, base).is_empty();

    let mut text = String::new();
    let _ = writeln!(
        text,
        "stage {stage}, base {base} ({}), view of validator {validator}, coin every {} rounds",
        if present { "received" } else { "never received" },
        params.coin_interval
    );
    let _ = writeln!(text, "round  creator  seq  vote   true/false");
    for r in &rows {
        let tally = r.tally.map_or(String::new(), |(y, n)| format!("{y}/{n}"));
        let coin = if r.round >= 3 && r.round % params.coin_interval == 0 { " coin" } else { "" };
        let line = format!("{:<6} {:<8} {:<4} {:<6} {tally}{coin}", r.round, r.creator.0, r.seq, r.vote);
        let _ = writeln!(text, "{}", line.trim_end());
    }
    let _ = match (state.verdict(base), state.decided_rounds().get(&base)) {
        (Verdict::Decided(x), Some(r)) => writeln!(text, "decided {x} @ round {r}"),
        (Verdict::Decided(x), None) => writeln!(text, "decided {x}"),
        (Verdict::Undecided, _) => writeln!(text, "undecided"),
    };
    Ok(text)
}
