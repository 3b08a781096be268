use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::ValidatorId;

/// Validator ids must fit in a 64-bit creator mask.
pub const MAX_VALIDATOR_ID: u32 = 63;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MembershipError {
    #[error("membership size {0} is not 3t+1 for any t >= 1")]
    BadMembershipSize(usize),
    #[error("validator id {0} exceeds the supported maximum {MAX_VALIDATOR_ID}")]
    IdOutOfRange(ValidatorId),
    #[error("removing {0}, which is not a member")]
    NotAMember(ValidatorId),
    #[error("adding {0}, which is already a member")]
    AlreadyMember(ValidatorId),
}

/// The validator set of one stage, with `n = 3t + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    members: BTreeSet<ValidatorId>,
    t: usize,
}

impl Membership {
    pub fn new(members: impl IntoIterator<Item = ValidatorId>) -> Result<Self, MembershipError> {
        let members: BTreeSet<_> = members.into_iter().collect();
        if let Some(v) = members.iter().find(|v| v.0 > MAX_VALIDATOR_ID) {
            return Err(MembershipError::IdOutOfRange(*v));
        }
        let n = members.len();
        if n < 4 || (n - 1) % 3 != 0 {
            return Err(MembershipError::BadMembershipSize(n));
        }
        Ok(Self { members, t: (n - 1) / 3 })
    }

    /// Members `0..n`.
    pub fn first(n: usize) -> Result<Self, MembershipError> {
        Self::new((0..n as u32).map(ValidatorId))
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// 2t + 1.
    pub fn quorum(&self) -> usize {
        2 * self.t + 1
    }

    pub fn contains(&self, v: ValidatorId) -> bool {
        self.members.contains(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = ValidatorId> + '_ {
        self.members.iter().copied()
    }

    pub fn members(&self) -> &BTreeSet<ValidatorId> {
        &self.members
    }

    pub fn apply(&self, delta: &MembershipDelta) -> Result<Self, MembershipError> {
        let mut next = self.members.clone();
        for r in &delta.remove {
            if !next.remove(r) {
                return Err(MembershipError::NotAMember(*r));
            }
        }
        for a in &delta.add {
            if !next.insert(*a) {
                return Err(MembershipError::AlreadyMember(*a));
            }
        }
        Self::new(next)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipDelta {
    #[serde(default)]
    pub remove: Vec<ValidatorId>,
    #[serde(default)]
    pub add: Vec<ValidatorId>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(Membership::first(4).unwrap().t(), 1);
        assert_eq!(Membership::first(7).unwrap().quorum(), 5);
        assert_eq!(Membership::first(3), Err(MembershipError::BadMembershipSize(3)));
        assert_eq!(Membership::first(5), Err(MembershipError::BadMembershipSize(5)));
        assert!(Membership::new([ValidatorId(64), ValidatorId(0), ValidatorId(1), ValidatorId(2)]).is_err());
    }

    #[test]
    fn rotation_delta() {
        let m = Membership::first(4).unwrap();
        let swapped = m
            .apply(&MembershipDelta { remove: vec![ValidatorId(3)], add: vec![ValidatorId(9)] })
            .unwrap();
        assert!(swapped.contains(ValidatorId(9)) && !swapped.contains(ValidatorId(3)));
        let shrink = m.apply(&MembershipDelta { remove: vec![ValidatorId(3)], add: vec![] });
        assert_eq!(shrink, Err(MembershipError::BadMembershipSize(3)));
    }
}
