//! Split and merge semantics of the three control gateways.
//!
//! | gateway       | split                              | merge                                   |
//! |---------------|------------------------------------|-----------------------------------------|
//! | exclusive OR  | exactly one true branch is taken   | fires on every single arrival           |
//! | inclusive OR  | every true branch is taken (≥ 1)   | fires once every activated branch is in |
//! | parallel AND  | every branch is taken              | fires once every incoming branch is in  |
//!
//! Both functions are generic over the edge label so they can be exercised
//! directly with plain values.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayKind {
    #[serde(rename = "exclusive")]
    ExclusiveOr,
    #[serde(rename = "inclusive")]
    InclusiveOr,
    #[serde(rename = "parallel")]
    ParallelAnd,
}

impl GatewayKind {
    pub const ALL: [GatewayKind; 3] = [
        GatewayKind::ExclusiveOr,
        GatewayKind::InclusiveOr,
        GatewayKind::ParallelAnd,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Split,
    Merge,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayFault {
    #[error("gateway needs at least two branches, got {0}")]
    TooFewBranches(usize),
    #[error("exclusive split has no true condition and no default branch")]
    NoBranchTaken,
    #[error("exclusive split has {0} true conditions; exactly one is allowed")]
    Ambiguous(usize),
    #[error("arrival on a branch that was never activated")]
    UnactivatedArrival,
}

/// Edges activated by a split gateway.
///
/// `branches` pairs every outgoing edge (other than the default) with the
/// value of its condition; for a parallel split the booleans are ignored.
/// `default` is the optional exclusive-split fallback taken when no
/// condition holds.
pub fn split<E: Ord + Clone>(
    kind: GatewayKind,
    branches: &[(E, bool)],
    default: Option<&E>,
) -> Result<BTreeSet<E>, GatewayFault> {
    let total = branches.len() + usize::from(default.is_some());
    if total < 2 {
        return Err(GatewayFault::TooFewBranches(total));
    }
    let taken: BTreeSet<E> = branches.iter().filter(|(_, on)| *on).map(|(e, _)| e.clone()).collect();
    match kind {
        GatewayKind::ExclusiveOr => match taken.len() {
            1 => Ok(taken),
            0 => default
                .map(|d| BTreeSet::from([d.clone()]))
                .ok_or(GatewayFault::NoBranchTaken),
            n => Err(GatewayFault::Ambiguous(n)),
        },
        GatewayKind::InclusiveOr => {
            if taken.is_empty() {
                Err(GatewayFault::NoBranchTaken)
            } else {
                Ok(taken)
            }
        }
        GatewayKind::ParallelAnd => Ok(branches.iter().map(|(e, _)| e.clone()).collect()),
    }
}

/// Whether a merge gateway fires given the branches that have arrived.
///
/// `activated` is the set of incoming branches a token can arrive on: every
/// declared incoming edge for exclusive and parallel merges, and the branches
/// activated by the paired split for an inclusive merge.
pub fn merge_fire<E: Ord>(
    kind: GatewayKind,
    arrived: &BTreeSet<E>,
    activated: &BTreeSet<E>,
) -> Result<bool, GatewayFault> {
    if !arrived.is_subset(activated) {
        return Err(GatewayFault::UnactivatedArrival);
    }
    Ok(match kind {
        GatewayKind::ExclusiveOr => !arrived.is_empty(),
        GatewayKind::InclusiveOr | GatewayKind::ParallelAnd => !activated.is_empty() && arrived == activated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&'static str]) -> BTreeSet<&'static str> {
        items.iter().copied().collect()
    }

    #[test]
    fn split_examples() {
        assert_eq!(
            split(GatewayKind::ExclusiveOr, &[("yes", true), ("no", false)], None),
            Ok(set(&["yes"]))
        );
        assert_eq!(
            split(
                GatewayKind::InclusiveOr,
                &[("a", true), ("b", true), ("c", false)],
                None
            ),
            Ok(set(&["a", "b"]))
        );
        assert_eq!(
            split(GatewayKind::ParallelAnd, &[("a", false), ("b", false)], None),
            Ok(set(&["a", "b"]))
        );
    }

    #[test]
    fn split_faults() {
        assert_eq!(
            split(GatewayKind::ExclusiveOr, &[("a", true), ("b", true)], None),
            Err(GatewayFault::Ambiguous(2))
        );
        assert_eq!(
            split(GatewayKind::ExclusiveOr, &[("a", false), ("b", false)], None),
            Err(GatewayFault::NoBranchTaken)
        );
        assert_eq!(
            split(GatewayKind::InclusiveOr, &[("a", false), ("b", false)], None),
            Err(GatewayFault::NoBranchTaken)
        );
        assert_eq!(
            split(GatewayKind::ParallelAnd, &[("a", true)], None),
            Err(GatewayFault::TooFewBranches(1))
        );
    }

    #[test]
    fn exclusive_default_branch() {
        assert_eq!(
            split(GatewayKind::ExclusiveOr, &[("a", false)], Some(&"else")),
            Ok(set(&["else"]))
        );
        assert_eq!(
            split(GatewayKind::ExclusiveOr, &[("a", true)], Some(&"else")),
            Ok(set(&["a"]))
        );
    }

    #[test]
    fn merge_examples() {
        let all = set(&["a", "b", "c"]);
        assert_eq!(merge_fire(GatewayKind::ExclusiveOr, &set(&["a"]), &all), Ok(true));
        assert_eq!(merge_fire(GatewayKind::ParallelAnd, &set(&["a", "b"]), &all), Ok(false));
        assert_eq!(
            merge_fire(GatewayKind::InclusiveOr, &set(&["a", "b"]), &set(&["a", "b"])),
            Ok(true)
        );
        assert_eq!(
            merge_fire(GatewayKind::InclusiveOr, &set(&["c"]), &set(&["a", "b"])),
            Err(GatewayFault::UnactivatedArrival)
        );
    }
}
