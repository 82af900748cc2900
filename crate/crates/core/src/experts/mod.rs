//! The two treatment experts and their shared policy plumbing: an exact
//! nearest-neighbor kernel policy, a dueling double-DQN policy, the
//! neighbor-frequency behavior (clinician) estimate, and the restriction of
//! expert policies to actions clinicians actually take.
//!
//! Policies are plain probability vectors over the 25 discrete actions
//! (nonnegative, summing to 1 within 1e-9).

pub mod dqn;
pub mod knn;
pub mod replay;

pub use dqn::{dqn_policy, train_ddqn, DqnConfig, QNetwork, TrainedDqn};
pub use knn::{cross_validate_k, IndexEntry, NeighborIndex};
pub use replay::{ReplayBuffer, Transition};

/// Check the policy-vector invariants: nonnegative entries summing to 1.
pub fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|&v| v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

/// Zero out actions the behavior policy takes less than `threshold` of the
/// time, then renormalize. If nothing survives the cut, fall back to a point
/// mass on the behavior's most common action (lowest index on ties).
pub fn restrict_actions(policy: &[f64], behavior: &[f64], threshold: f64) -> Vec<f64> {
    assert_eq!(policy.len(), behavior.len());
    let mut out: Vec<f64> = policy
        .iter()
        .zip(behavior)
        .map(|(&p, &b)| if b < threshold { 0.0 } else { p })
        .collect();
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        for v in &mut out {
            *v /= total;
        }
    } else {
        let argmax = behavior
            .iter()
            .enumerate()
            .fold(0usize, |best, (i, &v)| if v > behavior[best] { i } else { best });
        out.iter_mut().for_each(|v| *v = 0.0);
        out[argmax] = 1.0;
    }
    out
}
