//! Exact nearest-neighbor search over encoded states, the survivor-frequency
//! kernel policy, and the neighbor-frequency behavior (clinician) estimate.

use crate::error::{Error, Result};

/// Additive smoothing applied to the behavior estimate so that no logged
/// action ever has probability zero under it.
pub const BEHAVIOR_SMOOTHING: f64 = 1e-3;

/// One training state with the metadata the policies need.
#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub state: Vec<f64>,
    pub patient_id: String,
    pub t: usize,
    pub action: usize,
    pub died: bool,
}

/// Exact Euclidean nearest-neighbor index. Queries scan every entry; ties on
/// distance break deterministically by (patient_id, t).
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    entries: Vec<IndexEntry>,
    dim: usize,
    action_count: usize,
}

/// One query hit: entry index and Euclidean distance, sorted ascending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

impl NeighborIndex {
    pub fn build(entries: Vec<IndexEntry>, action_count: usize) -> Result<NeighborIndex> {
        if entries.is_empty() {
            return Err(Error::Data("neighbor index needs at least one state".into()));
        }
        let dim = entries[0].state.len();
        for e in &entries {
            if e.state.len() != dim {
                return Err(Error::Schema(format!(
                    "state width mismatch in neighbor index: patient {} t={} has {} dims, \
                     expected {dim}",
                    e.patient_id,
                    e.t,
                    e.state.len()
                )));
            }
            if e.state.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite state value for patient {} t={}",
                    e.patient_id, e.t
                )));
            }
            if e.action >= action_count {
                return Err(Error::Data(format!(
                    "action {} out of range (0..{action_count}) for patient {} t={}",
                    e.action, e.patient_id, e.t
                )));
            }
        }
        Ok(NeighborIndex { entries, dim, action_count })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn entry(&self, i: usize) -> &IndexEntry {
        &self.entries[i]
    }

    fn check_query(&self, state: &[f64], k: usize) -> Result<()> {
        if k == 0 || k > self.entries.len() {
            return Err(Error::Usage(format!(
                "k = {k} outside the index size (1..={})",
                self.entries.len()
            )));
        }
        if state.len() != self.dim {
            return Err(Error::Schema(format!(
                "query has {} dims, index has {}",
                state.len(),
                self.dim
            )));
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in query state".into()));
        }
        Ok(())
    }

    /// The k nearest entries by Euclidean distance, ascending, ties broken
    /// by (patient_id, t).
    pub fn nearest(&self, state: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        self.check_query(state, k)?;
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (sq_dist(state, &e.state), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            let ea = &self.entries[a.1];
            let eb = &self.entries[b.1];
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then_with(|| ea.patient_id.cmp(&eb.patient_id))
                .then_with(|| ea.t.cmp(&eb.t))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored.into_iter().map(|(d, i)| Neighbor { index: i, distance: d.sqrt() }).collect())
    }

    /// Survivor-frequency kernel policy: action frequencies of the surviving
    /// neighbors; if none of the k neighbors survived, frequencies over all k.
    pub fn kernel_policy(&self, state: &[f64], k: usize) -> Result<Vec<f64>> {
        let neighbors = self.nearest(state, k)?;
        Ok(self.kernel_from_neighbors(&neighbors))
    }

    fn kernel_from_neighbors(&self, neighbors: &[Neighbor]) -> Vec<f64> {
        let mut counts = vec![0usize; self.action_count];
        let mut survivors = 0usize;
        for n in neighbors {
            let e = &self.entries[n.index];
            if !e.died {
                counts[e.action] += 1;
                survivors += 1;
            }
        }
        if survivors == 0 {
            for n in neighbors {
                counts[self.entries[n.index].action] += 1;
            }
            survivors = neighbors.len();
        }
        counts.iter().map(|&c| c as f64 / survivors as f64).collect()
    }

    /// Behavior estimate: action frequencies over all k neighbors with
    /// add-epsilon smoothing, renormalized.
    pub fn behavior_policy(&self, state: &[f64], k: usize) -> Result<Vec<f64>> {
        let neighbors = self.nearest(state, k)?;
        Ok(self.behavior_from_neighbors(&neighbors))
    }

    fn behavior_from_neighbors(&self, neighbors: &[Neighbor]) -> Vec<f64> {
        let mut counts = vec![0usize; self.action_count];
        for n in neighbors {
            counts[self.entries[n.index].action] += 1;
        }
        let k = neighbors.len() as f64;
        let denom = 1.0 + self.action_count as f64 * BEHAVIOR_SMOOTHING;
        counts.iter().map(|&c| (c as f64 / k + BEHAVIOR_SMOOTHING) / denom).collect()
    }

    /// Kernel policy, behavior policy, and the k-th neighbor distance from a
    /// single scan (the distance doubles as a gating feature downstream).
    pub fn policies(&self, state: &[f64], k: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let neighbors = self.nearest(state, k)?;
        let kernel = self.kernel_from_neighbors(&neighbors);
        let behavior = self.behavior_from_neighbors(&neighbors);
        let max_distance = neighbors.last().unwrap().distance;
        Ok((kernel, behavior, max_distance))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pick the neighbor count by validation score: the candidate with the
/// highest objective wins, with exact ties broken toward `preferred` when it
/// is among the winners (and toward the earliest candidate otherwise).
pub fn cross_validate_k(
    candidates: &[usize],
    preferred: usize,
    mut objective: impl FnMut(usize) -> Result<f64>,
) -> Result<(usize, Vec<(usize, f64)>)> {
    if candidates.is_empty() {
        return Err(Error::Usage("no candidate k values".into()));
    }
    let mut table = Vec::with_capacity(candidates.len());
    for &k in candidates {
        table.push((k, objective(k)?));
    }
    let best = table.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<usize> = table.iter().filter(|&&(_, v)| v == best).map(|&(k, _)| k).collect();
    let chosen = if winners.contains(&preferred) { preferred } else { winners[0] };
    Ok((chosen, table))
}
