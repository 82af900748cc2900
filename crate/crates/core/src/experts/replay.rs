//! Proportional prioritized experience replay over a fixed offline
//! transition set.
//!
//! Sampling probability is priority^alpha via a sum tree; importance
//! weights are (N * P(i))^(-beta), normalized by the largest weight in the
//! batch. Priorities start at 1 and are replaced by |TD error| (floored)
//! as transitions get visited.

use rand::Rng;

use crate::error::{Error, Result};

/// One offline transition.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Flat-array sum tree: leaves hold priority^alpha, internal nodes hold
/// subtree sums, so proportional sampling is a single root-to-leaf descent.
#[derive(Debug, Clone)]
struct SumTree {
    nodes: Vec<f64>,
    leaves: usize,
}

impl SumTree {
    fn new(leaves: usize) -> SumTree {
        SumTree { nodes: vec![0.0; 2 * leaves], leaves }
    }

    fn set(&mut self, i: usize, value: f64) {
        let mut node = self.leaves + i;
        self.nodes[node] = value;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Leaf index whose cumulative-prefix interval contains `target`.
    fn descend(&self, mut target: f64) -> usize {
        let mut node = 1;
        while node < self.leaves {
            let left = 2 * node;
            if target < self.nodes[left] {
                node = left;
            } else {
                target -= self.nodes[left];
                node = left + 1;
            }
        }
        node - self.leaves
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    transitions: Vec<Transition>,
    tree: SumTree,
    alpha: f64,
    priority_floor: f64,
}

impl ReplayBuffer {
    /// Wrap an offline dataset; every transition starts at priority 1.
    pub fn new(transitions: Vec<Transition>, alpha: f64, priority_floor: f64) -> Result<ReplayBuffer> {
        if transitions.is_empty() {
            return Err(Error::Data("replay buffer needs at least one transition".into()));
        }
        let leaves = transitions.len().next_power_of_two();
        let mut tree = SumTree::new(leaves);
        for i in 0..transitions.len() {
            tree.set(i, 1.0);
        }
        Ok(ReplayBuffer { transitions, tree, alpha, priority_floor })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transition(&self, i: usize) -> &Transition {
        &self.transitions[i]
    }

    /// Draw a batch proportional to priority^alpha. Returns indices and
    /// importance weights normalized so the largest in the batch is 1.
    pub fn sample<R: Rng>(&self, batch: usize, beta: f64, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
        let total = self.tree.total();
        let n = self.transitions.len() as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for _ in 0..batch {
            let u = rng.random::<f64>() * total;
            let i = self.tree.descend(u).min(self.transitions.len() - 1);
            let p = self.tree.get(i) / total;
            indices.push(i);
            weights.push((n * p).powf(-beta));
        }
        let max_w = weights.iter().cloned().fold(f64::MIN, f64::max);
        for w in &mut weights {
            *w /= max_w;
        }
        (indices, weights)
    }

    /// Replace priorities with |TD error|, floored away from zero.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) {
        assert_eq!(indices.len(), td_errors.len());
        for (&i, &td) in indices.iter().zip(td_errors) {
            let p = td.abs().max(self.priority_floor);
            self.tree.set(i, p.powf(self.alpha));
        }
    }
}
