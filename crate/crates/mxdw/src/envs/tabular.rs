//! Exact finite MDP representation used by the occupancy and value oracles.

use crate::error::{Error, Result};

/// Row-stochastic tabular MDP. `transition` is laid out `[s][a][s']`,
/// `reward` is the expected immediate reward `[s][a]`.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    pub terminal: Vec<bool>,
    pub start: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        terminal: Vec<bool>,
        start: Vec<f64>,
    ) -> Result<Self> {
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::Dim("transition tensor has wrong size".into()));
        }
        if reward.len() != n_states * n_actions || terminal.len() != n_states || start.len() != n_states {
            return Err(Error::Dim("reward/terminal/start table has wrong size".into()));
        }
        let mdp = TabularMdp { n_states, n_actions, transition, reward, terminal, start };
        for s in 0..n_states {
            for a in 0..n_actions {
                let sum: f64 = (0..n_states).map(|t| mdp.transition_prob(s, a, t)).sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Numeric(format!("transition row ({s},{a}) sums to {sum}, not 1")));
                }
            }
        }
        let start_sum: f64 = mdp.start.iter().sum();
        if (start_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("start distribution sums to {start_sum}, not 1")));
        }
        Ok(mdp)
    }

    pub fn transition_prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// State-to-state transition matrix under a deterministic policy,
    /// laid out `[s][s']`.
    pub fn policy_transition(&self, policy: &[usize]) -> Vec<f64> {
        assert_eq!(policy.len(), self.n_states, "policy table size mismatch");
        let mut p = vec![0.0; self.n_states * self.n_states];
        for s in 0..self.n_states {
            let a = policy[s];
            assert!(a < self.n_actions, "policy action out of range");
            for t in 0..self.n_states {
                p[s * self.n_states + t] = self.transition_prob(s, a, t);
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_rows_are_rejected() {
        let bad = TabularMdp::new(2, 1, vec![0.5, 0.4, 0.0, 1.0], vec![0.0, 0.0], vec![false, false], vec![1.0, 0.0]);
        assert!(bad.is_err());
    }

    #[test]
    fn invalid_start_is_rejected() {
        let bad = TabularMdp::new(2, 1, vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 0.0], vec![false, false], vec![0.6, 0.6]);
        assert!(bad.is_err());
    }
}
