//! Discrete chain with one-hot observations; the oracle substrate.

use super::{Env, EnvSpec, StepResult, TabularMdp};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// An `n`-state chain `s0 -> s1 -> ... -> s_{n-1}` with the last state
/// absorbing. Observations are one-hot so the continuous-agent interface
/// covers it unchanged.
///
/// In the default (autonomous) form every action drifts one state to the
/// right, optionally slipping in place with probability `slip`; this matches
/// the exact tables used by the occupancy oracle. With
/// [`ChainMdp::controlled`] the action sign decides between moving right
/// (`a >= 0`) and staying, and entering the last state pays reward 1.
pub struct ChainMdp {
    n: usize,
    slip: f64,
    controlled: bool,
    state: usize,
    entered_last: bool,
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl ChainMdp {
    pub fn new(n: usize) -> Self {
        Self::with_slip(n, 0.0)
    }

    pub fn with_slip(n: usize, slip: f64) -> Self {
        assert!(n >= 2, "chain needs at least 2 states");
        assert!((0.0..1.0).contains(&slip));
        ChainMdp {
            n,
            slip,
            controlled: false,
            state: 0,
            entered_last: false,
            steps: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Action-dependent variant: `a >= 0` moves right, `a < 0` stays.
    pub fn controlled(n: usize, slip: f64) -> Self {
        let mut env = Self::with_slip(n, slip);
        env.controlled = true;
        env
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        v[s] = 1.0;
        v
    }
}

impl Env for ChainMdp {
    fn spec(&self) -> EnvSpec {
        EnvSpec::new(self.n, 1, vec![-1.0], vec![1.0], 5 * self.n)
    }

    fn obs_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.n], vec![1.0; self.n])
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = 0;
        self.entered_last = false;
        self.steps = 0;
        self.done = false;
        self.one_hot(self.state)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Env("chainmdp stepped after done".into()));
        }
        let a = self.spec().clip_action(action)[0];
        let wants_right = !self.controlled || a >= 0.0;
        let mut next = self.state;
        if self.state + 1 < self.n && wants_right {
            let slipped = self.slip > 0.0 && self.rng.gen_range(0.0..1.0) < self.slip;
            if !slipped {
                next = self.state + 1;
            }
        }
        let reward = if next == self.n - 1 && !self.entered_last {
            if next != self.state {
                self.entered_last = true;
                1.0
            } else {
                0.0
            }
        } else {
            0.0
        };
        self.state = next;
        self.steps += 1;
        self.done = self.steps >= 5 * self.n;
        let mut info = Vec::new();
        if self.done {
            info.push("timeout");
        }
        Ok(StepResult { obs: self.one_hot(self.state), reward, done: self.done, info })
    }

    fn as_tabular(&self) -> Result<TabularMdp> {
        let n = self.n;
        let n_actions = 2;
        let mut transition = vec![0.0; n * n_actions * n];
        let mut reward = vec![0.0; n * n_actions];
        let idx = |s: usize, a: usize, t: usize| (s * n_actions + a) * n + t;
        for s in 0..n {
            for a in 0..n_actions {
                if s == n - 1 {
                    transition[idx(s, a, s)] = 1.0;
                    continue;
                }
                let wants_right = !self.controlled || a == 1;
                if wants_right {
                    transition[idx(s, a, s + 1)] = 1.0 - self.slip;
                    transition[idx(s, a, s)] = self.slip;
                    if s + 1 == n - 1 {
                        reward[s * n_actions + a] = 1.0 - self.slip;
                    }
                } else {
                    transition[idx(s, a, s)] = 1.0;
                }
            }
        }
        let mut start = vec![0.0; n];
        start[0] = 1.0;
        TabularMdp::new(n, n_actions, transition, reward, vec![false; n], start)
    }

    fn name(&self) -> &'static str {
        "chainmdp"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_chain_tables_match_definition() {
        let env = ChainMdp::new(3);
        let mdp = env.as_tabular().unwrap();
        // every action moves right deterministically, last state absorbs
        for a in 0..2 {
            assert_eq!(mdp.transition_prob(0, a, 1), 1.0);
            assert_eq!(mdp.transition_prob(1, a, 2), 1.0);
            assert_eq!(mdp.transition_prob(2, a, 2), 1.0);
        }
    }

    #[test]
    fn rows_sum_to_one_for_all_sizes() {
        for n in 2..=50 {
            let mdp = ChainMdp::with_slip(n, 0.2).as_tabular().unwrap();
            for s in 0..n {
                for a in 0..2 {
                    let sum: f64 = (0..n).map(|t| mdp.transition_prob(s, a, t)).sum();
                    assert!((sum - 1.0).abs() < 1e-9, "row ({s},{a}) sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn slip_probability_shows_up_in_rows() {
        let mdp = ChainMdp::with_slip(5, 0.1).as_tabular().unwrap();
        for s in 0..4 {
            for a in 0..2 {
                assert!((mdp.transition_prob(s, a, s + 1) - 0.9).abs() < 1e-12);
                assert!((mdp.transition_prob(s, a, s) - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn controlled_chain_rewards_entering_the_last_state_once() {
        let mut env = ChainMdp::controlled(3, 0.0);
        env.reset(0);
        let r = env.step(&[-1.0]).unwrap();
        assert_eq!(r.obs, vec![1.0, 0.0, 0.0], "negative action stays put");
        assert_eq!(r.reward, 0.0);
        let r = env.step(&[1.0]).unwrap();
        assert_eq!(r.obs, vec![0.0, 1.0, 0.0]);
        let r = env.step(&[1.0]).unwrap();
        assert_eq!(r.reward, 1.0, "entering the last state pays once");
        let r = env.step(&[1.0]).unwrap();
        assert_eq!(r.reward, 0.0, "absorbing state pays nothing");
        assert_eq!(r.obs, vec![0.0, 0.0, 1.0]);
    }
}
