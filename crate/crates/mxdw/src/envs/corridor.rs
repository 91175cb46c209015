//! 1-d corridor with a sparse reward band at the far end.

use super::{Env, EnvSpec, StepResult};
use crate::error::{Error, Result};

const STEP: f64 = 0.05;
const REWARD_AT: f64 = 0.9;
const MAX_STEPS: usize = 100;

/// Position `x` in `[0, 1]`, start at 0, actions shift `x` by up to 0.05.
/// Reward is 1 on every step that ends with `x >= 0.9`; episodes only end
/// when the step budget runs out, so the reward band pays out repeatedly.
pub struct Corridor1d {
    x: f64,
    steps: usize,
    done: bool,
}

impl Corridor1d {
    pub fn new() -> Self {
        Corridor1d { x: 0.0, steps: 0, done: false }
    }
}

impl Default for Corridor1d {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for Corridor1d {
    fn spec(&self) -> EnvSpec {
        EnvSpec::new(1, 1, vec![-STEP], vec![STEP], MAX_STEPS)
    }

    fn obs_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0], vec![1.0])
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.x = 0.0;
        self.steps = 0;
        self.done = false;
        vec![self.x]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Env("corridor1d stepped after done".into()));
        }
        let a = self.spec().clip_action(action);
        self.x = (self.x + a[0]).clamp(0.0, 1.0);
        self.steps += 1;
        let reward = if self.x >= REWARD_AT { 1.0 } else { 0.0 };
        self.done = self.steps >= MAX_STEPS;
        let mut info = Vec::new();
        if reward > 0.0 {
            info.push("goal");
        }
        if self.done {
            info.push("timeout");
        }
        Ok(StepResult { obs: vec![self.x], reward, done: self.done, info })
    }

    fn name(&self) -> &'static str {
        "corridor1d"
    }
}
