//! Ordered-gate corridor that demands a specific action sequence.

use super::{Env, EnvSpec, StepResult};
use crate::error::{Error, Result};

const STEP: f64 = 0.05;
const MAX_STEPS: usize = 100;
const GATES: [f64; 3] = [0.3, 0.55, 0.8];
/// Sign of the action that unlocks each gate. The middle gate wants a firm
/// push *away* from the direction of travel, so a greedy right-sweep stalls.
const UNLOCK_SIGN: [f64; 3] = [1.0, -1.0, 1.0];
const UNLOCK_MIN: f64 = 0.03;
const GATE_RADIUS: f64 = 0.05;
const REWARD_AT: f64 = 0.9;

/// Position `x` in `[0, 1]` with three locked gates. A locked gate blocks
/// rightward movement; it unlocks only while the agent stands at the gate and
/// pushes with the required sign and at least 0.03 magnitude. Reward is 1 per
/// step with `x >= 0.9`, which lies behind the last gate. Observation is
/// `[x, gate1_unlocked, gate2_unlocked]`.
pub struct LockSequence {
    x: f64,
    unlocked: [bool; 3],
    steps: usize,
    done: bool,
}

impl LockSequence {
    pub fn new() -> Self {
        LockSequence { x: 0.0, unlocked: [false; 3], steps: 0, done: false }
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.x, self.unlocked[0] as u8 as f64, self.unlocked[1] as u8 as f64]
    }
}

impl Default for LockSequence {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for LockSequence {
    fn spec(&self) -> EnvSpec {
        EnvSpec::new(3, 1, vec![-STEP], vec![STEP], MAX_STEPS)
    }

    fn obs_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0])
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.x = 0.0;
        self.unlocked = [false; 3];
        self.steps = 0;
        self.done = false;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Env("locksequence stepped after done".into()));
        }
        let a = self.spec().clip_action(action)[0];

        // Unlock checks happen before movement; gates must open in order.
        for i in 0..3 {
            let previous_open = (0..i).all(|j| self.unlocked[j]);
            if !self.unlocked[i]
                && previous_open
                && (self.x - GATES[i]).abs() <= GATE_RADIUS
                && a.signum() == UNLOCK_SIGN[i]
                && a.abs() >= UNLOCK_MIN
            {
                self.unlocked[i] = true;
            }
        }

        let mut x_new = (self.x + a).clamp(0.0, 1.0);
        // A locked gate pins rightward movement at the gate position.
        for i in 0..3 {
            if !self.unlocked[i] && self.x <= GATES[i] && x_new > GATES[i] {
                x_new = GATES[i];
            }
        }
        self.x = x_new;
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
        Ok(StepResult { obs: self.obs(), reward, done: self.done, info })
    }

    fn name(&self) -> &'static str {
        "locksequence"
    }
}
