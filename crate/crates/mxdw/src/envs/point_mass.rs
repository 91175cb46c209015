//! 2-d point mass with lethal regions and a rewarded right zone.

use super::{Env, EnvSpec, StepResult};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MAX_STEPS: usize = 80;
const V_MAX: f64 = 0.15;
const DRAG: f64 = 0.8;
const FORCE: f64 = 0.15;
const WALL_MARGIN: f64 = 0.03;
// A lethal band blocks the middle of the arena except for a bridge along
// the top; the rewarded zone is the whole right side behind the band.
const BAND_X: (f64, f64) = (0.4, 0.6);
const BRIDGE_Y: f64 = 0.62;
const GOAL_X: f64 = 0.75;

/// State `(px, py, vx, vy)` in the unit square, force actions in `[-1, 1]^2`.
///
/// Touching the outer walls or the mid-field band below the bridge ends the
/// episode with no reward; every step spent at `px >= 0.75` pays 1. Crossing
/// safely requires steering through the bridge opening at the top of the band,
/// which makes episode-termination prediction the deciding factor.
pub struct PointMass2d {
    pos: [f64; 2],
    vel: [f64; 2],
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl PointMass2d {
    pub fn new() -> Self {
        PointMass2d { pos: [0.15, 0.3], vel: [0.0, 0.0], steps: 0, done: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    fn lethal(pos: &[f64; 2]) -> Option<&'static str> {
        let (x, y) = (pos[0], pos[1]);
        if !(WALL_MARGIN..=1.0 - WALL_MARGIN).contains(&x) || !(WALL_MARGIN..=1.0 - WALL_MARGIN).contains(&y) {
            return Some("wall");
        }
        if x >= BAND_X.0 && x <= BAND_X.1 && y < BRIDGE_Y {
            return Some("lava");
        }
        None
    }
}

impl Default for PointMass2d {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PointMass2d {
    fn spec(&self) -> EnvSpec {
        EnvSpec::new(4, 2, vec![-1.0, -1.0], vec![1.0, 1.0], MAX_STEPS)
    }

    fn obs_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0, 0.0, -V_MAX, -V_MAX], vec![1.0, 1.0, V_MAX, V_MAX])
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = [0.15 + self.rng.gen_range(-0.02..0.02), 0.3 + self.rng.gen_range(-0.02..0.02)];
        self.vel = [0.0, 0.0];
        self.steps = 0;
        self.done = false;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Env("pointmass2d stepped after done".into()));
        }
        let a = self.spec().clip_action(action);
        for d in 0..2 {
            self.vel[d] = (DRAG * self.vel[d] + FORCE * a[d]).clamp(-V_MAX, V_MAX);
            self.pos[d] = (self.pos[d] + self.vel[d]).clamp(0.0, 1.0);
        }
        self.steps += 1;

        let mut info = Vec::new();
        let mut reward = 0.0;
        if let Some(cause) = Self::lethal(&self.pos) {
            self.done = true;
            info.push(cause);
        } else if self.pos[0] >= GOAL_X {
            reward = 1.0;
            info.push("goal");
        }
        if self.steps >= MAX_STEPS {
            self.done = true;
            info.push("timeout");
        }
        Ok(StepResult { obs: self.obs(), reward, done: self.done, info })
    }

    fn name(&self) -> &'static str {
        "pointmass2d"
    }
}
