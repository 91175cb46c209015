//! Deterministic, seedable toy environments with vector observations.
//!
//! All environments clip out-of-range actions instead of rejecting them and
//! force `done` once the step counter reaches `max_steps`. The discrete
//! [`ChainMdp`] additionally exports its exact transition tables through
//! [`TabularMdp`] for use as an occupancy-oracle substrate.

mod chain;
mod corridor;
mod lock_sequence;
mod point_mass;
mod tabular;

pub use chain::ChainMdp;
pub use corridor::Corridor1d;
pub use lock_sequence::LockSequence;
pub use point_mass::PointMass2d;
pub use tabular::TabularMdp;

use crate::error::{Error, Result};

/// Static description of an environment's spaces.
#[derive(Clone, Debug)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub act_low: Vec<f64>,
    pub act_high: Vec<f64>,
    pub max_steps: usize,
}

impl EnvSpec {
    pub fn new(obs_dim: usize, act_dim: usize, act_low: Vec<f64>, act_high: Vec<f64>, max_steps: usize) -> Self {
        assert!(obs_dim > 0 && act_dim > 0, "dims must be positive");
        assert!(max_steps >= 1, "max_steps must be at least 1");
        assert_eq!(act_low.len(), act_dim);
        assert_eq!(act_high.len(), act_dim);
        assert!(
            act_low.iter().zip(&act_high).all(|(l, h)| l < h),
            "act_low must be strictly below act_high elementwise"
        );
        EnvSpec { obs_dim, act_dim, act_low, act_high, max_steps }
    }

    /// Clip an action into the box `[act_low, act_high]`.
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .take(self.act_dim)
            .enumerate()
            .map(|(i, &a)| a.clamp(self.act_low[i], self.act_high[i]))
            .collect()
    }
}

/// One transition's outcome.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Free-form tags describing what happened ("goal", "wall", "timeout", ...).
    pub info: Vec<&'static str>,
}

/// A single-owner, seedable environment.
pub trait Env: Send {
    fn spec(&self) -> EnvSpec;

    /// Documented observation bounds, used for coverage binning.
    fn obs_bounds(&self) -> (Vec<f64>, Vec<f64>);

    /// Reseed the internal RNG, zero the step counter, return the initial observation.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advance exactly one step. Out-of-range actions are clipped.
    /// Stepping a finished episode without reset is an error.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;

    /// Exact tabular form; only the discrete chain supports this.
    fn as_tabular(&self) -> Result<TabularMdp> {
        Err(Error::Env("environment has no exact tabular form".into()))
    }

    fn name(&self) -> &'static str;
}

/// Build an environment from its CLI name:
/// `corridor1d`, `pointmass2d`, `locksequence`, or `chainmdp:N`.
pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    if let Some(n) = name.strip_prefix("chainmdp:") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Config(format!("bad chain size in environment name {name:?}")))?;
        if n < 2 {
            return Err(Error::Config("chainmdp needs at least 2 states".into()));
        }
        return Ok(Box::new(ChainMdp::new(n)));
    }
    match name {
        "corridor1d" => Ok(Box::new(Corridor1d::new())),
        "pointmass2d" => Ok(Box::new(PointMass2d::new())),
        "locksequence" => Ok(Box::new(LockSequence::new())),
        _ => Err(Error::Config(format!("unknown environment {name:?}"))),
    }
}
