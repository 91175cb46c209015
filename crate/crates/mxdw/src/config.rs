//! Training configuration with flat `key = value` config-file support.

use crate::error::{Error, Result};

/// Every knob of the training loop. Sizes and coefficients follow the
/// published hyperparameters where those exist; loop budgets and the
/// desk-scale defaults are this crate's own.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub env: String,
    pub seed: u64,
    pub total_env_steps: u64,
    /// Environment steps gathered per update round.
    pub train_every: u64,
    pub updates_per_round: u32,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Imagination horizon; also the occupancy bootstrap horizon.
    pub horizon: usize,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub buffer_capacity: usize,
    pub prefill_episodes: usize,

    pub h_dim: usize,
    /// Stochastic-state width; 0 resolves to 128 with modifications on and
    /// 30 for the baseline form.
    pub z_dim: usize,
    pub wm_hidden: usize,
    pub wm_lr: f64,

    pub mdn_hidden: usize,
    pub mdn_components: usize,
    pub gamma_q: f64,
    pub soft_tau: f64,
    pub mdn_lr: f64,

    pub actor_hidden: usize,
    pub critic_hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub beta_start: f64,
    pub beta_end: f64,

    pub eps_random: f64,
    /// Additive exploration noise std as a fraction of the action amplitude.
    pub noise_frac: f64,
    pub grad_clip: f64,

    /// Occupancy-entropy exploration: MDN, entropy bonus, no additive noise.
    pub exploration: bool,
    /// Revised world model and agent: termination head, rearranged block
    /// order, fixed prior + Jeffreys, Q critics, smooth L1, random actions.
    pub modifications: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env: "corridor1d".into(),
            seed: 0,
            total_env_steps: 10_000,
            train_every: 1000,
            updates_per_round: 100,
            batch_size: 32,
            seq_len: 30,
            horizon: 15,
            eval_every: 1000,
            eval_episodes: 10,
            buffer_capacity: 100_000,
            prefill_episodes: 5,
            h_dim: 200,
            z_dim: 0,
            wm_hidden: 200,
            wm_lr: 6e-4,
            mdn_hidden: 256,
            mdn_components: 8,
            gamma_q: 0.9,
            soft_tau: 0.1,
            mdn_lr: 2e-4,
            actor_hidden: 128,
            critic_hidden: 128,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            gamma: 0.99,
            lambda: 0.95,
            beta_start: 0.2,
            beta_end: 0.0001,
            eps_random: 0.1,
            noise_frac: 0.3,
            grad_clip: 100.0,
            exploration: true,
            modifications: true,
        }
    }
}

impl TrainConfig {
    /// Fill variant-dependent defaults (currently just the z width).
    pub fn resolve(&mut self) {
        if self.z_dim == 0 {
            self.z_dim = if self.modifications { 128 } else { 30 };
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::envs::make_env(&self.env)?;
        let positive = [
            ("total_env_steps", self.total_env_steps as usize),
            ("train_every", self.train_every as usize),
            ("updates_per_round", self.updates_per_round as usize),
            ("batch_size", self.batch_size),
            ("horizon", self.horizon),
            ("eval_every", self.eval_every as usize),
            ("buffer_capacity", self.buffer_capacity),
            ("h_dim", self.h_dim),
            ("wm_hidden", self.wm_hidden),
            ("mdn_hidden", self.mdn_hidden),
            ("mdn_components", self.mdn_components),
            ("actor_hidden", self.actor_hidden),
            ("critic_hidden", self.critic_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.eval_episodes < 2 {
            return Err(Error::Config("eval_episodes must be at least 2".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        for (name, v) in [("gamma", self.gamma), ("gamma_q", self.gamma_q)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0,1], got {}", self.lambda)));
        }
        if !(self.soft_tau > 0.0 && self.soft_tau <= 1.0) {
            return Err(Error::Config(format!("soft_tau must lie in (0,1], got {}", self.soft_tau)));
        }
        if !(0.0..=1.0).contains(&self.eps_random) {
            return Err(Error::Config(format!("eps_random must lie in [0,1], got {}", self.eps_random)));
        }
        Ok(())
    }

    /// Apply one `key = value` assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
        }
        match key {
            "env" => self.env = value.trim().to_string(),
            "seed" => self.seed = parse(key, value)?,
            "total_env_steps" => self.total_env_steps = parse(key, value)?,
            "train_every" => self.train_every = parse(key, value)?,
            "updates_per_round" => self.updates_per_round = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parse(key, value)?,
            "prefill_episodes" => self.prefill_episodes = parse(key, value)?,
            "h_dim" => self.h_dim = parse(key, value)?,
            "z_dim" => self.z_dim = parse(key, value)?,
            "wm_hidden" => self.wm_hidden = parse(key, value)?,
            "wm_lr" => self.wm_lr = parse(key, value)?,
            "mdn_hidden" => self.mdn_hidden = parse(key, value)?,
            "mdn_components" => self.mdn_components = parse(key, value)?,
            "gamma_q" => self.gamma_q = parse(key, value)?,
            "soft_tau" => self.soft_tau = parse(key, value)?,
            "mdn_lr" => self.mdn_lr = parse(key, value)?,
            "actor_hidden" => self.actor_hidden = parse(key, value)?,
            "critic_hidden" => self.critic_hidden = parse(key, value)?,
            "actor_lr" => self.actor_lr = parse(key, value)?,
            "critic_lr" => self.critic_lr = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "eps_random" => self.eps_random = parse(key, value)?,
            "noise_frac" => self.noise_frac = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "exploration" => self.exploration = parse(key, value)?,
            "modifications" => self.modifications = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a flat config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Render the effective configuration back out as a config file.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("env", self.env.clone());
        kv("seed", self.seed.to_string());
        kv("total_env_steps", self.total_env_steps.to_string());
        kv("train_every", self.train_every.to_string());
        kv("updates_per_round", self.updates_per_round.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seq_len", self.seq_len.to_string());
        kv("horizon", self.horizon.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("buffer_capacity", self.buffer_capacity.to_string());
        kv("prefill_episodes", self.prefill_episodes.to_string());
        kv("h_dim", self.h_dim.to_string());
        kv("z_dim", self.z_dim.to_string());
        kv("wm_hidden", self.wm_hidden.to_string());
        kv("wm_lr", self.wm_lr.to_string());
        kv("mdn_hidden", self.mdn_hidden.to_string());
        kv("mdn_components", self.mdn_components.to_string());
        kv("gamma_q", self.gamma_q.to_string());
        kv("soft_tau", self.soft_tau.to_string());
        kv("mdn_lr", self.mdn_lr.to_string());
        kv("actor_hidden", self.actor_hidden.to_string());
        kv("critic_hidden", self.critic_hidden.to_string());
        kv("actor_lr", self.actor_lr.to_string());
        kv("critic_lr", self.critic_lr.to_string());
        kv("gamma", self.gamma.to_string());
        kv("lambda", self.lambda.to_string());
        kv("beta_start", self.beta_start.to_string());
        kv("beta_end", self.beta_end.to_string());
        kv("eps_random", self.eps_random.to_string());
        kv("noise_frac", self.noise_frac.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("exploration", self.exploration.to_string());
        kv("modifications", self.modifications.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.set("gamma_q", "0.5").unwrap();
        cfg.set("env", "pointmass2d").unwrap();
        let text = cfg.to_file_string();
        let mut back = TrainConfig::default();
        back.apply_file(&text).unwrap();
        assert_eq!(back.gamma_q, 0.5);
        assert_eq!(back.env, "pointmass2d");
        assert_eq!(back.batch_size, cfg.batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_file("nonsense_key = 3").is_err());
        assert!(cfg.apply_file("gamma: 0.5").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = TrainConfig::default();
        cfg.apply_file("# a comment\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut cfg = TrainConfig::default();
        cfg.resolve();
        assert!(cfg.validate().is_ok());
        cfg.gamma = 1.5;
        assert!(cfg.validate().is_err());
        cfg.gamma = 0.99;
        cfg.eval_episodes = 1;
        assert!(cfg.validate().is_err());
        cfg.eval_episodes = 10;
        cfg.env = "doesnotexist".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn z_dim_resolves_by_variant() {
        let mut a = TrainConfig { modifications: true, ..Default::default() };
        a.resolve();
        assert_eq!(a.z_dim, 128);
        let mut b = TrainConfig { modifications: false, ..Default::default() };
        b.resolve();
        assert_eq!(b.z_dim, 30);
        let mut c = TrainConfig { z_dim: 16, ..Default::default() };
        c.resolve();
        assert_eq!(c.z_dim, 16);
    }
}
