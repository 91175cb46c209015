//! Experience collection, sequence replay, and imagination rollouts.
//!
//! Real episodes are stored whole and replayed as fixed-length subsequences
//! that never cross episode boundaries. Imagination unrolls the world model's
//! prior under the current policy, fully on the graph, so actor gradients
//! flow through every imagined state; it consumes no observations.

use crate::agent::{act_stochastic, ExplorationNoise, PolicyRef};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::nn::Leaves;
use crate::world_model::{normal_tensor, LatentState, SequenceBatch, StateVars, WorldModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::io::{Read, Write};

/// One complete episode: `T + 1` observations, `T` transitions.
#[derive(Clone, Debug)]
pub struct Episode {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Episode {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.actions.len();
        if self.observations.len() != t + 1 || self.rewards.len() != t || self.dones.len() != t {
            return Err(Error::Dim("episode field lengths inconsistent".into()));
        }
        // episodes are stored whole: done only on the final transition
        for (i, &d) in self.dones.iter().enumerate() {
            if d != (i == t - 1) && d {
                return Err(Error::Env("done set before the final transition".into()));
            }
        }
        Ok(())
    }
}

/// Bounded episode store; capacity counts transitions, eviction is oldest-first.
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity_steps: usize,
    stored_steps: usize,
}

impl ReplayBuffer {
    pub fn new(capacity_steps: usize) -> Self {
        assert!(capacity_steps > 0);
        ReplayBuffer { episodes: VecDeque::new(), capacity_steps, stored_steps: 0 }
    }

    pub fn stored_steps(&self) -> usize {
        self.stored_steps
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn push(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        self.stored_steps += episode.len();
        self.episodes.push_back(episode);
        while self.stored_steps > self.capacity_steps {
            match self.episodes.pop_front() {
                Some(old) => self.stored_steps -= old.len(),
                None => break,
            }
        }
        Ok(())
    }

    /// Uniformly sample `batch` subsequences of `len` observations, each
    /// fully inside one stored episode.
    pub fn sample_sequences(&self, batch: usize, len: usize, rng: &mut ChaCha8Rng) -> Result<SequenceBatch> {
        if len < 2 {
            return Err(Error::Dim("sequence length must be at least 2".into()));
        }
        // an episode with T transitions holds T + 1 observations
        let eligible: Vec<&Episode> = self.episodes.iter().filter(|e| e.len() + 1 >= len).collect();
        if eligible.is_empty() {
            return Err(Error::Env("no stored episode long enough to sample from".into()));
        }
        let obs_dim = eligible[0].observations[0].len();
        let act_dim = eligible[0].actions[0].len();

        let mut obs = vec![Tensor::zeros(batch, obs_dim); len];
        let mut act = vec![Tensor::zeros(batch, act_dim); len - 1];
        let mut rew = vec![Tensor::zeros(batch, 1); len - 1];
        let mut don = vec![Tensor::zeros(batch, 1); len - 1];

        for b in 0..batch {
            let ep = eligible[rng.gen_range(0..eligible.len())];
            let start = rng.gen_range(0..=ep.len() + 1 - len);
            for t in 0..len {
                for (c, &v) in ep.observations[start + t].iter().enumerate() {
                    obs[t].set(b, c, v);
                }
                if t + 1 < len {
                    for (c, &v) in ep.actions[start + t].iter().enumerate() {
                        act[t].set(b, c, v);
                    }
                    rew[t].set(b, 0, ep.rewards[start + t]);
                    don[t].set(b, 0, if ep.dones[start + t] { 1.0 } else { 0.0 });
                }
            }
        }
        SequenceBatch::new(obs, act, rew, don)
    }
}

/// Run one full episode with the stochastic actor filtering through the
/// world model. With `observe_first` the initial observation informs the
/// latent state before the first action; without it, the first action is
/// taken blind from the zero state (the original block order).
pub fn collect_episode(
    env: &mut dyn crate::envs::Env,
    wm: &WorldModel,
    actor: &crate::agent::StochasticActor,
    noise: Option<&ExplorationNoise>,
    observe_first: bool,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let obs0 = env.reset(seed);
    let mut state = wm.init_state(1);
    if observe_first {
        let obs_t = Tensor::row(&obs0);
        let (next, _) = wm.observe_step(&state, None, &obs_t, rng)?;
        state = next;
    }

    let mut episode = Episode { observations: vec![obs0], actions: Vec::new(), rewards: Vec::new(), dones: Vec::new() };
    loop {
        let features = state.feature_row(0);
        let action = act_stochastic(actor, &features, noise, rng)?;
        let step = env.step(&action)?;
        let act_t = Tensor::row(&action);
        let obs_t = Tensor::row(&step.obs);
        let (next, _) = wm.observe_step(&state, Some(&act_t), &obs_t, rng)?;
        state = next;

        episode.observations.push(step.obs);
        episode.actions.push(action);
        episode.rewards.push(step.reward);
        episode.dones.push(step.done);
        if step.done {
            break;
        }
    }
    episode.validate()?;
    Ok(episode)
}

/// Differentiable synthetic rollout: `H + 1` latent states, `H` actions,
/// rewards, and continuation probabilities, all graph nodes.
pub struct ImaginedTrajectory {
    pub states: Vec<StateVars>,
    /// `concat(h, z)` features per state, aligned with `states`.
    pub features: Vec<Var>,
    pub actions: Vec<Var>,
    pub rewards: Vec<Var>,
    pub continues: Vec<Var>,
}

impl ImaginedTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Pre-drawn noise for one imagination rollout.
pub struct ImagineNoise {
    pub z_eps: Vec<Tensor>,
    pub act_eps: Vec<Tensor>,
    /// Extra action noise for the fresh value-estimate samples, one per state.
    pub value_eps: Vec<Tensor>,
}

impl ImagineNoise {
    pub fn draw(rng: &mut ChaCha8Rng, horizon: usize, batch: usize, z_dim: usize, act_dim: usize) -> Self {
        ImagineNoise {
            z_eps: (0..horizon).map(|_| normal_tensor(rng, batch, z_dim)).collect(),
            act_eps: (0..horizon).map(|_| normal_tensor(rng, batch, act_dim)).collect(),
            value_eps: (0..=horizon).map(|_| normal_tensor(rng, batch, act_dim)).collect(),
        }
    }
}

/// Unroll the world model `horizon` steps under `policy`, starting from
/// detached latent states. No observations are consumed; latents come from
/// the prior, reparametrized end to end.
pub fn imagine_rollout(
    g: &mut Graph,
    wm: &WorldModel,
    wm_lv: &Leaves,
    policy: PolicyRef<'_>,
    policy_lv: &Leaves,
    start: &LatentState,
    horizon: usize,
    noise: &ImagineNoise,
) -> Result<ImaginedTrajectory> {
    if horizon < 1 {
        return Err(Error::Config("imagination horizon must be at least 1".into()));
    }
    if noise.z_eps.len() < horizon || noise.act_eps.len() < horizon {
        return Err(Error::Dim("not enough noise tensors for rollout".into()));
    }
    let mut state = wm.state_constants(g, start);
    let mut feat = g.concat_cols(state.h, state.z);
    let mut traj = ImaginedTrajectory {
        states: vec![state],
        features: vec![feat],
        actions: Vec::new(),
        rewards: Vec::new(),
        continues: Vec::new(),
    };
    for t in 0..horizon {
        let action = policy.action_g(g, policy_lv, feat, &noise.act_eps[t]);
        let (next, _prior, reward, cont) = wm.imagine_step_g(g, wm_lv, state, action, &noise.z_eps[t]);
        state = next;
        feat = g.concat_cols(state.h, state.z);
        traj.states.push(state);
        traj.features.push(feat);
        traj.actions.push(action);
        traj.rewards.push(reward);
        traj.continues.push(cont);
    }
    Ok(traj)
}

/// Write an episode as a flat binary file: `obs_dim`, `act_dim`, `T` as
/// little-endian u32, then f32 payloads in field order (observations,
/// actions, rewards, dones as 0/1).
pub fn dump_episode(episode: &Episode, w: &mut impl Write) -> Result<()> {
    episode.validate()?;
    let obs_dim = episode.observations[0].len() as u32;
    let act_dim = episode.actions[0].len() as u32;
    let t = episode.len() as u32;
    w.write_all(&obs_dim.to_le_bytes())?;
    w.write_all(&act_dim.to_le_bytes())?;
    w.write_all(&t.to_le_bytes())?;
    let mut write_f32 = |v: f64| w.write_all(&(v as f32).to_le_bytes());
    for obs in &episode.observations {
        for &v in obs {
            write_f32(v)?;
        }
    }
    for act in &episode.actions {
        for &v in act {
            write_f32(v)?;
        }
    }
    for &r in &episode.rewards {
        write_f32(r)?;
    }
    for &d in &episode.dones {
        write_f32(if d { 1.0 } else { 0.0 })?;
    }
    Ok(())
}

/// Read an episode written by [`dump_episode`].
pub fn load_episode(r: &mut impl Read) -> Result<Episode> {
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let obs_dim = read_u32(r)? as usize;
    let act_dim = read_u32(r)? as usize;
    let t = read_u32(r)? as usize;
    let mut f32buf = [0u8; 4];
    let mut read_f32 = |r: &mut dyn Read| -> Result<f64> {
        r.read_exact(&mut f32buf)?;
        Ok(f32::from_le_bytes(f32buf) as f64)
    };
    let mut episode = Episode {
        observations: Vec::with_capacity(t + 1),
        actions: Vec::with_capacity(t),
        rewards: Vec::with_capacity(t),
        dones: Vec::with_capacity(t),
    };
    for _ in 0..=t {
        episode.observations.push((0..obs_dim).map(|_| read_f32(r)).collect::<Result<_>>()?);
    }
    for _ in 0..t {
        episode.actions.push((0..act_dim).map(|_| read_f32(r)).collect::<Result<_>>()?);
    }
    for _ in 0..t {
        episode.rewards.push(read_f32(r)?);
    }
    for _ in 0..t {
        episode.dones.push(read_f32(r)? != 0.0);
    }
    episode.validate()?;
    Ok(episode)
}
