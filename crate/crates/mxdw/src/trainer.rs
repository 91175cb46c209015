//! Training orchestration: collect -> world model -> occupancy -> agents,
//! plus evaluation, checkpointing, metrics, the oracle check, and the
//! ablation runner.

use crate::agent::{
    act_deterministic, actor_loss_all_steps_g, actor_loss_deterministic_g, actor_loss_stochastic_g, beta_schedule,
    critic_loss_all_steps_g, critic_loss_first_state_g, lambda_returns_g, rollout_values_g, ActionSpace, Critic,
    DeterministicActor, ExplorationNoise, LambdaCfg, PolicyRef, StochasticActor,
};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::envs::{make_env, Env, EnvSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::occupancy::{
    draw_bootstrap, entropy_bonus_g, occupancy_train_step, tabular_occupancy_oracle, MdnPair, OccupancyBatch,
    OccupancyConfig,
};
use crate::rollout::{collect_episode, imagine_rollout, Episode, ImagineNoise, ReplayBuffer};
use crate::world_model::{LatentState, WmNoise, WorldModel, WorldModelConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// Everything trainable, plus the action space they share.
pub struct AgentBundle {
    pub wm: WorldModel,
    pub actor_s: StochasticActor,
    pub actor_d: DeterministicActor,
    pub critic_s: Critic,
    pub critic_d: Critic,
    pub mdn: Option<MdnPair>,
    pub space: ActionSpace,
    pub exploration: bool,
    actor_hidden: usize,
    critic_hidden: usize,
    mdn_hidden: usize,
}

impl AgentBundle {
    pub fn new(cfg: &TrainConfig, spec: &EnvSpec, obs_lo: &[f64], obs_hi: &[f64], rng: &mut ChaCha8Rng) -> Self {
        let mut cfg = cfg.clone();
        cfg.resolve();
        let mut wm_cfg = WorldModelConfig::new(spec.obs_dim, spec.act_dim).with_obs_bounds(obs_lo, obs_hi);
        wm_cfg.h_dim = cfg.h_dim;
        wm_cfg.z_dim = cfg.z_dim;
        wm_cfg.hidden = cfg.wm_hidden;
        wm_cfg.modifications = cfg.modifications;
        let latent = wm_cfg.latent_dim();
        let wm = WorldModel::new(wm_cfg, rng);

        let space = ActionSpace::from_spec(spec);
        let actor_s = StochasticActor::new(latent, cfg.actor_hidden, space.clone(), rng);
        let actor_d = DeterministicActor::new(latent, cfg.actor_hidden, space.clone(), rng);
        // Q critics with modifications on, V critics in the baseline form
        let critic_s = Critic::new(latent, spec.act_dim, cfg.critic_hidden, cfg.modifications, rng);
        let critic_d = Critic::new(latent, spec.act_dim, cfg.critic_hidden, cfg.modifications, rng);
        let mdn =
            if cfg.exploration { Some(MdnPair::new(latent, cfg.mdn_hidden, cfg.mdn_components, rng)) } else { None };
        AgentBundle {
            wm,
            actor_s,
            actor_d,
            critic_s,
            critic_d,
            mdn,
            space,
            exploration: cfg.exploration,
            actor_hidden: cfg.actor_hidden,
            critic_hidden: cfg.critic_hidden,
            mdn_hidden: cfg.mdn_hidden,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.wm.cfg.latent_dim()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let cfg = &self.wm.cfg;
        let dims = vec![
            cfg.obs_dim as f64,
            cfg.act_dim as f64,
            cfg.h_dim as f64,
            cfg.z_dim as f64,
            cfg.hidden as f64,
            self.mdn.as_ref().map_or(0.0, |m| m.online.d as f64),
            self.mdn.as_ref().map_or(0.0, |m| m.online.k as f64),
        ];
        ck.push("meta.dims", Tensor::row(&dims));
        ck.push(
            "meta.flags",
            Tensor::row(&[if cfg.modifications { 1.0 } else { 0.0 }, if self.exploration { 1.0 } else { 0.0 }]),
        );
        ck.push(
            "meta.hidden",
            Tensor::row(&[self.actor_hidden as f64, self.critic_hidden as f64, self.mdn_hidden as f64]),
        );
        ck.push("meta.obs_loc", Tensor::row(&cfg.obs_loc));
        ck.push("meta.obs_scale", Tensor::row(&cfg.obs_scale));
        ck.push("meta.act_center", Tensor::row(&self.space.center));
        ck.push("meta.act_amplitude", Tensor::row(&self.space.amplitude));
        ck.push_store("wm", &self.wm.ps);
        ck.push_store("actor_s", &self.actor_s.ps);
        ck.push_store("actor_d", &self.actor_d.ps);
        ck.push_store("critic_s", &self.critic_s.ps);
        ck.push_store("critic_d", &self.critic_d.ps);
        if let Some(m) = &self.mdn {
            ck.push_store("mdn_online", &m.online.ps);
            ck.push_store("mdn_target", &m.target.ps);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<AgentBundle> {
        let dims = ck.get("meta.dims").ok_or_else(|| Error::Format("checkpoint missing meta.dims".into()))?;
        let flags = ck.get("meta.flags").ok_or_else(|| Error::Format("checkpoint missing meta.flags".into()))?;
        let hidden = ck.get("meta.hidden").ok_or_else(|| Error::Format("checkpoint missing meta.hidden".into()))?;
        let obs_loc = ck.get("meta.obs_loc").ok_or_else(|| Error::Format("checkpoint missing meta.obs_loc".into()))?;
        let obs_scale =
            ck.get("meta.obs_scale").ok_or_else(|| Error::Format("checkpoint missing meta.obs_scale".into()))?;
        let act_center =
            ck.get("meta.act_center").ok_or_else(|| Error::Format("checkpoint missing meta.act_center".into()))?;
        let act_amp = ck
            .get("meta.act_amplitude")
            .ok_or_else(|| Error::Format("checkpoint missing meta.act_amplitude".into()))?;

        let d = |i: usize| dims.data()[i] as usize;
        let modifications = flags.data()[0] != 0.0;
        let exploration = flags.data()[1] != 0.0;
        let cfg = TrainConfig {
            h_dim: d(2),
            z_dim: d(3),
            wm_hidden: d(4),
            actor_hidden: hidden.data()[0] as usize,
            critic_hidden: hidden.data()[1] as usize,
            mdn_hidden: hidden.data()[2] as usize,
            mdn_components: d(6).max(1),
            modifications,
            exploration,
            ..Default::default()
        };
        let act_dim = d(1);
        let spec = EnvSpec::new(
            d(0),
            act_dim,
            (0..act_dim).map(|i| act_center.data()[i] - act_amp.data()[i]).collect(),
            (0..act_dim).map(|i| act_center.data()[i] + act_amp.data()[i]).collect(),
            1,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bundle = AgentBundle::new(&cfg, &spec, obs_loc.data(), obs_loc.data(), &mut rng);
        // the constructor derived whitening from fake bounds; restore the real one
        bundle.wm.cfg.obs_loc = obs_loc.data().to_vec();
        bundle.wm.cfg.obs_scale = obs_scale.data().to_vec();

        ck.restore_store("wm", &mut bundle.wm.ps)?;
        ck.restore_store("actor_s", &mut bundle.actor_s.ps)?;
        ck.restore_store("actor_d", &mut bundle.actor_d.ps)?;
        ck.restore_store("critic_s", &mut bundle.critic_s.ps)?;
        ck.restore_store("critic_d", &mut bundle.critic_d.ps)?;
        if exploration {
            let m = bundle.mdn.as_mut().expect("exploration bundle has an MDN");
            ck.restore_store("mdn_online", &mut m.online.ps)?;
            ck.restore_store("mdn_target", &mut m.target.ps)?;
        }
        Ok(bundle)
    }
}

/// Evaluation summary over a fixed number of deterministic episodes.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub step: u64,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub distinct_state_bins: usize,
}

impl EvalReport {
    fn from_returns(step: u64, returns: Vec<f64>, distinct_state_bins: usize) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let half = 1.96 * (var / n).sqrt();
        EvalReport { step, returns, mean, ci95_low: mean - half, ci95_high: mean + half, distinct_state_bins }
    }
}

const COVERAGE_BINS: usize = 16;

/// Run the deterministic actor with no exploration noise; the latent filter
/// uses the posterior mean, so the whole evaluation is a pure function of
/// `(bundle, env, episodes, base_seed)`. Coverage counts distinct cells of a
/// fixed 16-bins-per-dimension grid over the documented observation bounds.
pub fn evaluate_bundle(
    bundle: &AgentBundle,
    env: &mut dyn Env,
    episodes: usize,
    base_seed: u64,
    step: u64,
) -> Result<EvalReport> {
    if episodes < 2 {
        return Err(Error::Config("evaluation needs at least 2 episodes".into()));
    }
    let spec = env.spec();
    if spec.obs_dim != bundle.wm.cfg.obs_dim || spec.act_dim != bundle.wm.cfg.act_dim {
        return Err(Error::Dim(format!(
            "checkpoint was trained for obs {} act {}, environment has obs {} act {}",
            bundle.wm.cfg.obs_dim,
            bundle.wm.cfg.act_dim,
            spec.obs_dim,
            spec.act_dim
        )));
    }
    let (lo, hi) = env.obs_bounds();
    let mut bins: HashSet<Vec<u8>> = HashSet::new();
    let bin_of = |obs: &[f64], bins: &mut HashSet<Vec<u8>>| {
        let cell: Vec<u8> = obs
            .iter()
            .enumerate()
            .map(|(i, &o)| {
                let frac = (o - lo[i]) / (hi[i] - lo[i]);
                ((frac * COVERAGE_BINS as f64).floor() as i64).clamp(0, COVERAGE_BINS as i64 - 1) as u8
            })
            .collect();
        bins.insert(cell);
    };

    let zero_eps = Tensor::zeros(1, bundle.wm.cfg.z_dim);
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut obs = env.reset(base_seed.wrapping_add(ep as u64));
        bin_of(&obs, &mut bins);
        let mut state = bundle.wm.init_state(1);
        if bundle.wm.cfg.modifications {
            let obs_t = Tensor::row(&obs);
            let (next, _) = bundle.wm.observe_step_with_noise(&state, None, &obs_t, &zero_eps)?;
            state = next;
        }
        let mut total = 0.0;
        loop {
            let action = act_deterministic(&bundle.actor_d, &state.feature_row(0))?;
            let r = env.step(&action)?;
            total += r.reward;
            bin_of(&r.obs, &mut bins);
            let act_t = Tensor::row(&action);
            let obs_t = Tensor::row(&r.obs);
            let (next, _) = bundle.wm.observe_step_with_noise(&state, Some(&act_t), &obs_t, &zero_eps)?;
            state = next;
            obs = r.obs;
            if r.done {
                break;
            }
        }
        let _ = obs;
        returns.push(total);
    }
    Ok(EvalReport::from_returns(step, returns, bins.len()))
}

/// Load a checkpoint and evaluate it on a named environment.
pub fn evaluate(ckpt: &Path, env_name: &str, episodes: usize, base_seed: u64) -> Result<EvalReport> {
    let bundle = AgentBundle::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let mut env = make_env(env_name)?;
    evaluate_bundle(&bundle, env.as_mut(), episodes, base_seed, 0)
}

/// Per-update-round loss averages for the metrics stream.
#[derive(Clone, Debug, Default)]
struct RoundStats {
    count: f64,
    wm_total: f64,
    wm_recon: f64,
    wm_reward: f64,
    wm_term: f64,
    wm_kl_fixed: f64,
    wm_jeffreys: f64,
    wm_kl_prior: f64,
    mdn_loss: f64,
    actor_s_loss: f64,
    actor_d_loss: f64,
    critic_s_loss: f64,
    critic_d_loss: f64,
    entropy: f64,
}

impl RoundStats {
    fn avg(&self, v: f64) -> f64 {
        if self.count > 0.0 {
            v / self.count
        } else {
            0.0
        }
    }
}

/// Output of one training run.
pub struct TrainOutput {
    pub reports: Vec<EvalReport>,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

struct Trainer {
    cfg: TrainConfig,
    bundle: AgentBundle,
    buffer: ReplayBuffer,
    env: Box<dyn Env>,
    collect_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    eval_seed: u64,
    env_steps: u64,
    lcfg: LambdaCfg,
    occ_cfg: OccupancyConfig,
    noise: Option<ExplorationNoise>,
    out_dir: PathBuf,
}

impl Trainer {
    fn new(cfg: &TrainConfig, out_dir: &Path) -> Result<Trainer> {
        let mut cfg = cfg.clone();
        cfg.resolve();
        cfg.validate()?;
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("config.txt"), cfg.to_file_string())?;

        let env = make_env(&cfg.env)?;
        let spec = env.spec();
        let (lo, hi) = env.obs_bounds();

        let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let collect_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let train_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let eval_seed = master.gen();

        let bundle = AgentBundle::new(&cfg, &spec, &lo, &hi, &mut init_rng);

        // Exploration noise by variant: the baseline keeps additive noise,
        // the modifications add random-action probability, and
        // entropy-driven exploration drops the additive noise entirely.
        let eps_random = if cfg.modifications { cfg.eps_random } else { 0.0 };
        let additive = if cfg.exploration { 0.0 } else { cfg.noise_frac };
        let noise_std: Vec<f64> = bundle.space.amplitude.iter().map(|a| additive * a).collect();
        let noise = if eps_random > 0.0 || noise_std.iter().any(|&s| s > 0.0) {
            Some(ExplorationNoise { eps_random, noise_std })
        } else {
            None
        };

        let lcfg = LambdaCfg { gamma: cfg.gamma, lambda: cfg.lambda, beta_start: cfg.beta_start, beta_end: cfg.beta_end };
        let occ_cfg = OccupancyConfig { gamma_q: cfg.gamma_q, soft_tau: cfg.soft_tau, lr: cfg.mdn_lr, horizon: cfg.horizon };

        Ok(Trainer {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            bundle,
            env,
            collect_rng,
            train_rng,
            eval_seed,
            env_steps: 0,
            lcfg,
            occ_cfg,
            noise,
            out_dir: out_dir.to_path_buf(),
            cfg,
        })
    }

    fn prefill(&mut self) -> Result<()> {
        let spec = self.env.spec();
        for _ in 0..self.cfg.prefill_episodes {
            let seed = self.collect_rng.gen();
            let mut obs = self.env.reset(seed);
            let mut episode =
                Episode { observations: vec![obs.clone()], actions: Vec::new(), rewards: Vec::new(), dones: Vec::new() };
            loop {
                let action: Vec<f64> =
                    (0..spec.act_dim).map(|i| self.collect_rng.gen_range(spec.act_low[i]..spec.act_high[i])).collect();
                let r = self.env.step(&action)?;
                episode.observations.push(r.obs.clone());
                episode.actions.push(action);
                episode.rewards.push(r.reward);
                episode.dones.push(r.done);
                obs = r.obs;
                if r.done {
                    break;
                }
            }
            let _ = obs;
            self.env_steps += episode.len() as u64;
            self.buffer.push(episode)?;
        }
        Ok(())
    }

    fn collect_round(&mut self, target: u64) -> Result<()> {
        while self.env_steps < target {
            let seed = self.collect_rng.gen();
            let ep = collect_episode(
                self.env.as_mut(),
                &self.bundle.wm,
                &self.bundle.actor_s,
                self.noise.as_ref(),
                self.cfg.modifications,
                seed,
                &mut self.collect_rng,
            )?;
            self.env_steps += ep.len() as u64;
            self.buffer.push(ep)?;
        }
        Ok(())
    }

    /// One full update: world model, occupancy estimator, both agents.
    fn update_once(&mut self, stats: &mut RoundStats) -> Result<()> {
        let batch = self.buffer.sample_sequences(self.cfg.batch_size, self.cfg.seq_len, &mut self.train_rng)?;

        // world model
        let noise = WmNoise::draw(&mut self.train_rng, self.cfg.batch_size, self.cfg.seq_len, self.bundle.wm.cfg.z_dim);
        let start = {
            let mut g = Graph::new();
            let lv = self.bundle.wm.ps.leaves(&mut g);
            let out = match self.bundle.wm.sequence_loss(&mut g, &lv, &batch, &noise) {
                Ok(out) => out,
                Err(e) => return Err(self.dump_batch(&batch, e)),
            };
            let grads = g.backward(out.total);
            let gv = self.bundle.wm.ps.gather_grads(&g, &lv, &grads);
            self.bundle.wm.ps.adam_step(&gv, self.cfg.wm_lr, self.cfg.grad_clip);
            let c = out.components;
            stats.wm_total += c.total;
            stats.wm_recon += c.reconstruction;
            stats.wm_reward += c.reward;
            stats.wm_term += c.termination;
            stats.wm_kl_fixed += c.kl_fixed;
            stats.wm_jeffreys += c.jeffreys;
            stats.wm_kl_prior += c.kl_prior;
            out.start_state
        };

        // occupancy estimator on a detached rollout under the explorer
        if self.bundle.mdn.is_some() {
            let occ_batch = self.detached_rollout(&start)?;
            let grad_clip = self.cfg.grad_clip;
            let occ_cfg = self.occ_cfg.clone();
            let mdn = self.bundle.mdn.as_mut().unwrap();
            let loss = occupancy_train_step(mdn, &occ_batch, &occ_cfg, grad_clip, &mut self.train_rng)?;
            stats.mdn_loss += loss;
        }

        // agents
        let (a_loss, c_loss, ent) = self.agent_update(&start, true)?;
        stats.actor_s_loss += a_loss;
        stats.critic_s_loss += c_loss;
        stats.entropy += ent;
        let (a_loss, c_loss, _) = self.agent_update(&start, false)?;
        stats.actor_d_loss += a_loss;
        stats.critic_d_loss += c_loss;

        stats.count += 1.0;
        Ok(())
    }

    /// Rollout under the stochastic actor with every network frozen; the
    /// extracted values feed the occupancy loss as constants.
    fn detached_rollout(&mut self, start: &LatentState) -> Result<OccupancyBatch> {
        let cfg = &self.cfg;
        let mut g = Graph::new();
        let wm_lv = self.bundle.wm.ps.frozen_leaves(&mut g);
        let actor_lv = self.bundle.actor_s.ps.frozen_leaves(&mut g);
        let noise = ImagineNoise::draw(
            &mut self.train_rng,
            cfg.horizon,
            start.batch(),
            self.bundle.wm.cfg.z_dim,
            self.bundle.space.dim(),
        );
        let traj = imagine_rollout(
            &mut g,
            &self.bundle.wm,
            &wm_lv,
            PolicyRef::Stochastic(&self.bundle.actor_s),
            &actor_lv,
            start,
            cfg.horizon,
            &noise,
        )?;
        Ok(OccupancyBatch {
            start: g.value(traj.features[0]).clone(),
            states: traj.features[1..].iter().map(|&f| g.value(f).clone()).collect(),
            continues: traj.continues.iter().map(|&c| g.value(c).clone()).collect(),
        })
    }

    /// Actor update followed by its critic's regression to the detached
    /// lambda targets. Returns (actor loss, critic loss, mean entropy).
    fn agent_update(&mut self, start: &LatentState, stochastic: bool) -> Result<(f64, f64, f64)> {
        let cfg = &self.cfg;
        let horizon = cfg.horizon;
        let first_state_rule = cfg.modifications;

        let mut g = Graph::new();
        let wm_lv = self.bundle.wm.ps.frozen_leaves(&mut g);
        let noise =
            ImagineNoise::draw(&mut self.train_rng, horizon, start.batch(), self.bundle.wm.cfg.z_dim, self.bundle.space.dim());

        let (policy, policy_lv) = if stochastic {
            (PolicyRef::Stochastic(&self.bundle.actor_s), self.bundle.actor_s.ps.leaves(&mut g))
        } else {
            (PolicyRef::Deterministic(&self.bundle.actor_d), self.bundle.actor_d.ps.leaves(&mut g))
        };
        let critic = if stochastic { &self.bundle.critic_s } else { &self.bundle.critic_d };
        let critic_lv = critic.ps.frozen_leaves(&mut g);

        let traj = imagine_rollout(&mut g, &self.bundle.wm, &wm_lv, policy, &policy_lv, start, horizon, &noise)?;
        let values = rollout_values_g(&mut g, &traj, critic, &critic_lv, policy, &policy_lv, &noise.value_eps)?;
        let targets = lambda_returns_g(&mut g, &traj.rewards, &values, &traj.continues, &self.lcfg)?;

        let mut entropy_mean = 0.0;
        let entropy = if stochastic && self.bundle.mdn.is_some() {
            let mdn = self.bundle.mdn.as_ref().unwrap();
            let last = g.value(traj.features[horizon]).clone();
            let boot = draw_bootstrap(&mdn.target, &last, &mut self.train_rng)?;
            let t_lv = mdn.target.ps.frozen_leaves(&mut g);
            let ent = entropy_bonus_g(
                &mut g,
                &mdn.target,
                &t_lv,
                traj.features[0],
                &traj.features[1..],
                &traj.continues,
                &boot,
                &self.occ_cfg,
            )?;
            entropy_mean = {
                let m = g.mean_all(ent);
                g.value(m).item()
            };
            Some(ent)
        } else {
            None
        };

        let beta = beta_schedule(self.env_steps, cfg.total_env_steps, &self.lcfg);
        let actor_loss = if first_state_rule {
            if stochastic {
                actor_loss_stochastic_g(&mut g, &targets, entropy, beta)
            } else {
                actor_loss_deterministic_g(&mut g, &targets)
            }
        } else {
            let base = actor_loss_all_steps_g(&mut g, &targets);
            match entropy {
                Some(ent) => {
                    let h = g.mean_all(ent);
                    let hb = g.scale(h, beta);
                    g.sub(base, hb)
                }
                None => base,
            }
        };
        let actor_loss_value = g.value(actor_loss).item();
        if !actor_loss_value.is_finite() {
            return Err(Error::Numeric("non-finite actor loss".into()));
        }
        let grads = g.backward(actor_loss);
        // detach the regression inputs before mutating parameters
        let features0: Vec<Tensor> = traj.features[..horizon].iter().map(|&f| g.value(f).clone()).collect();
        let action0 = g.value(traj.actions[0]).clone();
        let target_values: Vec<Tensor> = targets.iter().map(|&t| g.value(t).clone()).collect();
        {
            let store = if stochastic { &mut self.bundle.actor_s.ps } else { &mut self.bundle.actor_d.ps };
            let gv = store.gather_grads(&g, &policy_lv, &grads);
            store.adam_step(&gv, cfg.actor_lr, cfg.grad_clip);
        }

        // critic regression on a fresh graph
        let mut cg = Graph::new();
        let critic = if stochastic { &self.bundle.critic_s } else { &self.bundle.critic_d };
        let critic_lv = critic.ps.leaves(&mut cg);
        let critic_loss = if first_state_rule {
            let f0 = cg.constant(features0[0].clone());
            let a0 = cg.constant(action0);
            let t0 = cg.constant(target_values[0].clone());
            critic_loss_first_state_g(&mut cg, critic, &critic_lv, f0, Some(a0), t0)
        } else {
            let fv: Vec<Var> = features0.iter().map(|f| cg.constant(f.clone())).collect();
            let tv: Vec<Var> = target_values.iter().map(|t| cg.constant(t.clone())).collect();
            critic_loss_all_steps_g(&mut cg, critic, &critic_lv, &fv, &tv)
        };
        let critic_loss_value = cg.value(critic_loss).item();
        if !critic_loss_value.is_finite() {
            return Err(Error::Numeric("non-finite critic loss".into()));
        }
        let grads = cg.backward(critic_loss);
        let store = if stochastic { &mut self.bundle.critic_s.ps } else { &mut self.bundle.critic_d.ps };
        let gv = store.gather_grads(&cg, &critic_lv, &grads);
        store.adam_step(&gv, cfg.critic_lr, cfg.grad_clip);

        Ok((actor_loss_value, critic_loss_value, entropy_mean))
    }

    fn dump_batch(&self, batch: &crate::world_model::SequenceBatch, err: Error) -> Error {
        let path = self.out_dir.join("diagnostic_batch.txt");
        let mut text = format!("{err}\nenv_steps={}\n", self.env_steps);
        for (t, obs) in batch.observations.iter().enumerate() {
            text.push_str(&format!("obs[{t}]={:?}\n", obs.data()));
        }
        let _ = std::fs::write(path, text);
        err
    }

    fn eval_and_log(
        &mut self,
        scheduled_step: u64,
        stats: &RoundStats,
        metrics: &mut MetricsWriter,
        reports: &mut Vec<EvalReport>,
    ) -> Result<()> {
        let mut eval_env = make_env(&self.cfg.env)?;
        let report =
            evaluate_bundle(&self.bundle, eval_env.as_mut(), self.cfg.eval_episodes, self.eval_seed, scheduled_step)?;

        let mut rec = MetricsRecord::new(scheduled_step);
        rec.push("mean_return", report.mean)
            .push("ci95_low", report.ci95_low)
            .push("ci95_high", report.ci95_high)
            .push("distinct_state_bins", report.distinct_state_bins as f64)
            .push("beta", beta_schedule(scheduled_step, self.cfg.total_env_steps, &self.lcfg))
            .push("wm_loss", stats.avg(stats.wm_total))
            .push("wm_recon", stats.avg(stats.wm_recon))
            .push("wm_reward", stats.avg(stats.wm_reward))
            .push("actor_s_loss", stats.avg(stats.actor_s_loss))
            .push("actor_d_loss", stats.avg(stats.actor_d_loss))
            .push("critic_s_loss", stats.avg(stats.critic_s_loss))
            .push("critic_d_loss", stats.avg(stats.critic_d_loss));
        if self.cfg.modifications {
            rec.push("wm_term", stats.avg(stats.wm_term))
                .push("wm_kl_fixed", stats.avg(stats.wm_kl_fixed))
                .push("wm_jeffreys", stats.avg(stats.wm_jeffreys));
        } else {
            rec.push("wm_kl_prior", stats.avg(stats.wm_kl_prior));
        }
        if self.bundle.mdn.is_some() {
            rec.push("mdn_loss", stats.avg(stats.mdn_loss)).push("entropy", stats.avg(stats.entropy));
        }
        metrics.append(&rec)?;

        self.bundle.to_checkpoint().save(&self.out_dir.join(format!("ckpt_step{scheduled_step}.mxdw")))?;
        reports.push(report);
        Ok(())
    }
}

/// Full training loop per the configuration; writes metrics, periodic
/// checkpoints, and `final.mxdw` into `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg, out_dir)?;
    let cfg = trainer.cfg.clone();
    let metrics_path = out_dir.join("metrics.txt");
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut reports = Vec::new();

    trainer.prefill()?;

    // evaluation schedule: 0, eval_every, 2*eval_every, ..., total
    let mut schedule: Vec<u64> = (0..)
        .map(|i| i * cfg.eval_every)
        .take_while(|&s| s < cfg.total_env_steps)
        .collect();
    schedule.push(cfg.total_env_steps);

    let mut stats = RoundStats::default();
    trainer.eval_and_log(0, &stats, &mut metrics, &mut reports)?;
    let mut next_eval_idx = 1;

    while trainer.env_steps < cfg.total_env_steps {
        let target = (trainer.env_steps + cfg.train_every).min(cfg.total_env_steps);
        trainer.collect_round(target)?;

        let can_train = trainer.buffer.episodes().any(|e| e.len() + 1 >= cfg.seq_len);
        if can_train {
            stats = RoundStats::default();
            for _ in 0..cfg.updates_per_round {
                trainer.update_once(&mut stats)?;
            }
        }

        while next_eval_idx < schedule.len() && schedule[next_eval_idx] <= trainer.env_steps {
            trainer.eval_and_log(schedule[next_eval_idx], &stats, &mut metrics, &mut reports)?;
            next_eval_idx += 1;
        }
    }

    let final_checkpoint = out_dir.join("final.mxdw");
    trainer.bundle.to_checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutput { reports, metrics_path, final_checkpoint })
}

/// Outcome of the occupancy oracle comparison.
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub oracle: Vec<f64>,
    pub estimated: Vec<f64>,
    pub tv: f64,
}

/// Fit an MDN to discounted occupancies of the `n`-state chain by rolling
/// real chain trajectories (one-hot states embedded as latents via identity)
/// and compare its start-state estimate to the exact tabular oracle by
/// total-variation distance over unit cells.
pub fn oracle_check(gamma_q: f64, chain: usize, seed: u64) -> Result<OracleReport> {
    if chain > 20 {
        return Err(Error::Config("oracle check supports chains up to 20 states".into()));
    }
    let env = crate::envs::ChainMdp::new(chain);
    let mdp = env.as_tabular()?;
    let oracle = tabular_occupancy_oracle(&mdp, &vec![0; chain], gamma_q, 0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = 5.min(chain + 2);
    let mut pair = MdnPair::new(chain, 64, 8, &mut rng);
    let occ_cfg = OccupancyConfig { gamma_q, soft_tau: 0.1, lr: 1e-3, horizon };

    let batch_size = 32;
    let one_hot = |s: usize| {
        let mut v = vec![0.0; chain];
        v[s] = 1.0;
        v
    };
    for _ in 0..1500 {
        // rollouts from uniformly random start states so every conditional
        // is trained, matching the bootstrap recursion
        let mut start = Tensor::zeros(batch_size, chain);
        let mut states = vec![Tensor::zeros(batch_size, chain); horizon];
        for b in 0..batch_size {
            let mut s = rng.gen_range(0..chain);
            for (c, &v) in one_hot(s).iter().enumerate() {
                start.set(b, c, v);
            }
            for t in 0..horizon {
                // autonomous chain: drift right, absorb at the end
                if s + 1 < chain {
                    s += 1;
                }
                for (c, &v) in one_hot(s).iter().enumerate() {
                    states[t].set(b, c, v);
                }
            }
        }
        let batch = OccupancyBatch {
            start,
            states,
            continues: (0..horizon).map(|_| Tensor::from_fn(batch_size, 1, |_, _| 1.0)).collect(),
        };
        occupancy_train_step(&mut pair, &batch, &occ_cfg, 100.0, &mut rng)?;
    }

    // integrate mixture mass over the unit cell of each one-hot corner
    let params = pair.online.forward(&one_hot(0))?;
    let normal = Normal::new(0.0, 1.0).map_err(|_| Error::Numeric("normal construction".into()))?;
    let mut estimated = vec![0.0; chain];
    for (cell, est) in estimated.iter_mut().enumerate() {
        let mut mass = 0.0;
        for c in 0..params.components() {
            let mut prod = params.weights[c];
            for d in 0..chain {
                let (lo, hi) = if d == cell { (0.5, 1.5) } else { (-0.5, 0.5) };
                let mu = params.means[c][d];
                let sd = params.stds[c][d];
                prod *= normal.cdf((hi - mu) / sd) - normal.cdf((lo - mu) / sd);
            }
            mass += prod;
        }
        *est = mass;
    }
    let inside: f64 = estimated.iter().sum();
    let mut tv = 0.5 * (1.0 - inside).max(0.0);
    for s in 0..chain {
        tv += 0.5 * (estimated[s] - oracle[s]).abs();
    }
    Ok(OracleReport { oracle, estimated, tv })
}

/// Ablation variants compared by the experiment runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Exploration,
    Modifications,
    Full,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [Variant::Baseline, Variant::Exploration, Variant::Modifications, Variant::Full]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Exploration => "exploration",
            Variant::Modifications => "modifications",
            Variant::Full => "full",
        }
    }

    pub fn parse(name: &str) -> Result<Variant> {
        match name {
            "baseline" => Ok(Variant::Baseline),
            "exploration" => Ok(Variant::Exploration),
            "modifications" => Ok(Variant::Modifications),
            "full" => Ok(Variant::Full),
            _ => Err(Error::Config(format!("unknown variant {name:?}"))),
        }
    }

    pub fn flags(&self) -> (bool, bool) {
        // (exploration, modifications)
        match self {
            Variant::Baseline => (false, false),
            Variant::Exploration => (true, false),
            Variant::Modifications => (false, true),
            Variant::Full => (true, true),
        }
    }
}

/// One completed training run inside an ablation.
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub reports: Vec<EvalReport>,
}

/// Run every requested variant over shared seeds; one training process per
/// (variant, seed), parallelized over available cores. Writes
/// `ablation.csv` with one aligned mean-return column per variant.
pub fn run_ablation(
    cfg_base: &TrainConfig,
    variants: &[Variant],
    seeds: u64,
    out_dir: &Path,
) -> Result<Vec<AblationRun>> {
    std::fs::create_dir_all(out_dir)?;
    let mut jobs = Vec::new();
    for &variant in variants {
        for s in 0..seeds {
            let mut cfg = cfg_base.clone();
            let (exploration, modifications) = variant.flags();
            cfg.exploration = exploration;
            cfg.modifications = modifications;
            cfg.seed = cfg_base.seed + s;
            let run_dir = out_dir.join(format!("{}_seed{}", variant.name(), cfg.seed));
            jobs.push((variant, cfg.seed, cfg, run_dir));
        }
    }

    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut runs: Vec<AblationRun> = Vec::new();
    for wave in jobs.chunks(workers) {
        let results: Vec<Result<AblationRun>> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|(variant, seed, cfg, run_dir)| {
                    scope.spawn(move || {
                        let out = train(cfg, run_dir)?;
                        Ok(AblationRun { variant: *variant, seed: *seed, reports: out.reports })
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
        });
        for r in results {
            runs.push(r?);
        }
    }

    // aligned per-step table: mean over seeds per variant
    let steps: Vec<u64> = runs
        .first()
        .map(|r| r.reports.iter().map(|rep| rep.step).collect())
        .unwrap_or_default();
    let mut csv = String::from("step");
    for &v in variants {
        csv.push(',');
        csv.push_str(v.name());
    }
    csv.push('\n');
    for (i, &step) in steps.iter().enumerate() {
        csv.push_str(&step.to_string());
        for &v in variants {
            let vals: Vec<f64> = runs
                .iter()
                .filter(|r| r.variant == v)
                .filter_map(|r| r.reports.get(i).map(|rep| rep.mean))
                .collect();
            let mean = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
            csv.push_str(&format!(",{mean}"));
        }
        csv.push('\n');
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    Ok(runs)
}
