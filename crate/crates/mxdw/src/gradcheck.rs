//! Central finite-difference verification of every differentiable path.
//!
//! Each component builds a tiny seeded instance, computes analytic gradients
//! through the tape, then sweeps every parameter scalar with central
//! differences on the same frozen noise. The reported number is the maximum
//! relative error over all parameters.

use crate::agent::{
    actor_loss_deterministic_g, actor_loss_stochastic_g, critic_loss_first_state_g, lambda_returns_g,
    rollout_values_g, LambdaCfg, PolicyRef,
};
use crate::config::TrainConfig;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::occupancy::{entropy_bonus_g, occupancy_loss_g, OccupancyBatch, OccupancyConfig};
use crate::rollout::{imagine_rollout, ImagineNoise};
use crate::trainer::AgentBundle;
use crate::world_model::{normal_tensor, LatentState, SequenceBatch, WmNoise};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Differentiable paths that can be checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    WorldModel,
    Mdn,
    ActorStoch,
    ActorDet,
    Critic,
    Imagination,
}

impl Component {
    pub fn parse(name: &str) -> Result<Component> {
        match name {
            "world_model" => Ok(Component::WorldModel),
            "mdn" => Ok(Component::Mdn),
            "actor_stoch" => Ok(Component::ActorStoch),
            "actor_det" => Ok(Component::ActorDet),
            "critic" => Ok(Component::Critic),
            "imagination" => Ok(Component::Imagination),
            _ => Err(Error::Config(format!(
                "unknown component {name:?}; expected world_model|mdn|actor_stoch|actor_det|critic|imagination"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Component::WorldModel => "world_model",
            Component::Mdn => "mdn",
            Component::ActorStoch => "actor_stoch",
            Component::ActorDet => "actor_det",
            Component::Critic => "critic",
            Component::Imagination => "imagination",
        }
    }

    /// The tolerance the component is expected to meet.
    pub fn tolerance(&self) -> f64 {
        match self {
            Component::Mdn => 1e-4,
            _ => 1e-3,
        }
    }

    pub fn all() -> [Component; 6] {
        [
            Component::WorldModel,
            Component::Mdn,
            Component::ActorStoch,
            Component::ActorDet,
            Component::Critic,
            Component::Imagination,
        ]
    }
}

/// Outcome of one component check.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub component: Component,
    pub max_rel_err: f64,
    pub params_checked: usize,
}

const FD_STEP: f64 = 1e-5;
const HORIZON: usize = 2;
const BATCH: usize = 2;
const SEQ: usize = 3;

fn tiny_bundle(seed: u64) -> AgentBundle {
    let spec = EnvSpec::new(3, 2, vec![-1.0, -1.0], vec![1.0, 1.0], 10);
    let cfg = TrainConfig {
        h_dim: 6,
        z_dim: 5,
        wm_hidden: 8,
        mdn_hidden: 8,
        mdn_components: 3,
        actor_hidden: 8,
        critic_hidden: 8,
        horizon: HORIZON,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AgentBundle::new(&cfg, &spec, &[-1.0, -1.0, -1.0], &[1.0, 1.0, 1.0], &mut rng)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Fixed inputs shared by the actor-path checks.
struct RolloutFixture {
    start: LatentState,
    noise: ImagineNoise,
    boot: Tensor,
    lcfg: LambdaCfg,
    occ_cfg: OccupancyConfig,
}

fn rollout_loss(bundle: &AgentBundle, fix: &RolloutFixture, component: Component) -> f64 {
    let stochastic = component != Component::ActorDet;
    let mut g = Graph::new();
    let wm_lv = bundle.wm.ps.frozen_leaves(&mut g);
    let (policy, policy_lv) = if stochastic {
        (PolicyRef::Stochastic(&bundle.actor_s), bundle.actor_s.ps.frozen_leaves(&mut g))
    } else {
        (PolicyRef::Deterministic(&bundle.actor_d), bundle.actor_d.ps.frozen_leaves(&mut g))
    };
    let loss = build_rollout_loss(&mut g, bundle, fix, component, policy, &policy_lv, &wm_lv);
    g.value(loss).item()
}

fn build_rollout_loss(
    g: &mut Graph,
    bundle: &AgentBundle,
    fix: &RolloutFixture,
    component: Component,
    policy: PolicyRef<'_>,
    policy_lv: &crate::nn::Leaves,
    wm_lv: &crate::nn::Leaves,
) -> Var {
    let stochastic = component != Component::ActorDet;
    let traj =
        imagine_rollout(g, &bundle.wm, wm_lv, policy, policy_lv, &fix.start, HORIZON, &fix.noise).expect("rollout");
    match component {
        Component::Imagination => {
            let mut acc = traj.rewards[0];
            for &r in &traj.rewards[1..] {
                acc = g.add(acc, r);
            }
            let m = g.mean_all(acc);
            g.neg(m)
        }
        _ => {
            let critic = if stochastic { &bundle.critic_s } else { &bundle.critic_d };
            let critic_lv = critic.ps.frozen_leaves(g);
            let values =
                rollout_values_g(g, &traj, critic, &critic_lv, policy, policy_lv, &fix.noise.value_eps).expect("values");
            let targets = lambda_returns_g(g, &traj.rewards, &values, &traj.continues, &fix.lcfg).expect("targets");
            if stochastic {
                let mdn = bundle.mdn.as_ref().expect("exploration bundle");
                let t_lv = mdn.target.ps.frozen_leaves(g);
                let ent = entropy_bonus_g(
                    g,
                    &mdn.target,
                    &t_lv,
                    traj.features[0],
                    &traj.features[1..],
                    &traj.continues,
                    &fix.boot,
                    &fix.occ_cfg,
                )
                .expect("entropy");
                actor_loss_stochastic_g(g, &targets, Some(ent), 0.1)
            } else {
                actor_loss_deterministic_g(g, &targets)
            }
        }
    }
}

/// Run one component's finite-difference check.
pub fn grad_check(component: Component, seed: u64) -> Result<GradReport> {
    let mut bundle = tiny_bundle(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let (h_dim, z_dim) = (bundle.wm.cfg.h_dim, bundle.wm.cfg.z_dim);
    let act_dim = bundle.space.dim();
    let d = h_dim + z_dim;

    let (max_rel_err, params_checked) = match component {
        Component::WorldModel => {
            let obs = (0..SEQ).map(|_| normal_tensor(&mut rng, BATCH, 3)).collect();
            let act = (0..SEQ - 1).map(|_| normal_tensor(&mut rng, BATCH, act_dim)).collect();
            let rew = (0..SEQ - 1).map(|_| normal_tensor(&mut rng, BATCH, 1)).collect();
            let don = (0..SEQ - 1)
                .map(|_| Tensor::from_fn(BATCH, 1, |r, _| if r == 0 { 0.0 } else { 1.0 }))
                .collect();
            let batch = SequenceBatch::new(obs, act, rew, don)?;
            let noise = WmNoise::draw(&mut rng, BATCH, SEQ, z_dim);

            fn eval(wm: &crate::world_model::WorldModel, batch: &SequenceBatch, noise: &WmNoise) -> f64 {
                let mut g = Graph::new();
                let lv = wm.ps.frozen_leaves(&mut g);
                wm.sequence_loss(&mut g, &lv, batch, noise).unwrap().components.total
            }

            let analytic = {
                let mut g = Graph::new();
                let lv = bundle.wm.ps.leaves(&mut g);
                let out = bundle.wm.sequence_loss(&mut g, &lv, &batch, &noise)?;
                let grads = g.backward(out.total);
                bundle.wm.ps.gather_grads(&g, &lv, &grads)
            };
            let mut max_rel = 0.0_f64;
            let mut checked = 0;
            for i in 0..bundle.wm.ps.len() {
                for j in 0..analytic[i].len() {
                    let orig = bundle.wm.ps.tensor_at(i).data()[j];
                    bundle.wm.ps.tensor_at_mut(i).data_mut()[j] = orig + FD_STEP;
                    let lp = eval(&bundle.wm, &batch, &noise);
                    bundle.wm.ps.tensor_at_mut(i).data_mut()[j] = orig - FD_STEP;
                    let lm = eval(&bundle.wm, &batch, &noise);
                    bundle.wm.ps.tensor_at_mut(i).data_mut()[j] = orig;
                    max_rel = max_rel.max(rel_err(analytic[i].data()[j], (lp - lm) / (2.0 * FD_STEP)));
                    checked += 1;
                }
            }
            (max_rel, checked)
        }

        Component::Mdn => {
            let batch = OccupancyBatch {
                start: normal_tensor(&mut rng, BATCH, d),
                states: (0..HORIZON).map(|_| normal_tensor(&mut rng, BATCH, d)).collect(),
                continues: (0..HORIZON).map(|_| Tensor::from_fn(BATCH, 1, |_, _| 0.9)).collect(),
            };
            let boot = normal_tensor(&mut rng, BATCH, d);
            let occ_cfg = OccupancyConfig { horizon: HORIZON, ..Default::default() };

            fn eval(mdn: &crate::occupancy::Mdn, batch: &OccupancyBatch, boot: &Tensor, cfg: &OccupancyConfig) -> f64 {
                let mut g = Graph::new();
                let lv = mdn.ps.frozen_leaves(&mut g);
                let loss = occupancy_loss_g(&mut g, mdn, &lv, batch, boot, cfg).unwrap();
                g.value(loss).item()
            }

            let analytic = {
                let mdn = &bundle.mdn.as_ref().unwrap().online;
                let mut g = Graph::new();
                let lv = mdn.ps.leaves(&mut g);
                let loss = occupancy_loss_g(&mut g, mdn, &lv, &batch, &boot, &occ_cfg)?;
                let grads = g.backward(loss);
                mdn.ps.gather_grads(&g, &lv, &grads)
            };
            let mdn = &mut bundle.mdn.as_mut().unwrap().online;
            let mut max_rel = 0.0_f64;
            let mut checked = 0;
            for i in 0..mdn.ps.len() {
                for j in 0..analytic[i].len() {
                    let orig = mdn.ps.tensor_at(i).data()[j];
                    mdn.ps.tensor_at_mut(i).data_mut()[j] = orig + FD_STEP;
                    let lp = eval(mdn, &batch, &boot, &occ_cfg);
                    mdn.ps.tensor_at_mut(i).data_mut()[j] = orig - FD_STEP;
                    let lm = eval(mdn, &batch, &boot, &occ_cfg);
                    mdn.ps.tensor_at_mut(i).data_mut()[j] = orig;
                    max_rel = max_rel.max(rel_err(analytic[i].data()[j], (lp - lm) / (2.0 * FD_STEP)));
                    checked += 1;
                }
            }
            (max_rel, checked)
        }

        Component::Critic => {
            let features = normal_tensor(&mut rng, BATCH, d);
            let action = normal_tensor(&mut rng, BATCH, act_dim);
            let target = normal_tensor(&mut rng, BATCH, 1);

            fn eval(critic: &crate::agent::Critic, features: &Tensor, action: &Tensor, target: &Tensor) -> f64 {
                let mut g = Graph::new();
                let lv = critic.ps.frozen_leaves(&mut g);
                let f = g.constant(features.clone());
                let a = g.constant(action.clone());
                let t = g.constant(target.clone());
                let l = critic_loss_first_state_g(&mut g, critic, &lv, f, Some(a), t);
                g.value(l).item()
            }

            let analytic = {
                let mut g = Graph::new();
                let lv = bundle.critic_s.ps.leaves(&mut g);
                let f = g.constant(features.clone());
                let a = g.constant(action.clone());
                let t = g.constant(target.clone());
                let loss = critic_loss_first_state_g(&mut g, &bundle.critic_s, &lv, f, Some(a), t);
                let grads = g.backward(loss);
                bundle.critic_s.ps.gather_grads(&g, &lv, &grads)
            };
            let mut max_rel = 0.0_f64;
            let mut checked = 0;
            for i in 0..bundle.critic_s.ps.len() {
                for j in 0..analytic[i].len() {
                    let orig = bundle.critic_s.ps.tensor_at(i).data()[j];
                    bundle.critic_s.ps.tensor_at_mut(i).data_mut()[j] = orig + FD_STEP;
                    let lp = eval(&bundle.critic_s, &features, &action, &target);
                    bundle.critic_s.ps.tensor_at_mut(i).data_mut()[j] = orig - FD_STEP;
                    let lm = eval(&bundle.critic_s, &features, &action, &target);
                    bundle.critic_s.ps.tensor_at_mut(i).data_mut()[j] = orig;
                    max_rel = max_rel.max(rel_err(analytic[i].data()[j], (lp - lm) / (2.0 * FD_STEP)));
                    checked += 1;
                }
            }
            (max_rel, checked)
        }

        Component::ActorStoch | Component::ActorDet | Component::Imagination => {
            let fix = RolloutFixture {
                start: LatentState { h: normal_tensor(&mut rng, BATCH, h_dim), z: normal_tensor(&mut rng, BATCH, z_dim) },
                noise: ImagineNoise::draw(&mut rng, HORIZON, BATCH, z_dim, act_dim),
                boot: normal_tensor(&mut rng, BATCH, d),
                lcfg: LambdaCfg::default(),
                occ_cfg: OccupancyConfig { horizon: HORIZON, ..Default::default() },
            };
            let stochastic = component != Component::ActorDet;

            let analytic = {
                let mut g = Graph::new();
                let wm_lv = bundle.wm.ps.frozen_leaves(&mut g);
                let (policy, policy_lv) = if stochastic {
                    (PolicyRef::Stochastic(&bundle.actor_s), bundle.actor_s.ps.leaves(&mut g))
                } else {
                    (PolicyRef::Deterministic(&bundle.actor_d), bundle.actor_d.ps.leaves(&mut g))
                };
                let loss = build_rollout_loss(&mut g, &bundle, &fix, component, policy, &policy_lv, &wm_lv);
                let grads = g.backward(loss);
                let store = if stochastic { &bundle.actor_s.ps } else { &bundle.actor_d.ps };
                store.gather_grads(&g, &policy_lv, &grads)
            };

            let store_len = if stochastic { bundle.actor_s.ps.len() } else { bundle.actor_d.ps.len() };
            let mut max_rel = 0.0_f64;
            let mut checked = 0;
            for i in 0..store_len {
                let tensor_len = analytic[i].len();
                for j in 0..tensor_len {
                    let store = if stochastic { &mut bundle.actor_s.ps } else { &mut bundle.actor_d.ps };
                    let orig = store.tensor_at(i).data()[j];
                    store.tensor_at_mut(i).data_mut()[j] = orig + FD_STEP;
                    let lp = rollout_loss(&bundle, &fix, component);
                    let store = if stochastic { &mut bundle.actor_s.ps } else { &mut bundle.actor_d.ps };
                    store.tensor_at_mut(i).data_mut()[j] = orig - FD_STEP;
                    let lm = rollout_loss(&bundle, &fix, component);
                    let store = if stochastic { &mut bundle.actor_s.ps } else { &mut bundle.actor_d.ps };
                    store.tensor_at_mut(i).data_mut()[j] = orig;
                    max_rel = max_rel.max(rel_err(analytic[i].data()[j], (lp - lm) / (2.0 * FD_STEP)));
                    checked += 1;
                }
            }
            (max_rel, checked)
        }
    };

    Ok(GradReport { component, max_rel_err, params_checked })
}
