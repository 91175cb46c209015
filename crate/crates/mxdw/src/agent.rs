//! Actors, critics, lambda-return targets, and the entropy-bonus schedule.
//!
//! The stochastic actor is a tanh-squashed diagonal Gaussian sampled with the
//! reparametrization trick; it explores, and its objective carries the
//! occupancy-entropy bonus weighted by a linearly annealed beta. The
//! deterministic actor trains in parallel purely for return and is the one
//! evaluated. Each actor has its own Q critic trained on smooth-L1 toward
//! gradient-detached lambda-return targets, evaluated at the rollout's first
//! state only; the baseline variant instead uses a V critic with MSE over
//! every imagined step.

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::nn::{Init, Leaves, Mlp, ParamStore};
use crate::rollout::ImaginedTrajectory;
use crate::world_model::std_normal;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Lower bound on the stochastic actor's pre-squash standard deviation.
pub const ACTOR_STD_FLOOR: f64 = 0.05;

/// Affine map from the tanh cube onto the environment's action box.
#[derive(Clone, Debug)]
pub struct ActionSpace {
    pub center: Vec<f64>,
    pub amplitude: Vec<f64>,
}

impl ActionSpace {
    pub fn from_spec(spec: &crate::envs::EnvSpec) -> Self {
        let center = spec.act_low.iter().zip(&spec.act_high).map(|(l, h)| 0.5 * (l + h)).collect();
        let amplitude = spec.act_low.iter().zip(&spec.act_high).map(|(l, h)| 0.5 * (h - l)).collect();
        ActionSpace { center, amplitude }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn low(&self, i: usize) -> f64 {
        self.center[i] - self.amplitude[i]
    }

    pub fn high(&self, i: usize) -> f64 {
        self.center[i] + self.amplitude[i]
    }

    fn squash_g(&self, g: &mut Graph, pre: Var) -> Var {
        let t = g.tanh(pre);
        let amp = g.constant(Tensor::row(&self.amplitude));
        let scaled = g.mul_row(t, amp);
        let center = g.constant(Tensor::row(&self.center));
        g.add_row(scaled, center)
    }
}

/// Exploration-actor network: state features to squashed Gaussian actions.
pub struct StochasticActor {
    pub ps: ParamStore,
    net: Mlp,
    pub space: ActionSpace,
    pub state_dim: usize,
}

impl StochasticActor {
    pub fn new(state_dim: usize, hidden: usize, space: ActionSpace, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamStore::new();
        let net = Mlp::new(&mut ps, "actor_s", &[state_dim, hidden, hidden, 2 * space.dim()], Init::Zero, rng);
        StochasticActor { ps, net, space, state_dim }
    }

    /// Mean and std of the pre-squash Gaussian.
    pub fn dist_g(&self, g: &mut Graph, lv: &Leaves, features: Var) -> (Var, Var) {
        let a = self.space.dim();
        let raw = self.net.forward(g, lv, features);
        let mean = g.slice_cols(raw, 0, a);
        let std_raw = g.slice_cols(raw, a, 2 * a);
        let sp = g.softplus(std_raw);
        let std = g.add_scalar(sp, ACTOR_STD_FLOOR);
        (mean, std)
    }

    /// Reparametrized action `center + amp * tanh(mean + std * eps)`.
    pub fn action_g(&self, g: &mut Graph, lv: &Leaves, features: Var, eps: &Tensor) -> Var {
        let (mean, std) = self.dist_g(g, lv, features);
        let e = g.constant(eps.clone());
        let scaled = g.mul(std, e);
        let pre = g.add(mean, scaled);
        self.space.squash_g(g, pre)
    }
}

/// Evaluation-actor network: deterministic squashed actions; the final layer
/// starts at zero so the initial policy sits at the center of the bounds.
pub struct DeterministicActor {
    pub ps: ParamStore,
    net: Mlp,
    pub space: ActionSpace,
    pub state_dim: usize,
}

impl DeterministicActor {
    pub fn new(state_dim: usize, hidden: usize, space: ActionSpace, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamStore::new();
        let net = Mlp::new(&mut ps, "actor_d", &[state_dim, hidden, hidden, space.dim()], Init::Zero, rng);
        DeterministicActor { ps, net, space, state_dim }
    }

    pub fn action_g(&self, g: &mut Graph, lv: &Leaves, features: Var) -> Var {
        let pre = self.net.forward(g, lv, features);
        self.space.squash_g(g, pre)
    }
}

/// Either actor, for code that rolls out under a policy.
#[derive(Clone, Copy)]
pub enum PolicyRef<'a> {
    Stochastic(&'a StochasticActor),
    Deterministic(&'a DeterministicActor),
}

impl PolicyRef<'_> {
    pub fn action_g(&self, g: &mut Graph, lv: &Leaves, features: Var, eps: &Tensor) -> Var {
        match self {
            PolicyRef::Stochastic(a) => a.action_g(g, lv, features, eps),
            PolicyRef::Deterministic(a) => a.action_g(g, lv, features),
        }
    }
}

/// Collection-time noise: probability of a uniform random action, plus
/// additive Gaussian noise (absolute std per dimension) on policy actions.
#[derive(Clone, Debug, Default)]
pub struct ExplorationNoise {
    pub eps_random: f64,
    pub noise_std: Vec<f64>,
}

/// Sample an action from the stochastic actor for one state, applying
/// collection noise if given: with probability `eps_random` the action is
/// replaced by a uniform draw from the bounds, otherwise Gaussian noise is
/// added and the result clipped back into the box.
pub fn act_stochastic(
    actor: &StochasticActor,
    features: &[f64],
    noise: Option<&ExplorationNoise>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if features.len() != actor.state_dim {
        return Err(Error::Dim(format!("actor expects {} features, got {}", actor.state_dim, features.len())));
    }
    let a = actor.space.dim();
    let eps = Tensor::from_fn(1, a, |_, _| std_normal(rng));
    let mut g = Graph::new();
    let lv = actor.ps.frozen_leaves(&mut g);
    let f = g.constant(Tensor::row(features));
    let av = actor.action_g(&mut g, &lv, f, &eps);
    let mut action: Vec<f64> = g.value(av).data().to_vec();

    if let Some(n) = noise {
        if n.eps_random > 0.0 && rng.gen_range(0.0..1.0) < n.eps_random {
            for (i, v) in action.iter_mut().enumerate() {
                *v = rng.gen_range(actor.space.low(i)..actor.space.high(i));
            }
        } else if n.noise_std.iter().any(|&s| s > 0.0) {
            for (i, v) in action.iter_mut().enumerate() {
                *v = (*v + n.noise_std[i] * std_normal(rng)).clamp(actor.space.low(i), actor.space.high(i));
            }
        }
    }
    Ok(action)
}

/// Deterministic action for one state; no sampling anywhere.
pub fn act_deterministic(actor: &DeterministicActor, features: &[f64]) -> Result<Vec<f64>> {
    if features.len() != actor.state_dim {
        return Err(Error::Dim(format!("actor expects {} features, got {}", actor.state_dim, features.len())));
    }
    let mut g = Graph::new();
    let lv = actor.ps.frozen_leaves(&mut g);
    let f = g.constant(Tensor::row(features));
    let av = actor.action_g(&mut g, &lv, f);
    Ok(g.value(av).data().to_vec())
}

/// Critic network. In Q form it scores `(state, action)`; in V form (the
/// baseline) it scores the state alone.
pub struct Critic {
    pub ps: ParamStore,
    net: Mlp,
    pub q_style: bool,
    pub state_dim: usize,
    pub act_dim: usize,
}

impl Critic {
    pub fn new(state_dim: usize, act_dim: usize, hidden: usize, q_style: bool, rng: &mut ChaCha8Rng) -> Self {
        let in_dim = if q_style { state_dim + act_dim } else { state_dim };
        let mut ps = ParamStore::new();
        let net = Mlp::new(&mut ps, "critic", &[in_dim, hidden, hidden, 1], Init::Xavier, rng);
        Critic { ps, net, q_style, state_dim, act_dim }
    }

    /// Critic value `[B, 1]`; `action` is required exactly in Q form.
    pub fn value_g(&self, g: &mut Graph, lv: &Leaves, features: Var, action: Option<Var>) -> Var {
        let input = if self.q_style {
            let a = action.expect("Q critic needs an action");
            g.concat_cols(features, a)
        } else {
            features
        };
        self.net.forward(g, lv, input)
    }
}

/// Return-estimation hyperparameters and the entropy-coefficient schedule.
#[derive(Clone, Debug)]
pub struct LambdaCfg {
    pub gamma: f64,
    pub lambda: f64,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for LambdaCfg {
    fn default() -> Self {
        LambdaCfg { gamma: 0.99, lambda: 0.95, beta_start: 0.2, beta_end: 0.0001 }
    }
}

impl LambdaCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0,1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Linearly annealed entropy coefficient; clamps to the end value once
/// `step` passes `total_steps`.
pub fn beta_schedule(step: u64, total_steps: u64, cfg: &LambdaCfg) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return cfg.beta_end;
    }
    let frac = step as f64 / total_steps as f64;
    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac
}

/// Lambda-return targets on the graph. `rewards` and `continues` have length
/// `H`, `values` length `H + 1`; the recursion is seeded with the final value
/// and damped by the continuation probabilities:
/// `G_t = r_t + gamma * c_t * ((1 - lambda) * V_{t+1} + lambda * G_{t+1})`.
pub fn lambda_returns_g(
    g: &mut Graph,
    rewards: &[Var],
    values: &[Var],
    continues: &[Var],
    cfg: &LambdaCfg,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let h = rewards.len();
    if values.len() != h + 1 || continues.len() != h {
        return Err(Error::Dim("lambda-return input lengths inconsistent".into()));
    }
    let mut next = values[h];
    let mut targets = vec![next; h];
    for t in (0..h).rev() {
        let v = g.scale(values[t + 1], 1.0 - cfg.lambda);
        let gl = g.scale(next, cfg.lambda);
        let mix = g.add(v, gl);
        let damped = g.mul(continues[t], mix);
        let disc = g.scale(damped, cfg.gamma);
        next = g.add(rewards[t], disc);
        targets[t] = next;
    }
    Ok(targets)
}

/// Value-level lambda returns for scalar sequences.
pub fn lambda_returns(rewards: &[f64], values: &[f64], continues: &[f64], cfg: &LambdaCfg) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let rv: Vec<Var> = rewards.iter().map(|&r| g.constant(Tensor::scalar(r))).collect();
    let vv: Vec<Var> = values.iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
    let cv: Vec<Var> = continues.iter().map(|&c| g.constant(Tensor::scalar(c))).collect();
    let targets = lambda_returns_g(&mut g, &rv, &vv, &cv, cfg)?;
    Ok(targets.iter().map(|&t| g.value(t).item()).collect())
}

/// `V(s_t) = Q(s_t, a)` estimates along an imagined trajectory, with the
/// action freshly sampled (stochastic) or computed (deterministic) at every
/// state. For a V critic the action is ignored.
pub fn rollout_values_g(
    g: &mut Graph,
    traj: &ImaginedTrajectory,
    critic: &Critic,
    critic_lv: &Leaves,
    policy: PolicyRef<'_>,
    policy_lv: &Leaves,
    value_eps: &[Tensor],
) -> Result<Vec<Var>> {
    let h = traj.horizon();
    if critic.q_style && value_eps.len() < h + 1 {
        return Err(Error::Dim("not enough value-sample noise tensors".into()));
    }
    let mut values = Vec::with_capacity(h + 1);
    for (t, &feat) in traj.features.iter().enumerate() {
        let action = if critic.q_style { Some(policy.action_g(g, policy_lv, feat, &value_eps[t])) } else { None };
        values.push(critic.value_g(g, critic_lv, feat, action));
    }
    Ok(values)
}

/// Stochastic-actor loss `-(G_0 + beta * entropy)` averaged over the batch;
/// gradients flow through the imagined rollout into the actor.
pub fn actor_loss_stochastic_g(g: &mut Graph, targets: &[Var], entropy: Option<Var>, beta: f64) -> Var {
    let mut objective = targets[0];
    if let Some(h) = entropy {
        let hb = g.scale(h, beta);
        objective = g.add(objective, hb);
    }
    let m = g.mean_all(objective);
    g.neg(m)
}

/// Deterministic-actor loss `-G_0`; no entropy term.
pub fn actor_loss_deterministic_g(g: &mut Graph, targets: &[Var]) -> Var {
    let m = g.mean_all(targets[0]);
    g.neg(m)
}

/// Baseline actor loss: mean of `-G_t` over every imagined step.
pub fn actor_loss_all_steps_g(g: &mut Graph, targets: &[Var]) -> Var {
    let mut acc = targets[0];
    for &t in &targets[1..] {
        acc = g.add(acc, t);
    }
    let m = g.mean_all(acc);
    g.scale(m, -1.0 / targets.len() as f64)
}

/// Critic regression at the rollout's first state only: smooth L1 between
/// `Q(s_0, a_0)` and the detached target.
pub fn critic_loss_first_state_g(
    g: &mut Graph,
    critic: &Critic,
    critic_lv: &Leaves,
    features0: Var,
    action0: Option<Var>,
    target0: Var,
) -> Var {
    let q = critic.value_g(g, critic_lv, features0, action0);
    let l = g.smooth_l1(q, target0);
    g.mean_all(l)
}

/// Baseline critic regression: MSE of `V(s_t)` against `G_t` over all steps.
pub fn critic_loss_all_steps_g(
    g: &mut Graph,
    critic: &Critic,
    critic_lv: &Leaves,
    features: &[Var],
    targets: &[Var],
) -> Var {
    let mut acc: Option<Var> = None;
    for (t, &target) in targets.iter().enumerate() {
        let v = critic.value_g(g, critic_lv, features[t], None);
        let d = g.sub(v, target);
        let sq = g.square(d);
        let m = g.mean_all(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, m),
            None => m,
        });
    }
    let total = acc.expect("at least one target");
    g.scale(total, 1.0 / targets.len() as f64)
}
