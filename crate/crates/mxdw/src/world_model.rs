//! Learned latent dynamics: recurrent deterministic state, stochastic state,
//! reward and termination heads, and the sequence training loss.
//!
//! The latent state is `(h, z)`: `h` evolves through a dense block feeding a
//! GRU cell, `z` is sampled with the reparametrization trick either from the
//! observation encoder (posterior, while filtering real experience) or from
//! the prior head (while imagining). With modifications enabled the decoder
//! sees only `z`, the posterior is pulled toward a fixed `N(0, I)` prior, the
//! trainable prior is matched with a symmetric Jeffreys divergence, reward
//! regression uses smooth L1, and a termination head is trained; the baseline
//! form keeps the classic trainable-prior KL, an `(h, z)` decoder, MSE
//! reward loss, and no termination head.

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::nn::{GruCell, Init, Leaves, Linear, Mlp, ParamStore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Lower bound added to every softplus-parametrized standard deviation.
pub const STD_FLOOR: f64 = 0.1;
/// Weight of both divergence terms in the modified loss.
pub const KL_COEFF: f64 = 0.1;
/// Weight of the trainable-prior KL in the baseline loss.
pub const BASELINE_KL_COEFF: f64 = 1.0;

/// World-model hidden state: deterministic part `h`, stochastic part `z`.
/// Tensors are `[batch, dim]`.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub h: Tensor,
    pub z: Tensor,
}

impl LatentState {
    pub fn batch(&self) -> usize {
        self.h.rows()
    }

    /// Concatenated `(h, z)` feature vector of one batch row.
    pub fn feature_row(&self, r: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.h.cols() + self.z.cols());
        v.extend_from_slice(self.h.row_slice(r));
        v.extend_from_slice(self.z.row_slice(r));
        v
    }
}

/// Diagonal Gaussian given by per-dimension mean and (strictly positive) std.
#[derive(Clone, Debug)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn standard(dim: usize) -> Self {
        DiagGaussian { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Dim("mean/std length mismatch".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Numeric("non-positive std in diagonal Gaussian".into()));
        }
        Ok(())
    }
}

/// Graph-side latent state.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub z: Var,
}

/// Graph-side diagonal Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct GaussVars {
    pub mean: Var,
    pub std: Var,
}

/// Closed-form KL of diagonal Gaussians, summed over dims: `[B,1]`.
pub fn gaussian_kl_g(g: &mut Graph, p: GaussVars, q: GaussVars) -> Var {
    // ln(sq/sp) + (sp^2 + (mp - mq)^2) / (2 sq^2) - 1/2 per dimension
    let lq = g.ln(q.std);
    let lp = g.ln(p.std);
    let log_ratio = g.sub(lq, lp);
    let sp2 = g.square(p.std);
    let dm = g.sub(p.mean, q.mean);
    let dm2 = g.square(dm);
    let num = g.add(sp2, dm2);
    let sq2 = g.square(q.std);
    let sq2x2 = g.scale(sq2, 2.0);
    let frac = g.div(num, sq2x2);
    let term = g.add(log_ratio, frac);
    let term = g.add_scalar(term, -0.5);
    g.sum_rows(term)
}

/// KL of `p` against the fixed standard normal, summed over dims: `[B,1]`.
pub fn kl_to_std_normal_g(g: &mut Graph, p: GaussVars) -> Var {
    let lp = g.ln(p.std);
    let sp2 = g.square(p.std);
    let m2 = g.square(p.mean);
    let sum = g.add(sp2, m2);
    let half = g.scale(sum, 0.5);
    let term = g.sub(half, lp);
    let term = g.add_scalar(term, -0.5);
    g.sum_rows(term)
}

/// Jeffreys divergence `KL(p||q) + KL(q||p)`, summed over dims: `[B,1]`.
pub fn jeffreys_g(g: &mut Graph, p: GaussVars, q: GaussVars) -> Var {
    let a = gaussian_kl_g(g, p, q);
    let b = gaussian_kl_g(g, q, p);
    g.add(a, b)
}

fn gauss_constants(g: &mut Graph, d: &DiagGaussian) -> GaussVars {
    GaussVars { mean: g.constant(Tensor::row(&d.mean)), std: g.constant(Tensor::row(&d.std)) }
}

/// Closed-form diagonal-Gaussian KL divergence; errors on non-positive stds.
pub fn gaussian_kl(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    p.validate()?;
    q.validate()?;
    if p.mean.len() != q.mean.len() {
        return Err(Error::Dim("KL of Gaussians with different dims".into()));
    }
    let mut g = Graph::new();
    let pv = gauss_constants(&mut g, p);
    let qv = gauss_constants(&mut g, q);
    let kl = gaussian_kl_g(&mut g, pv, qv);
    Ok(g.value(kl).item())
}

/// Symmetric Jeffreys divergence `KL(p||q) + KL(q||p)`.
pub fn jeffreys(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    Ok(gaussian_kl(p, q)? + gaussian_kl(q, p)?)
}

/// Batch of fixed-length subsequences of real experience. Layout per step:
/// `observations[t]: [B, obs_dim]` for `t < len`, `actions[t]`, `rewards[t]`,
/// `dones[t]` for `t < len - 1`. No stored transition crosses an episode
/// boundary.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub observations: Vec<Tensor>,
    pub actions: Vec<Tensor>,
    pub rewards: Vec<Tensor>,
    pub dones: Vec<Tensor>,
}

impl SequenceBatch {
    pub fn new(observations: Vec<Tensor>, actions: Vec<Tensor>, rewards: Vec<Tensor>, dones: Vec<Tensor>) -> Result<Self> {
        let len = observations.len();
        if len < 2 {
            return Err(Error::Dim("sequence batch needs length >= 2".into()));
        }
        if actions.len() != len - 1 || rewards.len() != len - 1 || dones.len() != len - 1 {
            return Err(Error::Dim("sequence batch field lengths inconsistent".into()));
        }
        let batch = observations[0].rows();
        for t in 0..len {
            if observations[t].rows() != batch {
                return Err(Error::Dim("sequence batch rows inconsistent".into()));
            }
        }
        Ok(SequenceBatch { observations, actions, rewards, dones })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.observations[0].rows()
    }
}

/// Architecture and variant switches for the world model.
#[derive(Clone, Debug)]
pub struct WorldModelConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub h_dim: usize,
    pub z_dim: usize,
    pub hidden: usize,
    /// Revised variant: fixed-prior KL + Jeffreys, z-only decoder, smooth-L1
    /// reward loss, termination head. Off reproduces the baseline model.
    pub modifications: bool,
    /// Per-dimension observation whitening `(o - loc) / scale` applied at the
    /// model boundary. Reconstruction is trained in whitened space so its
    /// scale is commensurate with the divergence terms; `decode` undoes it.
    pub obs_loc: Vec<f64>,
    pub obs_scale: Vec<f64>,
}

impl WorldModelConfig {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        WorldModelConfig {
            obs_dim,
            act_dim,
            h_dim: 200,
            z_dim: 128,
            hidden: 200,
            modifications: true,
            obs_loc: vec![0.0; obs_dim],
            obs_scale: vec![1.0; obs_dim],
        }
    }

    /// Whitening that maps the documented bounds onto `[-sqrt(3), sqrt(3)]`,
    /// i.e. unit variance for a uniform visitation of the range.
    pub fn with_obs_bounds(mut self, lo: &[f64], hi: &[f64]) -> Self {
        assert_eq!(lo.len(), self.obs_dim);
        assert_eq!(hi.len(), self.obs_dim);
        self.obs_loc = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
        self.obs_scale = lo.iter().zip(hi).map(|(l, h)| (h - l) / (2.0 * 3.0_f64.sqrt())).collect();
        self
    }

    pub fn latent_dim(&self) -> usize {
        self.h_dim + self.z_dim
    }
}

/// Pre-drawn reparametrization noise for one sequence unroll.
pub struct WmNoise {
    pub eps: Vec<Tensor>,
}

impl WmNoise {
    pub fn draw(rng: &mut ChaCha8Rng, batch: usize, len: usize, z_dim: usize) -> Self {
        let eps = (0..len).map(|_| normal_tensor(rng, batch, z_dim)).collect();
        WmNoise { eps }
    }
}

/// Single standard-normal draw.
pub fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| std_normal(rng))
}

/// Per-component values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct WmLossComponents {
    pub total: f64,
    pub reconstruction: f64,
    pub reward: f64,
    pub termination: f64,
    pub kl_fixed: f64,
    pub jeffreys: f64,
    pub kl_prior: f64,
}

/// Graph handles produced by [`WorldModel::sequence_loss`].
pub struct WmLossVars {
    pub total: Var,
    pub components: WmLossComponents,
    /// Detached posterior latent at the subsequence start, one per batch row;
    /// imagination rollouts start here.
    pub start_state: LatentState,
}

/// The world model networks.
pub struct WorldModel {
    pub ps: ParamStore,
    pub cfg: WorldModelConfig,
    pre: Linear,
    cell: GruCell,
    prior_head: Mlp,
    encoder: Mlp,
    decoder: Mlp,
    reward_head: Mlp,
    continue_head: Option<Mlp>,
}

impl WorldModel {
    pub fn new(cfg: WorldModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamStore::new();
        let (h, z, hid) = (cfg.h_dim, cfg.z_dim, cfg.hidden);
        let pre = Linear::new(&mut ps, "wm.pre", z + cfg.act_dim, hid, Init::Xavier, rng);
        let cell = GruCell::new(&mut ps, "wm.gru", hid, h, rng);
        let prior_head = Mlp::new(&mut ps, "wm.prior", &[h, hid, 2 * z], Init::Xavier, rng);
        let encoder = Mlp::new(&mut ps, "wm.enc", &[h + cfg.obs_dim, hid, hid, 2 * z], Init::Xavier, rng);
        let decoder_in = if cfg.modifications { z } else { h + z };
        let decoder = Mlp::new(&mut ps, "wm.dec", &[decoder_in, hid, hid, cfg.obs_dim], Init::Xavier, rng);
        let reward_head = Mlp::new(&mut ps, "wm.rew", &[h + z, hid, hid, 1], Init::Xavier, rng);
        let continue_head = if cfg.modifications {
            Some(Mlp::new(&mut ps, "wm.cont", &[h + z, hid, hid, 1], Init::Xavier, rng))
        } else {
            None
        };
        WorldModel { ps, cfg, pre, cell, prior_head, encoder, decoder, reward_head, continue_head }
    }

    /// Zero latent state for a batch; the episode-start convention.
    pub fn init_state(&self, batch: usize) -> LatentState {
        assert!(batch >= 1, "batch must be at least 1");
        LatentState { h: Tensor::zeros(batch, self.cfg.h_dim), z: Tensor::zeros(batch, self.cfg.z_dim) }
    }

    /// Observation whitening applied at the model boundary.
    pub fn whiten(&self, obs: &Tensor) -> Tensor {
        let mut out = obs.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for c in 0..cols {
                let v = (out.get(r, c) - self.cfg.obs_loc[c]) / self.cfg.obs_scale[c];
                out.set(r, c, v);
            }
        }
        out
    }

    fn dewhiten(&self, obs: &Tensor) -> Tensor {
        let mut out = obs.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for c in 0..cols {
                let v = out.get(r, c) * self.cfg.obs_scale[c] + self.cfg.obs_loc[c];
                out.set(r, c, v);
            }
        }
        out
    }

    pub fn state_constants(&self, g: &mut Graph, state: &LatentState) -> StateVars {
        StateVars { h: g.constant(state.h.clone()), z: g.constant(state.z.clone()) }
    }

    fn gauss_head(&self, g: &mut Graph, raw: Var) -> GaussVars {
        let z = self.cfg.z_dim;
        let mean = g.slice_cols(raw, 0, z);
        let std_raw = g.slice_cols(raw, z, 2 * z);
        let sp = g.softplus(std_raw);
        let std = g.add_scalar(sp, STD_FLOOR);
        GaussVars { mean, std }
    }

    /// Deterministic-state update `h' = GRU(h, dense(z, a))`.
    fn transition_g(&self, g: &mut Graph, lv: &Leaves, state: StateVars, action: Var) -> Var {
        let za = g.concat_cols(state.z, action);
        let feat = self.pre.forward(g, lv, za);
        let feat = g.elu(feat);
        self.cell.forward(g, lv, feat, state.h)
    }

    pub fn prior_g(&self, g: &mut Graph, lv: &Leaves, h: Var) -> GaussVars {
        let raw = self.prior_head.forward(g, lv, h);
        self.gauss_head(g, raw)
    }

    pub fn posterior_g(&self, g: &mut Graph, lv: &Leaves, h: Var, obs: Var) -> GaussVars {
        let ho = g.concat_cols(h, obs);
        let raw = self.encoder.forward(g, lv, ho);
        self.gauss_head(g, raw)
    }

    fn rsample(g: &mut Graph, dist: GaussVars, eps: &Tensor) -> Var {
        let e = g.constant(eps.clone());
        let scaled = g.mul(dist.std, e);
        g.add(dist.mean, scaled)
    }

    /// Filtering step on the graph; `obs` must already be whitened. At the
    /// episode start (`prev_action` absent) the deterministic state is
    /// carried unchanged, so the agent is informed by the first observation
    /// before committing an action.
    pub fn observe_step_g(
        &self,
        g: &mut Graph,
        lv: &Leaves,
        state: StateVars,
        prev_action: Option<Var>,
        obs: Var,
        eps: &Tensor,
    ) -> (StateVars, GaussVars) {
        let h_next = match prev_action {
            Some(a) => self.transition_g(g, lv, state, a),
            None => state.h,
        };
        let posterior = self.posterior_g(g, lv, h_next, obs);
        let z_next = Self::rsample(g, posterior, eps);
        (StateVars { h: h_next, z: z_next }, posterior)
    }

    /// Imagination step on the graph: prior-sampled latent plus reward and
    /// continuation estimates for the new state.
    pub fn imagine_step_g(
        &self,
        g: &mut Graph,
        lv: &Leaves,
        state: StateVars,
        action: Var,
        eps: &Tensor,
    ) -> (StateVars, GaussVars, Var, Var) {
        let h_next = self.transition_g(g, lv, state, action);
        let prior = self.prior_g(g, lv, h_next);
        let z_next = Self::rsample(g, prior, eps);
        let next = StateVars { h: h_next, z: z_next };
        let batch = g.value(h_next).rows();
        let hz = g.concat_cols(h_next, z_next);
        let reward = self.reward_head.forward(g, lv, hz);
        let cont = match &self.continue_head {
            Some(head) => {
                let logit = head.forward(g, lv, hz);
                g.sigmoid(logit)
            }
            None => g.constant(Tensor::from_fn(batch, 1, |_, _| 1.0)),
        };
        (next, prior, reward, cont)
    }

    /// Observation reconstruction; consumes only the stochastic state.
    pub fn decode_g(&self, g: &mut Graph, lv: &Leaves, z: Var) -> Var {
        assert!(self.cfg.modifications, "z-only decoding is a modified-variant path");
        self.decoder.forward(g, lv, z)
    }

    fn decode_any_g(&self, g: &mut Graph, lv: &Leaves, h: Var, z: Var) -> Var {
        if self.cfg.modifications {
            self.decoder.forward(g, lv, z)
        } else {
            let hz = g.concat_cols(h, z);
            self.decoder.forward(g, lv, hz)
        }
    }

    /// Continuation-probability logit head, if present.
    pub fn has_termination_head(&self) -> bool {
        self.continue_head.is_some()
    }

    /// Value-level filtering step; draws reparametrization noise from `rng`.
    pub fn observe_step(
        &self,
        state: &LatentState,
        prev_action: Option<&Tensor>,
        obs: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LatentState, DiagGaussian)> {
        if obs.cols() != self.cfg.obs_dim || obs.rows() != state.batch() {
            return Err(Error::Dim(format!(
                "observe_step obs shape {}x{}, expected {}x{}",
                obs.rows(),
                obs.cols(),
                state.batch(),
                self.cfg.obs_dim
            )));
        }
        if let Some(a) = prev_action {
            if a.cols() != self.cfg.act_dim || a.rows() != state.batch() {
                return Err(Error::Dim("observe_step action shape mismatch".into()));
            }
        }
        let eps = normal_tensor(rng, state.batch(), self.cfg.z_dim);
        self.observe_step_with_noise(state, prev_action, obs, &eps)
    }

    /// Same as [`WorldModel::observe_step`] with caller-supplied noise.
    pub fn observe_step_with_noise(
        &self,
        state: &LatentState,
        prev_action: Option<&Tensor>,
        obs: &Tensor,
        eps: &Tensor,
    ) -> Result<(LatentState, DiagGaussian)> {
        let mut g = Graph::new();
        let lv = self.ps.frozen_leaves(&mut g);
        let sv = self.state_constants(&mut g, state);
        let av = prev_action.map(|a| g.constant(a.clone()));
        let ov = g.constant(self.whiten(obs));
        let (next, post) = self.observe_step_g(&mut g, &lv, sv, av, ov, eps);
        let state = LatentState { h: g.value(next.h).clone(), z: g.value(next.z).clone() };
        if !state.h.is_finite() || !state.z.is_finite() {
            return Err(Error::Numeric("non-finite latent state in observe_step".into()));
        }
        let posterior =
            DiagGaussian { mean: g.value(post.mean).data().to_vec(), std: g.value(post.std).data().to_vec() };
        Ok((state, posterior))
    }

    /// Value-level imagination step for a single-row state.
    pub fn imagine_step(
        &self,
        state: &LatentState,
        action: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LatentState, DiagGaussian, f64, f64)> {
        if action.cols() != self.cfg.act_dim || action.rows() != state.batch() {
            return Err(Error::Dim("imagine_step action shape mismatch".into()));
        }
        let eps = normal_tensor(rng, state.batch(), self.cfg.z_dim);
        self.imagine_step_with_noise(state, action, &eps)
    }

    pub fn imagine_step_with_noise(
        &self,
        state: &LatentState,
        action: &Tensor,
        eps: &Tensor,
    ) -> Result<(LatentState, DiagGaussian, f64, f64)> {
        let mut g = Graph::new();
        let lv = self.ps.frozen_leaves(&mut g);
        let sv = self.state_constants(&mut g, state);
        let av = g.constant(action.clone());
        let (next, prior, r, c) = self.imagine_step_g(&mut g, &lv, sv, av, eps);
        let state = LatentState { h: g.value(next.h).clone(), z: g.value(next.z).clone() };
        if !state.h.is_finite() || !state.z.is_finite() {
            return Err(Error::Numeric("non-finite latent state in imagine_step".into()));
        }
        let prior = DiagGaussian { mean: g.value(prior.mean).data().to_vec(), std: g.value(prior.std).data().to_vec() };
        Ok((state, prior, g.value(r).get(0, 0), g.value(c).get(0, 0)))
    }

    /// Value-level reconstruction from the stochastic state only.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.cfg.z_dim {
            return Err(Error::Dim(format!("decode expects z of dim {}, got {}", self.cfg.z_dim, z.cols())));
        }
        let mut g = Graph::new();
        let lv = self.ps.frozen_leaves(&mut g);
        let zv = g.constant(z.clone());
        let out = self.decode_g(&mut g, &lv, zv);
        Ok(self.dewhiten(g.value(out)))
    }

    /// Sequence loss over a batch, with per-component reporting. Also returns
    /// the detached posterior latent at the subsequence start.
    pub fn sequence_loss(&self, g: &mut Graph, lv: &Leaves, batch: &SequenceBatch, noise: &WmNoise) -> Result<WmLossVars> {
        let len = batch.len();
        if batch.observations[0].cols() != self.cfg.obs_dim {
            return Err(Error::Dim("sequence batch obs dim mismatch".into()));
        }
        if noise.eps.len() < len {
            return Err(Error::Dim("not enough noise tensors for sequence".into()));
        }

        let b = batch.batch();
        let init = self.init_state(b);
        let mut state = self.state_constants(g, &init);

        let mut recon_terms = Vec::with_capacity(len);
        let mut kl_fixed_terms = Vec::with_capacity(len);
        let mut jeff_terms = Vec::with_capacity(len);
        let mut kl_prior_terms = Vec::with_capacity(len);
        let mut reward_terms = Vec::with_capacity(len - 1);
        let mut term_terms = Vec::with_capacity(len - 1);
        let mut start_state = None;

        for t in 0..len {
            let obs = g.constant(self.whiten(&batch.observations[t]));
            let prev_action = if t == 0 { None } else { Some(g.constant(batch.actions[t - 1].clone())) };
            let (next, posterior) = self.observe_step_g(g, lv, state, prev_action, obs, &noise.eps[t]);
            let prior = self.prior_g(g, lv, next.h);

            let recon = self.decode_any_g(g, lv, next.h, next.z);
            let diff = g.sub(recon, obs);
            let sq = g.square(diff);
            recon_terms.push(g.sum_rows(sq));

            if self.cfg.modifications {
                kl_fixed_terms.push(kl_to_std_normal_g(g, posterior));
                jeff_terms.push(jeffreys_g(g, posterior, prior));
            } else {
                kl_prior_terms.push(gaussian_kl_g(g, posterior, prior));
            }

            if t > 0 {
                let hz = g.concat_cols(next.h, next.z);
                let r_pred = self.reward_head.forward(g, lv, hz);
                let r_true = g.constant(batch.rewards[t - 1].clone());
                if self.cfg.modifications {
                    reward_terms.push(g.smooth_l1(r_pred, r_true));
                } else {
                    let d = g.sub(r_pred, r_true);
                    reward_terms.push(g.square(d));
                }
                if let Some(head) = &self.continue_head {
                    let logit = head.forward(g, lv, hz);
                    let d_true = g.constant(batch.dones[t - 1].clone());
                    term_terms.push(g.bce_logits(logit, d_true));
                }
            }

            if t == 0 {
                start_state = Some(LatentState { h: g.value(next.h).clone(), z: g.value(next.z).clone() });
            }
            state = next;
        }

        let mean_of = |g: &mut Graph, terms: &[Var]| -> Var {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t);
            }
            let summed = g.sum_all(acc);
            g.scale(summed, 1.0 / (terms.len() as f64 * b as f64))
        };

        let recon = mean_of(g, &recon_terms);
        let reward = mean_of(g, &reward_terms);
        let mut total = g.add(recon, reward);

        let mut comps = WmLossComponents::default();
        if self.cfg.modifications {
            let klf = mean_of(g, &kl_fixed_terms);
            let jef = mean_of(g, &jeff_terms);
            let termination = mean_of(g, &term_terms);
            let klf_w = g.scale(klf, KL_COEFF);
            let jef_w = g.scale(jef, KL_COEFF);
            total = g.add(total, termination);
            total = g.add(total, klf_w);
            total = g.add(total, jef_w);
            comps.kl_fixed = g.value(klf).item();
            comps.jeffreys = g.value(jef).item();
            comps.termination = g.value(termination).item();
        } else {
            let klp = mean_of(g, &kl_prior_terms);
            let klp_w = g.scale(klp, BASELINE_KL_COEFF);
            total = g.add(total, klp_w);
            comps.kl_prior = g.value(klp).item();
        }
        comps.reconstruction = g.value(recon).item();
        comps.reward = g.value(reward).item();
        comps.total = g.value(total).item();

        if !comps.total.is_finite() {
            return Err(Error::Numeric("non-finite world-model loss".into()));
        }
        Ok(WmLossVars { total, components: comps, start_state: start_state.unwrap() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_model(modifications: bool) -> WorldModel {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = WorldModelConfig::new(3, 2);
        cfg.h_dim = 5;
        cfg.z_dim = 4;
        cfg.hidden = 6;
        cfg.modifications = modifications;
        WorldModel::new(cfg, &mut rng)
    }

    fn tiny_batch(rng: &mut ChaCha8Rng, b: usize, len: usize, model: &WorldModel) -> SequenceBatch {
        let obs = (0..len).map(|_| normal_tensor(rng, b, model.cfg.obs_dim)).collect();
        let act = (0..len - 1).map(|_| normal_tensor(rng, b, model.cfg.act_dim)).collect();
        let rew = (0..len - 1).map(|_| normal_tensor(rng, b, 1)).collect();
        let don = (0..len - 1)
            .map(|_| Tensor::from_fn(b, 1, |_, _| if std_normal(rng) > 1.0 { 1.0 } else { 0.0 }))
            .collect();
        SequenceBatch::new(obs, act, rew, don).unwrap()
    }

    #[test]
    fn init_state_is_zero_and_pure() {
        let model = tiny_model(true);
        let a = model.init_state(4);
        let b = model.init_state(4);
        assert_eq!(a.h, b.h);
        assert_eq!(a.z, b.z);
        assert!(a.h.data().iter().all(|&v| v == 0.0));
        assert!(a.z.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.h.rows(), 4);
    }

    #[test]
    fn observe_step_with_zero_noise_returns_posterior_mean() {
        let model = tiny_model(true);
        let state = model.init_state(1);
        let obs = Tensor::row(&[0.3, -0.2, 0.9]);
        let eps = Tensor::zeros(1, model.cfg.z_dim);
        let (next, post) = model.observe_step_with_noise(&state, None, &obs, &eps).unwrap();
        for (a, b) in next.z.data().iter().zip(&post.mean) {
            assert!((a - b).abs() < 1e-14);
        }
        // prev_action = None carries h through unchanged
        assert_eq!(next.h, state.h);
    }

    #[test]
    fn observe_step_is_deterministic_given_noise() {
        let model = tiny_model(true);
        let state = model.init_state(1);
        let obs = Tensor::row(&[0.1, 0.2, 0.3]);
        let act = Tensor::row(&[0.5, -0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = normal_tensor(&mut rng, 1, model.cfg.z_dim);
        let (s1, p1) = model.observe_step_with_noise(&state, Some(&act), &obs, &eps).unwrap();
        let (s2, p2) = model.observe_step_with_noise(&state, Some(&act), &obs, &eps).unwrap();
        assert_eq!(s1.h, s2.h);
        assert_eq!(s1.z, s2.z);
        assert_eq!(p1.mean, p2.mean);
    }

    #[test]
    fn observe_step_rejects_bad_dims() {
        let model = tiny_model(true);
        let state = model.init_state(1);
        let bad_obs = Tensor::row(&[0.1, 0.2]);
        assert!(model.observe_step(&state, None, &bad_obs, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn imagine_step_with_zero_noise_returns_prior_mean_and_bounded_continue() {
        let model = tiny_model(true);
        let state = model.init_state(1);
        let act = Tensor::row(&[0.2, -0.7]);
        let eps = Tensor::zeros(1, model.cfg.z_dim);
        let (next, prior, _r, c) = model.imagine_step_with_noise(&state, &act, &eps).unwrap();
        for (a, b) in next.z.data().iter().zip(&prior.mean) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(c > 0.0 && c < 1.0);
    }

    #[test]
    fn decode_is_deterministic_and_consumes_only_z() {
        let model = tiny_model(true);
        let z = Tensor::row(&[0.1, -0.4, 0.8, 0.0]);
        let a = model.decode(&z).unwrap();
        let b = model.decode(&z).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cols(), model.cfg.obs_dim);
        assert!(model.decode(&Tensor::row(&[0.1, 0.2])).is_err());
    }

    #[test]
    fn gaussian_kl_closed_forms() {
        let std1 = DiagGaussian::standard(1);
        assert!(gaussian_kl(&std1, &std1).unwrap().abs() < 1e-15);

        let shifted = DiagGaussian { mean: vec![1.0], std: vec![1.0] };
        assert!((gaussian_kl(&shifted, &std1).unwrap() - 0.5).abs() < 1e-12);

        let wide = DiagGaussian { mean: vec![0.0], std: vec![2.0] };
        let expect = (4.0 - 1.0 - 4.0_f64.ln()) / 2.0;
        assert!((gaussian_kl(&wide, &std1).unwrap() - expect).abs() < 1e-12);

        let bad = DiagGaussian { mean: vec![0.0], std: vec![0.0] };
        assert!(gaussian_kl(&bad, &std1).is_err());
    }

    #[test]
    fn jeffreys_closed_forms_and_symmetry() {
        let std1 = DiagGaussian::standard(1);
        assert!(jeffreys(&std1, &std1).unwrap().abs() < 1e-15);
        let shifted = DiagGaussian { mean: vec![1.0], std: vec![1.0] };
        assert!((jeffreys(&shifted, &std1).unwrap() - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let d = 3;
            let gauss = |rng: &mut ChaCha8Rng| DiagGaussian {
                mean: (0..d).map(|_| std_normal(rng)).collect(),
                std: (0..d).map(|_| 0.2 + std_normal(rng).abs()).collect(),
            };
            let p = gauss(&mut rng);
            let q = gauss(&mut rng);
            let a = jeffreys(&p, &q).unwrap();
            let b = jeffreys(&q, &p).unwrap();
            assert!((a - b).abs() < 1e-12, "jeffreys must be symmetric");
            assert!(a >= 0.0);
            // KL nonnegativity, zero only at equality
            assert!(gaussian_kl(&p, &q).unwrap() >= 0.0);
            assert!(gaussian_kl(&p, &p).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn loss_components_are_nonnegative_and_finite() {
        for mods in [true, false] {
            let model = tiny_model(mods);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let batch = tiny_batch(&mut rng, 3, 4, &model);
            let noise = WmNoise::draw(&mut rng, 3, 4, model.cfg.z_dim);
            let mut g = Graph::new();
            let lv = model.ps.leaves(&mut g);
            let out = model.sequence_loss(&mut g, &lv, &batch, &noise).unwrap();
            let c = out.components;
            for v in [c.total, c.reconstruction, c.reward, c.termination, c.kl_fixed, c.jeffreys, c.kl_prior] {
                assert!(v.is_finite());
                assert!(v >= 0.0, "component was negative: {c:?}");
            }
            assert_eq!(out.start_state.h.rows(), 3);
        }
    }

    /// Every term of the sequence loss sits at zero when predictions are
    /// perfect and the distributions coincide with their targets.
    #[test]
    fn loss_terms_vanish_at_their_minima() {
        let mut g = Graph::new();
        // reconstruction and reward at exact predictions
        let o = g.constant(Tensor::row(&[0.4, -0.2]));
        let diff = g.sub(o, o);
        let sq = g.square(diff);
        let mse = g.sum_all(sq);
        assert_eq!(g.value(mse).item(), 0.0);
        let sl = g.smooth_l1(o, o);
        assert_eq!(g.value(sl).sq_norm(), 0.0);
        // divergences at identical distributions
        let std1 = DiagGaussian::standard(4);
        assert!(gaussian_kl(&std1, &std1).unwrap().abs() < 1e-15);
        assert!(jeffreys(&std1, &std1).unwrap().abs() < 1e-15);
        // BCE floor: saturating logits at the targets drives the term to zero
        let logit = g.constant(Tensor::row(&[40.0, -40.0]));
        let target = g.constant(Tensor::row(&[1.0, 0.0]));
        let bce = g.bce_logits(logit, target);
        let bsum = g.sum_all(bce);
        assert!(g.value(bsum).item() < 1e-12);
    }

    #[test]
    fn sequence_of_length_one_is_rejected() {
        let model = tiny_model(true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = vec![normal_tensor(&mut rng, 2, 3)];
        assert!(SequenceBatch::new(obs, vec![], vec![], vec![]).is_err());
        let _ = model;
    }

    /// Full-loss gradient check against central finite differences on a tiny
    /// model, both variants.
    #[test]
    fn sequence_loss_gradients_match_finite_differences() {
        for mods in [true, false] {
            let mut model = tiny_model(mods);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let batch = tiny_batch(&mut rng, 2, 3, &model);
            let noise = WmNoise::draw(&mut rng, 2, 3, model.cfg.z_dim);

            let loss_value = |m: &WorldModel| -> f64 {
                let mut g = Graph::new();
                let lv = m.ps.frozen_leaves(&mut g);
                m.sequence_loss(&mut g, &lv, &batch, &noise).unwrap().components.total
            };

            let mut g = Graph::new();
            let lv = model.ps.leaves(&mut g);
            let out = model.sequence_loss(&mut g, &lv, &batch, &noise).unwrap();
            let grads = g.backward(out.total);
            let analytic = model.ps.gather_grads(&g, &lv, &grads);

            let h = 1e-5;
            let mut max_rel = 0.0_f64;
            for i in 0..model.ps.len() {
                for j in 0..analytic[i].len() {
                    let orig = model.ps.tensor_at(i).data()[j];
                    model.ps.tensor_at_mut(i).data_mut()[j] = orig + h;
                    let lp = loss_value(&model);
                    model.ps.tensor_at_mut(i).data_mut()[j] = orig - h;
                    let lm = loss_value(&model);
                    model.ps.tensor_at_mut(i).data_mut()[j] = orig;
                    let num = (lp - lm) / (2.0 * h);
                    let ana = analytic[i].data()[j];
                    let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-5);
                    max_rel = max_rel.max(rel);
                }
            }
            assert!(max_rel < 1e-3, "mods={mods}: max relative gradient error {max_rel}");
        }
    }

    /// Reparametrized samples must match the posterior moments statistically.
    #[test]
    fn reparametrized_sampling_matches_posterior_moments() {
        let model = tiny_model(true);
        let state = model.init_state(1);
        let obs = Tensor::row(&[0.5, -0.1, 0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let zd = model.cfg.z_dim;
        let mut sums = vec![0.0; zd];
        let mut sq_sums = vec![0.0; zd];
        let mut posterior = None;
        for _ in 0..n {
            let (next, post) = model.observe_step(&state, None, &obs, &mut rng).unwrap();
            for d in 0..zd {
                let v = next.z.get(0, d);
                sums[d] += v;
                sq_sums[d] += v * v;
            }
            posterior = Some(post);
        }
        let post = posterior.unwrap();
        for d in 0..zd {
            let mean = sums[d] / n as f64;
            let var = sq_sums[d] / n as f64 - mean * mean;
            let se_mean = post.std[d] / (n as f64).sqrt();
            assert!((mean - post.mean[d]).abs() < 3.0 * se_mean, "dim {d} mean off");
            let se_std = post.std[d] / (2.0 * n as f64).sqrt();
            assert!((var.sqrt() - post.std[d]).abs() < 3.0 * se_std, "dim {d} std off");
        }
    }

    /// Overfit smoke run: a tiny model trained on one fixed short trajectory
    /// reconstructs its observations to tight MSE.
    #[test]
    fn decoder_overfits_a_fixed_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut cfg = WorldModelConfig::new(1, 1).with_obs_bounds(&[0.0], &[1.0]);
        cfg.h_dim = 12;
        cfg.z_dim = 6;
        cfg.hidden = 24;
        let mut model = WorldModel::new(cfg, &mut rng);

        // 10-step corridor walk at constant action
        use crate::envs::Env;
        let mut env = crate::envs::Corridor1d::new();
        let mut obs = vec![env.reset(0)[0]];
        let mut rewards = Vec::new();
        for _ in 0..10 {
            let r = env.step(&[0.05]).unwrap();
            obs.push(r.obs[0]);
            rewards.push(r.reward);
        }
        let batch = SequenceBatch::new(
            obs.iter().map(|&o| Tensor::row(&[o])).collect(),
            (0..10).map(|_| Tensor::row(&[0.05])).collect(),
            rewards.iter().map(|&r| Tensor::row(&[r])).collect(),
            (0..10).map(|_| Tensor::row(&[0.0])).collect(),
        )
        .unwrap();

        for _ in 0..1500 {
            let noise = WmNoise::draw(&mut rng, 1, 11, model.cfg.z_dim);
            let mut g = Graph::new();
            let lv = model.ps.leaves(&mut g);
            let out = model.sequence_loss(&mut g, &lv, &batch, &noise).unwrap();
            let grads = g.backward(out.total);
            let gv = model.ps.gather_grads(&g, &lv, &grads);
            model.ps.adam_step(&gv, 3e-3, 100.0);
        }

        // measure reconstruction MSE along the filter path with zero noise
        let mut state = model.init_state(1);
        let mut mse = 0.0;
        for (t, &o) in obs.iter().enumerate() {
            let ov = Tensor::row(&[o]);
            let prev = if t == 0 { None } else { Some(Tensor::row(&[0.05])) };
            let eps = Tensor::zeros(1, model.cfg.z_dim);
            let (next, _) = model.observe_step_with_noise(&state, prev.as_ref(), &ov, &eps).unwrap();
            let recon = model.decode(&next.z).unwrap();
            mse += (recon.get(0, 0) - o).powi(2);
            state = next;
        }
        mse /= obs.len() as f64;
        assert!(mse < 1e-2, "overfit reconstruction MSE was {mse}");
    }
}
