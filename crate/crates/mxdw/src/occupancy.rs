//! Discounted-occupancy estimation over latent states.
//!
//! A mixture density network approximates the discounted distribution of
//! future latent states conditioned on the current one. It trains by weighted
//! log-likelihood over imagined rollouts: the state reached `i + 1` steps
//! ahead carries weight `(1 - gamma) * gamma^i`, and a single bootstrap
//! sample drawn from a slowly-updated target copy of the network closes the
//! geometric tail with weight `gamma^n`. The same weighting turns target-net
//! log-densities into a Monte-Carlo entropy estimate that the exploration
//! actor maximizes. Exact tabular oracles validate both constructions.

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::nn::{Init, Leaves, Linear, Mlp, ParamStore};
use crate::world_model::std_normal;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Lower bound on mixture-component standard deviations.
pub const MDN_STD_FLOOR: f64 = 0.05;

const LN_2PI: f64 = 1.8378770664093453;

/// Mixture parameters for one conditioning state: `weights` on the simplex,
/// `means` and strictly positive `stds` per component.
#[derive(Clone, Debug)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

impl MixtureParams {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(Error::Dim("mixture component count mismatch".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Numeric(format!("mixture weights sum to {sum}")));
        }
        if self.stds.iter().flatten().any(|&s| s <= 0.0) {
            return Err(Error::Numeric("non-positive mixture std".into()));
        }
        Ok(())
    }
}

/// Graph-side mixture head output for a batch of conditioning states.
#[derive(Clone, Copy)]
pub struct MixtureVars {
    pub log_w: Var,
    pub means: Var,
    pub stds: Var,
    pub k: usize,
    pub d: usize,
}

/// Mixture density network: state of dimension `d` in, `k` diagonal-Gaussian
/// components over the same space out.
pub struct Mdn {
    pub ps: ParamStore,
    trunk: Mlp,
    head: Linear,
    pub d: usize,
    pub k: usize,
}

impl Mdn {
    pub fn new(d: usize, hidden: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut ps = ParamStore::new();
        let trunk = Mlp::new(&mut ps, "mdn.trunk", &[d, hidden, hidden], Init::Xavier, rng);
        let head = Linear::new(&mut ps, "mdn.head", hidden, k + 2 * k * d, Init::Xavier, rng);
        Mdn { ps, trunk, head, d, k }
    }

    /// Forward pass on the graph for conditioning states `s [B, d]`.
    pub fn forward_g(&self, g: &mut Graph, lv: &Leaves, s: Var) -> MixtureVars {
        let (k, d) = (self.k, self.d);
        let hid = self.trunk.forward(g, lv, s);
        let hid = g.elu(hid);
        let raw = self.head.forward(g, lv, hid);
        let logits = g.slice_cols(raw, 0, k);
        let means = g.slice_cols(raw, k, k + k * d);
        let std_raw = g.slice_cols(raw, k + k * d, k + 2 * k * d);
        let sp = g.softplus(std_raw);
        let stds = g.add_scalar(sp, MDN_STD_FLOOR);
        // log-softmax over components
        let lse = g.logsumexp_rows(logits);
        let b = g.value(logits).rows();
        let ones = g.constant(Tensor::from_fn(1, k, |_, _| 1.0));
        let lse_b = g.matmul(lse, ones);
        let log_w = g.sub(logits, lse_b);
        let _ = b;
        MixtureVars { log_w, means, stds, k, d }
    }

    /// Mixture parameters for a single conditioning state.
    pub fn forward(&self, s: &[f64]) -> Result<MixtureParams> {
        if s.len() != self.d {
            return Err(Error::Dim(format!("mdn expects dim {}, got {}", self.d, s.len())));
        }
        let mut g = Graph::new();
        let lv = self.ps.frozen_leaves(&mut g);
        let sv = g.constant(Tensor::row(s));
        let mix = self.forward_g(&mut g, &lv, sv);
        let log_w = g.value(mix.log_w).data().to_vec();
        let means = g.value(mix.means);
        let stds = g.value(mix.stds);
        let params = MixtureParams {
            weights: log_w.iter().map(|&lw| lw.exp()).collect(),
            means: (0..self.k).map(|c| means.data()[c * self.d..(c + 1) * self.d].to_vec()).collect(),
            stds: (0..self.k).map(|c| stds.data()[c * self.d..(c + 1) * self.d].to_vec()).collect(),
        };
        if params.weights.iter().any(|w| !w.is_finite())
            || params.means.iter().flatten().any(|m| !m.is_finite())
            || params.stds.iter().flatten().any(|s| !s.is_finite())
        {
            return Err(Error::Numeric("non-finite mixture parameters".into()));
        }
        params.validate()?;
        Ok(params)
    }
}

/// Log-density of a batch of points under batched mixture parameters,
/// `[B, 1]`, computed with log-sum-exp stabilization.
pub fn mdn_log_prob_g(g: &mut Graph, mix: &MixtureVars, x: Var) -> Var {
    let (k, d) = (mix.k, mix.d);
    let mut terms = Vec::with_capacity(k);
    for c in 0..k {
        let mean_c = g.slice_cols(mix.means, c * d, (c + 1) * d);
        let std_c = g.slice_cols(mix.stds, c * d, (c + 1) * d);
        let diff = g.sub(x, mean_c);
        let t = g.div(diff, std_c);
        let sq = g.square(t);
        let ssq = g.sum_rows(sq);
        let ln_std = g.ln(std_c);
        let sls = g.sum_rows(ln_std);
        let half = g.scale(ssq, -0.5);
        let comp = g.sub(half, sls);
        let comp = g.add_scalar(comp, -0.5 * d as f64 * LN_2PI);
        let lw = g.slice_cols(mix.log_w, c, c + 1);
        terms.push(g.add(comp, lw));
    }
    let mut stacked = terms[0];
    for &t in &terms[1..] {
        stacked = g.concat_cols(stacked, t);
    }
    g.logsumexp_rows(stacked)
}

/// Log-density of `x` under explicit mixture parameters.
pub fn mdn_log_prob(params: &MixtureParams, x: &[f64]) -> Result<f64> {
    params.validate()?;
    if x.len() != params.dim() {
        return Err(Error::Dim("mdn_log_prob dim mismatch".into()));
    }
    let (k, d) = (params.components(), params.dim());
    let mut g = Graph::new();
    let log_w: Vec<f64> = params.weights.iter().map(|&w| w.max(1e-300).ln()).collect();
    let mix = MixtureVars {
        log_w: g.constant(Tensor::row(&log_w)),
        means: g.constant(Tensor::row(&params.means.concat())),
        stds: g.constant(Tensor::row(&params.stds.concat())),
        k,
        d,
    };
    let xv = g.constant(Tensor::row(x));
    let lp = mdn_log_prob_g(&mut g, &mix, xv);
    Ok(g.value(lp).item())
}

/// Ancestral sampling: component index from the weights, then the diagonal
/// Gaussian draw.
pub fn mdn_sample(params: &MixtureParams, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    if count < 1 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let d = params.dim();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut comp = params.components() - 1;
        for (c, &w) in params.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = c;
                break;
            }
        }
        let mut x = Vec::with_capacity(d);
        for dd in 0..d {
            x.push(params.means[comp][dd] + params.stds[comp][dd] * std_normal(rng));
        }
        out.push(x);
    }
    Ok(out)
}

/// Online/target pair; the target trails by Polyak averaging.
pub struct MdnPair {
    pub online: Mdn,
    pub target: Mdn,
}

impl MdnPair {
    pub fn new(d: usize, hidden: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let online = Mdn::new(d, hidden, k, rng);
        let mut target = Mdn::new(d, hidden, k, rng);
        target.ps.soft_update_from(&online.ps, 1.0);
        MdnPair { online, target }
    }

    /// `target <- (1 - tau) * target + tau * online`.
    pub fn soft_update(&mut self, tau: f64) {
        assert!(tau > 0.0 && tau <= 1.0, "tau must lie in (0, 1]");
        self.target.ps.soft_update_from(&self.online.ps, tau);
    }
}

/// Occupancy-estimation hyperparameters.
#[derive(Clone, Debug)]
pub struct OccupancyConfig {
    /// Discount of the occupancy distribution (not the return discount).
    pub gamma_q: f64,
    pub soft_tau: f64,
    pub lr: f64,
    /// Bootstrap horizon; tied to the imagination horizon.
    pub horizon: usize,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        OccupancyConfig { gamma_q: 0.9, soft_tau: 0.1, lr: 2e-4, horizon: 15 }
    }
}

impl OccupancyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_q > 0.0 && self.gamma_q < 1.0) {
            return Err(Error::Config(format!("gamma_q must lie in (0,1), got {}", self.gamma_q)));
        }
        if !(self.soft_tau > 0.0 && self.soft_tau <= 1.0) {
            return Err(Error::Config(format!("soft_tau must lie in (0,1], got {}", self.soft_tau)));
        }
        if self.horizon < 1 {
            return Err(Error::Config("occupancy horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Geometric occupancy weights: `w_i = (1 - gamma) * gamma^i` for the state
/// reached `i + 1` steps ahead, plus the bootstrap weight `gamma^n`. They sum
/// to one by the telescoping identity.
pub fn occupancy_weights(n: usize, gamma_q: f64) -> Result<(Vec<f64>, f64)> {
    if n < 1 {
        return Err(Error::Config("occupancy horizon must be at least 1".into()));
    }
    if !(gamma_q > 0.0 && gamma_q < 1.0) {
        return Err(Error::Config(format!("gamma_q must lie in (0,1), got {gamma_q}")));
    }
    let mut w = Vec::with_capacity(n);
    let mut pow = 1.0;
    for _ in 0..n {
        w.push((1.0 - gamma_q) * pow);
        pow *= gamma_q;
    }
    Ok((w, pow))
}

/// Detached imagined-rollout states for occupancy training: the conditioning
/// start state, the `n` states that follow it, and the running continuation
/// probabilities of the rollout. All tensors are plain values.
#[derive(Clone, Debug)]
pub struct OccupancyBatch {
    pub start: Tensor,
    pub states: Vec<Tensor>,
    pub continues: Vec<Tensor>,
}

impl OccupancyBatch {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn batch(&self) -> usize {
        self.start.rows()
    }
}

fn survival_products(continues: &[Tensor], batch: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(continues.len());
    let mut running = vec![1.0; batch];
    for c in continues {
        for (b, r) in running.iter_mut().enumerate() {
            *r *= c.get(b, 0);
        }
        out.push(running.clone());
    }
    out
}

/// One bootstrap draw per batch row from `net` conditioned on `cond [B, d]`.
pub fn draw_bootstrap(net: &Mdn, cond: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let b = cond.rows();
    let mut boot = Tensor::zeros(b, net.d);
    for r in 0..b {
        let params = net.forward(cond.row_slice(r))?;
        let sample = mdn_sample(&params, 1, rng)?;
        for (c, &v) in sample[0].iter().enumerate() {
            boot.set(r, c, v);
        }
    }
    Ok(boot)
}

/// Weighted negative log-likelihood of the online density on an imagined
/// rollout, with the geometric tail closed by `boot`, one bootstrap sample
/// per row drawn from the target conditioned on the final state. States are
/// treated as constants; only the online parameters receive gradients.
/// Weights are damped by the running product of imagined continuation
/// probabilities.
pub fn occupancy_loss_g(
    g: &mut Graph,
    online: &Mdn,
    online_lv: &Leaves,
    batch: &OccupancyBatch,
    boot: &Tensor,
    cfg: &OccupancyConfig,
) -> Result<Var> {
    cfg.validate()?;
    let n = batch.horizon();
    if n != cfg.horizon {
        return Err(Error::Dim(format!("rollout horizon {n} does not match configured {}", cfg.horizon)));
    }
    let b = batch.batch();
    let (w, w_boot) = occupancy_weights(n, cfg.gamma_q)?;
    let survival = survival_products(&batch.continues, b);

    let start = g.constant(batch.start.clone());
    let mix = online.forward_g(g, online_lv, start);

    let mut acc: Option<Var> = None;
    for i in 0..n {
        let x = g.constant(batch.states[i].clone());
        let lp = mdn_log_prob_g(g, &mix, x);
        let wcol = g.constant(Tensor::from_fn(b, 1, |r, _| w[i] * survival[i][r]));
        let term = g.mul(lp, wcol);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }

    let boot_v = g.constant(boot.clone());
    let lp_boot = mdn_log_prob_g(g, &mix, boot_v);
    let wcol = g.constant(Tensor::from_fn(b, 1, |r, _| w_boot * survival[n - 1][r]));
    let term = g.mul(lp_boot, wcol);
    let acc = g.add(acc.unwrap(), term);

    let total = g.mean_all(acc);
    Ok(g.neg(total))
}

/// Loss value of [`occupancy_loss_g`] without taking a gradient step; the
/// bootstrap sample comes from the target network.
pub fn occupancy_loss(pair: &MdnPair, batch: &OccupancyBatch, cfg: &OccupancyConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let boot = draw_bootstrap(&pair.target, &batch.states[batch.horizon() - 1], rng)?;
    let mut g = Graph::new();
    let lv = pair.online.ps.frozen_leaves(&mut g);
    let loss = occupancy_loss_g(&mut g, &pair.online, &lv, batch, &boot, cfg)?;
    Ok(g.value(loss).item())
}

/// One Adam step of the online network on an imagined rollout, followed by a
/// Polyak update of the target. Returns the loss value.
pub fn occupancy_train_step(
    pair: &mut MdnPair,
    batch: &OccupancyBatch,
    cfg: &OccupancyConfig,
    grad_clip: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let boot = draw_bootstrap(&pair.target, &batch.states[batch.horizon() - 1], rng)?;
    let mut g = Graph::new();
    let lv = pair.online.ps.leaves(&mut g);
    let loss = occupancy_loss_g(&mut g, &pair.online, &lv, batch, &boot, cfg)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite occupancy loss".into()));
    }
    let grads = g.backward(loss);
    let gv = pair.online.ps.gather_grads(&g, &lv, &grads);
    pair.online.ps.adam_step(&gv, cfg.lr, grad_clip);
    pair.soft_update(cfg.soft_tau);
    Ok(value)
}

/// Monte-Carlo occupancy-entropy estimate on the graph, `[B, 1]`.
///
/// Evaluates the frozen target density at the in-trajectory states (gradients
/// flow through those states into the actor) plus one gradient-detached
/// bootstrap sample, under the geometric weights damped by imagined
/// continuation probabilities.
pub fn entropy_bonus_g(
    g: &mut Graph,
    target: &Mdn,
    target_lv: &Leaves,
    start: Var,
    states: &[Var],
    continues: &[Var],
    boot_sample: &Tensor,
    cfg: &OccupancyConfig,
) -> Result<Var> {
    cfg.validate()?;
    let n = states.len();
    if n != cfg.horizon || continues.len() != n {
        return Err(Error::Dim("entropy bonus horizon mismatch".into()));
    }
    let (w, w_boot) = occupancy_weights(n, cfg.gamma_q)?;
    let mix = target.forward_g(g, target_lv, start);

    let mut acc: Option<Var> = None;
    let mut running: Option<Var> = None;
    for i in 0..n {
        running = Some(match running {
            Some(r) => g.mul(r, continues[i]),
            None => continues[i],
        });
        let lp = mdn_log_prob_g(g, &mix, states[i]);
        let weighted = g.mul(lp, running.unwrap());
        let term = g.scale(weighted, w[i]);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    let boot = g.constant(boot_sample.clone());
    let lp_boot = mdn_log_prob_g(g, &mix, boot);
    let weighted = g.mul(lp_boot, running.unwrap());
    let term = g.scale(weighted, w_boot);
    let acc = g.add(acc.unwrap(), term);
    Ok(g.neg(acc))
}

/// Value-level entropy estimate for a detached rollout; draws the bootstrap
/// sample from the target conditioned on the final state. Returns the mean
/// over the batch.
pub fn entropy_bonus(target: &Mdn, batch: &OccupancyBatch, cfg: &OccupancyConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = batch.horizon();
    let b = batch.batch();
    let last = &batch.states[n - 1];
    let mut boot = Tensor::zeros(b, target.d);
    for r in 0..b {
        let params = target.forward(last.row_slice(r))?;
        let sample = mdn_sample(&params, 1, rng)?;
        for (c, &v) in sample[0].iter().enumerate() {
            boot.set(r, c, v);
        }
    }
    let mut g = Graph::new();
    let lv = target.ps.frozen_leaves(&mut g);
    let start = g.constant(batch.start.clone());
    let states: Vec<Var> = batch.states.iter().map(|t| g.constant(t.clone())).collect();
    let conts: Vec<Var> = batch.continues.iter().map(|t| g.constant(t.clone())).collect();
    let h = entropy_bonus_g(&mut g, target, &lv, start, &states, &conts, &boot, cfg)?;
    let m = g.mean_all(h);
    Ok(g.value(m).item())
}

/// Exact discounted occupancy of a tabular MDP under a deterministic policy:
/// the distribution `q(s | s0)` over states reached 1, 2, 3, ... steps ahead
/// with geometric weights, solved from the linear system
/// `q = (1 - gamma) p1 + gamma P^T q`.
pub fn tabular_occupancy_oracle(
    mdp: &crate::envs::TabularMdp,
    policy: &[usize],
    gamma_q: f64,
    s0: usize,
) -> Result<Vec<f64>> {
    if !(gamma_q > 0.0 && gamma_q < 1.0) {
        return Err(Error::Config(format!("gamma_q must lie in (0,1), got {gamma_q}")));
    }
    if s0 >= mdp.n_states {
        return Err(Error::Config("start state out of range".into()));
    }
    let n = mdp.n_states;
    let p = mdp.policy_transition(policy);
    // p1 = P^T e_{s0}: distribution after one step
    let p1: Vec<f64> = (0..n).map(|t| p[s0 * n + t]).collect();

    // (I - gamma P^T) q = (1 - gamma) p1
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = if i == j { 1.0 } else { 0.0 } - gamma_q * p[j * n + i];
            a[(i, j)] = v;
        }
    }
    let rhs = nalgebra::DVector::<f64>::from_iterator(n, p1.iter().map(|&v| (1.0 - gamma_q) * v));
    let q = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular occupancy system".into()))?;
    Ok(q.iter().cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ChainMdp, Env};
    use rand::SeedableRng;

    fn tiny_mdn(rng: &mut ChaCha8Rng) -> Mdn {
        Mdn::new(2, 8, 3, rng)
    }

    #[test]
    fn forward_produces_valid_simplex_and_positive_stds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mdn = tiny_mdn(&mut rng);
        for s in [[0.0, 0.0], [1.5, -2.0], [100.0, 3.0]] {
            let p = mdn.forward(&s).unwrap();
            let sum: f64 = p.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(p.weights.iter().all(|&w| w >= 0.0));
            assert!(p.stds.iter().flatten().all(|&s| s > 0.0));
        }
        // deterministic forward
        let a = mdn.forward(&[0.3, 0.4]).unwrap();
        let b = mdn.forward(&[0.3, 0.4]).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.means, b.means);
    }

    #[test]
    fn log_prob_closed_forms() {
        // single standard normal component, d = 1
        let p = MixtureParams { weights: vec![1.0], means: vec![vec![0.0]], stds: vec![vec![1.0]] };
        let expect = -0.5 * LN_2PI;
        assert!((mdn_log_prob(&p, &[0.0]).unwrap() - expect).abs() < 1e-12);

        // two identical components collapse to one
        let p2 = MixtureParams {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0], vec![0.0]],
            stds: vec![vec![1.0], vec![1.0]],
        };
        assert!((mdn_log_prob(&p2, &[0.0]).unwrap() - expect).abs() < 1e-12);

        // distinct components: ln(0.5 N(0;0,1) + 0.5 N(0;2,1))
        let p3 = MixtureParams {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0], vec![2.0]],
            stds: vec![vec![1.0], vec![1.0]],
        };
        let n0 = (-0.5 * LN_2PI_F).exp();
        let n2 = (-0.5 * LN_2PI_F - 2.0).exp();
        let expect3 = (0.5 * n0 + 0.5 * n2).ln();
        assert!((mdn_log_prob(&p3, &[0.0]).unwrap() - expect3).abs() < 1e-12);
        // scalar arithmetic: ln(0.5 * 0.39894 + 0.5 * 0.05399) = -1.48517
        assert!((expect3 - -1.48517).abs() < 1e-4);
    }

    const LN_2PI_F: f64 = LN_2PI;

    #[test]
    fn log_prob_is_finite_far_from_the_mixture() {
        let p = MixtureParams { weights: vec![1.0], means: vec![vec![0.0]], stds: vec![vec![0.1]] };
        let lp = mdn_log_prob(&p, &[1e6]).unwrap();
        assert!(lp.is_finite());
        assert!(lp < -1e12);
    }

    #[test]
    fn sampling_matches_weights_and_degenerates_to_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // near-degenerate component concentrates at its mean
        let p = MixtureParams { weights: vec![1.0], means: vec![vec![3.0, -1.0]], stds: vec![vec![1e-9, 1e-9]] };
        for s in mdn_sample(&p, 100, &mut rng).unwrap() {
            assert!((s[0] - 3.0).abs() < 1e-6 && (s[1] - -1.0).abs() < 1e-6);
        }

        // component frequencies match the weights within 3 standard errors
        let p = MixtureParams {
            weights: vec![0.2, 0.8],
            means: vec![vec![-10.0], vec![10.0]],
            stds: vec![vec![0.1], vec![0.1]],
        };
        let n = 100_000;
        let samples = mdn_sample(&p, n, &mut rng).unwrap();
        let frac_low = samples.iter().filter(|s| s[0] < 0.0).count() as f64 / n as f64;
        let se = (0.2_f64 * 0.8 / n as f64).sqrt();
        assert!((frac_low - 0.2).abs() < 3.0 * se, "frequency {frac_low} too far from 0.2");

        // seeded determinism
        let a = mdn_sample(&p, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = mdn_sample(&p, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);

        assert!(mdn_sample(&p, 0, &mut rng).is_err());
    }

    #[test]
    fn occupancy_weights_match_geometric_series() {
        let (w, boot) = occupancy_weights(3, 0.9).unwrap();
        assert!((w[0] - 0.1).abs() < 1e-12);
        assert!((w[1] - 0.09).abs() < 1e-12);
        assert!((w[2] - 0.081).abs() < 1e-12);
        assert!((boot - 0.729).abs() < 1e-12);

        let (w, boot) = occupancy_weights(1, 0.9).unwrap();
        assert_eq!(w.len(), 1);
        assert!((w[0] - 0.1).abs() < 1e-12);
        assert!((boot - 0.9).abs() < 1e-12);

        for gamma in [0.5, 0.9, 0.99] {
            for n in 1..=100 {
                let (w, boot) = occupancy_weights(n, gamma).unwrap();
                let total: f64 = w.iter().sum::<f64>() + boot;
                assert!((total - 1.0).abs() < 1e-12, "n={n} gamma={gamma} total={total}");
            }
        }
        assert!(occupancy_weights(3, 1.0).is_err());
        assert!(occupancy_weights(0, 0.9).is_err());
    }

    fn constant_batch(b: usize, n: usize, d: usize, value: f64) -> OccupancyBatch {
        OccupancyBatch {
            start: Tensor::from_fn(b, d, |_, _| value),
            states: (0..n).map(|_| Tensor::from_fn(b, d, |_, _| value)).collect(),
            continues: (0..n).map(|_| Tensor::from_fn(b, 1, |_, _| 1.0)).collect(),
        }
    }

    /// The spec's independent re-summation oracle: the graph loss equals a
    /// hand-rolled weighted NLL computed with the value-level density.
    #[test]
    fn occupancy_loss_matches_hand_rolled_weighted_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pair = MdnPair::new(2, 8, 3, &mut rng);
        let cfg = OccupancyConfig { horizon: 3, ..Default::default() };
        let b = 4;
        let batch = OccupancyBatch {
            start: Tensor::from_fn(b, 2, |r, c| 0.1 * (r + c) as f64),
            states: (0..3).map(|i| Tensor::from_fn(b, 2, |r, c| 0.3 * i as f64 - 0.2 * r as f64 + 0.1 * c as f64)).collect(),
            continues: (0..3).map(|i| Tensor::from_fn(b, 1, |r, _| 1.0 / (1.0 + 0.1 * (i + r) as f64))).collect(),
        };

        let loss = occupancy_loss(&pair, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();

        // independent recomputation, including the identical bootstrap draw
        let mut boot_rng = ChaCha8Rng::seed_from_u64(77);
        let (w, w_boot) = occupancy_weights(3, cfg.gamma_q).unwrap();
        let mut boots = Vec::new();
        for r in 0..b {
            let params = pair.target.forward(batch.states[2].row_slice(r)).unwrap();
            boots.push(mdn_sample(&params, 1, &mut boot_rng).unwrap()[0].clone());
        }
        let mut manual = 0.0;
        for r in 0..b {
            let params = pair.online.forward(batch.start.row_slice(r)).unwrap();
            let mut surv = 1.0;
            for i in 0..3 {
                surv *= batch.continues[i].get(r, 0);
                manual += w[i] * surv * mdn_log_prob(&params, batch.states[i].row_slice(r)).unwrap();
            }
            manual += w_boot * surv * mdn_log_prob(&params, &boots[r]).unwrap();
        }
        manual = -manual / b as f64;
        assert!((loss - manual).abs() < 1e-6, "graph {loss} vs manual {manual}");
    }

    /// A network wrenched to put a floor-width component exactly on the data
    /// sits at a stationary point of the occupancy loss.
    #[test]
    fn occupancy_loss_is_stationary_at_the_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pair = MdnPair::new(2, 4, 2, &mut rng);
        let c = 0.7;
        // zero every weight, then set head biases: logits 0, means c, stds at the floor
        for i in 0..pair.online.ps.len() {
            for v in pair.online.ps.tensor_at_mut(i).data_mut() {
                *v = 0.0;
            }
        }
        let head_b = pair.online.ps.find("mdn.head.b").unwrap();
        let bias = pair.online.ps.value_mut(head_b);
        let (k, d) = (2, 2);
        for comp in 0..k {
            for dd in 0..d {
                bias.set(0, k + comp * d + dd, c);
                bias.set(0, k + k * d + comp * d + dd, -30.0);
            }
        }
        pair.target.ps.soft_update_from(&pair.online.ps, 1.0);

        let cfg = OccupancyConfig { horizon: 2, ..Default::default() };
        let batch = constant_batch(3, 2, 2, c);
        // every evaluated point, bootstrap included, sits exactly on the mode
        let boot = Tensor::from_fn(3, 2, |_, _| c);
        let mut g = Graph::new();
        let lv = pair.online.ps.leaves(&mut g);
        let loss = occupancy_loss_g(&mut g, &pair.online, &lv, &batch, &boot, &cfg).unwrap();
        let grads = g.backward(loss);
        let gv = pair.online.ps.gather_grads(&g, &lv, &grads);
        let norm = ParamStore::grad_norm(&gv);
        assert!(norm < 1e-6, "gradient norm at optimum was {norm}");
    }

    /// Overfit smoke run: a single repeated deterministic trajectory ends up
    /// carrying almost all of the mixture's mass.
    #[test]
    fn occupancy_training_concentrates_on_visited_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pair = MdnPair::new(1, 16, 4, &mut rng);
        let cfg = OccupancyConfig { horizon: 4, lr: 3e-3, ..Default::default() };
        let batch = OccupancyBatch {
            start: Tensor::from_fn(2, 1, |_, _| 0.0),
            states: (0..4).map(|i| Tensor::from_fn(2, 1, |_, _| 0.1 * (i + 1) as f64)).collect(),
            continues: (0..4).map(|_| Tensor::from_fn(2, 1, |_, _| 1.0)).collect(),
        };
        for _ in 0..800 {
            occupancy_train_step(&mut pair, &batch, &cfg, 100.0, &mut rng).unwrap();
        }
        let params = pair.online.forward(&[0.0]).unwrap();
        let lp_visited = mdn_log_prob(&params, &[0.2]).unwrap();
        let lp_far = mdn_log_prob(&params, &[50.0]).unwrap();
        assert!(lp_visited - lp_far > 5.0, "visited {lp_visited} vs far {lp_far}");
    }

    #[test]
    fn soft_update_examples_and_geometric_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pair = MdnPair::new(1, 4, 2, &mut rng);
        // target = 0, online = 1 everywhere
        for i in 0..pair.online.ps.len() {
            for v in pair.online.ps.tensor_at_mut(i).data_mut() {
                *v = 1.0;
            }
            for v in pair.target.ps.tensor_at_mut(i).data_mut() {
                *v = 0.0;
            }
        }
        pair.soft_update(0.1);
        assert!((pair.target.ps.tensor_at(0).data()[0] - 0.1).abs() < 1e-12);

        // tau = 1 copies exactly
        pair.soft_update(1.0);
        assert_eq!(pair.target.ps.tensor_at(0).data()[0], 1.0);

        // geometric gap decay over repeated updates
        for v in pair.target.ps.tensor_at_mut(0).data_mut() {
            *v = 0.0;
        }
        let initial_gap = 1.0;
        for k in 1..=50 {
            pair.soft_update(0.1);
            let gap = (pair.target.ps.tensor_at(0).data()[0] - 1.0).abs();
            let expect = 0.9_f64.powi(k) * initial_gap;
            assert!((gap - expect).abs() < 1e-9, "k={k}: gap {gap} vs {expect}");
        }
    }

    /// With the target density constant over every evaluated point, the
    /// estimate reduces to minus that constant because the weights sum to 1.
    #[test]
    fn entropy_bonus_of_flat_density_is_minus_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut target = Mdn::new(1, 4, 1, &mut rng);
        // zero weights; bias sets mean 0 and a large std so the density is
        // locally flat around the evaluated points
        for i in 0..target.ps.len() {
            for v in target.ps.tensor_at_mut(i).data_mut() {
                *v = 0.0;
            }
        }
        let head_b = target.ps.find("mdn.head.b").unwrap();
        let bias = target.ps.value_mut(head_b);
        bias.set(0, 2, 1000.0); // std raw -> softplus(1000) ~ 1000
        let sigma: f64 = 1000.0 + MDN_STD_FLOOR;

        let cfg = OccupancyConfig { horizon: 3, ..Default::default() };
        // states near zero: log density approximately constant
        let batch = constant_batch(2, 3, 1, 0.001);
        let h = {
            let mut g = Graph::new();
            let lv = target.ps.frozen_leaves(&mut g);
            let start = g.constant(batch.start.clone());
            let states: Vec<Var> = batch.states.iter().map(|t| g.constant(t.clone())).collect();
            let conts: Vec<Var> = batch.continues.iter().map(|t| g.constant(t.clone())).collect();
            let boot = Tensor::from_fn(2, 1, |_, _| 0.001);
            let hv = entropy_bonus_g(&mut g, &target, &lv, start, &states, &conts, &boot, &cfg).unwrap();
            let m = g.mean_all(hv);
            g.value(m).item()
        };
        let c = -0.5 * LN_2PI - sigma.ln(); // log N(0; 0, sigma) at x ~ 0
        assert!((h - -c).abs() < 1e-6, "entropy {h} vs -log-density {}", -c);
    }

    #[test]
    fn entropy_bonus_is_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pair = MdnPair::new(2, 8, 3, &mut rng);
        let cfg = OccupancyConfig { horizon: 2, ..Default::default() };
        let batch = OccupancyBatch {
            start: Tensor::from_fn(3, 2, |r, c| 0.2 * (r as f64) - 0.1 * c as f64),
            states: (0..2).map(|i| Tensor::from_fn(3, 2, |r, _| 0.1 * (i + r) as f64)).collect(),
            continues: (0..2).map(|_| Tensor::from_fn(3, 1, |_, _| 0.9)).collect(),
        };
        let a = entropy_bonus(&pair.target, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = entropy_bonus(&pair.target, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tabular_oracle_matches_geometric_series_on_the_chain() {
        let mdp = ChainMdp::new(3).as_tabular().unwrap();
        let q = tabular_occupancy_oracle(&mdp, &[0, 0, 0], 0.9, 0).unwrap();
        assert!(q[0].abs() < 1e-9);
        assert!((q[1] - 0.1).abs() < 1e-9);
        assert!((q[2] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn tabular_oracle_concentrates_on_successors_for_small_gamma() {
        let mdp = ChainMdp::new(4).as_tabular().unwrap();
        let q = tabular_occupancy_oracle(&mdp, &[0; 4], 1e-9, 0).unwrap();
        // the one-step successor of s0 is s1
        assert!((q[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tabular_oracle_output_is_a_distribution_on_random_mdps() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..20 {
            let n = 3 + (trial % 5);
            let n_actions = 2;
            let mut transition = vec![0.0; n * n_actions * n];
            for s in 0..n {
                for a in 0..n_actions {
                    let mut row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let sum: f64 = row.iter().sum();
                    for v in &mut row {
                        *v /= sum;
                    }
                    // exact renormalization to survive the 1e-9 validation
                    let sum2: f64 = row.iter().sum();
                    row[0] += 1.0 - sum2;
                    for (t, &v) in row.iter().enumerate() {
                        transition[(s * n_actions + a) * n + t] = v;
                    }
                }
            }
            let mut start = vec![0.0; n];
            start[0] = 1.0;
            let mdp = crate::envs::TabularMdp::new(n, n_actions, transition, vec![0.0; n * n_actions], vec![false; n], start)
                .unwrap();
            let policy: Vec<usize> = (0..n).map(|s| s % n_actions).collect();
            let q = tabular_occupancy_oracle(&mdp, &policy, 0.9, 0).unwrap();
            let total: f64 = q.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "occupancy sums to {total}");
            assert!(q.iter().all(|&v| v >= -1e-12));
        }
    }
}
