//! Parameter storage, layer modules, and the Adam optimizer.
//!
//! A [`ParamStore`] owns named tensors in registration order (checkpoints and
//! soft updates rely on that order being stable). Layers hold [`ParamId`]s
//! into a store and build their forward pass on a [`Graph`] against a
//! [`Leaves`] binding, which decides whether the parameters are trainable or
//! frozen for that particular graph.

use crate::graph::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors plus Adam moment buffers.
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    adam_m: Vec<Tensor>,
    adam_v: Vec<Tensor>,
    adam_t: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), adam_m: Vec::new(), adam_v: Vec::new(), adam_t: 0 }
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter name {name}");
        self.names.push(name.to_string());
        self.adam_m.push(Tensor::zeros(value.rows(), value.cols()));
        self.adam_v.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    /// Index-based access for gradient-check sweeps over all parameters.
    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Overwrite a parameter by name, e.g. when loading a checkpoint.
    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<(), String> {
        match self.find(name) {
            Some(id) => {
                let cur = &self.values[id.0];
                if (cur.rows(), cur.cols()) != (value.rows(), value.cols()) {
                    return Err(format!(
                        "parameter {name}: shape {}x{} does not match stored {}x{}",
                        value.rows(),
                        value.cols(),
                        cur.rows(),
                        cur.cols()
                    ));
                }
                self.values[id.0] = value;
                Ok(())
            }
            None => Err(format!("unknown parameter {name}")),
        }
    }

    /// Bind every parameter into `g` as trainable leaves.
    pub fn leaves(&self, g: &mut Graph) -> Leaves {
        let vars = self.values.iter().map(|t| g.leaf(t.clone())).collect();
        Leaves { vars, trainable: true }
    }

    /// Bind every parameter into `g` as constants (frozen).
    pub fn frozen_leaves(&self, g: &mut Graph) -> Leaves {
        let vars = self.values.iter().map(|t| g.constant(t.clone())).collect();
        Leaves { vars, trainable: false }
    }

    /// Global L2 norm over all parameters.
    pub fn grad_norm(grads: &[Tensor]) -> f64 {
        grads.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt()
    }

    /// One Adam step from per-parameter gradients, with global-norm clipping.
    pub fn adam_step(&mut self, grads: &[Tensor], lr: f64, clip_norm: f64) {
        assert_eq!(grads.len(), self.values.len(), "gradient count mismatch");
        let norm = Self::grad_norm(grads);
        let scale = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };
        self.adam_t += 1;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let bc1 = 1.0 - b1.powi(self.adam_t as i32);
        let bc2 = 1.0 - b2.powi(self.adam_t as i32);
        for i in 0..self.values.len() {
            let m = self.adam_m[i].data_mut();
            let v = self.adam_v[i].data_mut();
            let p = self.values[i].data_mut();
            let g = grads[i].data();
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Plain gradient-descent step (used by a few small fitting loops).
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.values.len(), "gradient count mismatch");
        for i in 0..self.values.len() {
            let p = self.values[i].data_mut();
            let g = grads[i].data();
            for j in 0..p.len() {
                p[j] -= lr * g[j];
            }
        }
    }

    /// Polyak update: `self <- (1 - tau) * self + tau * online`.
    pub fn soft_update_from(&mut self, online: &ParamStore, tau: f64) {
        assert_eq!(self.values.len(), online.values.len(), "parameter count mismatch");
        for i in 0..self.values.len() {
            let t = self.values[i].data_mut();
            let o = online.values[i].data();
            assert_eq!(t.len(), o.len(), "parameter shape mismatch in soft update");
            for j in 0..t.len() {
                t[j] = (1.0 - tau) * t[j] + tau * o[j];
            }
        }
    }

    /// Collect gradients for every parameter of this store out of `grads`.
    pub fn gather_grads(&self, g: &Graph, leaves: &Leaves, grads: &crate::graph::Gradients) -> Vec<Tensor> {
        assert!(leaves.trainable, "gather_grads on frozen leaves");
        leaves.vars.iter().map(|&v| grads.get(g, v)).collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-graph binding of a store's parameters to graph nodes.
pub struct Leaves {
    vars: Vec<Var>,
    trainable: bool,
}

impl Leaves {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform Xavier/Glorot: `U(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// All zeros (used for output layers that should start centered).
    Zero,
}

fn init_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, init: Init) -> Tensor {
    match init {
        Init::Xavier => {
            let s = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-s..s))
        }
        Init::Zero => Tensor::zeros(rows, cols),
    }
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let w = ps.register(&format!("{name}.w"), init_tensor(rng, in_dim, out_dim, init));
        let b = ps.register(&format!("{name}.b"), Tensor::zeros(1, out_dim));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, lv: &Leaves, x: Var) -> Var {
        let mm = g.matmul(x, lv.var(self.w));
        g.add_row(mm, lv.var(self.b))
    }
}

/// Stack of dense layers with ELU between them and a linear output.
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists layer widths including input and output, e.g. `[in, h, h, out]`.
    pub fn new(ps: &mut ParamStore, name: &str, dims: &[usize], out_init: Init, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let init = if i == dims.len() - 2 { out_init } else { Init::Xavier };
            layers.push(Linear::new(ps, &format!("{name}.l{i}"), dims[i], dims[i + 1], init, rng));
        }
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, lv: &Leaves, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, lv, h);
            if i + 1 < self.layers.len() {
                h = g.elu(h);
            }
        }
        h
    }
}

/// Single GRU cell; gate layout follows the usual r/z/n convention.
pub struct GruCell {
    wx: ParamId,
    wh: ParamId,
    bx: ParamId,
    bh: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(ps: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let wx = ps.register(&format!("{name}.wx"), init_tensor(rng, input_dim, 3 * hidden_dim, Init::Xavier));
        let wh = ps.register(&format!("{name}.wh"), init_tensor(rng, hidden_dim, 3 * hidden_dim, Init::Xavier));
        let bx = ps.register(&format!("{name}.bx"), Tensor::zeros(1, 3 * hidden_dim));
        let bh = ps.register(&format!("{name}.bh"), Tensor::zeros(1, 3 * hidden_dim));
        GruCell { wx, wh, bx, bh, input_dim, hidden_dim }
    }

    /// One step: `x [B, input_dim]`, `h [B, hidden_dim]` -> new hidden state.
    pub fn forward(&self, g: &mut Graph, lv: &Leaves, x: Var, h: Var) -> Var {
        let n = self.hidden_dim;
        let gx = g.matmul(x, lv.var(self.wx));
        let gx = g.add_row(gx, lv.var(self.bx));
        let gh = g.matmul(h, lv.var(self.wh));
        let gh = g.add_row(gh, lv.var(self.bh));

        let rx = g.slice_cols(gx, 0, n);
        let zx = g.slice_cols(gx, n, 2 * n);
        let nx = g.slice_cols(gx, 2 * n, 3 * n);
        let rh = g.slice_cols(gh, 0, n);
        let zh = g.slice_cols(gh, n, 2 * n);
        let nh = g.slice_cols(gh, 2 * n, 3 * n);

        let r_pre = g.add(rx, rh);
        let r = g.sigmoid(r_pre);
        let z_pre = g.add(zx, zh);
        let z = g.sigmoid(z_pre);
        let rn = g.mul(r, nh);
        let n_pre = g.add(nx, rn);
        let nt = g.tanh(n_pre);

        // h' = (1 - z) * n + z * h
        let zh_term = g.mul(z, h);
        let zn = g.mul(z, nt);
        let n_minus_zn = g.sub(nt, zn);
        g.add(n_minus_zn, zh_term)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::SeedableRng;

    fn loss_of(ps: &ParamStore, build: impl Fn(&mut Graph, &Leaves) -> Var) -> f64 {
        let mut g = Graph::new();
        let lv = ps.leaves(&mut g);
        let l = build(&mut g, &lv);
        g.value(l).item()
    }

    /// Finite-difference check over every scalar parameter of the store.
    fn check_store_grads(ps: &mut ParamStore, build: impl Fn(&mut Graph, &Leaves) -> Var, tol: f64) {
        let mut g = Graph::new();
        let lv = ps.leaves(&mut g);
        let loss = build(&mut g, &lv);
        let grads = g.backward(loss);
        let analytic = ps.gather_grads(&g, &lv, &grads);

        let h = 1e-6;
        for i in 0..ps.len() {
            for j in 0..analytic[i].len() {
                let orig = ps.values[i].data()[j];
                ps.values[i].data_mut()[j] = orig + h;
                let lp = loss_of(ps, &build);
                ps.values[i].data_mut()[j] = orig - h;
                let lm = loss_of(ps, &build);
                ps.values[i].data_mut()[j] = orig;
                let num = (lp - lm) / (2.0 * h);
                let ana = analytic[i].data()[j];
                let denom = ana.abs().max(num.abs()).max(1e-4);
                assert!(
                    (ana - num).abs() / denom < tol,
                    "param {} ({}) idx {}: analytic {} vs numeric {}",
                    i,
                    ps.names[i],
                    j,
                    ana,
                    num
                );
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ps = ParamStore::new();
        let mlp = Mlp::new(&mut ps, "f", &[3, 5, 2], Init::Xavier, &mut rng);
        let x = Tensor::from_fn(4, 3, |r, c| (r as f64 - c as f64) * 0.3);
        check_store_grads(
            &mut ps,
            move |g, lv| {
                let xv = g.constant(x.clone());
                let y = mlp.forward(g, lv, xv);
                let sq = g.square(y);
                g.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::new();
        let gru = GruCell::new(&mut ps, "gru", 3, 4, &mut rng);
        let x = Tensor::from_fn(2, 3, |r, c| 0.2 * (r + c) as f64 - 0.3);
        let h0 = Tensor::zeros(2, 4);
        check_store_grads(
            &mut ps,
            move |g, lv| {
                let xv = g.constant(x.clone());
                let mut h = g.constant(h0.clone());
                // Unroll a couple of steps so recurrent weights get reused.
                for _ in 0..3 {
                    h = gru.forward(g, lv, xv, h);
                }
                let sq = g.square(h);
                g.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.register("x", Tensor::row(&[5.0, -3.0]));
        for _ in 0..800 {
            let mut g = Graph::new();
            let lv = ps.leaves(&mut g);
            let sq = g.square(lv.var(id));
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            let gv = ps.gather_grads(&g, &lv, &grads);
            ps.adam_step(&gv, 0.05, 0.0);
        }
        assert!(ps.value(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn soft_update_moves_target_toward_online() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut online = ParamStore::new();
        let mut target = ParamStore::new();
        Linear::new(&mut online, "l", 2, 2, Init::Xavier, &mut rng);
        Linear::new(&mut target, "l", 2, 2, Init::Zero, &mut rng);
        target.soft_update_from(&online, 0.1);
        let w_on = online.value(online.find("l.w").unwrap()).clone();
        let w_tg = target.value(target.find("l.w").unwrap()).clone();
        for (o, t) in w_on.data().iter().zip(w_tg.data()) {
            assert!((t - 0.1 * o).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "l", 2, 1, Init::Xavier, &mut rng);
        let mut g = Graph::new();
        let lv = ps.frozen_leaves(&mut g);
        let x = g.leaf(Tensor::row(&[1.0, 2.0]));
        let y = lin.forward(&mut g, &lv, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        // input still receives gradient, parameters do not
        assert!(grads.get(&g, x).sq_norm() > 0.0);
        assert_eq!(grads.get(&g, lv.var(ParamId(0))).sq_norm(), 0.0);
    }
}
