//! Reverse-mode automatic differentiation on a flat tape of 2-d tensors.
//!
//! Every training step builds a fresh [`Graph`], pushes operations onto it,
//! and calls [`Graph::backward`] once on a scalar loss. Tensors are row-major
//! `[rows, cols]` matrices of `f64`; batches live along rows. Nodes that no
//! trainable leaf can reach are skipped during the backward sweep.

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    /// 1x1 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    /// Single-row tensor from a slice.
    pub fn row(values: &[f64]) -> Self {
        Tensor { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    /// Single-column tensor from a slice.
    pub fn col(values: &[f64]) -> Self {
        Tensor { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Contents of row `r` as a slice.
    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squared entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `[m,n] + [1,n]`, bias-style broadcast over rows.
    AddRow(Var, Var),
    /// `[m,n] * [1,n]`, columnwise scaling broadcast over rows.
    MulRow(Var, Var),
    /// `[m,n] * [m,1]`, per-row scaling.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Elu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    /// Elementwise smooth-L1 with unit transition point: `(pred, target)`.
    Huber(Var, Var),
    /// Elementwise binary cross-entropy from logits: `(logits, targets)`.
    BceLogits(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    /// Row-wise sum, `[m,n] -> [m,1]`.
    SumRows(Var),
    /// Row-wise log-sum-exp, `[m,n] -> [m,1]`.
    LogSumExpRows(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Build ops forward, then call [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every reachable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if the node was unreachable.
    pub fn get(&self, g: &Graph, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => {
                let val = g.value(v);
                Tensor::zeros(val.rows(), val.cols())
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|.
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that participates in differentiation (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `v`'s current value as a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul inner dims {}x{} . {}x{}", av.rows, av.cols, bv.rows, bv.cols);
        let (m, k, n) = (av.rows, av.cols, bv.cols);
        let mut out = Tensor::zeros(m, n);
        // i-k-j loop order keeps the inner loop contiguous in both operands.
        for i in 0..m {
            for p in 0..k {
                let aip = av.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv.data[p * n..(p + 1) * n];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Matmul(a, b), ng)
    }

    fn binary_elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor { rows: av.rows, cols: av.cols, data };
        let ng = self.needs(a) || self.needs(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a[m,n] + b[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows, 1, "add_row rhs must be a single row");
        assert_eq!(av.cols, bv.cols, "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += bv.data[c];
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    /// `a[m,n] * b[1,n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows, 1, "mul_row rhs must be a single row");
        assert_eq!(av.cols, bv.cols, "mul_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] *= bv.data[c];
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MulRow(a, b), ng)
    }

    /// `a[m,n] * c[m,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(c));
        assert_eq!(cv.cols, 1, "mul_col rhs must be a single column");
        assert_eq!(av.rows, cv.rows, "mul_col height mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            let s = cv.data[r];
            for x in &mut out.data[r * out.cols..(r + 1) * out.cols] {
                *x *= s;
            }
        }
        let ng = self.needs(a) || self.needs(c);
        self.push(out, Op::MulCol(a, c), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| f(x)).collect();
        let out = Tensor { rows: av.rows, cols: av.cols, data };
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp() - 1.0 }, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Elementwise smooth L1: `0.5 d^2` for `|d| <= 1`, else `|d| - 0.5`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Var {
        self.binary_elementwise(
            pred,
            target,
            |p, t| {
                let d = p - t;
                if d.abs() <= 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            },
            Op::Huber(pred, target),
        )
    }

    /// Elementwise BCE from logits: `softplus(x) - x*t` for targets in {0,1}.
    pub fn bce_logits(&mut self, logits: Var, targets: Var) -> Var {
        self.binary_elementwise(logits, targets, |x, t| softplus(x) - x * t, Op::BceLogits(logits, targets))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s: f64 = av.data.iter().sum();
        let n = av.data.len() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s / n), Op::MeanAll(a), ng)
    }

    /// Row-wise sum: `[m,n] -> [m,1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows, 1);
        for r in 0..av.rows {
            out.data[r] = av.data[r * av.cols..(r + 1) * av.cols].iter().sum();
        }
        let ng = self.needs(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Row-wise log-sum-exp with max shift: `[m,n] -> [m,1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows, 1);
        for r in 0..av.rows {
            let row = &av.data[r * av.cols..(r + 1) * av.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            out.data[r] = m + s.ln();
        }
        let ng = self.needs(a);
        self.push(out, Op::LogSumExpRows(a), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat_cols height mismatch");
        let (m, na, nb) = (av.rows, av.cols, bv.cols);
        let mut out = Tensor::zeros(m, na + nb);
        for r in 0..m {
            out.data[r * (na + nb)..r * (na + nb) + na].copy_from_slice(&av.data[r * na..(r + 1) * na]);
            out.data[r * (na + nb) + na..(r + 1) * (na + nb)].copy_from_slice(&bv.data[r * nb..(r + 1) * nb]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    /// Columns `from..to` of `a`.
    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let av = self.value(a);
        assert!(from < to && to <= av.cols, "slice_cols range {}..{} of width {}", from, to, av.cols);
        let (m, n) = (av.rows, to - from);
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            out.data[r * n..(r + 1) * n].copy_from_slice(&av.data[r * av.cols + from..r * av.cols + to]);
        }
        let ng = self.needs(a);
        self.push(out, Op::SliceCols(a, from, to), ng)
    }

    /// Accumulates `loss` gradients down the tape. `loss` must be 1x1.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward target must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], v: Var, update: impl Fn(&mut Tensor)) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let val = self.value(v);
            *slot = Some(Tensor::zeros(val.rows, val.cols));
        }
        update(slot.as_mut().unwrap());
    }

    fn accumulate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                // dA = g . B^T
                self.add_grad(grads, a, |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let grow = &g.data[i * n..(i + 1) * n];
                            let brow = &bv.data[p * n..(p + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da.data[i * k + p] += acc;
                        }
                    }
                });
                // dB = A^T . g
                self.add_grad(grads, b, |db| {
                    for p in 0..k {
                        for i in 0..m {
                            let aip = av.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &g.data[i * n..(i + 1) * n];
                            let drow = &mut db.data[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += aip * grow[j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.add_grad(grads, a, |da| {
                    for (d, &gv) in da.data.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                });
                self.add_grad(grads, b, |db| {
                    for (d, &gv) in db.data.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, a, |da| {
                    for (d, &gv) in da.data.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                });
                self.add_grad(grads, b, |db| {
                    for (d, &gv) in db.data.iter_mut().zip(&g.data) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.add_grad(grads, a, |da| {
                    for i in 0..da.data.len() {
                        da.data[i] += g.data[i] * bv.data[i];
                    }
                });
                self.add_grad(grads, b, |db| {
                    for i in 0..db.data.len() {
                        db.data[i] += g.data[i] * av.data[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.add_grad(grads, a, |da| {
                    for i in 0..da.data.len() {
                        da.data[i] += g.data[i] / bv.data[i];
                    }
                });
                self.add_grad(grads, b, |db| {
                    for i in 0..db.data.len() {
                        db.data[i] -= g.data[i] * av.data[i] / (bv.data[i] * bv.data[i]);
                    }
                });
            }
            Op::AddRow(a, b) => {
                let cols = self.value(a).cols;
                self.add_grad(grads, a, |da| {
                    for (d, &gv) in da.data.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                });
                self.add_grad(grads, b, |db| {
                    for (i, &gv) in g.data.iter().enumerate() {
                        db.data[i % cols] += gv;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let cols = av.cols;
                self.add_grad(grads, a, |da| {
                    for r in 0..av.rows {
                        for j in 0..cols {
                            da.data[r * cols + j] += g.data[r * cols + j] * bv.data[j];
                        }
                    }
                });
                self.add_grad(grads, b, |db| {
                    for r in 0..av.rows {
                        for j in 0..cols {
                            db.data[j] += g.data[r * cols + j] * av.data[r * cols + j];
                        }
                    }
                });
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(a), self.value(c));
                let cols = av.cols;
                self.add_grad(grads, a, |da| {
                    for r in 0..av.rows {
                        let s = cv.data[r];
                        for j in 0..cols {
                            da.data[r * cols + j] += g.data[r * cols + j] * s;
                        }
                    }
                });
                self.add_grad(grads, c, |dc| {
                    for r in 0..av.rows {
                        let mut acc = 0.0;
                        for j in 0..cols {
                            acc += g.data[r * cols + j] * av.data[r * cols + j];
                        }
                        dc.data[r] += acc;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.add_grad(grads, a, |da| {
                    for (d, &gv) in da.data.iter_mut().zip(&g.data) {
                        *d += gv * s;
                    }
                });
            }
            Op::AddScalar(a) => {
                self.add_grad(grads, a, |da| {
                    for (d, &gv) in da.data.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                });
            }
            Op::Neg(a) => {
                self.add_grad(grads, a, |da| {
                    for (d, &gv) in da.data.iter_mut().zip(&g.data) {
                        *d -= gv;
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.add_grad(grads, a, |da| {
                    for i in 0..da.data.len() {
                        da.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.add_grad(grads, a, |da| {
                    for i in 0..da.data.len() {
                        da.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.value(a);
                self.add_grad(grads, a, |da| {
                    for i in 0..da.data.len() {
                        da.data[i] += g.data[i] * sigmoid(x.data[i]);
                    }
                });
            }
            Op::Elu(a) => {
                let x = self.value(a);
                let y = &node.value;
                self.add_grad(grads, a, |da| {
                    for i in 0..da.data.len() {
                        let d = if x.data[i] > 0.0 { 1.0 } else { y.data[i] + 1.0 };
                        da.data[i] += g.data[i] * d;
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                self.add_grad(grads, a, |da| {
                    for i in 0..da.data.len() {
                        da.data[i] += g.data[i] * y.data[i];
                    }
                });
            }
            Op::Ln(a) => {
                let x = self.value(a);
                self.add_grad(grads, a, |da| {
                    for i in 0..da.data.len() {
                        da.data[i] += g.data[i] / x.data[i];
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(a);
                self.add_grad(grads, a, |da| {
                    for i in 0..da.data.len() {
                        da.data[i] += g.data[i] * 2.0 * x.data[i];
                    }
                });
            }
            Op::Huber(p, t) => {
                let (pv, tv) = (self.value(p), self.value(t));
                self.add_grad(grads, p, |dp| {
                    for i in 0..dp.data.len() {
                        let d = (pv.data[i] - tv.data[i]).clamp(-1.0, 1.0);
                        dp.data[i] += g.data[i] * d;
                    }
                });
                self.add_grad(grads, t, |dt| {
                    for i in 0..dt.data.len() {
                        let d = (pv.data[i] - tv.data[i]).clamp(-1.0, 1.0);
                        dt.data[i] -= g.data[i] * d;
                    }
                });
            }
            Op::BceLogits(x, t) => {
                let (xv, tv) = (self.value(x), self.value(t));
                self.add_grad(grads, x, |dx| {
                    for i in 0..dx.data.len() {
                        dx.data[i] += g.data[i] * (sigmoid(xv.data[i]) - tv.data[i]);
                    }
                });
                self.add_grad(grads, t, |dt| {
                    for i in 0..dt.data.len() {
                        dt.data[i] -= g.data[i] * xv.data[i];
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g.data[0];
                self.add_grad(grads, a, |da| {
                    for d in &mut da.data {
                        *d += gv;
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.value(a).data.len() as f64;
                let gv = g.data[0] / n;
                self.add_grad(grads, a, |da| {
                    for d in &mut da.data {
                        *d += gv;
                    }
                });
            }
            Op::SumRows(a) => {
                let cols = self.value(a).cols;
                self.add_grad(grads, a, |da| {
                    for r in 0..da.data.len() / cols {
                        let gv = g.data[r];
                        for j in 0..cols {
                            da.data[r * cols + j] += gv;
                        }
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(a);
                let y = &node.value;
                self.add_grad(grads, a, |da| {
                    for r in 0..x.rows {
                        let gv = g.data[r];
                        let lse = y.data[r];
                        for j in 0..x.cols {
                            da.data[r * x.cols + j] += gv * (x.data[r * x.cols + j] - lse).exp();
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (na, nb) = (self.value(a).cols, self.value(b).cols);
                let n = na + nb;
                self.add_grad(grads, a, |da| {
                    for r in 0..da.data.len() / na {
                        for j in 0..na {
                            da.data[r * na + j] += g.data[r * n + j];
                        }
                    }
                });
                self.add_grad(grads, b, |db| {
                    for r in 0..db.data.len() / nb {
                        for j in 0..nb {
                            db.data[r * nb + j] += g.data[r * n + na + j];
                        }
                    }
                });
            }
            Op::SliceCols(a, from, to) => {
                let cols = self.value(a).cols;
                let w = to - from;
                self.add_grad(grads, a, |da| {
                    for r in 0..da.data.len() / cols {
                        for j in 0..w {
                            da.data[r * cols + from + j] += g.data[r * w + j];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of `backward` against a scalar-valued
    /// build function, perturbing every entry of every leaf.
    fn check_grads(build: impl Fn(&mut Graph, &[Var]) -> Var, leaves: Vec<Tensor>, tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(&g, vars[li]);
            for idx in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vars2: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == li {
                                t.data_mut()[idx] += delta;
                            }
                            g2.leaf(t)
                        })
                        .collect();
                    let l = build(&mut g2, &vars2);
                    g2.value(l).item()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = analytic.data()[idx];
                let denom = ana.abs().max(num.abs()).max(1e-4);
                assert!(
                    (ana - num).abs() / denom < tol,
                    "leaf {} idx {}: analytic {} vs numeric {}",
                    li,
                    idx,
                    ana,
                    num
                );
            }
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn matmul_and_activations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let bias = rand_tensor(&mut rng, 1, 2);
        check_grads(
            |g, v| {
                let mm = g.matmul(v[0], v[1]);
                let lin = g.add_row(mm, v[2]);
                let t = g.tanh(lin);
                let e = g.elu(t);
                let s = g.sigmoid(e);
                let sp = g.softplus(s);
                g.sum_all(sp)
            },
            vec![a, b, bias],
            1e-5,
        );
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 2, 3);
        let mut b = rand_tensor(&mut rng, 2, 3);
        // Keep divisor away from zero.
        for v in b.data_mut() {
            *v = v.abs() + 0.5;
        }
        check_grads(
            |g, v| {
                let m = g.mul(v[0], v[1]);
                let d = g.div(m, v[1]);
                let s = g.sub(d, v[0]);
                let q = g.square(s);
                let a2 = g.add(q, v[1]);
                let sc = g.scale(a2, 0.7);
                let ash = g.add_scalar(sc, 0.3);
                let l = g.ln(ash);
                let ex = g.exp(l);
                let n = g.neg(ex);
                g.mean_all(n)
            },
            vec![a, b],
            1e-5,
        );
    }

    #[test]
    fn reductions_and_slicing_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 3, 5);
        let c = rand_tensor(&mut rng, 3, 1);
        check_grads(
            |g, v| {
                let lse = g.logsumexp_rows(v[0]);
                let sl = g.slice_cols(v[0], 1, 4);
                let sr = g.sum_rows(sl);
                let cat = g.concat_cols(lse, sr);
                let w = g.mul_col(cat, v[1]);
                let rowscale = g.constant(Tensor::row(&[0.5, -1.5]));
                let w2 = g.mul_row(w, rowscale);
                g.sum_all(w2)
            },
            vec![a, c],
            1e-5,
        );
    }

    #[test]
    fn losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = rand_tensor(&mut rng, 2, 4);
        let target = Tensor::from_fn(2, 4, |_, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let pred2 = rand_tensor(&mut rng, 2, 4);
        check_grads(
            move |g, v| {
                let t = g.constant(target.clone());
                let bce = g.bce_logits(v[0], t);
                let hub = g.smooth_l1(v[1], v[0]);
                let s1 = g.sum_all(bce);
                let s2 = g.sum_all(hub);
                g.add(s1, s2)
            },
            vec![pred, pred2],
            1e-5,
        );
    }

    #[test]
    fn smooth_l1_matches_piecewise_definition() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::row(&[0.0, 0.0]));
        let t = g.constant(Tensor::row(&[0.5, 2.0]));
        let h = g.smooth_l1(p, t);
        assert!((g.value(h).get(0, 0) - 0.125).abs() < 1e-12);
        assert!((g.value(h).get(0, 1) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let grads = g.backward(y);
        // y = x * const(2), so dy/dx = 2 rather than 4.
        assert_eq!(grads.get(&g, x).item(), 2.0);
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1000.0, 1000.0]));
        let y = g.logsumexp_rows(x);
        let expect = 1000.0 + 2.0_f64.ln();
        assert!((g.value(y).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn constant_subgraphs_are_skipped_in_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let c = g.constant(Tensor::scalar(5.0));
        let cc = g.square(c);
        let y = g.mul(x, cc);
        let grads = g.backward(y);
        assert_eq!(grads.get(&g, x).item(), 25.0);
        assert_eq!(grads.get(&g, c).item(), 0.0);
    }
}
