//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! Operations are recorded onto a linear tape during the forward pass and
//! replayed in reverse to accumulate gradients. Everything is 2-D row-major;
//! scalars are 1x1, row vectors are 1xN. Shape mismatches are programming
//! errors and panic.

use serde::{Deserialize, Serialize};

/// Dense row-major f64 matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data/shape mismatch");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { rows: r, cols: c, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(Var, Var),
    /// a (r,c) + broadcast b (1,c)
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Silu(Var),
    Clamp(Var, f64, f64),
    L2NormRows(Var),
    /// x, gamma (1,c), beta (1,c)
    LayerNorm(Var, Var, Var),
    MeanRows(Var),
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// out[i] = a[i, cols[i]]
    PickCols(Var, Vec<usize>),
    /// a * s, s a 1x1 var
    MulScalarVar(Var, Var),
    Max2(Var, Var),
    Min2(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-6;

/// Recording tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Non-differentiated input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, op: Op, value: Tensor, parents: &[Var]) -> Var {
        let ng = self.any_grad(parents);
        self.push(op, value, ng)
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        self.record(Op::Add(a, b), t, &[a, b])
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.rows, 1, "add_row: b must be a row vector");
        assert_eq!(ta.cols, tb.cols, "add_row width mismatch");
        let mut t = ta.clone();
        for r in 0..t.rows {
            for c in 0..t.cols {
                *t.at_mut(r, c) += tb.data[c];
            }
        }
        self.record(Op::AddRow(a, b), t, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        self.record(Op::Sub(a, b), t, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        self.record(Op::Mul(a, b), t, &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|x| x * k).collect());
        self.record(Op::Scale(a, k), t, &[a])
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|x| x + k).collect());
        self.record(Op::AddConst(a), t, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul inner dim mismatch");
        let t = matmul_raw(ta, tb);
        self.record(Op::MatMul(a, b), t, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = transpose_raw(self.value(a));
        self.record(Op::Transpose(a), t, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut t = ta.clone();
        for r in 0..t.rows {
            softmax_in_place(&mut t.data[r * t.cols..(r + 1) * t.cols]);
        }
        self.record(Op::SoftmaxRows(a), t, &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut t = ta.clone();
        for r in 0..t.rows {
            let row = &mut t.data[r * t.cols..(r + 1) * t.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.record(Op::LogSoftmaxRows(a), t, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| sigmoid(*x)).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        self.record(Op::Sigmoid(a), t, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|x| x.exp()).collect());
        self.record(Op::Exp(a), t, &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|x| x.ln()).collect());
        self.record(Op::Ln(a), t, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|x| x.abs()).collect());
        self.record(Op::Abs(a), t, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * sigmoid(*x)).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        self.record(Op::Silu(a), t, &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x.clamp(lo, hi)).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        self.record(Op::Clamp(a, lo, hi), t, &[a])
    }

    /// L2-normalize each row. Rows must be nonzero.
    pub fn l2norm_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut t = ta.clone();
        for r in 0..t.rows {
            let row = &mut t.data[r * t.cols..(r + 1) * t.cols];
            let n = l2(row);
            assert!(n > 0.0, "l2norm_rows: zero row");
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        self.record(Op::L2NormRows(a), t, &[a])
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let (ta, tg, tb) = (self.value(a), self.value(gamma), self.value(beta));
        assert_eq!(tg.shape(), (1, ta.cols));
        assert_eq!(tb.shape(), (1, ta.cols));
        let mut t = ta.clone();
        for r in 0..t.rows {
            let row = &mut t.data[r * t.cols..(r + 1) * t.cols];
            let (mu, var) = mean_var(row);
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (c, x) in row.iter_mut().enumerate() {
                *x = (*x - mu) * inv * tg.data[c] + tb.data[c];
            }
        }
        self.record(Op::LayerNorm(a, gamma, beta), t, &[a, gamma, beta])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = vec![0.0; ta.cols];
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                out[c] += ta.at(r, c);
            }
        }
        let n = ta.rows as f64;
        out.iter_mut().for_each(|x| *x /= n);
        let t = Tensor::new(1, ta.cols, out);
        self.record(Op::MeanRows(a), t, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.record(Op::SumAll(a), Tensor::scalar(s), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * ta.cols);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        let t = Tensor::new(idx.len(), ta.cols, data);
        self.record(Op::GatherRows(a, idx.to_vec()), t, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        assert!(start + len <= ta.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(ta.rows * len);
        for r in 0..ta.rows {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let t = Tensor::new(ta.rows, len, data);
        self.record(Op::SliceCols(a, start, len), t, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|v| self.value(*v).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in parts {
                let tv = self.value(*v);
                assert_eq!(tv.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(tv.row(r));
            }
        }
        let t = Tensor::new(rows, cols, data);
        self.record(Op::ConcatCols(parts.to_vec()), t, parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|v| self.value(*v).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in parts {
            let tv = self.value(*v);
            assert_eq!(tv.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&tv.data);
        }
        let t = Tensor::new(rows, cols, data);
        self.record(Op::ConcatRows(parts.to_vec()), t, parts)
    }

    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let ta = self.value(a);
        assert_eq!(cols.len(), ta.rows, "pick_cols: one index per row");
        let data = cols.iter().enumerate().map(|(r, &c)| ta.at(r, c)).collect();
        let t = Tensor::new(ta.rows, 1, data);
        self.record(Op::PickCols(a, cols.to_vec()), t, &[a])
    }

    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (self.value(a), self.value(s));
        assert_eq!(ts.numel(), 1, "mul_scalar_var: s must be 1x1");
        let k = ts.data[0];
        let t = Tensor::new(ta.rows, ta.cols, ta.data.iter().map(|x| x * k).collect());
        self.record(Op::MulScalarVar(a, s), t, &[a, s])
    }

    pub fn max2(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x.max(*y)).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        self.record(Op::Max2(a, b), t, &[a, b])
    }

    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x.min(*y)).collect();
        let t = Tensor::new(ta.rows, ta.cols, data);
        self.record(Op::Min2(a, b), t, &[a, b])
    }

    // convenience compositions

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulate d(loss)/d(node) for every reachable node. `loss` must be 1x1.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward target must be scalar");
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn accum(&mut self, v: Var, add: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (x, y) in g.data.iter_mut().zip(&add.data) {
                    *x += y;
                }
            }
            slot @ None => *slot = Some(add),
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&mut self, i: usize, g: &Tensor) {
        // Ops are matched by value to keep the borrow on self short.
        enum P {
            One(Var, Tensor),
            Two(Var, Tensor, Var, Tensor),
            Many(Vec<(Var, Tensor)>),
        }
        let out: P = {
            let node = &self.nodes[i];
            let val = &node.value;
            match &node.op {
                Op::Leaf => return,
                Op::Add(a, b) => P::Two(*a, g.clone(), *b, g.clone()),
                Op::AddRow(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[c] += g.at(r, c);
                        }
                    }
                    P::Two(*a, g.clone(), *b, gb)
                }
                Op::Sub(a, b) => {
                    let gb = Tensor::new(g.rows, g.cols, g.data.iter().map(|x| -x).collect());
                    P::Two(*a, g.clone(), *b, gb)
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = Tensor::new(g.rows, g.cols, g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect());
                    let gb = Tensor::new(g.rows, g.cols, g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect());
                    P::Two(*a, ga, *b, gb)
                }
                Op::Scale(a, k) => {
                    P::One(*a, Tensor::new(g.rows, g.cols, g.data.iter().map(|x| x * k).collect()))
                }
                Op::AddConst(a) => P::One(*a, g.clone()),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = matmul_nt(g, tb); // g @ b^T
                    let gb = matmul_tn(ta, g); // a^T @ g
                    P::Two(*a, ga, *b, gb)
                }
                Op::Transpose(a) => P::One(*a, transpose_raw(g)),
                Op::SoftmaxRows(a) => {
                    let p = val;
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let dot: f64 = (0..g.cols).map(|c| g.at(r, c) * p.at(r, c)).sum();
                        for c in 0..g.cols {
                            *ga.at_mut(r, c) = p.at(r, c) * (g.at(r, c) - dot);
                        }
                    }
                    P::One(*a, ga)
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let gsum: f64 = (0..g.cols).map(|c| g.at(r, c)).sum();
                        for c in 0..g.cols {
                            // softmax = exp(log_softmax)
                            *ga.at_mut(r, c) = g.at(r, c) - val.at(r, c).exp() * gsum;
                        }
                    }
                    P::One(*a, ga)
                }
                Op::Sigmoid(a) => {
                    let data = g
                        .data
                        .iter()
                        .zip(&val.data)
                        .map(|(gi, s)| gi * s * (1.0 - s))
                        .collect();
                    P::One(*a, Tensor::new(g.rows, g.cols, data))
                }
                Op::Exp(a) => {
                    let data = g.data.iter().zip(&val.data).map(|(gi, e)| gi * e).collect();
                    P::One(*a, Tensor::new(g.rows, g.cols, data))
                }
                Op::Ln(a) => {
                    let ta = &self.nodes[a.0].value;
                    let data = g.data.iter().zip(&ta.data).map(|(gi, x)| gi / x).collect();
                    P::One(*a, Tensor::new(g.rows, g.cols, data))
                }
                Op::Abs(a) => {
                    let ta = &self.nodes[a.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(gi, x)| if *x >= 0.0 { *gi } else { -gi })
                        .collect();
                    P::One(*a, Tensor::new(g.rows, g.cols, data))
                }
                Op::Silu(a) => {
                    let ta = &self.nodes[a.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(gi, x)| {
                            let s = sigmoid(*x);
                            gi * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    P::One(*a, Tensor::new(g.rows, g.cols, data))
                }
                Op::Clamp(a, lo, hi) => {
                    let ta = &self.nodes[a.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(gi, x)| if *x > *lo && *x < *hi { *gi } else { 0.0 })
                        .collect();
                    P::One(*a, Tensor::new(g.rows, g.cols, data))
                }
                Op::L2NormRows(a) => {
                    let ta = &self.nodes[a.0].value;
                    let y = val;
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let n = l2(ta.row(r));
                        let dot: f64 = (0..g.cols).map(|c| g.at(r, c) * y.at(r, c)).sum();
                        for c in 0..g.cols {
                            *ga.at_mut(r, c) = (g.at(r, c) - y.at(r, c) * dot) / n;
                        }
                    }
                    P::One(*a, ga)
                }
                Op::LayerNorm(a, gamma, beta) => {
                    let ta = &self.nodes[a.0].value;
                    let tg = &self.nodes[gamma.0].value;
                    let c = ta.cols as f64;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    let mut ggamma = Tensor::zeros(1, ta.cols);
                    let mut gbeta = Tensor::zeros(1, ta.cols);
                    for r in 0..ta.rows {
                        let row = ta.row(r);
                        let (mu, var) = mean_var(row);
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|x| (x - mu) * inv).collect();
                        let gy = g.row(r);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..ta.cols {
                            let gj = gy[j] * tg.data[j];
                            m1 += gj;
                            m2 += gj * xhat[j];
                            ggamma.data[j] += gy[j] * xhat[j];
                            gbeta.data[j] += gy[j];
                        }
                        m1 /= c;
                        m2 /= c;
                        for j in 0..ta.cols {
                            let gj = gy[j] * tg.data[j];
                            *ga.at_mut(r, j) = (gj - m1 - xhat[j] * m2) * inv;
                        }
                    }
                    P::Many(vec![(*a, ga), (*gamma, ggamma), (*beta, gbeta)])
                }
                Op::MeanRows(a) => {
                    let ta = &self.nodes[a.0].value;
                    let k = 1.0 / ta.rows as f64;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..ta.rows {
                        for c in 0..ta.cols {
                            *ga.at_mut(r, c) = g.data[c] * k;
                        }
                    }
                    P::One(*a, ga)
                }
                Op::SumAll(a) => {
                    let ta = &self.nodes[a.0].value;
                    let gv = g.data[0];
                    P::One(*a, Tensor::new(ta.rows, ta.cols, vec![gv; ta.numel()]))
                }
                Op::GatherRows(a, idx) => {
                    let ta = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..ta.cols {
                            *ga.at_mut(src, c) += g.at(r, c);
                        }
                    }
                    P::One(*a, ga)
                }
                Op::SliceCols(a, start, len) => {
                    let ta = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..ta.rows {
                        for c in 0..*len {
                            *ga.at_mut(r, start + c) = g.at(r, c);
                        }
                    }
                    P::One(*a, ga)
                }
                Op::ConcatCols(parts) => {
                    let mut outs = Vec::with_capacity(parts.len());
                    let mut off = 0;
                    for v in parts {
                        let tv = &self.nodes[v.0].value;
                        let mut gv = Tensor::zeros(tv.rows, tv.cols);
                        for r in 0..tv.rows {
                            for c in 0..tv.cols {
                                *gv.at_mut(r, c) = g.at(r, off + c);
                            }
                        }
                        off += tv.cols;
                        outs.push((*v, gv));
                    }
                    P::Many(outs)
                }
                Op::ConcatRows(parts) => {
                    let mut outs = Vec::with_capacity(parts.len());
                    let mut off = 0;
                    for v in parts {
                        let tv = &self.nodes[v.0].value;
                        let mut gv = Tensor::zeros(tv.rows, tv.cols);
                        for r in 0..tv.rows {
                            for c in 0..tv.cols {
                                *gv.at_mut(r, c) = g.at(off + r, c);
                            }
                        }
                        off += tv.rows;
                        outs.push((*v, gv));
                    }
                    P::Many(outs)
                }
                Op::PickCols(a, cols) => {
                    let ta = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for (r, &c) in cols.iter().enumerate() {
                        *ga.at_mut(r, c) = g.data[r];
                    }
                    P::One(*a, ga)
                }
                Op::MulScalarVar(a, s) => {
                    let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
                    let k = ts.data[0];
                    let ga = Tensor::new(g.rows, g.cols, g.data.iter().map(|x| x * k).collect());
                    let gs: f64 = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).sum();
                    P::Two(*a, ga, *s, Tensor::scalar(gs))
                }
                Op::Max2(a, b) | Op::Min2(a, b) => {
                    let is_max = matches!(node.op, Op::Max2(..));
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    let mut gb = Tensor::zeros(g.rows, g.cols);
                    for j in 0..g.numel() {
                        let take_a = if is_max { ta.data[j] >= tb.data[j] } else { ta.data[j] <= tb.data[j] };
                        if take_a {
                            ga.data[j] = g.data[j];
                        } else {
                            gb.data[j] = g.data[j];
                        }
                    }
                    P::Two(*a, ga, *b, gb)
                }
            }
        };
        match out {
            P::One(a, ga) => self.accum(a, ga),
            P::Two(a, ga, b, gb) => {
                self.accum(a, ga);
                self.accum(b, gb);
            }
            P::Many(list) => {
                for (v, gv) in list {
                    self.accum(v, gv);
                }
            }
        }
    }
}

// ── free helpers ────────────────────────────────────────────────────

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn l2(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.at(i, k);
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// a @ b^T
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols);
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let dot: f64 = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            *out.at_mut(i, j) = dot;
        }
    }
    out
}

/// a^T @ b
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows);
    let mut out = Tensor::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for i in 0..a.cols {
            let aki = arow[i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            *out.at_mut(c, r) = a.at(r, c);
        }
    }
    out
}
