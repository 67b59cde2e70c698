//! Transformer building blocks on the tape, plus parameter registration.
//!
//! Every layer reads its tensors from a `Bound` map by name, so the same
//! functions serve the student, the frozen teacher, and the fusion stack.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Tensor, Var};

/// Named parameter tensors in deterministic insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet(pub IndexMap<String, Tensor>);

impl ParamSet {
    pub fn get(&self, name: &str) -> &Tensor {
        self.0.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.0.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(self.0.insert(name.clone(), t).is_none(), "duplicate parameter {name}");
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet(self.0.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.rows, v.cols))).collect())
    }
}

/// Tape handles for one `ParamSet`, all-trainable or all-frozen.
pub struct Bound {
    pub vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn bind(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Bound {
        let vars = params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn v(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collect gradients back into a name-keyed set (zeros where unreached).
    pub fn grads(&self, tape: &Tape, params: &ParamSet) -> ParamSet {
        ParamSet(
            self.vars
                .iter()
                .map(|(k, v)| {
                    let g = tape
                        .grad(*v)
                        .cloned()
                        .unwrap_or_else(|| {
                            let t = params.get(k);
                            Tensor::zeros(t.rows, t.cols)
                        });
                    (k.clone(), g)
                })
                .collect(),
        )
    }
}

// ── initialization ──────────────────────────────────────────────────

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

pub fn init_linear(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ps.insert(format!("{prefix}.w"), uniform(rng, fan_in, fan_out, b));
    ps.insert(format!("{prefix}.b"), Tensor::zeros(1, fan_out));
}

pub fn init_ln(ps: &mut ParamSet, prefix: &str, d: usize) {
    ps.insert(format!("{prefix}.gamma"), Tensor::new(1, d, vec![1.0; d]));
    ps.insert(format!("{prefix}.beta"), Tensor::zeros(1, d));
}

pub fn init_attention(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    init_linear(ps, rng, &format!("{prefix}.q"), d, d);
    init_linear(ps, rng, &format!("{prefix}.k"), d, d);
    init_linear(ps, rng, &format!("{prefix}.v"), d, d);
    init_linear(ps, rng, &format!("{prefix}.o"), d, d);
}

/// Pre-LN transformer block; `cross` adds a cross-attention sublayer.
pub fn init_block(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d: usize, cross: bool) {
    init_ln(ps, &format!("{prefix}.ln1"), d);
    init_attention(ps, rng, &format!("{prefix}.attn"), d);
    if cross {
        init_ln(ps, &format!("{prefix}.lnx"), d);
        init_attention(ps, rng, &format!("{prefix}.xattn"), d);
    }
    init_ln(ps, &format!("{prefix}.ln2"), d);
    init_linear(ps, rng, &format!("{prefix}.mlp1"), d, 2 * d);
    init_linear(ps, rng, &format!("{prefix}.mlp2"), 2 * d, d);
}

// ── forward ─────────────────────────────────────────────────────────

pub fn linear(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Var {
    let y = tape.matmul(x, bound.v(&format!("{prefix}.w")));
    tape.add_row(y, bound.v(&format!("{prefix}.b")))
}

pub fn layer_norm(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Var {
    tape.layer_norm(x, bound.v(&format!("{prefix}.gamma")), bound.v(&format!("{prefix}.beta")))
}

/// Multi-head scaled dot-product attention. Queries come from `q_in`,
/// keys/values from `kv_in`. `bias` is an additive (Lq, Lk) matrix (used for
/// padding masks). Returns the output and the per-head probability vars.
pub fn attention(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    bias: Option<&Tensor>,
) -> (Var, Vec<Var>) {
    let d = tape.value(q_in).cols;
    assert_eq!(d % heads, 0, "d must divide by heads");
    let dh = d / heads;
    let q = linear(tape, bound, &format!("{prefix}.q"), q_in);
    let k = linear(tape, bound, &format!("{prefix}.k"), kv_in);
    let v = linear(tape, bound, &format!("{prefix}.v"), kv_in);
    let bias_var = bias.map(|b| tape.constant(b.clone()));
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let mut scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(b) = bias_var {
            scaled = tape.add(scaled, b);
        }
        let p = tape.softmax_rows(scaled);
        probs.push(p);
        outs.push(tape.matmul(p, vh));
    }
    let cat = tape.concat_cols(&outs);
    (linear(tape, bound, &format!("{prefix}.o"), cat), probs)
}

fn mlp(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Var {
    let h = linear(tape, bound, &format!("{prefix}.mlp1"), x);
    let a = tape.silu(h);
    linear(tape, bound, &format!("{prefix}.mlp2"), a)
}

/// One pre-LN block. With `visual` present the cross-attention sublayer runs
/// between self-attention and the MLP; queries are the running sequence,
/// keys/values the visual tokens.
pub fn block(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    self_bias: Option<&Tensor>,
    visual: Option<Var>,
) -> (Var, Vec<Var>) {
    let n1 = layer_norm(tape, bound, &format!("{prefix}.ln1"), x);
    let (sa, probs) = attention(tape, bound, &format!("{prefix}.attn"), n1, n1, heads, self_bias);
    let mut x = tape.add(x, sa);
    if let Some(vis) = visual {
        let nx = layer_norm(tape, bound, &format!("{prefix}.lnx"), x);
        let (ca, _) = attention(tape, bound, &format!("{prefix}.xattn"), nx, vis, heads, None);
        x = tape.add(x, ca);
    }
    let n2 = layer_norm(tape, bound, &format!("{prefix}.ln2"), x);
    let m = mlp(tape, bound, prefix, n2);
    (tape.add(x, m), probs)
}
