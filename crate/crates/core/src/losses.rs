//! Training objectives: feature reconstruction, global and instance-level
//! contrastive / matching / masked-language losses, and their weighted
//! composition.
//!
//! Contrastive losses sum (not average) their two directional means.
//! Same-source false negatives in the instance contrastive loss are removed
//! by adding a large negative bias to the disallowed logits, which is exact
//! in double precision (exp underflows to zero).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::Vocab;
use crate::tape::{Tape, Tensor, Var};

const MASK_BIAS: f64 = -1e30;
const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub vtc: f64,
    pub vtm: f64,
    pub mlm: f64,
    pub vtc_inst: f64,
    pub vtm_inst: f64,
    pub mlm_inst: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { vtc: 1.0, vtm: 1.0, mlm: 1.0, vtc_inst: 0.1, vtm_inst: 0.1, mlm_inst: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for &w in &[self.vtc, self.vtm, self.mlm, self.vtc_inst, self.vtm_inst, self.mlm_inst] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::NegativeWeight(w));
            }
        }
        Ok(())
    }
}

/// Per-step scalar loss components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub vtc: f64,
    pub vtm: f64,
    pub mlm: f64,
    pub vtc_inst: f64,
    pub vtm_inst: f64,
    pub mlm_inst: f64,
    pub global_total: f64,
    pub inst_total: f64,
    pub total: f64,
}

/// Weighted composition of already-computed components.
pub fn total_loss(
    rec: f64,
    vtc: f64,
    vtm: f64,
    mlm: f64,
    vtc_inst: f64,
    vtm_inst: f64,
    mlm_inst: f64,
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let global_total = weights.vtc * vtc + weights.vtm * vtm + weights.mlm * mlm;
    let inst_total =
        weights.vtc_inst * vtc_inst + weights.vtm_inst * vtm_inst + weights.mlm_inst * mlm_inst;
    Ok(LossReport {
        rec,
        vtc,
        vtm,
        mlm,
        vtc_inst,
        vtm_inst,
        mlm_inst,
        global_total,
        inst_total,
        total: rec + global_total + inst_total,
    })
}

// ── reconstruction ──────────────────────────────────────────────────

/// (1/|Omega|) sum over visible tokens of the squared distance between the
/// L2-normalized student and teacher features. `h_t` holds features for all
/// L tokens; `omega` indexes the visible subset aligned with `h_s` rows.
pub fn rec_loss(tape: &mut Tape, h_s: Var, h_t: Var, omega: &[usize]) -> Result<Var> {
    assert_eq!(tape.value(h_s).rows, omega.len(), "student rows must match omega");
    for r in 0..tape.value(h_s).rows {
        let n: f64 = tape.value(h_s).row(r).iter().map(|x| x * x).sum();
        if n < 1e-300 {
            return Err(Error::ZeroNorm);
        }
    }
    for &l in omega {
        let n: f64 = tape.value(h_t).row(l).iter().map(|x| x * x).sum();
        if n < 1e-300 {
            return Err(Error::ZeroNorm);
        }
    }
    let t_sel = tape.gather_rows(h_t, omega);
    let sn = tape.l2norm_rows(h_s);
    let tn = tape.l2norm_rows(t_sel);
    let d = tape.sub(sn, tn);
    let sq = tape.square(d);
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / omega.len() as f64))
}

// ── contrastive ─────────────────────────────────────────────────────

/// Bidirectional InfoNCE over index-aligned unit rows, logits scaled by a
/// tape-level inverse temperature. `alpha_bias` (if any) is added to the
/// similarity logits and must be symmetric.
pub fn contrastive_loss_var(
    tape: &mut Tape,
    v: Var,
    t: Var,
    inv_tau: Var,
    alpha_bias: Option<&Tensor>,
) -> Var {
    let b = tape.value(v).rows;
    let tt = tape.transpose(t);
    let sim = tape.matmul(v, tt);
    let mut logits = tape.mul_scalar_var(sim, inv_tau);
    if let Some(bias) = alpha_bias {
        let bv = tape.constant(bias.clone());
        logits = tape.add(logits, bv);
    }
    let diag: Vec<usize> = (0..b).collect();
    let ls_v2t = tape.log_softmax_rows(logits);
    let d1 = tape.pick_cols(ls_v2t, &diag);
    let lt = tape.transpose(logits);
    let ls_t2v = tape.log_softmax_rows(lt);
    let d2 = tape.pick_cols(ls_t2v, &diag);
    let s1 = tape.sum_all(d1);
    let s2 = tape.sum_all(d2);
    let s = tape.add(s1, s2);
    tape.scale(s, -1.0 / b as f64)
}

/// Global video-text contrastive loss with a fixed temperature.
pub fn vtc_loss(tape: &mut Tape, v: Var, t: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::BadTemperature(tau));
    }
    let inv = tape.constant(Tensor::scalar(1.0 / tau));
    Ok(contrastive_loss_var(tape, v, t, inv, None))
}

/// alpha_{n,m}: logit (n, m) participates iff m = n or the sources differ.
pub fn alpha_bias(source_ids: &[u64]) -> Tensor {
    let n = source_ids.len();
    let mut b = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && source_ids[i] == source_ids[j] {
                *b.at_mut(i, j) = MASK_BIAS;
            }
        }
    }
    b
}

/// Instance contrastive loss: same-source non-matching captions are removed
/// from every denominator.
pub fn instance_vtc_loss(
    tape: &mut Tape,
    z: Var,
    s: Var,
    source_ids: &[u64],
    tau_inst: f64,
) -> Result<Var> {
    if !(tau_inst > 0.0) {
        return Err(Error::BadTemperature(tau_inst));
    }
    let inv = tape.constant(Tensor::scalar(1.0 / tau_inst));
    Ok(contrastive_loss_var(tape, z, s, inv, Some(&alpha_bias(source_ids))))
}

// ── hard negatives ──────────────────────────────────────────────────

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn mine_one(sim_row: &[f64], skip: impl Fn(usize) -> bool, tau: f64, rng: &mut ChaCha8Rng) -> Option<usize> {
    let allowed: Vec<usize> = (0..sim_row.len()).filter(|&j| !skip(j)).collect();
    if allowed.is_empty() {
        return None;
    }
    let m = allowed.iter().map(|&j| sim_row[j]).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = allowed.iter().map(|&j| ((sim_row[j] - m) / tau).exp()).collect();
    Some(allowed[sample_weighted(rng, &w)])
}

/// Within-batch similarity-weighted hard negatives: for each video i a text
/// j != i with probability proportional to exp(sim_ij / tau), and for each
/// text j a video i != j likewise along the column.
pub fn mine_hard_negatives(
    sim: &Tensor,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(tau > 0.0) {
        return Err(Error::BadTemperature(tau));
    }
    let b = sim.rows;
    if b < 2 {
        return Err(Error::NoNegatives);
    }
    let mut neg_text = Vec::with_capacity(b);
    for i in 0..b {
        neg_text.push(mine_one(sim.row(i), |j| j == i, tau, rng).unwrap());
    }
    let mut neg_video = Vec::with_capacity(b);
    for j in 0..b {
        let col: Vec<f64> = (0..b).map(|i| sim.at(i, j)).collect();
        neg_video.push(mine_one(&col, |i| i == j, tau, rng).unwrap());
    }
    Ok((neg_text, neg_video))
}

/// Instance variant: negatives additionally restricted by the alpha rule, so
/// an instance with no cross-source partner yields `None`.
pub fn mine_hard_negatives_masked(
    sim: &Tensor,
    source_ids: &[u64],
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Option<usize>>, Vec<Option<usize>>)> {
    if !(tau > 0.0) {
        return Err(Error::BadTemperature(tau));
    }
    let n = sim.rows;
    let mut neg_text = Vec::with_capacity(n);
    for i in 0..n {
        neg_text.push(mine_one(sim.row(i), |j| source_ids[j] == source_ids[i], tau, rng));
    }
    let mut neg_video = Vec::with_capacity(n);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| sim.at(i, j)).collect();
        neg_video.push(mine_one(&col, |i| source_ids[i] == source_ids[j], tau, rng));
    }
    Ok((neg_text, neg_video))
}

// ── matching ────────────────────────────────────────────────────────

/// Mean binary cross-entropy over positive-class probabilities, clamped away
/// from 0 and 1.
pub fn vtm_loss(tape: &mut Tape, probs: Var, labels: &[f64]) -> Var {
    let m = tape.value(probs).rows;
    assert_eq!(m, labels.len(), "one label per pair");
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let y = tape.constant(Tensor::new(m, 1, labels.to_vec()));
    let yneg = tape.constant(Tensor::new(m, 1, labels.iter().map(|l| 1.0 - l).collect()));
    let lp = tape.ln(p);
    let pm = tape.neg(p);
    let one_minus = tape.add_const(pm, 1.0);
    let lq = tape.ln(one_minus);
    let t1 = tape.mul(y, lp);
    let t2 = tape.mul(yneg, lq);
    let s = tape.add(t1, t2);
    let tot = tape.sum_all(s);
    tape.scale(tot, -1.0 / m as f64)
}

// ── masked language modeling ────────────────────────────────────────

/// Independently mask each non-special position with probability `ratio`,
/// forcing one mask when none is drawn. Returns (corrupted ids, positions,
/// original target ids).
pub fn mask_text_tokens(
    ids: &[usize],
    ratio: f64,
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let maskable: Vec<usize> =
        (0..ids.len()).filter(|&i| !vocab.is_special(ids[i])).collect();
    if maskable.is_empty() {
        return Err(Error::NoMaskableToken);
    }
    let mut positions: Vec<usize> =
        maskable.iter().copied().filter(|_| rng.gen_range(0.0..1.0) < ratio).collect();
    if positions.is_empty() {
        positions.push(maskable[rng.gen_range(0..maskable.len())]);
    }
    let mut corrupted = ids.to_vec();
    let mut targets = Vec::with_capacity(positions.len());
    for &p in &positions {
        targets.push(ids[p]);
        corrupted[p] = vocab.mask_id();
    }
    Ok((corrupted, positions, targets))
}

/// One sentence's MLM inputs: full-position vocab logits plus its mask set.
pub struct MlmItem {
    pub logits: Var,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// (1/B) sum_i (1/|M_i|) sum_{j in M_i} -log softmax(logits_ij)[target].
pub fn mlm_loss(tape: &mut Tape, items: &[MlmItem]) -> Var {
    assert!(!items.is_empty(), "mlm batch must be non-empty");
    let mut acc: Option<Var> = None;
    for item in items {
        assert!(!item.positions.is_empty(), "mask set must be non-empty");
        let rows = tape.gather_rows(item.logits, &item.positions);
        let ls = tape.log_softmax_rows(rows);
        let picked = tape.pick_cols(ls, &item.targets);
        let s = tape.sum_all(picked);
        let term = tape.scale(s, -1.0 / item.positions.len() as f64);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    let a = acc.unwrap();
    tape.scale(a, 1.0 / items.len() as f64)
}
