//! Retrieval and grounding evaluation: R@K over the global and instance
//! splits, IoU / generalized IoU geometry, and the box-regression head
//! fine-tune.

use serde::{Deserialize, Serialize};

use crate::encoders::{
    crop_instance, cross_attend_pool, encode_text, encode_video_full, encode_video_tokens, fuse,
    grounding_forward, patchify, Bound, ModelState, Projection, project,
};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::schema::{Sample, Vocab, tokenize};
use crate::tape::{Tape, Tensor, Var};
use crate::training::{adamw_update, OptState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Global,
    Instance,
}

/// Recall@{1,5,10} for both directions plus their mean, fractions in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub split: Split,
    pub queries: usize,
    pub candidates: usize,
    /// text query -> visual candidate direction
    pub t2v: [f64; 3],
    /// visual query -> text candidate direction
    pub v2t: [f64; 3],
    pub mean_recall: f64,
    /// true when some K exceeded the candidate count (R@K = 1 by convention)
    pub k_overflow: bool,
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

impl RetrievalResult {
    pub fn csv_header() -> &'static str {
        "split,queries,candidates,t2v_r1,t2v_r5,t2v_r10,v2t_r1,v2t_r5,v2t_r10,mean_recall"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            match self.split {
                Split::Global => "global",
                Split::Instance => "instance",
            },
            self.queries,
            self.candidates,
            self.t2v[0],
            self.t2v[1],
            self.t2v[2],
            self.v2t[0],
            self.v2t[1],
            self.v2t[2],
            self.mean_recall
        )
    }
}

/// 1-based rank of `gt` among a query's candidate scores; ties rank the
/// lower candidate index first.
fn rank_of(scores: &[f64], gt: usize) -> usize {
    let s = scores[gt];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < gt))
        .count()
}

fn direction_recalls(sim_rows: &[Vec<f64>], gt: &[usize]) -> [f64; 3] {
    let q = gt.len() as f64;
    let mut out = [0.0; 3];
    for (ki, &k) in RECALL_KS.iter().enumerate() {
        let hits =
            sim_rows.iter().zip(gt).filter(|(row, &g)| rank_of(row, g) <= k).count();
        out[ki] = hits as f64 / q;
    }
    out
}

/// Both-direction R@K from a square similarity matrix whose rows are visual
/// queries and columns text candidates; `gt` must be a permutation pairing
/// row i with column gt[i].
pub fn retrieval_metrics(sim: &Tensor, gt: &[usize], split: Split) -> Result<RetrievalResult> {
    if sim.rows == 0 || sim.cols == 0 {
        return Err(Error::EmptyPredictions);
    }
    assert_eq!(sim.rows, gt.len(), "one ground truth per query");
    let mut seen = vec![false; sim.cols];
    for &g in gt {
        assert!(g < sim.cols && !seen[g], "gt must be a permutation");
        seen[g] = true;
    }
    let rows: Vec<Vec<f64>> = (0..sim.rows).map(|r| sim.row(r).to_vec()).collect();
    let v2t = direction_recalls(&rows, gt);
    // transpose roles: text query gt[i] retrieves visual candidate i
    let cols: Vec<Vec<f64>> = (0..sim.cols).map(|c| (0..sim.rows).map(|r| sim.at(r, c)).collect()).collect();
    let mut inv = vec![0usize; sim.cols];
    for (i, &g) in gt.iter().enumerate() {
        inv[g] = i;
    }
    let t2v_rows: Vec<Vec<f64>> = gt.iter().map(|&g| cols[g].clone()).collect();
    let t2v_gt: Vec<usize> = gt.iter().map(|&g| inv[g]).collect();
    let t2v = direction_recalls(&t2v_rows, &t2v_gt);
    let mean_recall = (t2v.iter().sum::<f64>() + v2t.iter().sum::<f64>()) / 6.0;
    Ok(RetrievalResult {
        split,
        queries: sim.rows,
        candidates: sim.cols,
        t2v,
        v2t,
        mean_recall,
        k_overflow: RECALL_KS.iter().any(|&k| k > sim.cols),
    })
}

// ── embedding extraction ────────────────────────────────────────────

fn stack_rows(rows: Vec<Tensor>) -> Tensor {
    let cols = rows[0].cols;
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in &rows {
        assert_eq!(r.rows, 1);
        data.extend_from_slice(&r.data);
    }
    Tensor::new(rows.len(), cols, data)
}

fn sim_matrix(v: &Tensor, t: &Tensor) -> Tensor {
    let mut sim = Tensor::zeros(v.rows, t.rows);
    for i in 0..v.rows {
        for j in 0..t.rows {
            *sim.at_mut(i, j) = v.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
        }
    }
    sim
}

/// Global split: pooled projected scene embeddings vs sentence 0 of each
/// holistic caption.
pub fn eval_global_retrieval(
    state: &ModelState,
    samples: &[Sample],
    vocab: &Vocab,
) -> Result<RetrievalResult> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dims = &state.config;
    let mut v_rows = Vec::new();
    let mut t_rows = Vec::new();
    for sample in samples {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let tokens = patchify(&mut tape, &bound, dims, &sample.frames)?;
        let (_, pooled) = encode_video_full(&mut tape, &bound, dims, &tokens);
        let vp = project(&mut tape, &bound, Projection::Visual, pooled)?;
        v_rows.push(tape.value(vp).clone());
        let sentence = sample
            .global_caption
            .first()
            .ok_or_else(|| Error::SceneConfig("empty caption".into()))?;
        let ids = tokenize(sentence, vocab, dims.max_len);
        let enc = encode_text(&mut tape, &bound, dims, &ids, vocab.pad_id())?;
        let tp = project(&mut tape, &bound, Projection::Text, enc.cls)?;
        t_rows.push(tape.value(tp).clone());
    }
    let sim = sim_matrix(&stack_rows(v_rows), &stack_rows(t_rows));
    let gt: Vec<usize> = (0..samples.len()).collect();
    retrieval_metrics(&sim, &gt, Split::Global)
}

/// Instance split: cross-attended pooled crop embeddings vs sentence 0 of
/// each instance caption, pooled across all sources.
pub fn eval_instance_retrieval(
    state: &ModelState,
    samples: &[Sample],
    vocab: &Vocab,
) -> Result<RetrievalResult> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dims = &state.config;
    let mut z_rows = Vec::new();
    let mut s_rows = Vec::new();
    let mut sources = Vec::new();
    for sample in samples {
        if sample.instances.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let scene = patchify(&mut tape, &bound, dims, &sample.frames)?;
        let (scene_feats, _) = encode_video_tokens(&mut tape, &bound, dims, &scene);
        for inst in &sample.instances {
            let crop = crop_instance(sample, inst, (dims.crop_h, dims.crop_w))?;
            let tokens = patchify(&mut tape, &bound, dims, &crop)?;
            let (feats, _) = encode_video_tokens(&mut tape, &bound, dims, &tokens);
            let (_, z) = cross_attend_pool(&mut tape, &bound, dims, &feats, scene_feats.var);
            let zp = project(&mut tape, &bound, Projection::Visual, z)?;
            z_rows.push(tape.value(zp).clone());
            let sentence = inst
                .caption
                .first()
                .ok_or_else(|| Error::SceneConfig("empty caption".into()))?;
            let ids = tokenize(sentence, vocab, dims.max_len);
            let enc = encode_text(&mut tape, &bound, dims, &ids, vocab.pad_id())?;
            let sp = project(&mut tape, &bound, Projection::Text, enc.cls)?;
            s_rows.push(tape.value(sp).clone());
            sources.push(sample.source_id);
        }
    }
    if z_rows.is_empty() {
        return Err(Error::NoInstances);
    }
    let distinct = {
        let mut s = sources.clone();
        s.sort_unstable();
        s.dedup();
        s.len()
    };
    if distinct < 2 {
        return Err(Error::SingleSourcePool);
    }
    let sim = sim_matrix(&stack_rows(z_rows), &stack_rows(s_rows));
    let gt: Vec<usize> = (0..sim.rows).collect();
    retrieval_metrics(&sim, &gt, Split::Instance)
}

// ── box geometry ────────────────────────────────────────────────────

/// Axis-aligned box as (x, y, w, h) in any consistent units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn from_cxcywh(c: [f64; 4]) -> Rect {
        Rect { x: c[0] - c[2] / 2.0, y: c[1] - c[3] / 2.0, w: c[2], h: c[3] }
    }
}

impl From<crate::schema::Box> for Rect {
    fn from(b: crate::schema::Box) -> Rect {
        Rect { x: b.x as f64, y: b.y as f64, w: b.w as f64, h: b.h as f64 }
    }
}

fn overlap(a: &Rect, b: &Rect) -> (f64, f64, f64) {
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = iw.max(0.0) * ih.max(0.0);
    let union = a.w * a.h + b.w * b.h - inter;
    let enc = ((a.x + a.w).max(b.x + b.w) - a.x.min(b.x))
        * ((a.y + a.h).max(b.y + b.h) - a.y.min(b.y));
    (inter, union, enc)
}

pub fn iou(a: &Rect, b: &Rect) -> Result<f64> {
    if a.w <= 0.0 || a.h <= 0.0 || b.w <= 0.0 || b.h <= 0.0 {
        return Err(Error::ZeroAreaBox);
    }
    let (inter, union, _) = overlap(a, b);
    Ok(inter / union)
}

/// IoU minus the normalized empty area of the tight enclosure.
pub fn giou(a: &Rect, b: &Rect) -> Result<f64> {
    if a.w <= 0.0 || a.h <= 0.0 || b.w <= 0.0 || b.h <= 0.0 {
        return Err(Error::ZeroAreaBox);
    }
    let (inter, union, enc) = overlap(a, b);
    Ok(inter / union - (enc - union) / enc)
}

// ── grounding ───────────────────────────────────────────────────────

/// Per-instance grounding output: one (cx, cy, w, h) prediction per
/// annotated frame, normalized to [0, 1], with its IoU against the target.
#[derive(Clone, Debug, Serialize)]
pub struct GroundingPrediction {
    pub sample_id: String,
    pub instance_id: u32,
    pub boxes: Vec<[f64; 4]>,
    pub ious: Vec<f64>,
    /// mean IoU over the annotated frames
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingConfig {
    pub steps: usize,
    pub lr: f64,
    pub freeze_backbone: bool,
    pub weight_decay: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig { steps: 500, lr: 3e-3, freeze_backbone: true, weight_decay: 0.0 }
    }
}

fn recip_pos(tape: &mut Tape, v: Var) -> Var {
    let l = tape.ln(v);
    let n = tape.neg(l);
    tape.exp(n)
}

fn c(tape: &mut Tape, v: f64) -> Var {
    tape.constant(Tensor::scalar(v))
}

/// 1 - GIoU between a predicted (1, 4) cxcywh var and a constant target,
/// differentiable away from ties.
pub fn giou_loss_var(tape: &mut Tape, pred: Var, target: [f64; 4]) -> Var {
    let px = tape.slice_cols(pred, 0, 1);
    let py = tape.slice_cols(pred, 1, 1);
    let pw = tape.slice_cols(pred, 2, 1);
    let ph = tape.slice_cols(pred, 3, 1);
    let half_w = tape.scale(pw, 0.5);
    let half_h = tape.scale(ph, 0.5);
    let x1 = tape.sub(px, half_w);
    let x2 = tape.add(px, half_w);
    let y1 = tape.sub(py, half_h);
    let y2 = tape.add(py, half_h);
    let t = Rect::from_cxcywh(target);
    let (tx1, ty1, tx2, ty2) = (t.x, t.y, t.x + t.w, t.y + t.h);

    let zero = c(tape, 0.0);
    let txv1 = c(tape, tx1);
    let txv2 = c(tape, tx2);
    let tyv1 = c(tape, ty1);
    let tyv2 = c(tape, ty2);

    let ix1 = tape.max2(x1, txv1);
    let ix2 = tape.min2(x2, txv2);
    let iy1 = tape.max2(y1, tyv1);
    let iy2 = tape.min2(y2, tyv2);
    let iwr = tape.sub(ix2, ix1);
    let ihr = tape.sub(iy2, iy1);
    let iw = tape.max2(iwr, zero);
    let ih = tape.max2(ihr, zero);
    let inter = tape.mul(iw, ih);

    let pa = tape.mul(pw, ph);
    let pa_t = tape.add_const(pa, t.w * t.h);
    let union = tape.sub(pa_t, inter);

    let ex1 = tape.min2(x1, txv1);
    let ex2 = tape.max2(x2, txv2);
    let ey1 = tape.min2(y1, tyv1);
    let ey2 = tape.max2(y2, tyv2);
    let ew = tape.sub(ex2, ex1);
    let eh = tape.sub(ey2, ey1);
    let enc = tape.mul(ew, eh);

    let inv_union = recip_pos(tape, union);
    let iou_v = tape.mul(inter, inv_union);
    let gap = tape.sub(enc, union);
    let inv_enc = recip_pos(tape, enc);
    let penalty = tape.mul(gap, inv_enc);
    let giou_v = tape.sub(iou_v, penalty);
    let neg = tape.neg(giou_v);
    tape.add_const(neg, 1.0)
}

fn normalized_target(b: &crate::schema::Box, w: usize, h: usize) -> [f64; 4] {
    [
        (b.x as f64 + b.w as f64 / 2.0) / w as f64,
        (b.y as f64 + b.h as f64 / 2.0) / h as f64,
        b.w as f64 / w as f64,
        b.h as f64 / h as f64,
    ]
}

/// Predicted per-frame boxes for one instance: fused [CLS] of the scene and
/// the instance caption through the regression head, sigmoid-squashed.
fn predict_boxes(
    tape: &mut Tape,
    bound: &Bound,
    state: &ModelState,
    sample: &Sample,
    inst_caption: &str,
    vocab: &Vocab,
) -> Result<Var> {
    let dims = &state.config;
    let tokens = patchify(tape, bound, dims, &sample.frames)?;
    let (feats, _) = encode_video_tokens(tape, bound, dims, &tokens);
    let ids = tokenize(inst_caption, vocab, dims.max_len);
    let out = fuse(tape, bound, dims, Some(feats.var), &ids, vocab.pad_id())?;
    let raw = grounding_forward(tape, bound, out.cls);
    Ok(tape.sigmoid(raw))
}

/// Mean over annotated frames of L1 plus (1 - GIoU) on normalized boxes,
/// averaged over instances.
fn grounding_batch_loss(
    tape: &mut Tape,
    bound: &Bound,
    state: &ModelState,
    samples: &[Sample],
    vocab: &Vocab,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for sample in samples {
        for inst in &sample.instances {
            let sentence = inst
                .caption
                .first()
                .ok_or_else(|| Error::SceneConfig("empty caption".into()))?;
            let pred = predict_boxes(tape, bound, state, sample, sentence, vocab)?;
            let mut inst_acc: Option<Var> = None;
            for b in &inst.trajectory {
                let frame_pred = tape.slice_cols(pred, 4 * b.t, 4);
                let target = normalized_target(b, sample.frames.w, sample.frames.h);
                let tv = tape.constant(Tensor::new(1, 4, target.to_vec()));
                let diff = tape.sub(frame_pred, tv);
                let ad = tape.abs(diff);
                let l1 = tape.sum_all(ad);
                let gl = giou_loss_var(tape, frame_pred, target);
                let term = tape.add(l1, gl);
                inst_acc = Some(match inst_acc {
                    None => term,
                    Some(a) => tape.add(a, term),
                });
            }
            let ia = inst_acc.expect("trajectory is non-empty");
            let mean = tape.scale(ia, 1.0 / inst.trajectory.len() as f64);
            acc = Some(match acc {
                None => mean,
                Some(a) => tape.add(a, mean),
            });
            count += 1;
        }
    }
    match acc {
        None => Err(Error::NoInstances),
        Some(a) => Ok(tape.scale(a, 1.0 / count as f64)),
    }
}

/// Fine-tune the regression head (backbone frozen by default) with L1 +
/// GIoU losses on the annotated trajectories.
pub fn grounding_finetune(
    state: &mut ModelState,
    samples: &[Sample],
    vocab: &Vocab,
    cfg: &GroundingConfig,
) -> Result<Vec<f64>> {
    if !samples.iter().any(|s| !s.instances.is_empty()) {
        return Err(Error::NoInstances);
    }
    let head = |name: &str| name.starts_with("ground_head.");
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut opt: Option<OptState> = None;
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, true);
        let loss = grounding_batch_loss(&mut tape, &bound, state, samples, vocab)?;
        losses.push(tape.value(loss).item());
        tape.backward(loss);
        let grads = bound.grads(&tape, &state.params);
        if cfg.freeze_backbone {
            let mut sub = crate::encoders::ParamSet::default();
            let mut gsub = crate::encoders::ParamSet::default();
            for (name, t) in state.params.iter() {
                if head(name) {
                    sub.insert(name.clone(), t.clone());
                    gsub.insert(name.clone(), grads.get(name).clone());
                }
            }
            let mut o = opt.take().unwrap_or_else(|| OptState::new(&sub));
            adamw_update(&mut sub, &gsub, &mut o, cfg.lr, (0.9, 0.999), 1e-8, cfg.weight_decay)?;
            opt = Some(o);
            for (name, t) in sub.iter() {
                *state.params.get_mut(name) = t.clone();
            }
        } else {
            let mut o = opt.take().unwrap_or_else(|| OptState::new(&state.params));
            adamw_update(&mut state.params, &grads, &mut o, cfg.lr, (0.9, 0.999), 1e-8, cfg.weight_decay)?;
            opt = Some(o);
        }
    }
    Ok(losses)
}

/// Run the grounding head over every instance and score IoU per frame.
pub fn eval_grounding(
    state: &ModelState,
    samples: &[Sample],
    vocab: &Vocab,
) -> Result<Vec<GroundingPrediction>> {
    let mut preds = Vec::new();
    for sample in samples {
        for inst in &sample.instances {
            let sentence = inst
                .caption
                .first()
                .ok_or_else(|| Error::SceneConfig("empty caption".into()))?;
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &state.params, false);
            let pred = predict_boxes(&mut tape, &bound, state, sample, sentence, vocab)?;
            let pv = tape.value(pred);
            let mut boxes = Vec::new();
            let mut ious = Vec::new();
            for b in &inst.trajectory {
                let cx = [
                    pv.at(0, 4 * b.t),
                    pv.at(0, 4 * b.t + 1),
                    pv.at(0, 4 * b.t + 2),
                    pv.at(0, 4 * b.t + 3),
                ];
                let target = Rect::from_cxcywh(normalized_target(b, sample.frames.w, sample.frames.h));
                let got = Rect::from_cxcywh(cx);
                ious.push(iou(&got, &target)?);
                boxes.push(cx);
            }
            let score = ious.iter().sum::<f64>() / ious.len() as f64;
            preds.push(GroundingPrediction {
                sample_id: sample.sample_id.clone(),
                instance_id: inst.instance_id,
                boxes,
                ious,
                score,
            });
        }
    }
    if preds.is_empty() {
        return Err(Error::NoInstances);
    }
    Ok(preds)
}

/// Fraction of instances whose mean IoU clears each threshold.
pub fn grounding_metrics(
    preds: &[GroundingPrediction],
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if preds.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = preds.iter().filter(|p| p.score >= t).count();
            (t, hits as f64 / preds.len() as f64)
        })
        .collect())
}

/// Weighted-loss view of a report row, exported for report generation.
pub fn loss_weights_csv(w: &LossWeights) -> String {
    format!(
        "{},{},{},{},{},{}",
        w.vtc, w.vtm, w.mlm, w.vtc_inst, w.vtm_inst, w.mlm_inst
    )
}
