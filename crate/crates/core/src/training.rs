//! Two-stage training driver: masked video modeling, then instance-aware
//! alignment, with AdamW, cosine schedule, checkpointing, and a
//! finite-difference gradient checker.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    cross_attend_pool, crop_instance, encode_text, encode_video_full, encode_video_student,
    encode_video_tokens, extract_patches, embed_patches, fuse, match_prob, patchify,
    teacher_features, Bound, DimConfig, ModelState, ParamSet, Projection, project, VIDEO_PREFIX,
};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss_var, mask_text_tokens, mine_hard_negatives, mine_hard_negatives_masked,
    mlm_loss, rec_loss, total_loss, vtm_loss, LossReport, LossWeights, MlmItem,
};
use crate::masking::{build_mask, importance_scores, select_visible};
use crate::schema::{select_sentence, tokenize, Sample, SentenceSampling, Vocab};
use crate::tape::{Tape, Tensor, Var};

pub const CKPT_MAGIC: &[u8; 4] = b"IAPT";
pub const CKPT_VERSION: u32 = 1;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const LOG_TAU_MIN: f64 = -6.907755278982137; // ln 1e-3
const LOG_TAU_MAX: f64 = 2.302585092994046; // ln 10

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Align,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub dropout: u64,
}

fn default_mlm_ratio() -> f64 {
    0.15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub dims: DimConfig,
    pub rho: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seeds: Seeds,
    pub sentence_mode: SentenceSampling,
    pub checkpoint_every: usize,
    #[serde(default = "default_mlm_ratio")]
    pub mlm_ratio: f64,
    #[serde(default)]
    pub keep_rec_in_align: bool,
    /// Ablation switch: reuse the global temperature for the instance loss.
    #[serde(default)]
    pub shared_inst_temp: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            dims: DimConfig::default(),
            rho: 0.8,
            batch_size: 8,
            epochs: 1,
            lr: 1.5e-4,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            seeds: Seeds { data: 0, init: 1, dropout: 2 },
            sentence_mode: SentenceSampling::Cycle,
            checkpoint_every: 100,
            mlm_ratio: default_mlm_ratio(),
            keep_rec_in_align: false,
            shared_inst_temp: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::BadMaskRatio(self.rho));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.stage == Stage::Align && self.batch_size < 2 {
            return Err(Error::Config("align stage needs batch_size >= 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must be in [0, 1)".into()));
        }
        self.weights.validate()
    }

    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── optimizer ───────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ParamSet) -> OptState {
        OptState { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

fn no_decay(name: &str) -> bool {
    name.starts_with("temp.")
        || name.ends_with(".b")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
}

/// One decoupled-weight-decay Adam step with bias correction. Decay skips
/// temperatures, biases, and layer-norm scales/shifts.
pub fn adamw_update(
    params: &mut ParamSet,
    grads: &ParamSet,
    opt: &mut OptState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.0.iter_mut() {
        let g = grads.get(name);
        if g.shape() != p.shape() {
            return Err(Error::Config(format!(
                "gradient shape {:?} mismatches parameter {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = opt.m.get_mut(name);
        let v = opt.v.get_mut(name);
        let decay = if no_decay(name) { 0.0 } else { weight_decay };
        for k in 0..p.numel() {
            m.data[k] = b1 * m.data[k] + (1.0 - b1) * g.data[k];
            v.data[k] = b2 * v.data[k] + (1.0 - b2) * g.data[k] * g.data[k];
            let mhat = m.data[k] / c1;
            let vhat = v.data[k] / c2;
            p.data[k] -= lr * (mhat / (vhat.sqrt() + eps) + decay * p.data[k]);
        }
    }
    clamp_temperatures(params);
    Ok(())
}

fn clamp_temperatures(params: &mut ParamSet) {
    for name in ["temp.log_tau", "temp.log_tau_inst"] {
        if params.0.contains_key(name) {
            let t = params.get_mut(name);
            t.data[0] = t.data[0].clamp(LOG_TAU_MIN, LOG_TAU_MAX);
        }
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ── stage 1: masked video modeling ──────────────────────────────────

/// Build the reconstruction loss for a batch on an existing tape.
pub fn pretrain_loss(
    tape: &mut Tape,
    student: &Bound,
    teacher: &Bound,
    dims: &DimConfig,
    rho: f64,
    batch: &[Sample],
) -> Result<Var> {
    assert!(!batch.is_empty(), "empty batch");
    let mut acc: Option<Var> = None;
    for sample in batch {
        let (h_t, attn) = teacher_features(tape, teacher, dims, &sample.frames)?;
        let scores = importance_scores(attn.matrix())?;
        let mask = build_mask(&scores, rho)?;
        let raw = extract_patches(&sample.frames, dims.patch)?;
        let visible = select_visible(&raw, &mask)?;
        let tokens = embed_patches(tape, student, dims, &visible);
        let h_s = encode_video_student(tape, student, dims, &tokens);
        let term = rec_loss(tape, h_s.var, h_t.var, &mask.visible)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    let a = acc.unwrap();
    Ok(tape.scale(a, 1.0 / batch.len() as f64))
}

/// One optimizer update on the reconstruction objective.
pub fn pretrain_step(
    state: &mut ModelState,
    opt: &mut OptState,
    batch: &[Sample],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let student = Bound::bind(&mut tape, &state.params, true);
    let teacher = Bound::bind(&mut tape, &state.teacher, false);
    let loss = pretrain_loss(&mut tape, &student, &teacher, &cfg.dims, cfg.rho, batch)?;
    let rec = tape.value(loss).item();
    tape.backward(loss);
    let grads = student.grads(&tape, &state.params);
    adamw_update(&mut state.params, &grads, opt, lr, (BETA1, BETA2), ADAM_EPS, cfg.weight_decay)?;
    let mut report = total_loss(rec, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, &cfg.weights)?;
    report.global_total = 0.0;
    report.inst_total = 0.0;
    report.total = rec;
    Ok(report)
}

// ── stage 2: instance-aware alignment ───────────────────────────────

/// Build the full alignment objective for one batch on an existing tape.
/// Returns the weighted total and the unweighted component values.
#[allow(clippy::too_many_arguments)]
pub fn align_loss(
    tape: &mut Tape,
    bound: &Bound,
    teacher: &Bound,
    cfg: &TrainConfig,
    vocab: &Vocab,
    batch: &[Sample],
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossReport)> {
    let dims = &cfg.dims;
    assert!(batch.len() >= 2, "alignment needs at least 2 samples");
    let pad = vocab.pad_id();

    // per-sample video tokens, pooled embeddings, and caption token ids
    let mut video_tokens = Vec::with_capacity(batch.len());
    let mut pooled = Vec::with_capacity(batch.len());
    let mut text_cls = Vec::with_capacity(batch.len());
    let mut caption_ids = Vec::with_capacity(batch.len());
    for sample in batch {
        let tokens = patchify(tape, bound, dims, &sample.frames)?;
        let (v, pool) = encode_video_full(tape, bound, dims, &tokens);
        let sentence =
            select_sentence(&sample.global_caption, cfg.sentence_mode, epoch, sample.source_id)?;
        let ids = tokenize(sentence, vocab, dims.max_len);
        let enc = encode_text(tape, bound, dims, &ids, pad)?;
        video_tokens.push(v);
        pooled.push(pool);
        text_cls.push(enc.cls);
        caption_ids.push(ids);
    }

    let v_raw = tape.concat_rows(&pooled);
    let t_raw = tape.concat_rows(&text_cls);
    let v_proj = project(tape, bound, Projection::Visual, v_raw)?;
    let t_proj = project(tape, bound, Projection::Text, t_raw)?;

    // global VTC with the learnable temperature
    let neg_log_tau = tape.neg(bound.v("temp.log_tau"));
    let inv_tau = tape.exp(neg_log_tau);
    let vtc = contrastive_loss_var(tape, v_proj, t_proj, inv_tau, None);

    // global VTM on mined hard negatives
    let tau = tape.value(bound.v("temp.log_tau")).item().exp();
    let sim = {
        let tt = tape.transpose(t_proj);
        let s = tape.matmul(v_proj, tt);
        tape.value(s).clone()
    };
    let (neg_text, neg_video) = mine_hard_negatives(&sim, tau, rng)?;
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for (i, sample) in batch.iter().enumerate() {
        let _ = sample;
        let pos = fuse(tape, bound, dims, Some(video_tokens[i].var), &caption_ids[i], pad)?;
        probs.push(match_prob(tape, bound, pos.cls));
        labels.push(1.0);
        let nt = fuse(tape, bound, dims, Some(video_tokens[i].var), &caption_ids[neg_text[i]], pad)?;
        probs.push(match_prob(tape, bound, nt.cls));
        labels.push(0.0);
        let nv = fuse(tape, bound, dims, Some(video_tokens[neg_video[i]].var), &caption_ids[i], pad)?;
        probs.push(match_prob(tape, bound, nv.cls));
        labels.push(0.0);
    }
    let prob_col = tape.concat_rows(&probs);
    let vtm = vtm_loss(tape, prob_col, &labels);

    // global MLM
    let mut items = Vec::new();
    for (i, ids) in caption_ids.iter().enumerate() {
        let (corrupted, positions, targets) = mask_text_tokens(ids, cfg.mlm_ratio, rng, vocab)?;
        let out = fuse(tape, bound, dims, Some(video_tokens[i].var), &corrupted, pad)?;
        items.push(MlmItem { logits: out.vocab_logits, positions, targets });
    }
    let mlm = mlm_loss(tape, &items);

    // instance path
    let mut z_raw = Vec::new();
    let mut s_cls = Vec::new();
    let mut z_ctx = Vec::new(); // cross-attended token sequences for inst MLM
    let mut c_pooled = Vec::new(); // raw pooled crop embeddings for inst VTM
    let mut inst_ids = Vec::new();
    let mut sources = Vec::new();
    for (i, sample) in batch.iter().enumerate() {
        for inst in &sample.instances {
            let crop = crop_instance(sample, inst, (dims.crop_h, dims.crop_w))?;
            let tokens = patchify(tape, bound, dims, &crop)?;
            let (feats, _) = encode_video_tokens(tape, bound, dims, &tokens);
            let c = tape.mean_rows(feats.var);
            let (zt, z) = cross_attend_pool(tape, bound, dims, &feats, video_tokens[i].var);
            let sentence = select_sentence(
                &inst.caption,
                cfg.sentence_mode,
                epoch,
                sample.source_id.wrapping_add(inst.instance_id as u64),
            )?;
            let ids = tokenize(sentence, vocab, dims.max_len);
            let enc = encode_text(tape, bound, dims, &ids, pad)?;
            z_raw.push(z);
            s_cls.push(enc.cls);
            z_ctx.push(zt);
            c_pooled.push(c);
            inst_ids.push(ids);
            sources.push(sample.source_id);
        }
    }

    let (vtc_i, vtm_i, mlm_i) = if z_raw.is_empty() {
        (None, None, None)
    } else {
        let z_cat = tape.concat_rows(&z_raw);
        let s_cat = tape.concat_rows(&s_cls);
        let z_proj = project(tape, bound, Projection::Visual, z_cat)?;
        let s_proj = project(tape, bound, Projection::Text, s_cat)?;
        let temp_name = if cfg.shared_inst_temp { "temp.log_tau" } else { "temp.log_tau_inst" };
        let neg_lt = tape.neg(bound.v(temp_name));
        let inv_tau_i = tape.exp(neg_lt);
        let bias = crate::losses::alpha_bias(&sources);
        let vtc_i = contrastive_loss_var(tape, z_proj, s_proj, inv_tau_i, Some(&bias));

        let tau_i = tape.value(bound.v(temp_name)).item().exp();
        let sim_i = {
            let st = tape.transpose(s_proj);
            let s = tape.matmul(z_proj, st);
            tape.value(s).clone()
        };
        let (nt, nv) = mine_hard_negatives_masked(&sim_i, &sources, tau_i, rng)?;
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for n in 0..sources.len() {
            let pos = fuse(tape, bound, dims, Some(c_pooled[n]), &inst_ids[n], pad)?;
            probs.push(match_prob(tape, bound, pos.cls));
            labels.push(1.0);
            if let Some(j) = nt[n] {
                let f = fuse(tape, bound, dims, Some(c_pooled[n]), &inst_ids[j], pad)?;
                probs.push(match_prob(tape, bound, f.cls));
                labels.push(0.0);
            }
            if let Some(j) = nv[n] {
                let f = fuse(tape, bound, dims, Some(c_pooled[j]), &inst_ids[n], pad)?;
                probs.push(match_prob(tape, bound, f.cls));
                labels.push(0.0);
            }
        }
        let prob_col = tape.concat_rows(&probs);
        let vtm_i = vtm_loss(tape, prob_col, &labels);

        let mut items = Vec::new();
        for n in 0..sources.len() {
            let (corrupted, positions, targets) =
                mask_text_tokens(&inst_ids[n], cfg.mlm_ratio, rng, vocab)?;
            let out = fuse(tape, bound, dims, Some(z_ctx[n]), &corrupted, pad)?;
            items.push(MlmItem { logits: out.vocab_logits, positions, targets });
        }
        let mlm_i = mlm_loss(tape, &items);
        (Some(vtc_i), Some(vtm_i), Some(mlm_i))
    };

    let rec = if cfg.keep_rec_in_align {
        Some(pretrain_loss(tape, bound, teacher, dims, cfg.rho, batch)?)
    } else {
        None
    };

    // weighted composition
    let w = &cfg.weights;
    let mut total = {
        let a = tape.scale(vtc, w.vtc);
        let b = tape.scale(vtm, w.vtm);
        let c = tape.scale(mlm, w.mlm);
        let ab = tape.add(a, b);
        tape.add(ab, c)
    };
    if let (Some(vi), Some(mi), Some(li)) = (vtc_i, vtm_i, mlm_i) {
        let a = tape.scale(vi, w.vtc_inst);
        let b = tape.scale(mi, w.vtm_inst);
        let c = tape.scale(li, w.mlm_inst);
        let ab = tape.add(a, b);
        let abc = tape.add(ab, c);
        total = tape.add(total, abc);
    }
    if let Some(r) = rec {
        total = tape.add(total, r);
    }

    let report = total_loss(
        rec.map(|r| tape.value(r).item()).unwrap_or(0.0),
        tape.value(vtc).item(),
        tape.value(vtm).item(),
        tape.value(mlm).item(),
        vtc_i.map(|v| tape.value(v).item()).unwrap_or(0.0),
        vtm_i.map(|v| tape.value(v).item()).unwrap_or(0.0),
        mlm_i.map(|v| tape.value(v).item()).unwrap_or(0.0),
        w,
    )?;
    Ok((total, report))
}

/// One optimizer update on the alignment objective.
pub fn align_step(
    state: &mut ModelState,
    opt: &mut OptState,
    batch: &[Sample],
    cfg: &TrainConfig,
    vocab: &Vocab,
    epoch: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, &state.params, true);
    let teacher = Bound::bind(&mut tape, &state.teacher, false);
    let (total, report) = align_loss(&mut tape, &bound, &teacher, cfg, vocab, batch, epoch, rng)?;
    tape.backward(total);
    let grads = bound.grads(&tape, &state.params);
    adamw_update(&mut state.params, &grads, opt, lr, (BETA1, BETA2), ADAM_EPS, cfg.weight_decay)?;
    Ok(report)
}

// ── driver ──────────────────────────────────────────────────────────

fn epoch_batches(n: usize, batch_size: usize, epoch: usize, seed: u64, min_batch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).filter(|c| c.len() >= min_batch).map(|c| c.to_vec()).collect()
}

/// Run every epoch of the configured stage; `on_step` observes each report
/// (for step logs and checkpoint cadence).
pub fn run_training<F>(
    state: &mut ModelState,
    opt: &mut OptState,
    samples: &[Sample],
    cfg: &TrainConfig,
    vocab: &Vocab,
    mut on_step: F,
) -> Result<Vec<LossReport>>
where
    F: FnMut(usize, &LossReport, &ModelState, &OptState),
{
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let min_batch = if cfg.stage == Stage::Align { 2 } else { 1 };
    let per_epoch = epoch_batches(samples.len(), cfg.batch_size, 0, cfg.seeds.data, min_batch).len();
    let total_steps = (per_epoch * cfg.epochs).max(1);
    let warmup = (cfg.warmup_frac * total_steps as f64).round() as usize;
    let mut reports = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for batch_idx in epoch_batches(samples.len(), cfg.batch_size, epoch, cfg.seeds.data, min_batch) {
            let batch: Vec<Sample> = batch_idx.iter().map(|&i| samples[i].clone()).collect();
            let lr = cosine_lr(step, total_steps, cfg.lr, warmup);
            let report = match cfg.stage {
                Stage::Pretrain => pretrain_step(state, opt, &batch, cfg, lr)?,
                Stage::Align => {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        cfg.seeds.dropout.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(step as u64 + 1)),
                    );
                    align_step(state, opt, &batch, cfg, vocab, epoch, lr, &mut rng)?
                }
            };
            step += 1;
            on_step(step, &report, state, opt);
            reports.push(report);
        }
    }
    Ok(reports)
}

// ── checkpointing ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    dtype: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dims: DimConfig,
    step: u64,
    has_opt: bool,
    opt_step: u64,
    tensors: IndexMap<String, TensorMeta>,
}

fn push_tensors(
    tensors: &mut IndexMap<String, TensorMeta>,
    payload: &mut Vec<f64>,
    prefix: &str,
    set: &ParamSet,
) {
    for (name, t) in set.iter() {
        tensors.insert(
            format!("{prefix}{name}"),
            TensorMeta { dtype: "f64".into(), shape: [t.rows, t.cols], offset: payload.len() },
        );
        payload.extend_from_slice(&t.data);
    }
}

/// Binary checkpoint: magic, version, manifest length, JSON manifest, then
/// little-endian f64 payload.
pub fn save_checkpoint(
    state: &ModelState,
    opt: Option<&OptState>,
    step: u64,
    path: &Path,
) -> Result<()> {
    let mut tensors = IndexMap::new();
    let mut payload: Vec<f64> = Vec::new();
    push_tensors(&mut tensors, &mut payload, "", &state.params);
    push_tensors(&mut tensors, &mut payload, "teacher.", &state.teacher);
    if let Some(o) = opt {
        push_tensors(&mut tensors, &mut payload, "opt.m.", &o.m);
        push_tensors(&mut tensors, &mut payload, "opt.v.", &o.v);
    }
    let manifest = Manifest {
        version: CKPT_VERSION,
        dims: state.config.clone(),
        step,
        has_opt: opt.is_some(),
        opt_step: opt.map(|o| o.step).unwrap_or(0),
        tensors,
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(16 + mjson.len() + payload.len() * 8);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&mjson);
    for v in &payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_manifest(bytes: &[u8], path: &Path) -> Result<(Manifest, usize)> {
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 {
        return Err(bad("file too short".into()));
    }
    if &bytes[0..4] != CKPT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(bad("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| bad(format!("manifest parse: {e}")))?;
    Ok((manifest, 16 + mlen))
}

fn read_tensor(
    bytes: &[u8],
    payload_start: usize,
    meta: &TensorMeta,
    path: &Path,
) -> Result<Tensor> {
    let n = meta.shape[0] * meta.shape[1];
    let start = payload_start + meta.offset * 8;
    let end = start + n * 8;
    if bytes.len() < end {
        return Err(Error::Checkpoint(format!("{}: truncated payload", path.display())));
    }
    let data = bytes[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(meta.shape[0], meta.shape[1], data))
}

fn fill_set(
    set: &mut ParamSet,
    prefix: &str,
    manifest: &Manifest,
    bytes: &[u8],
    payload_start: usize,
    path: &Path,
) -> Result<()> {
    let mut missing = Vec::new();
    let names: Vec<String> = set.names().cloned().collect();
    for name in names {
        let key = format!("{prefix}{name}");
        match manifest.tensors.get(&key) {
            None => missing.push(key),
            Some(meta) => {
                *set.get_mut(&name) = read_tensor(bytes, payload_start, meta, path)?;
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: missing tensors: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, Option<OptState>, u64)> {
    let bytes = fs::read(path)?;
    let (manifest, payload_start) = read_manifest(&bytes, path)?;
    let mut state = ModelState::init(manifest.dims.clone(), 0);
    fill_set(&mut state.params, "", &manifest, &bytes, payload_start, path)?;
    fill_set(&mut state.teacher, "teacher.", &manifest, &bytes, payload_start, path)?;
    let opt = if manifest.has_opt {
        let mut o = OptState::new(&state.params);
        fill_set(&mut o.m, "opt.m.", &manifest, &bytes, payload_start, path)?;
        fill_set(&mut o.v, "opt.v.", &manifest, &bytes, payload_start, path)?;
        o.step = manifest.opt_step;
        Some(o)
    } else {
        None
    };
    Ok((state, opt, manifest.step))
}

/// Stage hand-off: copy only `video_encoder.*` tensors from a stage-1
/// checkpoint into an otherwise freshly initialized state.
pub fn handoff_video_encoder(path: &Path, state: &mut ModelState) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingHandoff(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let (manifest, payload_start) = read_manifest(&bytes, path)?;
    let names: Vec<String> = state
        .params
        .names()
        .filter(|n| n.starts_with(VIDEO_PREFIX))
        .cloned()
        .collect();
    let mut missing = Vec::new();
    for name in &names {
        match manifest.tensors.get(name) {
            None => missing.push(name.clone()),
            Some(meta) => {
                *state.params.get_mut(name) = read_tensor(&bytes, payload_start, meta, path)?;
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: missing tensors: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(())
}

// ── gradient checking ───────────────────────────────────────────────

/// Max relative error between analytic gradients and central differences
/// over a random subset of at least `probes` coordinates per tensor (all
/// coordinates for small tensors).
pub fn grad_check<F>(params: &ParamSet, probes: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    grad_check_full(params, probes, seed, 1.0, 1e-5, f)
}

/// Variant with a caller-chosen step. Composed objectives whose component
/// gradients cancel amplify h^2 truncation; a smaller step recovers the
/// lost digits while roundoff stays far below the comparison floor.
pub fn grad_check_with_step<F>(params: &ParamSet, probes: usize, seed: u64, h: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    grad_check_full(params, probes, seed, 1.0, h, f)
}

/// Internal variant that scales analytic gradients, used to verify the
/// checker detects corrupted gradients.
pub fn grad_check_scaled<F>(params: &ParamSet, probes: usize, seed: u64, grad_scale: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    grad_check_full(params, probes, seed, grad_scale, 1e-5, f)
}

fn grad_check_full<F>(params: &ParamSet, probes: usize, seed: u64, grad_scale: f64, h: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, params, true);
    let loss = f(&mut tape, &bound);
    tape.backward(loss);
    let grads = bound.grads(&tape, params);

    let eval = |p: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, p, true);
        let l = f(&mut tape, &bound);
        tape.value(l).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut max_rel: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let numel = params.get(name).numel();
        let coords: Vec<usize> = if numel <= probes {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            all.shuffle(&mut rng);
            all.truncate(probes);
            all
        };
        for k in coords {
            let mut up = params.clone();
            up.get_mut(name).data[k] += h;
            let mut dn = params.clone();
            dn.get_mut(name).data[k] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let an = grads.get(name).data[k] * grad_scale;
            // the floor absorbs central-difference truncation noise on
            // near-zero coordinates (sharpened by exp(-log tau) chains);
            // coordinates below it are compared absolutely
            let denom = fd.abs().max(an.abs()).max(1e-3);
            max_rel = max_rel.max((fd - an).abs() / denom);
        }
    }
    max_rel
}
