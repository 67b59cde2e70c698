//! Model state and forward passes: student/teacher video encoders, text
//! encoder, projection heads, the shared fusion transformer with matching and
//! MLM heads, and the crop / cross-attention pooling path.

mod nn;

pub use nn::{attention, block, init_attention, init_block, init_linear, init_ln, layer_norm, linear, Bound, ParamSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::AttentionMap;
use crate::schema::{FrameStack, InstanceAnnotation, Sample, Vocab};
use crate::tape::{transpose_raw, Tape, Tensor, Var};

/// Fixed seed for the frozen teacher's random initialization.
pub const TEACHER_SEED: u64 = 0x1ead_cafe;

/// Prefix of every video-encoder tensor; the stage-1 to stage-2 hand-off
/// transfers exactly these.
pub const VIDEO_PREFIX: &str = "video_encoder.";

const ATTN_MASK: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimConfig {
    pub d: usize,
    pub d_proj: usize,
    pub enc_layers: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub frames: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for DimConfig {
    fn default() -> Self {
        DimConfig {
            d: 64,
            d_proj: 32,
            enc_layers: 2,
            fusion_layers: 2,
            heads: 4,
            patch: 8,
            frames: 4,
            frame_h: 64,
            frame_w: 64,
            crop_h: 32,
            crop_w: 32,
            vocab_size: Vocab::builtin().len(),
            max_len: 16,
        }
    }
}

impl DimConfig {
    /// Tiny double-precision configuration for gradient checks.
    pub fn micro() -> Self {
        DimConfig {
            d: 8,
            d_proj: 4,
            enc_layers: 1,
            fusion_layers: 1,
            heads: 2,
            patch: 8,
            frames: 2,
            frame_h: 16,
            frame_w: 16,
            crop_h: 8,
            crop_w: 8,
            vocab_size: Vocab::builtin().len(),
            max_len: 8,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.frame_h / self.patch, self.frame_w / self.patch)
    }

    pub fn scene_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        self.frames * gh * gw
    }
}

/// (frame, patch row, patch col) of one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenPos {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// Value-level token sequence: L x d features plus positional metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq {
    pub data: Tensor,
    pub positions: Vec<TokenPos>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> TokenSeq {
        let mut data = Vec::with_capacity(idx.len() * self.data.cols);
        for &i in idx {
            data.extend_from_slice(self.data.row(i));
        }
        TokenSeq {
            data: Tensor::new(idx.len(), self.data.cols, data),
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
        }
    }
}

/// Tape-level token sequence.
#[derive(Clone, Debug)]
pub struct TokenVar {
    pub var: Var,
    pub positions: Vec<TokenPos>,
}

impl TokenVar {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// All learnable parameters plus the frozen teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: DimConfig,
    pub params: ParamSet,
    pub teacher: ParamSet,
}

fn init_video_encoder(ps: &mut ParamSet, rng: &mut ChaCha8Rng, cfg: &DimConfig) {
    let d = cfg.d;
    init_linear(ps, rng, "video_encoder.patch", cfg.patch * cfg.patch * 3, d);
    let l = cfg.scene_tokens();
    ps.insert(
        "video_encoder.pos",
        Tensor::new(l, d, (0..l * d).map(|_| rand::Rng::gen_range(rng, -0.02..0.02)).collect()),
    );
    for i in 0..cfg.enc_layers {
        init_block(ps, rng, &format!("video_encoder.block{i}"), d, false);
    }
}

impl ModelState {
    pub fn init(config: DimConfig, init_seed: u64) -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let d = config.d;
        let mut ps = ParamSet::default();
        init_video_encoder(&mut ps, &mut rng, &config);

        ps.insert(
            "text_encoder.embed",
            Tensor::new(
                config.vocab_size,
                d,
                (0..config.vocab_size * d).map(|_| rand::Rng::gen_range(&mut rng, -0.1..0.1)).collect(),
            ),
        );
        ps.insert(
            "text_encoder.pos",
            Tensor::new(
                config.max_len,
                d,
                (0..config.max_len * d).map(|_| rand::Rng::gen_range(&mut rng, -0.02..0.02)).collect(),
            ),
        );
        for i in 0..config.enc_layers {
            init_block(&mut ps, &mut rng, &format!("text_encoder.block{i}"), d, false);
        }
        for i in 0..config.fusion_layers {
            init_block(&mut ps, &mut rng, &format!("fusion.block{i}"), d, true);
        }
        init_attention(&mut ps, &mut rng, "xpool", d);
        // linear projections without bias, per the shared-space mapping
        let b = (6.0 / (d + config.d_proj) as f64).sqrt();
        ps.insert(
            "proj.visual",
            Tensor::new(d, config.d_proj, (0..d * config.d_proj).map(|_| rand::Rng::gen_range(&mut rng, -b..b)).collect()),
        );
        ps.insert(
            "proj.text",
            Tensor::new(d, config.d_proj, (0..d * config.d_proj).map(|_| rand::Rng::gen_range(&mut rng, -b..b)).collect()),
        );
        init_linear(&mut ps, &mut rng, "match_head", d, 2);
        init_linear(&mut ps, &mut rng, "mlm_head", d, config.vocab_size);
        init_linear(&mut ps, &mut rng, "ground_head.l1", d, d);
        init_linear(&mut ps, &mut rng, "ground_head.l2", d, d);
        init_linear(&mut ps, &mut rng, "ground_head.l3", d, 4 * config.frames);
        ps.insert("temp.log_tau", Tensor::scalar(0.07f64.ln()));
        ps.insert("temp.log_tau_inst", Tensor::scalar(0.07f64.ln()));

        let mut teacher = ParamSet::default();
        let mut trng = ChaCha8Rng::seed_from_u64(TEACHER_SEED);
        init_video_encoder(&mut teacher, &mut trng, &config);

        ModelState { config, params: ps, teacher }
    }

    /// Make the student video encoder an exact copy of the frozen teacher.
    pub fn copy_teacher_into_student(&mut self) {
        for (name, t) in self.teacher.clone().iter() {
            *self.params.get_mut(name) = t.clone();
        }
    }

    pub fn tau(&self) -> f64 {
        self.params.get("temp.log_tau").item().exp()
    }

    pub fn tau_inst(&self) -> f64 {
        self.params.get("temp.log_tau_inst").item().exp()
    }
}

// ── video path ──────────────────────────────────────────────────────

/// Flatten frames into L x (P*P*3) raw patch rows with positional metadata.
pub fn extract_patches(frames: &FrameStack, patch: usize) -> Result<TokenSeq> {
    if frames.h % patch != 0 || frames.w % patch != 0 {
        return Err(Error::BadPatchSize { h: frames.h, w: frames.w, p: patch });
    }
    let (gh, gw) = (frames.h / patch, frames.w / patch);
    let l = frames.t * gh * gw;
    let width = patch * patch * 3;
    let mut data = Vec::with_capacity(l * width);
    let mut positions = Vec::with_capacity(l);
    for t in 0..frames.t {
        for row in 0..gh {
            for col in 0..gw {
                for py in 0..patch {
                    for px in 0..patch {
                        let p = frames.pixel(t, row * patch + py, col * patch + px);
                        data.extend_from_slice(&p);
                    }
                }
                positions.push(TokenPos { frame: t, row, col });
            }
        }
    }
    Ok(TokenSeq { data: Tensor::new(l, width, data), positions })
}

/// Linear patch projection plus learned positional embedding indexed by
/// (frame, row, col) on the scene grid.
pub fn embed_patches(tape: &mut Tape, bound: &Bound, cfg: &DimConfig, raw: &TokenSeq) -> TokenVar {
    let (gh, gw) = cfg.grid();
    let x = tape.constant(raw.data.clone());
    let proj = linear(tape, bound, "video_encoder.patch", x);
    let idx: Vec<usize> =
        raw.positions.iter().map(|p| p.frame * gh * gw + p.row * gw + p.col).collect();
    let pos = tape.gather_rows(bound.v("video_encoder.pos"), &idx);
    let var = tape.add(proj, pos);
    TokenVar { var, positions: raw.positions.clone() }
}

/// Full patchify operation: raw patches then embedding.
pub fn patchify(tape: &mut Tape, bound: &Bound, cfg: &DimConfig, frames: &FrameStack) -> Result<TokenVar> {
    let raw = extract_patches(frames, cfg.patch)?;
    Ok(embed_patches(tape, bound, cfg, &raw))
}

/// Run the encoder blocks over a (possibly subsetted) token sequence.
/// Returns per-token features and the final layer's per-head attention vars.
pub fn encode_video_tokens(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &DimConfig,
    tokens: &TokenVar,
) -> (TokenVar, Vec<Var>) {
    let mut x = tokens.var;
    let mut last_probs = Vec::new();
    for i in 0..cfg.enc_layers {
        let (y, probs) = block(tape, bound, &format!("video_encoder.block{i}"), x, cfg.heads, None, None);
        x = y;
        last_probs = probs;
    }
    (TokenVar { var: x, positions: tokens.positions.clone() }, last_probs)
}

/// Encode all tokens and mean-pool.
pub fn encode_video_full(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &DimConfig,
    tokens: &TokenVar,
) -> (TokenVar, Var) {
    let (v, _) = encode_video_tokens(tape, bound, cfg, tokens);
    let pooled = tape.mean_rows(v.var);
    (v, pooled)
}

/// Student pass over visible tokens only (attention stays within the subset).
pub fn encode_video_student(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &DimConfig,
    visible: &TokenVar,
) -> TokenVar {
    encode_video_tokens(tape, bound, cfg, visible).0
}

/// Frozen-teacher features over the full token set, plus the receiver-indexed
/// attention map (final layer, averaged over heads, transposed so columns are
/// outgoing distributions).
pub fn teacher_features(
    tape: &mut Tape,
    teacher: &Bound,
    cfg: &DimConfig,
    frames: &FrameStack,
) -> Result<(TokenVar, AttentionMap)> {
    let tokens = patchify(tape, teacher, cfg, frames)?;
    let (feats, probs) = encode_video_tokens(tape, teacher, cfg, &tokens);
    let l = tokens.len();
    let mut avg = Tensor::zeros(l, l);
    for p in &probs {
        let t = tape.value(*p);
        for (o, v) in avg.data.iter_mut().zip(&t.data) {
            *o += v / probs.len() as f64;
        }
    }
    let map = AttentionMap::new(transpose_raw(&avg))?;
    Ok((feats, map))
}

// ── text path ───────────────────────────────────────────────────────

pub struct TextEnc {
    /// L_t x d hidden states.
    pub tokens: Var,
    /// Hidden state at position 0 ([CLS]).
    pub cls: Var,
    /// Additive self-attention bias masking [PAD] keys.
    pub pad_bias: Tensor,
    pub ids: Vec<usize>,
}

fn pad_bias(ids: &[usize], pad_id: usize) -> Tensor {
    let l = ids.len();
    let mut b = Tensor::zeros(l, l);
    for k in 0..l {
        if ids[k] == pad_id {
            for q in 0..l {
                *b.at_mut(q, k) = ATTN_MASK;
            }
        }
    }
    b
}

pub fn encode_text(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &DimConfig,
    ids: &[usize],
    pad_id: usize,
) -> Result<TextEnc> {
    for &id in ids {
        if id >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab_size });
        }
    }
    assert!(ids.len() <= cfg.max_len, "sentence longer than max_len");
    let emb = tape.gather_rows(bound.v("text_encoder.embed"), ids);
    let pos_idx: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.gather_rows(bound.v("text_encoder.pos"), &pos_idx);
    let mut x = tape.add(emb, pos);
    let bias = pad_bias(ids, pad_id);
    for i in 0..cfg.enc_layers {
        let (y, _) =
            block(tape, bound, &format!("text_encoder.block{i}"), x, cfg.heads, Some(&bias), None);
        x = y;
    }
    let cls = tape.gather_rows(x, &[0]);
    Ok(TextEnc { tokens: x, cls, pad_bias: bias, ids: ids.to_vec() })
}

// ── shared space ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Visual,
    Text,
}

/// Project pooled vectors into the shared space and L2-normalize rows.
pub fn project(tape: &mut Tape, bound: &Bound, which: Projection, raw: Var) -> Result<Var> {
    let w = match which {
        Projection::Visual => bound.v("proj.visual"),
        Projection::Text => bound.v("proj.text"),
    };
    let y = tape.matmul(raw, w);
    let t = tape.value(y);
    for r in 0..t.rows {
        let n: f64 = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-300 {
            return Err(Error::ZeroNorm);
        }
    }
    Ok(tape.l2norm_rows(y))
}

// ── instance path ───────────────────────────────────────────────────

/// Extract the annotated box region of each trajectory frame and resize to
/// (crop_h, crop_w) with bilinear interpolation. Output frame count equals
/// the trajectory length; temporal indices re-base to 0.
pub fn crop_instance(
    sample: &Sample,
    instance: &InstanceAnnotation,
    crop_hw: (usize, usize),
) -> Result<FrameStack> {
    let (ch, cw) = crop_hw;
    let mut out = FrameStack::black(instance.trajectory.len(), ch, cw);
    for (ti, b) in instance.trajectory.iter().enumerate() {
        let x0 = (b.x as usize).min(sample.frames.w);
        let y0 = (b.y as usize).min(sample.frames.h);
        let x1 = ((b.x + b.w) as usize).min(sample.frames.w);
        let y1 = ((b.y + b.h) as usize).min(sample.frames.h);
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::DegenerateBox(format!(
                "instance {} at t={}", instance.instance_id, b.t
            )));
        }
        let (bh, bw) = (y1 - y0, x1 - x0);
        for i in 0..ch {
            for j in 0..cw {
                let sy = (i as f64 + 0.5) * bh as f64 / ch as f64 - 0.5;
                let sx = (j as f64 + 0.5) * bw as f64 / cw as f64 - 0.5;
                let fy = sy.floor();
                let fx = sx.floor();
                let (wy, wx) = (sy - fy, sx - fx);
                let clampy = |v: f64| (v.max(0.0) as usize).min(bh - 1);
                let clampx = |v: f64| (v.max(0.0) as usize).min(bw - 1);
                let (y_a, y_b) = (clampy(fy), clampy(fy + 1.0));
                let (x_a, x_b) = (clampx(fx), clampx(fx + 1.0));
                let mut rgb = [0.0; 3];
                for c in 0..3 {
                    let p00 = sample.frames.pixel(b.t, y0 + y_a, x0 + x_a)[c];
                    let p01 = sample.frames.pixel(b.t, y0 + y_a, x0 + x_b)[c];
                    let p10 = sample.frames.pixel(b.t, y0 + y_b, x0 + x_a)[c];
                    let p11 = sample.frames.pixel(b.t, y0 + y_b, x0 + x_b)[c];
                    rgb[c] = p00 * (1.0 - wy) * (1.0 - wx)
                        + p01 * (1.0 - wy) * wx
                        + p10 * wy * (1.0 - wx)
                        + p11 * wy * wx;
                }
                out.set_pixel(ti, i, j, rgb);
            }
        }
    }
    Ok(out)
}

/// Patchify a crop. Positions index the scene table with re-based frames.
pub fn patchify_crop(tape: &mut Tape, bound: &Bound, cfg: &DimConfig, crop: &FrameStack) -> Result<TokenVar> {
    patchify(tape, bound, cfg, crop)
}

/// One residual cross-attention layer injecting scene context into crop
/// tokens, then mean-pool: queries from the crop, keys/values from the scene.
pub fn cross_attend_pool(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &DimConfig,
    crop_tokens: &TokenVar,
    scene_tokens: Var,
) -> (Var, Var) {
    let (out, _) = attention(tape, bound, "xpool", crop_tokens.var, scene_tokens, cfg.heads, None);
    let z_tokens = tape.add(crop_tokens.var, out);
    let z = tape.mean_rows(z_tokens);
    (z_tokens, z)
}

// ── fusion ──────────────────────────────────────────────────────────

pub struct FuseOut {
    /// Fused hidden state at the [CLS] position.
    pub cls: Var,
    /// Vocab logits at every text position.
    pub vocab_logits: Var,
}

/// The shared fusion transformer: text tokens self-attend (with padding
/// mask) and cross-attend to the visual tokens; `visual = None` runs the
/// same stack text-only.
pub fn fuse(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &DimConfig,
    visual: Option<Var>,
    ids: &[usize],
    pad_id: usize,
) -> Result<FuseOut> {
    let text = encode_text(tape, bound, cfg, ids, pad_id)?;
    let mut x = text.tokens;
    for i in 0..cfg.fusion_layers {
        let (y, _) = block(
            tape,
            bound,
            &format!("fusion.block{i}"),
            x,
            cfg.heads,
            Some(&text.pad_bias),
            visual,
        );
        x = y;
    }
    let cls = tape.gather_rows(x, &[0]);
    let vocab_logits = linear(tape, bound, "mlm_head", x);
    Ok(FuseOut { cls, vocab_logits })
}

/// Matching-head positive-pair probability from a fused [CLS] vector.
pub fn match_prob(tape: &mut Tape, bound: &Bound, cls: Var) -> Var {
    let logits = linear(tape, bound, "match_head", cls);
    let p = tape.softmax_rows(logits);
    tape.slice_cols(p, 1, 1)
}

/// 3-layer MLP regression head: fused [CLS] to 4 * frames raw box outputs.
pub fn grounding_forward(tape: &mut Tape, bound: &Bound, cls: Var) -> Var {
    let h1 = linear(tape, bound, "ground_head.l1", cls);
    let a1 = tape.silu(h1);
    let h2 = linear(tape, bound, "ground_head.l2", a1);
    let a2 = tape.silu(h2);
    linear(tape, bound, "ground_head.l3", a2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{generate_scene, render_sample, tokenize, GenConfig};

    fn micro_state() -> ModelState {
        ModelState::init(DimConfig::micro(), 7)
    }

    fn micro_frames(cfg: &DimConfig) -> FrameStack {
        let mut f = FrameStack::black(cfg.frames, cfg.frame_h, cfg.frame_w);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = ((i % 97) as f64) / 97.0;
        }
        f
    }

    #[test]
    fn patch_count_arithmetic() {
        let f = FrameStack::black(1, 32, 32);
        assert_eq!(extract_patches(&f, 8).unwrap().len(), 16);
        let f = FrameStack::black(8, 64, 64);
        assert_eq!(extract_patches(&f, 8).unwrap().len(), 512);
        assert!(extract_patches(&FrameStack::black(1, 30, 32), 8).is_err());
    }

    #[test]
    fn zero_frames_embed_to_positional_rows() {
        let state = micro_state();
        let cfg = &state.config;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let frames = FrameStack::black(cfg.frames, cfg.frame_h, cfg.frame_w);
        let tokens = patchify(&mut tape, &bound, cfg, &frames).unwrap();
        // patch bias is zero-initialized, so tokens equal the pos embedding
        let pos = state.params.get("video_encoder.pos");
        let got = tape.value(tokens.var);
        for (r, p) in tokens.positions.iter().enumerate() {
            let (gh, gw) = cfg.grid();
            let idx = p.frame * gh * gw + p.row * gw + p.col;
            assert_eq!(got.row(r), pos.row(idx));
        }
    }

    #[test]
    fn zero_residual_encoder_is_identity_and_pool_is_mean() {
        let mut state = micro_state();
        let cfg = state.config.clone();
        let d = cfg.d;
        for i in 0..cfg.enc_layers {
            *state.params.get_mut(&format!("video_encoder.block{i}.attn.o.w")) = Tensor::zeros(d, d);
            *state.params.get_mut(&format!("video_encoder.block{i}.mlp2.w")) = Tensor::zeros(2 * d, d);
        }
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let tokens = patchify(&mut tape, &bound, &cfg, &micro_frames(&cfg)).unwrap();
        let (v, pooled) = encode_video_full(&mut tape, &bound, &cfg, &tokens);
        assert_eq!(tape.value(v.var), tape.value(tokens.var));
        let input = tape.value(tokens.var).clone();
        let got = tape.value(pooled);
        for c in 0..d {
            let mean: f64 =
                (0..input.rows).map(|r| input.at(r, c)).sum::<f64>() / input.rows as f64;
            assert!((got.at(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_commutes_with_token_permutation() {
        let state = micro_state();
        let cfg = &state.config;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let raw = extract_patches(&micro_frames(cfg), cfg.patch).unwrap();
        let perm: Vec<usize> = (0..raw.len()).rev().collect();
        let tokens = embed_patches(&mut tape, &bound, cfg, &raw);
        let permuted = embed_patches(&mut tape, &bound, cfg, &raw.select(&perm));
        let (_, p1) = encode_video_full(&mut tape, &bound, cfg, &tokens);
        let (_, p2) = encode_video_full(&mut tape, &bound, cfg, &permuted);
        let (a, b) = (tape.value(p1), tape.value(p2));
        for c in 0..cfg.d {
            assert!((a.at(0, c) - b.at(0, c)).abs() < 1e-9, "col {c}");
        }
    }

    #[test]
    fn teacher_is_deterministic() {
        let state = micro_state();
        let cfg = &state.config;
        let frames = micro_frames(cfg);
        let run = || {
            let mut tape = Tape::new();
            let teacher = Bound::bind(&mut tape, &state.teacher, false);
            let (f, a) = teacher_features(&mut tape, &teacher, cfg, &frames).unwrap();
            (tape.value(f.var).clone(), a.matrix().clone())
        };
        let (f1, a1) = run();
        let (f2, a2) = run();
        assert_eq!(f1, f2);
        assert_eq!(a1, a2);
    }

    #[test]
    fn teacher_single_token_attention_is_one() {
        let mut cfg = DimConfig::micro();
        cfg.frames = 1;
        cfg.frame_h = 8;
        cfg.frame_w = 8;
        let state = ModelState::init(cfg.clone(), 3);
        let mut tape = Tape::new();
        let teacher = Bound::bind(&mut tape, &state.teacher, false);
        let frames = FrameStack::black(1, 8, 8);
        let (_, a) = teacher_features(&mut tape, &teacher, &cfg, &frames).unwrap();
        assert_eq!(a.matrix().data, vec![1.0]);
    }

    #[test]
    fn teacher_features_are_permutation_equivariant() {
        let state = micro_state();
        let cfg = &state.config;
        let raw = extract_patches(&micro_frames(cfg), cfg.patch).unwrap();
        let perm: Vec<usize> = (0..raw.len()).rev().collect();
        let mut tape = Tape::new();
        let teacher = Bound::bind(&mut tape, &state.teacher, false);
        let t1 = embed_patches(&mut tape, &teacher, cfg, &raw);
        let t2 = embed_patches(&mut tape, &teacher, cfg, &raw.select(&perm));
        let (f1, _) = encode_video_tokens(&mut tape, &teacher, cfg, &t1);
        let (f2, _) = encode_video_tokens(&mut tape, &teacher, cfg, &t2);
        let (v1, v2) = (tape.value(f1.var), tape.value(f2.var));
        for (out_row, &src) in perm.iter().enumerate() {
            for c in 0..cfg.d {
                assert!((v2.at(out_row, c) - v1.at(src, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn text_cls_ignores_padding() {
        let state = micro_state();
        let cfg = &state.config;
        let vocab = Vocab::builtin();
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let short = tokenize("", &vocab, 4);
        let long = tokenize("", &vocab, cfg.max_len);
        let a = encode_text(&mut tape, &bound, cfg, &short, vocab.pad_id()).unwrap();
        let b = encode_text(&mut tape, &bound, cfg, &long, vocab.pad_id()).unwrap();
        let (ca, cb) = (tape.value(a.cls).clone(), tape.value(b.cls).clone());
        for c in 0..cfg.d {
            assert!((ca.at(0, c) - cb.at(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_sentences_identical_cls_and_swap_changes_tokens() {
        let state = micro_state();
        let cfg = &state.config;
        let vocab = Vocab::builtin();
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let ids = tokenize("red circle moves right", &vocab, cfg.max_len);
        let a = encode_text(&mut tape, &bound, cfg, &ids, vocab.pad_id()).unwrap();
        let b = encode_text(&mut tape, &bound, cfg, &ids, vocab.pad_id()).unwrap();
        assert_eq!(tape.value(a.cls), tape.value(b.cls));
        let mut swapped = ids.clone();
        swapped.swap(1, 2);
        let c = encode_text(&mut tape, &bound, cfg, &swapped, vocab.pad_id()).unwrap();
        let (ta, tc) = (tape.value(a.tokens), tape.value(c.tokens));
        assert_ne!(ta.row(1), tc.row(1));
        assert_ne!(ta.row(2), tc.row(2));
    }

    #[test]
    fn text_rejects_out_of_range_ids() {
        let state = micro_state();
        let cfg = &state.config;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        assert!(encode_text(&mut tape, &bound, cfg, &[0, cfg.vocab_size], 2).is_err());
    }

    #[test]
    fn projection_normalizes_and_is_scale_invariant() {
        let mut state = micro_state();
        let cfg = state.config.clone();
        // square identity projection
        let mut eye = Tensor::zeros(cfg.d, cfg.d_proj);
        for i in 0..cfg.d_proj {
            *eye.at_mut(i, i) = 1.0;
        }
        *state.params.get_mut("proj.visual") = eye;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let mut raw = vec![0.0; cfg.d];
        raw[0] = 3.0;
        raw[1] = 4.0;
        let x = tape.constant(Tensor::new(1, cfg.d, raw.clone()));
        let y = project(&mut tape, &bound, Projection::Visual, x).unwrap();
        assert!((tape.value(y).at(0, 0) - 0.6).abs() < 1e-12);
        assert!((tape.value(y).at(0, 1) - 0.8).abs() < 1e-12);
        // scaling the input leaves the output unchanged
        let xs = tape.constant(Tensor::new(1, cfg.d, raw.iter().map(|v| v * 7.0).collect()));
        let ys = project(&mut tape, &bound, Projection::Visual, xs).unwrap();
        assert_eq!(tape.value(y), tape.value(ys));
    }

    #[test]
    fn projection_rows_are_unit_norm() {
        let state = micro_state();
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let x = tape.constant(Tensor::new(5, state.config.d, (0..5 * state.config.d).map(|i| (i as f64).sin()).collect()));
        let y = project(&mut tape, &bound, Projection::Text, x).unwrap();
        let t = tape.value(y);
        for r in 0..t.rows {
            let n: f64 = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn crop_identity_and_frame_count() {
        let cfg = GenConfig { frames: 8, ..GenConfig::default() };
        let sample = render_sample(&generate_scene(5, &cfg).unwrap());
        // full-frame box, crop at native size = identity
        let full = InstanceAnnotation {
            instance_id: 99,
            caption: vec!["x".into()],
            trajectory: vec![crate::schema::Box { t: 0, x: 0, y: 0, w: 64, h: 64 }],
        };
        let crop = crop_instance(&sample, &full, (64, 64)).unwrap();
        assert_eq!(crop.t, 1);
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(crop.pixel(0, y, x), sample.frames.pixel(0, y, x));
            }
        }
        // partial trajectory keeps only its frames
        let partial = InstanceAnnotation {
            instance_id: 98,
            caption: vec!["x".into()],
            trajectory: vec![
                crate::schema::Box { t: 2, x: 8, y: 8, w: 16, h: 16 },
                crate::schema::Box { t: 3, x: 8, y: 8, w: 16, h: 16 },
            ],
        };
        assert_eq!(crop_instance(&sample, &partial, (8, 8)).unwrap().t, 2);
    }

    #[test]
    fn downscaled_solid_region_stays_solid() {
        let mut sample = render_sample(&generate_scene(5, &GenConfig::default()).unwrap());
        for y in 16..32 {
            for x in 16..32 {
                sample.frames.set_pixel(0, y, x, [0.25, 0.5, 0.75]);
            }
        }
        let inst = InstanceAnnotation {
            instance_id: 1,
            caption: vec!["x".into()],
            trajectory: vec![crate::schema::Box { t: 0, x: 16, y: 16, w: 16, h: 16 }],
        };
        let crop = crop_instance(&sample, &inst, (8, 8)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let p = crop.pixel(0, y, x);
                assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12 && (p[2] - 0.75).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_box_is_an_error() {
        let sample = render_sample(&generate_scene(5, &GenConfig::default()).unwrap());
        let inst = InstanceAnnotation {
            instance_id: 1,
            caption: vec!["x".into()],
            trajectory: vec![crate::schema::Box { t: 0, x: 64, y: 0, w: 5, h: 5 }],
        };
        assert!(crop_instance(&sample, &inst, (8, 8)).is_err());
    }

    #[test]
    fn xpool_zeroed_residual_returns_crop_tokens() {
        let mut state = micro_state();
        let cfg = state.config.clone();
        *state.params.get_mut("xpool.o.w") = Tensor::zeros(cfg.d, cfg.d);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let c = TokenVar {
            var: tape.constant(Tensor::new(3, cfg.d, (0..3 * cfg.d).map(|i| (i as f64).sin()).collect())),
            positions: (0..3).map(|i| TokenPos { frame: 0, row: 0, col: i }).collect(),
        };
        let scene = tape.constant(Tensor::new(4, cfg.d, (0..4 * cfg.d).map(|i| (i as f64).cos()).collect()));
        let (z_tokens, z) = cross_attend_pool(&mut tape, &bound, &cfg, &c, scene);
        assert_eq!(tape.value(z_tokens), tape.value(c.var));
        let zc = tape.mean_rows(c.var);
        assert_eq!(tape.value(z), tape.value(zc));
    }

    #[test]
    fn xpool_single_key_adds_same_context_to_every_row() {
        let state = micro_state();
        let cfg = &state.config;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let c = TokenVar {
            var: tape.constant(Tensor::new(3, cfg.d, (0..3 * cfg.d).map(|i| (i as f64 * 0.13).sin()).collect())),
            positions: (0..3).map(|i| TokenPos { frame: 0, row: 0, col: i }).collect(),
        };
        let scene = tape.constant(Tensor::new(1, cfg.d, (0..cfg.d).map(|i| (i as f64).cos()).collect()));
        let (z_tokens, _) = cross_attend_pool(&mut tape, &bound, cfg, &c, scene);
        let zt = tape.value(z_tokens).clone();
        let ct = tape.value(c.var).clone();
        let delta0: Vec<f64> = (0..cfg.d).map(|j| zt.at(0, j) - ct.at(0, j)).collect();
        for r in 1..3 {
            for j in 0..cfg.d {
                assert!((zt.at(r, j) - ct.at(r, j) - delta0[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_with_zeroed_cross_attention_is_text_only() {
        let mut state = micro_state();
        let cfg = state.config.clone();
        for i in 0..cfg.fusion_layers {
            *state.params.get_mut(&format!("fusion.block{i}.xattn.o.w")) =
                Tensor::zeros(cfg.d, cfg.d);
        }
        let vocab = Vocab::builtin();
        let ids = tokenize("a blue square moves up", &vocab, cfg.max_len);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let vis = tape.constant(Tensor::new(4, cfg.d, (0..4 * cfg.d).map(|i| (i as f64).sin()).collect()));
        let with_vis = fuse(&mut tape, &bound, &cfg, Some(vis), &ids, vocab.pad_id()).unwrap();
        let text_only = fuse(&mut tape, &bound, &cfg, None, &ids, vocab.pad_id()).unwrap();
        assert_eq!(tape.value(with_vis.cls), tape.value(text_only.cls));
    }

    #[test]
    fn fusion_reacts_to_visual_perturbation() {
        let state = micro_state();
        let cfg = &state.config;
        let vocab = Vocab::builtin();
        let ids = tokenize("a blue square moves up", &vocab, cfg.max_len);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params, false);
        let base: Vec<f64> = (0..4 * cfg.d).map(|i| (i as f64).sin()).collect();
        let mut nudged = base.clone();
        nudged[5] += 0.5;
        let v1 = tape.constant(Tensor::new(4, cfg.d, base));
        let v2 = tape.constant(Tensor::new(4, cfg.d, nudged));
        let f1 = fuse(&mut tape, &bound, cfg, Some(v1), &ids, vocab.pad_id()).unwrap();
        let f2 = fuse(&mut tape, &bound, cfg, Some(v2), &ids, vocab.pad_id()).unwrap();
        assert_ne!(tape.value(f1.cls), tape.value(f2.cls));
        // determinism on identical inputs
        let f3 = fuse(&mut tape, &bound, cfg, Some(v1), &ids, vocab.pad_id()).unwrap();
        assert_eq!(tape.value(f1.cls), tape.value(f3.cls));
        assert_eq!(tape.value(f1.vocab_logits), tape.value(f3.vocab_logits));
    }

    #[test]
    fn finite_outputs_over_random_draws() {
        let vocab = Vocab::builtin();
        for seed in 0..25 {
            let state = ModelState::init(DimConfig::micro(), seed);
            let cfg = &state.config;
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &state.params, false);
            let mut frames = FrameStack::black(cfg.frames, cfg.frame_h, cfg.frame_w);
            for (i, v) in frames.data.iter_mut().enumerate() {
                *v = (((i as u64).wrapping_mul(seed + 13) % 251) as f64) / 251.0;
            }
            let tokens = patchify(&mut tape, &bound, cfg, &frames).unwrap();
            let (v, pooled) = encode_video_full(&mut tape, &bound, cfg, &tokens);
            let ids = tokenize("a red circle moves right", &vocab, cfg.max_len);
            let f = fuse(&mut tape, &bound, cfg, Some(v.var), &ids, vocab.pad_id()).unwrap();
            let proj = project(&mut tape, &bound, Projection::Visual, pooled).unwrap();
            assert!(tape.value(v.var).is_finite());
            assert!(tape.value(f.cls).is_finite());
            assert!(tape.value(f.vocab_logits).is_finite());
            assert!(tape.value(proj).is_finite());
        }
    }

    #[test]
    fn param_count_is_config_determined() {
        let a = ModelState::init(DimConfig::micro(), 1);
        let b = ModelState::init(DimConfig::micro(), 2);
        assert_eq!(a.params.numel(), b.params.numel());
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn copy_teacher_into_student_matches() {
        let mut s = micro_state();
        s.copy_teacher_into_student();
        for (name, t) in s.teacher.iter() {
            assert_eq!(s.params.get(name), t);
        }
    }
}
