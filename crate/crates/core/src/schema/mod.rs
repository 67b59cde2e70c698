//! Dual-granularity sample schema: one holistic caption plus grounded
//! per-instance trajectory captions, a deterministic shapes-world generator,
//! validators, and the closed-vocabulary tokenizer.

mod gen;
mod io;

pub use gen::{generate_scene, pixel_scan_bbox, render_sample, GenConfig, ObjectSpec, SceneProgram, Shape, PALETTE, SIZES};
pub use io::{read_dataset, write_dataset, write_vocab, read_vocab};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One per-frame bounding box of a trajectory. Pixel units, top-left origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box {
    pub t: usize,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub instance_id: u32,
    pub caption: Vec<String>,
    pub trajectory: Vec<Box>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Image,
    Video,
}

/// T frames of H x W RGB, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Frame-major, row-major, RGB interleaved.
    pub data: Vec<f64>,
}

impl FrameStack {
    pub fn black(t: usize, h: usize, w: usize) -> Self {
        FrameStack { t, h, w, data: vec![0.0; t * h * w * 3] }
    }

    #[inline]
    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f64; 3] {
        let o = ((t * self.h + y) * self.w + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, t: usize, y: usize, x: usize, rgb: [f64; 3]) {
        let o = ((t * self.h + y) * self.w + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub kind: Kind,
    pub frames: FrameStack,
    pub global_caption: Vec<String>,
    pub instances: Vec<InstanceAnnotation>,
    pub source_id: u64,
}

/// One failed invariant, as data rather than an error.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every Sample/InstanceAnnotation/Box invariant; empty = valid.
pub fn validate_sample(sample: &Sample) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut fail = |field: &str, rule: &str| {
        out.push(Violation { field: field.to_string(), rule: rule.to_string() })
    };

    if sample.kind == Kind::Image && sample.frames.t != 1 {
        fail("Sample.kind", "kind = image requires T = 1");
    }
    if sample.global_caption.is_empty() {
        fail("Sample.global_caption", "at least one sentence");
    }
    for (i, s) in sample.global_caption.iter().enumerate() {
        if s.trim().is_empty() {
            out.push(Violation {
                field: format!("Sample.global_caption[{i}]"),
                rule: "sentence non-empty".into(),
            });
        }
    }
    for inst in &sample.instances {
        let tag = format!("instance {}", inst.instance_id);
        if inst.trajectory.is_empty() {
            out.push(Violation { field: format!("{tag}.trajectory"), rule: "non-empty".into() });
        }
        if inst.caption.is_empty() {
            out.push(Violation { field: format!("{tag}.caption"), rule: "at least one sentence".into() });
        }
        for (i, s) in inst.caption.iter().enumerate() {
            if s.trim().is_empty() {
                out.push(Violation {
                    field: format!("{tag}.caption[{i}]"),
                    rule: "sentence non-empty".into(),
                });
            }
        }
        let mut prev_t: Option<usize> = None;
        for b in &inst.trajectory {
            let btag = format!("{tag}.trajectory[t={}]", b.t);
            if b.w == 0 {
                out.push(Violation { field: format!("{btag}.w"), rule: "Box.w > 0".into() });
            }
            if b.h == 0 {
                out.push(Violation { field: format!("{btag}.h"), rule: "Box.h > 0".into() });
            }
            if (b.x + b.w) as usize > sample.frames.w {
                out.push(Violation { field: format!("{btag}.x"), rule: "x + w <= frame width".into() });
            }
            if (b.y + b.h) as usize > sample.frames.h {
                out.push(Violation { field: format!("{btag}.y"), rule: "y + h <= frame height".into() });
            }
            if b.t >= sample.frames.t {
                out.push(Violation { field: format!("{btag}.t"), rule: "frame index < T".into() });
            }
            if let Some(p) = prev_t {
                if b.t <= p {
                    out.push(Violation {
                        field: format!("{btag}.t"),
                        rule: "frame indices strictly increasing".into(),
                    });
                }
            }
            prev_t = Some(b.t);
        }
    }
    out
}

// ── vocabulary and tokenization ─────────────────────────────────────

pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";
pub const PAD: &str = "[PAD]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";

/// Closed word list; ids are dense 0..|V|-1 with [CLS] = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: std::collections::HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Self {
        assert_eq!(words[0], CLS, "[CLS] must have id 0");
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    /// The fixed shapes-world vocabulary shared by generator and models.
    pub fn builtin() -> Self {
        let mut words: Vec<String> =
            [CLS, MASK, PAD, SEP, UNK].iter().map(|s| s.to_string()).collect();
        let content = [
            "a", "the", "and", "scene", "with", "objects", "object", "colored",
            "circle", "square", "triangle",
            "red", "green", "blue", "yellow", "purple", "orange", "cyan", "white",
            "small", "medium", "large",
            "moves", "stays", "still", "right", "left", "down", "up",
            "one", "two", "three", "four", "five", "six", "seven", "eight",
        ];
        words.extend(content.iter().map(|s| s.to_string()));
        Vocab::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn cls_id(&self) -> usize {
        0
    }

    pub fn mask_id(&self) -> usize {
        self.id(MASK).unwrap()
    }

    pub fn pad_id(&self) -> usize {
        self.id(PAD).unwrap()
    }

    pub fn unk_id(&self) -> usize {
        self.id(UNK).unwrap()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < 5
    }
}

/// [CLS] ++ word ids, padded/truncated to exactly `max_len`.
pub fn tokenize(sentence: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    assert!(max_len >= 2, "max_len must be >= 2");
    let mut ids = vec![vocab.cls_id()];
    for word in sentence.split_whitespace() {
        if ids.len() == max_len {
            break;
        }
        ids.push(vocab.id(word).unwrap_or_else(|| vocab.unk_id()));
    }
    while ids.len() < max_len {
        ids.push(vocab.pad_id());
    }
    ids
}

/// Inverse of `tokenize` modulo special tokens.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| !vocab.is_special(id))
        .map(|&id| vocab.word(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Caption sentence selection for one epoch.
///
/// `Cycle` walks all sentences over |caption| consecutive epochs, shifted by
/// a caller-supplied rotation so different captions desynchronize; `First`
/// always returns sentence 0 (the sub-sampling ablation switch).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceSampling {
    First,
    Cycle,
}

pub fn sample_caption_sentence(caption: &[String], epoch: usize, rotation: u64) -> Result<&String> {
    if caption.is_empty() {
        return Err(Error::SceneConfig("empty caption".into()));
    }
    let n = caption.len();
    Ok(&caption[(epoch + rotation as usize) % n])
}

pub fn select_sentence(
    caption: &[String],
    mode: SentenceSampling,
    epoch: usize,
    rotation: u64,
) -> Result<&String> {
    match mode {
        SentenceSampling::First => {
            caption.first().ok_or_else(|| Error::SceneConfig("empty caption".into()))
        }
        SentenceSampling::Cycle => sample_caption_sentence(caption, epoch, rotation),
    }
}
