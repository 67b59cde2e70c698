//! Deterministic shapes-world scene generation and integer rasterization.
//!
//! Rendering is a pure function of the `SceneProgram`: all geometry tests use
//! integer arithmetic on doubled pixel coordinates (pixel centers at +0.5),
//! so output is bit-identical across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Box, FrameStack, InstanceAnnotation, Kind, Sample};
use crate::error::{Error, Result};

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 70]),
    ("blue", [50, 90, 220]),
    ("yellow", [235, 220, 60]),
    ("purple", [150, 60, 190]),
    ("orange", [240, 150, 40]),
    ("cyan", [60, 200, 210]),
    ("white", [240, 240, 240]),
];

/// Allowed object sizes (bounding-square side, even so circles have an
/// integer radius). Index order matches the size words below.
pub const SIZES: [u32; 3] = [8, 12, 16];
const SIZE_WORDS: [&str; 3] = ["small", "medium", "large"];
const COUNT_WORDS: [&str; 8] = ["one", "two", "three", "four", "five", "six", "seven", "eight"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Index into `PALETTE`.
    pub color: usize,
    /// Bounding-square side in pixels (even).
    pub size: u32,
    /// Center at frame 0.
    pub start: (i64, i64),
    /// Pixels per frame.
    pub velocity: (i64, i64),
}

/// Pure description of a scene; rendering derives everything else from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneProgram {
    pub seed: u64,
    /// (H, W)
    pub canvas: (usize, usize),
    pub frames: usize,
    pub objects: Vec<ObjectSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    /// (H, W)
    pub canvas: (usize, usize),
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub sizes: Vec<u32>,
    /// (palette index, shape) combination withheld when `exclude_holdout`.
    pub holdout: Option<(usize, Shape)>,
    pub exclude_holdout: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            canvas: (64, 64),
            frames: 4,
            min_objects: 1,
            max_objects: 3,
            sizes: SIZES.to_vec(),
            holdout: None,
            exclude_holdout: false,
        }
    }
}

pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<SceneProgram> {
    let (h, w) = cfg.canvas;
    if cfg.frames == 0 {
        return Err(Error::SceneConfig("frame count must be >= 1".into()));
    }
    if cfg.min_objects < 1 || cfg.max_objects > 8 || cfg.min_objects > cfg.max_objects {
        return Err(Error::SceneConfig("object count range must lie within [1, 8]".into()));
    }
    if cfg.sizes.is_empty() {
        return Err(Error::SceneConfig("no object sizes configured".into()));
    }
    for &s in &cfg.sizes {
        if s as usize > h.min(w) {
            return Err(Error::SceneConfig(format!(
                "object size {s} cannot fit {h}x{w} canvas"
            )));
        }
        if s < 2 || s % 2 != 0 {
            return Err(Error::SceneConfig(format!("object size {s} must be even and >= 2")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let (shape, color) = loop {
            let shape = match rng.gen_range(0..3) {
                0 => Shape::Circle,
                1 => Shape::Square,
                _ => Shape::Triangle,
            };
            let color = rng.gen_range(0..PALETTE.len());
            if cfg.exclude_holdout && cfg.holdout == Some((color, shape)) {
                continue;
            }
            break (shape, color);
        };
        let size = cfg.sizes[rng.gen_range(0..cfg.sizes.len())];
        let mut vx = rng.gen_range(-2i64..=2);
        let mut vy = rng.gen_range(-2i64..=2);
        let span = (cfg.frames - 1) as i64;
        let half = (size / 2) as i64;
        // Clamp velocity to something that leaves a feasible start interval.
        if center_range(w as i64, half, vx, span).is_none() {
            vx = 0;
        }
        if center_range(h as i64, half, vy, span).is_none() {
            vy = 0;
        }
        let (xlo, xhi) = center_range(w as i64, half, vx, span).expect("vx=0 always feasible");
        let (ylo, yhi) = center_range(h as i64, half, vy, span).expect("vy=0 always feasible");
        let cx = rng.gen_range(xlo..=xhi);
        let cy = rng.gen_range(ylo..=yhi);
        objects.push(ObjectSpec { shape, color, size, start: (cx, cy), velocity: (vx, vy) });
    }
    Ok(SceneProgram { seed, canvas: cfg.canvas, frames: cfg.frames, objects })
}

/// Inclusive range of center positions keeping [c-half, c+half) inside
/// [0, extent] for all frames 0..=span at velocity v.
fn center_range(extent: i64, half: i64, v: i64, span: i64) -> Option<(i64, i64)> {
    let lo = half + 0i64.max(-v * span);
    let hi = extent - half - 0i64.max(v * span);
    if lo <= hi {
        Some((lo, hi))
    } else {
        None
    }
}

impl ObjectSpec {
    pub fn center_at(&self, t: usize) -> (i64, i64) {
        (
            self.start.0 + self.velocity.0 * t as i64,
            self.start.1 + self.velocity.1 * t as i64,
        )
    }

    /// Tight bounding box at frame t (identical to the rasterized extent).
    pub fn bbox_at(&self, t: usize) -> Box {
        let (cx, cy) = self.center_at(t);
        let half = (self.size / 2) as i64;
        Box {
            t,
            x: (cx - half) as u32,
            y: (cy - half) as u32,
            w: self.size,
            h: self.size,
        }
    }

    /// Integer inclusion test for the pixel at column px, row py, frame t.
    pub fn covers(&self, t: usize, px: i64, py: i64) -> bool {
        let (cx, cy) = self.center_at(t);
        let s = self.size as i64;
        // doubled offsets of the pixel center from the object center
        let dx = 2 * (px - cx) + 1;
        let dy = 2 * (py - cy) + 1;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy < s * s,
            Shape::Square => dx.abs() < s && dy.abs() < s,
            Shape::Triangle => {
                // apex at top center, full-width base at the bottom row
                if dy.abs() > s {
                    return false;
                }
                let row = (dy + s - 1) / 2; // 0-based row within the bounding square
                dx.abs() <= row + 1
            }
        }
    }

    fn motion_words(&self) -> &'static str {
        let (vx, vy) = self.velocity;
        if vx == 0 && vy == 0 {
            "stays still"
        } else if vx.abs() >= vy.abs() {
            if vx > 0 { "moves right" } else { "moves left" }
        } else if vy > 0 {
            "moves down"
        } else {
            "moves up"
        }
    }

    fn size_word(&self) -> &'static str {
        let i = SIZES.iter().position(|&s| s == self.size).unwrap_or(1);
        SIZE_WORDS[i]
    }

    fn color_word(&self) -> &'static str {
        PALETTE[self.color].0
    }

    fn phrase(&self) -> String {
        format!("a {} {} {}", self.color_word(), self.shape.word(), self.motion_words())
    }
}

/// Rasterize a program into a fully annotated sample. Draw order is the
/// object list order; `source_id` is the program seed.
pub fn render_sample(program: &SceneProgram) -> Sample {
    let (h, w) = program.canvas;
    let t_count = program.frames;
    let mut frames = FrameStack::black(t_count, h, w);
    for obj in &program.objects {
        let rgb = PALETTE[obj.color].1;
        let rgbf = [rgb[0] as f64 / 255.0, rgb[1] as f64 / 255.0, rgb[2] as f64 / 255.0];
        for t in 0..t_count {
            let b = obj.bbox_at(t);
            for py in b.y as i64..(b.y + b.h) as i64 {
                for px in b.x as i64..(b.x + b.w) as i64 {
                    if obj.covers(t, px, py) {
                        frames.set_pixel(t, py as usize, px as usize, rgbf);
                    }
                }
            }
        }
    }

    let instances = program
        .objects
        .iter()
        .enumerate()
        .map(|(k, obj)| InstanceAnnotation {
            instance_id: k as u32,
            caption: vec![
                obj.phrase(),
                format!(
                    "the {} {} {} {}",
                    obj.size_word(),
                    obj.color_word(),
                    obj.shape.word(),
                    obj.motion_words()
                ),
                format!("a {} {} colored {}", obj.size_word(), obj.shape.word(), obj.color_word()),
            ],
            trajectory: (0..t_count).map(|t| obj.bbox_at(t)).collect(),
        })
        .collect();

    let phrases: Vec<String> = program.objects.iter().map(|o| o.phrase()).collect();
    let global_caption = vec![
        phrases.join(" and "),
        format!("a scene with {} objects", COUNT_WORDS[program.objects.len() - 1]),
    ];

    Sample {
        sample_id: format!("scene-{:016x}", program.seed),
        kind: if t_count == 1 { Kind::Image } else { Kind::Video },
        frames,
        global_caption,
        instances,
        source_id: program.seed,
    }
}

/// Pixel-scan bounding box of one object rendered in isolation at frame t.
/// Test oracle for the analytic `bbox_at`.
pub fn pixel_scan_bbox(obj: &ObjectSpec, canvas: (usize, usize), t: usize) -> Option<Box> {
    let (h, w) = canvas;
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for py in 0..h as i64 {
        for px in 0..w as i64 {
            if obj.covers(t, px, py) {
                x0 = x0.min(px);
                y0 = y0.min(py);
                x1 = x1.max(px);
                y1 = y1.max(py);
            }
        }
    }
    if x0 > x1 {
        return None;
    }
    Some(Box {
        t,
        x: x0 as u32,
        y: y0 as u32,
        w: (x1 - x0 + 1) as u32,
        h: (y1 - y0 + 1) as u32,
    })
}
