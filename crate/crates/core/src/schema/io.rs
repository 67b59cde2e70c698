//! On-disk dataset format: a JSON-lines manifest plus one binary PPM (P6)
//! file per frame, and the one-word-per-line vocab file.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Box, FrameStack, InstanceAnnotation, Kind, Sample, Vocab};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    instance_id: u32,
    caption: Vec<String>,
    trajectory: Vec<Box>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    sample_id: String,
    kind: Kind,
    source_id: u64,
    frames: Vec<String>,
    global_caption: Vec<String>,
    instances: Vec<InstanceRecord>,
}

/// Writes `manifest.jsonl` plus `frames/*.ppm` under `dir`, ordered by
/// sample_id regardless of input order.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    for sample in ordered {
        let mut frame_paths = Vec::with_capacity(sample.frames.t);
        for t in 0..sample.frames.t {
            let rel = format!("frames/{}_{t:03}.ppm", sample.sample_id);
            write_ppm(&dir.join(&rel), &sample.frames, t)?;
            frame_paths.push(rel);
        }
        let record = SampleRecord {
            sample_id: sample.sample_id.clone(),
            kind: sample.kind,
            source_id: sample.source_id,
            frames: frame_paths,
            global_caption: sample.global_caption.clone(),
            instances: sample
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    instance_id: i.instance_id,
                    caption: i.caption.clone(),
                    trajectory: i.trajectory.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut manifest, &record)?;
        manifest.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(dir.join("manifest.jsonl"))?;
    let mut samples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest { line: idx + 1, msg: e.to_string() })?;
        if record.frames.is_empty() {
            return Err(Error::Manifest { line: idx + 1, msg: "sample has no frames".into() });
        }
        let mut frames: Option<FrameStack> = None;
        for (t, rel) in record.frames.iter().enumerate() {
            let path = dir.join(rel);
            let (h, w, rgb) =
                read_ppm(&path).map_err(|_| Error::MissingFrame(PathBuf::from(rel)))?;
            let stack = frames.get_or_insert_with(|| FrameStack::black(record.frames.len(), h, w));
            if (stack.h, stack.w) != (h, w) {
                return Err(Error::Manifest {
                    line: idx + 1,
                    msg: format!("frame {t} dims {h}x{w} differ from first frame"),
                });
            }
            let base = t * h * w * 3;
            for (j, byte) in rgb.iter().enumerate() {
                stack.data[base + j] = *byte as f64 / 255.0;
            }
        }
        samples.push(Sample {
            sample_id: record.sample_id,
            kind: record.kind,
            frames: frames.unwrap(),
            global_caption: record.global_caption,
            instances: record
                .instances
                .into_iter()
                .map(|i| InstanceAnnotation {
                    instance_id: i.instance_id,
                    caption: i.caption,
                    trajectory: i.trajectory,
                })
                .collect(),
            source_id: record.source_id,
        });
    }
    Ok(samples)
}

fn write_ppm(path: &Path, frames: &FrameStack, t: usize) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", frames.w, frames.h).into_bytes();
    let base = t * frames.h * frames.w * 3;
    buf.extend(
        frames.data[base..base + frames.h * frames.w * 3]
            .iter()
            .map(|v| (v * 255.0).round() as u8),
    );
    fs::write(path, buf)?;
    Ok(())
}

fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Checkpoint(format!("ppm {}: {msg}", path.display()));
    // header: "P6\n{w} {h}\n255\n"
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?);
    }
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected P6 maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    Ok((h, w, bytes[pos..pos + need].to_vec()))
}

/// One word per line; line number = token id.
pub fn write_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    fs::write(path, vocab.words().join("\n") + "\n")?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path)?;
    let words: Vec<String> =
        text.lines().filter(|l| !l.is_empty()).map(|l| l.to_string()).collect();
    if words.first().map(String::as_str) != Some(super::CLS) {
        return Err(Error::Config("vocab file must start with [CLS]".into()));
    }
    Ok(Vocab::from_words(words))
}
