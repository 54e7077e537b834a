//! Attention-map heatmaps of the global SAPM: per scale and query a binary
//! PGM scaled so the largest weight is 255, a CSV of the raw weights, and the
//! confident final-layer predictions as JSON.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Detector, Predictions};
use crate::params::Binder;
use crate::tensor::{Tape, Tensor};

pub const BOXES_FILE: &str = "boxes.json";
/// Queries scoring below this are left out of the boxes file.
pub const SCORE_THRESHOLD: f64 = 0.5;

pub fn heatmap_name(scale: usize, query: usize) -> String {
    format!("attn_s{scale}_q{query}")
}

/// Gray levels `round(255 · v / max)`; all zeros when no weight is positive.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|v| (255.0 * v.max(0.0) / max).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::dim("write_pgm", "pixel count", width * height, pixels.len()));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

/// Parses a binary PGM with maxval 255 into `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    // header: magic, width, height, maxval separated by single whitespace runs
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected a P5 image with maxval 255"));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (dim(&fields[1])?, dim(&fields[2])?);
    let pixels = bytes.get(pos..).unwrap_or_default().to_vec();
    if pixels.len() != w * h {
        return Err(bad("pixel count does not match the header"));
    }
    Ok((w, h, pixels))
}

#[derive(Serialize)]
struct BoxesFile {
    image_size: [usize; 2],
    /// Indices of the queries scoring at least [`SCORE_THRESHOLD`].
    queries: Vec<usize>,
    /// `[cx, cy, w, h]`, normalized.
    boxes: Vec<[f64; 4]>,
    classes: Vec<usize>,
    scores: Vec<f64>,
}

/// Exports the global attention maps for `image` into `out_dir`, returning the
/// written PGM paths in `(scale, query)` order.
pub fn export_attention_heatmaps(detector: &Detector, image: &Tensor, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !detector.config.sacq_global {
        return Err(Error::config("attention export needs sacq_global = true"));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&detector.store);
    let out = detector.decode(&mut tape, &mut binder, image)?;
    let global = out.global.as_ref().ok_or_else(|| Error::config("decoder produced no global pooling"))?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (s, &maps) in global.attention_maps.iter().enumerate() {
        let [q, h, w] = tape.shape(maps)[..] else {
            return Err(Error::dim("export", "attention map rank", 3, tape.shape(maps).len()));
        };
        let values = tape.value(maps);
        for i in 0..q {
            let map = &values[i * h * w..(i + 1) * h * w];
            let base = out_dir.join(heatmap_name(s, i));
            let pgm = base.with_extension("pgm");
            write_pgm(&pgm, w, h, &to_gray(map))?;
            let mut csv = std::io::BufWriter::new(fs::File::create(base.with_extension("csv"))?);
            for row in map.chunks_exact(w) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                writeln!(csv, "{}", cells.join(","))?;
            }
            csv.flush()?;
            written.push(pgm);
        }
    }
    let last = Predictions::from_tape(&tape, out.layers.last().expect("at least one decoder layer"));
    let (queries, dets): (Vec<usize>, Vec<_>) = super::eval::detections(&last)
        .into_iter()
        .enumerate()
        .filter(|(_, d)| d.score >= SCORE_THRESHOLD)
        .unzip();
    let shape = image.shape();
    let boxes = BoxesFile {
        image_size: [shape[1], shape[2]],
        queries,
        boxes: dets.iter().map(|d| d.bbox).collect(),
        classes: dets.iter().map(|d| d.class).collect(),
        scores: dets.iter().map(|d| d.score).collect(),
    };
    fs::write(out_dir.join(BOXES_FILE), serde_json::to_string_pretty(&boxes)?)?;
    Ok(written)
}
