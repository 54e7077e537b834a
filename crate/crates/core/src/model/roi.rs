use crate::error::{Error, Result};
use crate::tensor::kernels::bilinear_taps;
use crate::tensor::{Tape, Var};

/// Boxes narrower than this (normalized units) are inflated before sampling.
pub const MIN_BOX_SIZE: f64 = 1e-4;

/// Sub-samples per bin along each axis.
const SAMPLING_RATIO: usize = 2;

/// Builds the resample tap table for RoI-Align of cxcywh `boxes` over an
/// `h × w` map. Pixel `(i, j)` covers `[j, j+1) × [i, i+1)` in map units.
pub fn roi_align_taps(boxes: &[f64], h: usize, w: usize, out_size: usize) -> (Vec<usize>, Vec<(usize, f64)>) {
    let bins = out_size * out_size;
    let n = boxes.len() / 4;
    let per_bin = SAMPLING_RATIO * SAMPLING_RATIO * 4;
    let mut offsets = Vec::with_capacity(n * bins + 1);
    let mut taps = Vec::with_capacity(n * bins * per_bin);
    offsets.push(0);
    let wt = 1.0 / (SAMPLING_RATIO * SAMPLING_RATIO) as f64;
    for b in boxes.chunks_exact(4) {
        let bw = b[2].max(MIN_BOX_SIZE) * w as f64;
        let bh = b[3].max(MIN_BOX_SIZE) * h as f64;
        let x0 = b[0] * w as f64 - 0.5 * bw;
        let y0 = b[1] * h as f64 - 0.5 * bh;
        let (cell_w, cell_h) = (bw / out_size as f64, bh / out_size as f64);
        for by in 0..out_size {
            for bx in 0..out_size {
                for sy in 0..SAMPLING_RATIO {
                    let y = y0 + (by as f64 + (sy as f64 + 0.5) / SAMPLING_RATIO as f64) * cell_h;
                    for sx in 0..SAMPLING_RATIO {
                        let x = x0 + (bx as f64 + (sx as f64 + 0.5) / SAMPLING_RATIO as f64) * cell_w;
                        for (idx, t) in bilinear_taps(h, w, x - 0.5, y - 0.5) {
                            taps.push((idx, t * wt));
                        }
                    }
                }
                offsets.push(taps.len());
            }
        }
    }
    (offsets, taps)
}

/// RoI-Align of `features: [d, h, w]` for each cxcywh box, giving
/// `[q, d, out_size, out_size]`. Box coordinates are treated as constants;
/// gradients reach the feature values only.
pub fn roi_align(tape: &mut Tape, features: Var, boxes: &[f64], out_size: usize) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let [d, h, w] = fs[..] else {
        return Err(Error::dim("roi_align", "feature rank", 3, fs.len()));
    };
    if !boxes.len().is_multiple_of(4) {
        return Err(Error::dim("roi_align", "box width", 4, boxes.len() % 4));
    }
    if out_size == 0 {
        return Err(Error::config("RoI output size must be at least 1"));
    }
    let q = boxes.len() / 4;
    let (offsets, taps) = roi_align_taps(boxes, h, w, out_size);
    let out = tape.resample(features, q, out_size * out_size, offsets, taps)?;
    tape.reshape(out, &[q, d, out_size, out_size])
}
