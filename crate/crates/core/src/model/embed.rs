//! Fixed sine/cosine embeddings for box coordinates and feature-map positions.

use std::f64::consts::TAU;

const TEMPERATURE: f64 = 10000.0;

/// Embeds one scalar in `[0, 1]` into `n` features: `sin` at even slots and
/// `cos` at odd slots of `x · 2π / T^(2⌊i/2⌋/n)`.
pub fn sine_features(x: f64, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), n);
    let v = x * TAU;
    for (i, o) in out.iter_mut().enumerate() {
        let dim_t = TEMPERATURE.powf((2 * (i / 2)) as f64 / n as f64);
        let a = v / dim_t;
        *o = if i % 2 == 0 { a.sin() } else { a.cos() };
    }
}

/// Sine embedding of cxcywh boxes `[q, 4]` into `[q, d]`: `d/4` features per
/// coordinate, concatenated in `(cx, cy, w, h)` order. `d` must be divisible by 4.
pub fn box_sine_embedding(boxes: &[f64], d: usize) -> Vec<f64> {
    assert!(d.is_multiple_of(4), "box embedding width {d} must be divisible by 4");
    let per = d / 4;
    let mut out = vec![0.0; boxes.len() / 4 * d];
    for (b, row) in boxes.chunks_exact(4).zip(out.chunks_exact_mut(d)) {
        for (c, &coord) in b.iter().enumerate() {
            sine_features(coord, per, &mut row[c * per..(c + 1) * per]);
        }
    }
    out
}

/// 2-D sine encoding for an `h × w` grid, row-major tokens `[h·w, d]`: the
/// first `d/2` features encode the normalized row, the rest the column.
pub fn grid_sine_embedding(h: usize, w: usize, d: usize) -> Vec<f64> {
    assert!(d.is_multiple_of(2), "grid embedding width {d} must be even");
    let half = d / 2;
    let mut out = vec![0.0; h * w * d];
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let row = &mut out[(i * w + j) * d..(i * w + j + 1) * d];
            sine_features(y, half, &mut row[..half]);
            sine_features(x, half, &mut row[half..]);
        }
    }
    out
}
