//! Synthetic shapes scenes: circles, squares and triangles on a noisy background.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::Target;
use crate::qa::box_iou;
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Standard deviation of per-pixel background noise.
    pub noise: f64,
    /// Placement retries reject pairs overlapping more than this IoU.
    pub max_overlap: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            min_size: 12.0,
            max_size: 28.0,
            noise: 0.05,
            max_overlap: 0.2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config("image_size must be at least 8"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("object count range must satisfy 1 <= min <= max"));
        }
        if !(self.min_size >= 2.0 && self.min_size <= self.max_size && self.max_size <= self.image_size as f64) {
            return Err(Error::config("object sizes must satisfy 2 <= min <= max <= image_size"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    /// Stream offsets keep the two splits' generators disjoint for one seed.
    fn stream(self, index: u64) -> u64 {
        match self {
            Split::Train => index,
            Split::Val => (1 << 63) | index,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[3, h, w]`, values in `[0, 1]`.
    pub image: Tensor,
    pub targets: Vec<Target>,
}

fn inside(class: usize, px: f64, py: f64, b: [f64; 4]) -> bool {
    let [x0, y0, x1, y1] = b;
    if px < x0 || px > x1 || py < y0 || py > y1 {
        return false;
    }
    match class {
        0 => {
            let (cx, cy, r) = (0.5 * (x0 + x1), 0.5 * (y0 + y1), 0.5 * (x1 - x0));
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        1 => true,
        _ => {
            // apex at top center, base along the bottom edge
            let t = (py - y0) / (y1 - y0);
            let half = 0.5 * (x1 - x0) * t;
            (px - 0.5 * (x0 + x1)).abs() <= half
        }
    }
}

/// Scene `index` of `split` under `seed`.
pub fn generate_scene(seed: u64, split: Split, index: u64, config: &DataConfig) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream(index));
    let s = config.image_size;
    let sf = s as f64;
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<(usize, [f64; 4], [f64; 3])> = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut attempts = 0;
    while objects.len() < n && attempts < 100 {
        attempts += 1;
        let class = rng.random_range(0..CLASS_NAMES.len());
        let size = rng.random_range(config.min_size..=config.max_size);
        let x0 = rng.random_range(0.0..=sf - size);
        let y0 = rng.random_range(0.0..=sf - size);
        let color = [rng.random_range(0.45..1.0), rng.random_range(0.45..1.0), rng.random_range(0.45..1.0)];
        let corners = [x0, y0, x0 + size, y0 + size];
        let bbox = [(x0 + 0.5 * size) / sf, (y0 + 0.5 * size) / sf, size / sf, size / sf];
        if targets.iter().any(|t: &Target| box_iou(&t.bbox, &bbox) > config.max_overlap) {
            continue;
        }
        objects.push((class, corners, color));
        targets.push(Target { class, bbox });
    }
    let base: [f64; 3] = [rng.random_range(0.0..0.3), rng.random_range(0.0..0.3), rng.random_range(0.0..0.3)];
    let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut data = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            // later objects paint over earlier ones
            let color = objects
                .iter()
                .rev()
                .find(|(c, b, _)| inside(*c, px, py, *b))
                .map(|o| o.2)
                .unwrap_or(base);
            for (c, &v) in color.iter().enumerate() {
                let n: f64 = if config.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data[(c * s + y) * s + x] = (v + n).clamp(0.0, 1.0);
            }
        }
    }
    SyntheticScene {
        image: Tensor::new(&[3, s, s], data).expect("image shape"),
        targets,
    }
}

/// Scenes `0..n` of `split`, generated in parallel.
pub fn generate_dataset(n: usize, seed: u64, split: Split, config: &DataConfig) -> Vec<SyntheticScene> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| generate_scene(seed, split, i, config))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TargetLine {
    image: String,
    targets: Vec<Target>,
}

pub const TARGETS_FILE: &str = "targets.jsonl";

/// Writes one tensor file per image plus `targets.jsonl`.
pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut lines = std::io::BufWriter::new(fs::File::create(dir.join(TARGETS_FILE))?);
    for (i, s) in scenes.iter().enumerate() {
        let image = format!("{i:06}.sqt");
        write_tensor_file(&dir.join(&image), &s.image)?;
        let line = TargetLine {
            image,
            targets: s.targets.clone(),
        };
        writeln!(lines, "{}", serde_json::to_string(&line)?)?;
    }
    lines.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let path = dir.join(TARGETS_FILE);
    let reader = BufReader::new(fs::File::open(&path)?);
    let mut scenes = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TargetLine = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.clone(),
            reason: format!("line {}: {e}", k + 1),
        })?;
        if Path::new(&parsed.image).components().count() != 1 {
            return Err(Error::Format {
                path: path.clone(),
                reason: format!("line {}: image path must be a bare file name", k + 1),
            });
        }
        let image = read_tensor_file(&dir.join(&parsed.image))?;
        scenes.push(SyntheticScene {
            image,
            targets: parsed.targets,
        });
    }
    Ok(scenes)
}
