//! Query aggregation: near-duplicate predictions (close class distributions
//! and overlapping boxes) are merged by averaging before set matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PredictionSet, Predictions};
use crate::tensor::kernels;
use crate::tensor::{Tape, Var, LOG_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaConfig {
    /// Merge only when the symmetric KL between class rows is below this.
    pub t_c: f64,
    /// Merge only when box IoU is above this.
    pub t_b: f64,
    /// Probability clamp applied before row normalization.
    pub epsilon: f64,
    pub enabled: bool,
    pub apply_at_inference: bool,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            t_c: 3e-7,
            t_b: 0.9,
            epsilon: 1e-8,
            enabled: true,
            apply_at_inference: true,
        }
    }
}

impl QaConfig {
    pub fn disabled() -> Self {
        QaConfig {
            enabled: false,
            apply_at_inference: false,
            ..Self::default()
        }
    }

    /// `t_b` above 1 is accepted: it simply admits no edge.
    pub fn validate(&self) -> Result<()> {
        if !(self.t_c > 0.0) {
            return Err(Error::config(format!("t_c = {} must be positive", self.t_c)));
        }
        if !(self.t_b >= 0.0) {
            return Err(Error::config(format!("t_b = {} must be nonnegative", self.t_b)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return Err(Error::config(format!("epsilon = {} outside (0, 1e-3)", self.epsilon)));
        }
        Ok(())
    }
}

/// Symmetric KL divergence between every pair of rows of `probs: [q, m]`,
/// after clamping to `[epsilon, 1]` and normalizing each row to sum 1.
pub fn class_similarity(probs: &[f64], m: usize, epsilon: f64) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::config(format!("class similarity needs at least 2 classes, got {m}")));
    }
    if !probs.len().is_multiple_of(m) {
        return Err(Error::dim("class_similarity", "row width", m, probs.len() % m));
    }
    let q = probs.len() / m;
    let mut dist = Vec::with_capacity(probs.len());
    let mut logs = Vec::with_capacity(probs.len());
    for row in probs.chunks_exact(m) {
        let clamped: Vec<f64> = row.iter().map(|p| p.clamp(epsilon, 1.0)).collect();
        let total: f64 = clamped.iter().sum();
        for c in clamped {
            let p = c / total;
            dist.push(p);
            logs.push(p.max(LOG_EPS).ln());
        }
    }
    let mut s = vec![0.0; q * q];
    for i in 0..q {
        for j in i + 1..q {
            let (pi, pj) = (&dist[i * m..(i + 1) * m], &dist[j * m..(j + 1) * m]);
            let (li, lj) = (&logs[i * m..(i + 1) * m], &logs[j * m..(j + 1) * m]);
            let mut kl_ij = 0.0;
            let mut kl_ji = 0.0;
            for c in 0..m {
                kl_ij += pi[c] * (li[c] - lj[c]);
                kl_ji += pj[c] * (lj[c] - li[c]);
            }
            s[i * q + j] = kl_ij + kl_ji;
            s[j * q + i] = kl_ij + kl_ji;
        }
    }
    Ok(s)
}

/// cxcywh → (x0, y0, x1, y1).
pub fn to_corners(b: &[f64]) -> [f64; 4] {
    [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]]
}

/// IoU of two corner-form boxes; 0 when the union is empty.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn box_iou(a: &[f64], b: &[f64]) -> f64 {
    iou_corners(to_corners(a), to_corners(b))
}

/// Pairwise IoU of cxcywh boxes `[q, 4]`.
pub fn box_iou_matrix(boxes: &[f64]) -> Vec<f64> {
    let corners: Vec<[f64; 4]> = boxes.chunks_exact(4).map(to_corners).collect();
    let q = corners.len();
    let mut s = vec![0.0; q * q];
    for i in 0..q {
        for j in i..q {
            let v = iou_corners(corners[i], corners[j]);
            s[i * q + j] = v;
            s[j * q + i] = v;
        }
    }
    s
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the graph with an edge wherever both merge
/// criteria hold. Groups are ordered by smallest member, members ascending.
pub fn build_merge_groups(s_cls: &[f64], s_box: &[f64], q: usize, config: &QaConfig) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..q).collect();
    for i in 0..q {
        for j in i + 1..q {
            if s_cls[i * q + j] < config.t_c && s_box[i * q + j] > config.t_b {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; q];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..q {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

fn mean_rows(values: &[f64], width: usize, groups: &[Vec<usize>]) -> Vec<f64> {
    let mut out = vec![0.0; groups.len() * width];
    for (g, members) in groups.iter().enumerate() {
        let row = &mut out[g * width..(g + 1) * width];
        for &i in members {
            row.iter_mut().zip(&values[i * width..(i + 1) * width]).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / members.len() as f64;
        row.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

/// Mean probabilities and boxes per group. Logits of merged rows are the
/// inverse sigmoid of the merged probabilities.
pub fn aggregate(pred: &Predictions, groups: &[Vec<usize>]) -> Predictions {
    let probs = mean_rows(&pred.probs, pred.m, groups);
    let logits = probs
        .iter()
        .zip(groups.iter().flat_map(|g| std::iter::repeat_n(g, pred.m)))
        .enumerate()
        .map(|(k, (&p, g))| if g.len() == 1 { pred.logits[g[0] * pred.m + k % pred.m] } else { kernels::logit(p, LOG_EPS) })
        .collect();
    Predictions {
        q: groups.len(),
        m: pred.m,
        logits,
        probs,
        boxes: mean_rows(&pred.boxes, 4, groups),
    }
}

/// Differentiable aggregation on the tape; each member receives `1/n` of its
/// group's gradient.
pub fn aggregate_on_tape(tape: &mut Tape, pred: &PredictionSet, groups: &[Vec<usize>]) -> Result<PredictionSet> {
    let probs = tape.group_mean(pred.probs, groups)?;
    let boxes = tape.group_mean(pred.boxes, groups)?;
    let logits = logit_op(tape, probs)?;
    Ok(PredictionSet { logits, probs, boxes })
}

fn logit_op(tape: &mut Tape, p: Var) -> Result<Var> {
    let value = tape.value(p).iter().map(|&v| kernels::logit(v, LOG_EPS)).collect();
    let shape = tape.shape(p).to_vec();
    tape.custom(&[p], &shape, value, |g, inputs, _| {
        vec![g.iter().zip(inputs[0]).map(|(g, &p)| g / (p * (1.0 - p)).max(LOG_EPS)).collect()]
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub groups: Vec<Vec<usize>>,
    pub merged: Predictions,
    /// Group index of each original query.
    pub provenance: Vec<usize>,
}

impl MergePlan {
    pub fn merges(&self) -> usize {
        self.provenance.len() - self.groups.len()
    }
}

/// Similarities, grouping and averaging in one step. Disabled configs yield
/// the identity plan.
pub fn qa_apply(pred: &Predictions, config: &QaConfig) -> Result<MergePlan> {
    let groups = merge_groups(pred, config)?;
    let mut provenance = vec![0; pred.q];
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            provenance[i] = g;
        }
    }
    Ok(MergePlan {
        merged: aggregate(pred, &groups),
        groups,
        provenance,
    })
}

/// Just the partition of [`qa_apply`].
pub fn merge_groups(pred: &Predictions, config: &QaConfig) -> Result<Vec<Vec<usize>>> {
    config.validate()?;
    if pred.probs.len() != pred.q * pred.m || pred.boxes.len() != pred.q * 4 {
        return Err(Error::contract("prediction arrays disagree with q and m"));
    }
    if !config.enabled {
        return Ok((0..pred.q).map(|i| vec![i]).collect());
    }
    let s_cls = class_similarity(&pred.probs, pred.m, config.epsilon)?;
    let s_box = box_iou_matrix(&pred.boxes);
    Ok(build_merge_groups(&s_cls, &s_box, pred.q, config))
}
