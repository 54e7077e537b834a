//! One-to-one set matching and the detection losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PredictionSet, Predictions};
use crate::qa::{aggregate_on_tape, merge_groups, QaConfig};
use crate::tensor::{giou_cxcywh_grad, Tape, Var, LOG_EPS};

/// A ground-truth object: class index and normalized cxcywh box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub class: usize,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls, self.l1, self.giou, self.focal_alpha, self.focal_gamma];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Weighted sum of the three unweighted loss components.
    pub fn combine(&self, cls: f64, l1: f64, giou: f64) -> f64 {
        self.cls * cls + self.l1 * l1 + self.giou * giou
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(prediction, target)` pairs ordered by target index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of `rows ≤ cols`; returns the column of each row.
fn assign(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal assignment for `cost: [n_pred, n_tgt]` (row-major). Among optimal
/// assignments the lexicographically smallest pair list is returned.
pub fn hungarian_match(cost: &[f64], n_pred: usize, n_tgt: usize) -> Result<MatchResult> {
    if cost.len() != n_pred * n_tgt {
        return Err(Error::dim("hungarian_match", "cost entries", n_pred * n_tgt, cost.len()));
    }
    if n_tgt > n_pred {
        return Err(Error::contract(format!("{n_tgt} targets cannot be matched to {n_pred} predictions")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::contract("matching cost must be finite"));
    }
    let c = |p: usize, t: usize| cost[p * n_tgt + t];
    // rows are targets, in order, so sums below follow target order
    let total = |preds: &[usize]| preds.iter().enumerate().map(|(t, &p)| c(p, t)).sum::<f64>();
    let mut best = assign(n_tgt, n_pred, |t, p| c(p, t));
    let optimum = total(&best);
    let tol = 1e-12 * optimum.abs().max(1.0);
    for t in 0..n_tgt {
        let fixed = &best[..t];
        let current = best[t];
        for p in 0..current {
            if fixed.contains(&p) {
                continue;
            }
            let taken: Vec<usize> = fixed.iter().copied().chain([p]).collect();
            let free: Vec<usize> = (0..n_pred).filter(|x| !taken.contains(x)).collect();
            let rest = assign(n_tgt - t - 1, free.len(), |r, k| c(free[k], t + 1 + r));
            let candidate: Vec<usize> = taken.iter().copied().chain(rest.iter().map(|&k| free[k])).collect();
            if total(&candidate) <= optimum + tol {
                best = candidate;
                break;
            }
        }
    }
    let pairs: Vec<(usize, usize)> = best.iter().enumerate().map(|(t, &p)| (p, t)).collect();
    let unmatched_predictions = (0..n_pred).filter(|p| !best.contains(p)).collect();
    Ok(MatchResult {
        total_cost: total(&best),
        pairs,
        unmatched_predictions,
    })
}

/// Focal classification cost of predicting class with probability `p`:
/// positive-label loss minus negative-label loss.
pub fn focal_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let pos = alpha * (1.0 - p).powf(gamma) * -(p.max(LOG_EPS)).ln();
    let neg = (1.0 - alpha) * p.powf(gamma) * -((1.0 - p).max(LOG_EPS)).ln();
    pos - neg
}

/// GIoU of two corner-form boxes.
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

pub fn giou(a: &[f64], b: &[f64]) -> f64 {
    giou_corners(crate::qa::to_corners(a), crate::qa::to_corners(b))
}

/// `cost[i, j] = cls·focal_cost + l1·‖B_i − B_j‖₁ + giou·(1 − GIoU)`.
pub fn match_cost(pred: &Predictions, targets: &[Target], w: &LossWeights) -> Result<Vec<f64>> {
    let n = targets.len();
    let mut cost = vec![0.0; pred.q * n];
    for t in targets {
        if t.class >= pred.m {
            return Err(Error::contract(format!("target class {} outside 0..{}", t.class, pred.m)));
        }
    }
    for i in 0..pred.q {
        let b = &pred.boxes[i * 4..i * 4 + 4];
        for (j, t) in targets.iter().enumerate() {
            let cls = focal_cost(pred.probs[i * pred.m + t.class], w.focal_alpha, w.focal_gamma);
            let l1: f64 = b.iter().zip(&t.bbox).map(|(x, y)| (x - y).abs()).sum();
            let g = giou_cxcywh_grad(b, &t.bbox).0;
            cost[i * n + j] = w.cls * cls + w.l1 * l1 + w.giou * (1.0 - g);
        }
    }
    Ok(cost)
}

/// Unweighted loss components of one layer and its matching.
#[derive(Debug, Clone)]
pub struct LayerLoss {
    pub weighted: Var,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub matching: MatchResult,
}

/// Matches `pred` to `targets` and records the weighted loss on the tape.
/// Each component is normalized by `max(1, targets)`.
pub fn layer_loss(tape: &mut Tape, pred: &PredictionSet, targets: &[Target], w: &LossWeights) -> Result<LayerLoss> {
    let values = Predictions::from_tape(tape, pred);
    let cost = match_cost(&values, targets, w)?;
    let matching = hungarian_match(&cost, values.q, targets.len())?;
    let norm = 1.0 / targets.len().max(1) as f64;
    let mut labels = vec![0.0; values.q * values.m];
    for &(p, t) in &matching.pairs {
        labels[p * values.m + targets[t].class] = 1.0;
    }
    let cls = tape.focal_loss(pred.probs, &labels, w.focal_alpha, w.focal_gamma, norm)?;
    let cls_value = tape.scalar_value(cls);
    let mut weighted = tape.scale(cls, w.cls);
    let (mut l1_value, mut giou_value) = (0.0, 0.0);
    if !targets.is_empty() {
        let rows: Vec<usize> = matching.pairs.iter().map(|&(p, _)| p).collect();
        let boxes = tape.gather_rows(pred.boxes, &rows)?;
        let tb: Vec<f64> = matching.pairs.iter().flat_map(|&(_, t)| targets[t].bbox).collect();
        let l1 = tape.l1_loss(boxes, &tb, norm)?;
        let g = tape.giou_loss(boxes, &tb, norm)?;
        l1_value = tape.scalar_value(l1);
        giou_value = tape.scalar_value(g);
        let l1 = tape.scale(l1, w.l1);
        let g = tape.scale(g, w.giou);
        weighted = tape.add(weighted, l1)?;
        weighted = tape.add(weighted, g)?;
    }
    Ok(LayerLoss {
        weighted,
        cls: cls_value,
        l1: l1_value,
        giou: giou_value,
        matching,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub per_layer: Vec<f64>,
    /// Queries absorbed by merging on the final layer.
    pub merges: usize,
    /// Whether merging was skipped because too few groups remained.
    pub qa_bypassed: bool,
}

/// Sum of per-layer losses. The final layer is merged first when QA is
/// enabled; auxiliary layers are matched as-is.
pub fn total_loss(
    tape: &mut Tape,
    layers: &[PredictionSet],
    targets: &[Target],
    qa: &QaConfig,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    w.validate()?;
    let Some((&last, aux)) = layers.split_last() else {
        return Err(Error::contract("loss needs at least one decoder layer"));
    };
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape, report: &mut LossReport, ll: LayerLoss| -> Result<()> {
        report.cls += ll.cls;
        report.l1 += ll.l1;
        report.giou += ll.giou;
        report.per_layer.push(tape.scalar_value(ll.weighted));
        total = Some(match total {
            Some(t) => tape.add(t, ll.weighted)?,
            None => ll.weighted,
        });
        Ok(())
    };
    for p in aux {
        let ll = layer_loss(tape, p, targets, w)?;
        push(tape, &mut report, ll)?;
    }
    let mut final_set = last;
    if qa.enabled {
        let groups = merge_groups(&Predictions::from_tape(tape, &last), qa)?;
        let q = tape.shape(last.probs)[0];
        if groups.len() < targets.len() {
            report.qa_bypassed = true;
        } else if groups.len() < q {
            report.merges = q - groups.len();
            final_set = aggregate_on_tape(tape, &last, &groups)?;
        }
    }
    let ll = layer_loss(tape, &final_set, targets, w)?;
    push(tape, &mut report, ll)?;
    let total = total.expect("at least one layer");
    report.total = tape.scalar_value(total);
    Ok((total, report))
}
