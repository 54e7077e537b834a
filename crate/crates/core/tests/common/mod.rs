//! Shared oracles for the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sacq::harness::train::ExperimentConfig;
use sacq::harness::eval::{ap_report, coco_thresholds, Detection};
use sacq::matching::{hungarian_match, total_loss, LossWeights, Target};
use sacq::model::roi::roi_align;
use sacq::model::{Detector, DetectorConfig, PredictionSet, Predictions};
use sacq::params::{Binder, ParamStore};
use sacq::qa::{aggregate_on_tape, box_iou_matrix, class_similarity, qa_apply, QaConfig};
use sacq::sapm::{channel_reweight, project_attention_maps, sapm_forward, weighted_pool, AmpParams, AmpSpec, CrParams, Sapm};
use sacq::tensor::{check_gradients, check_gradients_at, GradCheckReport};
use sacq::{Precision, Result, Tape, Tensor, Var};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(rng, n, -1.0, 1.0)).unwrap()
}

/// `Σ r ⊙ x` for a fixed random `r`, so every output coordinate matters.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    let r = tape.constant(&shape, uniform(&mut rng(seed), n, -1.0, 1.0))?;
    let p = tape.mul(x, r)?;
    Ok(tape.sum(p))
}

fn check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> GradCheckReport {
    check_gradients(f, x, GRAD_EPS, GRAD_TOL).unwrap()
}

/// Worst of several reports.
fn worst(reports: Vec<GradCheckReport>) -> GradCheckReport {
    reports
        .into_iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|mut r| {
            r.passed = r.max_rel_error <= r.tol;
            r
        })
        .unwrap()
}

pub const GRADIENT_CASES: [&str; 12] = [
    "conv2d",
    "group_norm",
    "linear",
    "spatial_softmax",
    "bilinear_sample",
    "weighted_pool",
    "channel_reweight",
    "sapm_forward",
    "qa_aggregate",
    "focal_loss",
    "giou_loss",
    "micro_model",
];

pub fn gradient_case(name: &str) -> GradCheckReport {
    let mut r = rng(name.len() as u64 * 7919);
    match name {
        "conv2d" => {
            let mut reports = Vec::new();
            // im2col path (stride 2) and the kn2row path (fewer outputs than inputs)
            for (c_in, c_out, k, stride, pad) in [(3, 4, 3, 2, 1), (5, 2, 5, 1, 2), (2, 3, 3, 1, 1)] {
                let x = tensor(&mut r, &[2, c_in, 6, 5]);
                let w = tensor(&mut r, &[c_out, c_in, k, k]);
                let b = tensor(&mut r, &[c_out]);
                let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
                reports.push(check(
                    move |t, v| {
                        let w = t.leaf(&wc);
                        let b = t.leaf(&bc);
                        let y = t.conv2d(v, w, Some(b), stride, pad)?;
                        project(t, y, 1)
                    },
                    &x,
                ));
                let bc = b.clone();
                reports.push(check(
                    move |t, v| {
                        let x = t.leaf(&xc);
                        let b = t.leaf(&bc);
                        let y = t.conv2d(x, v, Some(b), stride, pad)?;
                        project(t, y, 2)
                    },
                    &w,
                ));
                let xc = x.clone();
                reports.push(check(
                    move |t, v| {
                        let x = t.leaf(&xc);
                        let w = t.leaf(&w);
                        let y = t.conv2d(x, w, Some(v), stride, pad)?;
                        project(t, y, 3)
                    },
                    &b,
                ));
            }
            worst(reports)
        }
        "group_norm" => {
            let x = tensor(&mut r, &[2, 4, 3, 3]);
            let gamma = tensor(&mut r, &[4]);
            let beta = tensor(&mut r, &[4]);
            let (g2, b2, x2) = (gamma.clone(), beta.clone(), x.clone());
            worst(vec![
                check(
                    move |t, v| {
                        let g = t.leaf(&g2);
                        let b = t.leaf(&b2);
                        let y = t.group_norm(v, 2, g, b, 1e-5)?;
                        project(t, y, 4)
                    },
                    &x,
                ),
                check(
                    move |t, v| {
                        let x = t.leaf(&x2);
                        let b = t.leaf(&beta);
                        let y = t.group_norm(x, 2, v, b, 1e-5)?;
                        project(t, y, 5)
                    },
                    &gamma,
                ),
            ])
        }
        "linear" => {
            let x = tensor(&mut r, &[3, 5]);
            let w = tensor(&mut r, &[4, 5]);
            let b = tensor(&mut r, &[4]);
            let (w2, b2, x2) = (w.clone(), b.clone(), x.clone());
            worst(vec![
                check(
                    move |t, v| {
                        let w = t.leaf(&w2);
                        let b = t.leaf(&b2);
                        let y = t.linear(v, w, Some(b))?;
                        project(t, y, 6)
                    },
                    &x,
                ),
                check(
                    move |t, v| {
                        let x = t.leaf(&x2);
                        let b = t.leaf(&b);
                        let y = t.linear(x, v, Some(b))?;
                        project(t, y, 7)
                    },
                    &w,
                ),
            ])
        }
        "spatial_softmax" => {
            let x = tensor(&mut r, &[3, 4, 5]);
            check(
                |t, v| {
                    let y = t.spatial_softmax(v, 1.2)?;
                    project(t, y, 8)
                },
                &x,
            )
        }
        "bilinear_sample" => {
            let x = tensor(&mut r, &[2, 4, 5]);
            check(
                |t, v| {
                    let y = t.bilinear_sample(v, 1.3, 2.7)?;
                    project(t, y, 9)
                },
                &x,
            )
        }
        "weighted_pool" => {
            let f = tensor(&mut r, &[4, 3, 3]);
            let m = tensor(&mut r, &[2, 3, 3]);
            let (f2, m2) = (f.clone(), m.clone());
            worst(vec![
                check(
                    move |t, v| {
                        let m = t.leaf(&m2);
                        let y = weighted_pool(t, v, m)?;
                        project(t, y, 10)
                    },
                    &f,
                ),
                check(
                    move |t, v| {
                        let f = t.leaf(&f2);
                        let y = weighted_pool(t, f, v)?;
                        project(t, y, 11)
                    },
                    &m,
                ),
            ])
        }
        "channel_reweight" => {
            let mut store = ParamStore::new(Precision::F64);
            let cr = CrParams::init(&mut store, "cr", 8, &mut r);
            let pooled = tensor(&mut r, &[3, 8]);
            check(
                |t, v| {
                    let mut binder = Binder::new(&store);
                    let y = channel_reweight(t, &mut binder, v, &cr)?;
                    project(t, y, 12)
                },
                &pooled,
            )
        }
        "sapm_forward" => {
            let mut store = ParamStore::new(Precision::F64);
            let spec = AmpSpec {
                gn_groups: 4,
                final_init_std: 0.3,
                ..AmpSpec::new(8, 3)
            };
            let sapm = Sapm::init(&mut store, "sapm", 1, spec, true, &mut r).unwrap();
            let f = tensor(&mut r, &[8, 4, 4]);
            check(
                |t, v| {
                    let mut binder = Binder::new(&store);
                    let out = sapm_forward(t, &mut binder, &[v], &sapm)?;
                    project(t, out.values, 13)
                },
                &f,
            )
        }
        "qa_aggregate" => {
            let probs = Tensor::new(&[5, 3], uniform(&mut r, 15, 0.05, 0.95)).unwrap();
            let boxes = Tensor::new(&[5, 4], uniform(&mut r, 20, 0.2, 0.6)).unwrap();
            let groups = vec![vec![0, 2], vec![1], vec![3, 4]];
            check(
                |t, v| {
                    let b = t.leaf(&boxes);
                    let set = PredictionSet { logits: v, probs: v, boxes: b };
                    let merged = aggregate_on_tape(t, &set, &groups)?;
                    let a = project(t, merged.logits, 14)?;
                    let c = project(t, merged.probs, 15)?;
                    t.add(a, c)
                },
                &probs,
            )
        }
        "focal_loss" => {
            let p = Tensor::new(&[4, 3], uniform(&mut r, 12, 0.05, 0.95)).unwrap();
            let targets = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
            check(|t, v| t.focal_loss(v, &targets, 0.25, 2.0, 0.5), &p)
        }
        "giou_loss" => {
            let mut data = Vec::new();
            for _ in 0..3 {
                data.extend(uniform(&mut r, 2, 0.3, 0.7));
                data.extend(uniform(&mut r, 2, 0.1, 0.4));
            }
            let b = Tensor::new(&[3, 4], data).unwrap();
            let target = [0.5, 0.5, 0.3, 0.2, 0.4, 0.6, 0.2, 0.3, 0.45, 0.5, 0.25, 0.25];
            check(|t, v| t.giou_loss(v, &target, 1.0), &b)
        }
        "micro_model" => micro_model_gradients(),
        other => panic!("no gradient case {other}"),
    }
}

pub fn micro_config() -> DetectorConfig {
    DetectorConfig {
        d: 16,
        q: 3,
        m: 3,
        encoder_layers: 1,
        decoder_layers: 2,
        heads: 2,
        scales: 1,
        roi_size: 3,
        gn_groups: 4,
        ffn_dim: 16,
        backbone_channels: [8, 8, 16],
        amp_depth: 2,
        ..DetectorConfig::default()
    }
}

/// A few-second training setup: micro detector on 32×32 scenes.
pub fn small_experiment(steps: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model = DetectorConfig { q: 5, ..micro_config() };
    c.data.image_size = 32;
    c.data.min_size = 6.0;
    c.data.max_size = 14.0;
    c.train.steps = steps;
    c.train.batch = 2;
    c.train.log_every = 1;
    c
}

/// End-to-end loss of an 8×8 image through both pooling modules, against a
/// subset of coordinates of several parameters. References of layers after
/// the first are frozen at their unperturbed values.
pub fn micro_model_gradients() -> GradCheckReport {
    let det = Detector::new(micro_config(), 3, Precision::F64).unwrap();
    let mut r = rng(17);
    let image = Tensor::new(&[3, 8, 8], uniform(&mut r, 192, 0.0, 1.0)).unwrap();
    let targets = vec![
        Target { class: 0, bbox: [0.3, 0.4, 0.3, 0.35] },
        Target { class: 2, bbox: [0.7, 0.6, 0.25, 0.3] },
    ];
    let weights = LossWeights::default();
    let qa = QaConfig::default();
    let refs = {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&det.store);
        det.decode(&mut tape, &mut binder, &image).unwrap().references[1..].to_vec()
    };
    let names = [
        "backbone.block0.weight",
        "sapm_global.amp0.conv0.weight",
        "sapm_global.cr.fc1.weight",
        "sapm_local.amp0.conv0.weight",
        "decoder.layers0.cross_attn.q_proj.weight",
        "class_head.bias",
        "box_head.layers2.weight",
        "pos_head.layers0.weight",
        "reference_logits",
    ];
    let mut reports = Vec::new();
    for name in names {
        let id = det
            .store
            .find(name)
            .unwrap_or_else(|| panic!("micro model lacks parameter {name}"));
        let value = det.store.get(id).clone();
        let coords: Vec<usize> = (0..value.numel()).step_by((value.numel() / 12).max(1)).collect();
        let f = |t: &mut Tape, v: Var| {
            let mut binder = Binder::new(&det.store);
            binder.bind(id, v);
            let out = det.decode_with_references(t, &mut binder, &image, Some(&refs))?;
            Ok(total_loss(t, &out.layers, &targets, &qa, &weights)?.0)
        };
        reports.push(check_gradients_at(f, &value, &coords, GRAD_EPS, GRAD_TOL).unwrap());
    }
    worst(reports)
}

// ---------------------------------------------------------------- QA oracle

fn oracle_kl(probs: &[f64], m: usize, eps: f64) -> Vec<f64> {
    let q = probs.len() / m;
    let norm: Vec<Vec<f64>> = probs
        .chunks(m)
        .map(|row| {
            let c: Vec<f64> = row.iter().map(|p| p.max(eps).min(1.0)).collect();
            let s: f64 = c.iter().sum();
            c.iter().map(|v| v / s).collect()
        })
        .collect();
    let mut out = vec![0.0; q * q];
    for i in 0..q {
        for j in 0..q {
            if i == j {
                continue;
            }
            let mut s = 0.0;
            for c in 0..m {
                s += norm[i][c] * (norm[i][c] / norm[j][c]).ln() + norm[j][c] * (norm[j][c] / norm[i][c]).ln();
            }
            out[i * q + j] = s;
        }
    }
    out
}

fn oracle_iou(a: &[f64], b: &[f64]) -> f64 {
    let (ax0, ax1, ay0, ay1) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0, a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
    let (bx0, bx1, by0, by1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0, b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Components by transitive closure of the adjacency matrix, ordered by
/// smallest member.
fn closure_components(adj: &[bool], q: usize) -> Vec<Vec<usize>> {
    let mut reach = adj.to_vec();
    for i in 0..q {
        reach[i * q + i] = true;
    }
    for k in 0..q {
        for i in 0..q {
            for j in 0..q {
                if reach[i * q + k] && reach[k * q + j] {
                    reach[i * q + j] = true;
                }
            }
        }
    }
    let mut seen = vec![false; q];
    let mut groups = Vec::new();
    for i in 0..q {
        if seen[i] {
            continue;
        }
        let g: Vec<usize> = (0..q).filter(|&j| reach[i * q + j]).collect();
        g.iter().for_each(|&j| seen[j] = true);
        groups.push(g);
    }
    groups
}

pub fn random_predictions(r: &mut ChaCha8Rng, q: usize, m: usize) -> Predictions {
    let mut probs = Vec::with_capacity(q * m);
    let mut boxes = Vec::with_capacity(q * 4);
    for i in 0..q {
        if i > 0 && r.random_bool(0.5) {
            // near-duplicate of an earlier query
            let src = r.random_range(0..i);
            for c in 0..m {
                let p: f64 = probs[src * m + c];
                probs.push((p * (1.0 + r.random_range(-1e-5..1e-5))).min(1.0));
            }
            for c in 0..4 {
                let v: f64 = boxes[src * 4 + c];
                boxes.push(v + r.random_range(-0.01..0.01));
            }
        } else {
            probs.extend(uniform(r, m, 0.0, 1.0));
            boxes.extend(uniform(r, 2, 0.2, 0.8));
            boxes.extend(uniform(r, 2, 0.1, 0.4));
        }
    }
    Predictions {
        q,
        m,
        logits: probs.iter().map(|&p: &f64| (p.max(1e-6) / (1.0 - p).max(1e-6)).ln()).collect(),
        probs,
        boxes,
    }
}

/// Checks `n` random instances; returns the first disagreement.
pub fn qa_oracle(n: usize, seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let mut merged_any = 0;
    for case in 0..n {
        let q = r.random_range(1..=8);
        let m = r.random_range(2..=5);
        let pred = random_predictions(&mut r, q, m);
        let cfg = QaConfig {
            t_c: [3e-7, 1e-3, 0.1, 1.0][r.random_range(0..4)],
            t_b: [0.5, 0.7, 0.9][r.random_range(0..3)],
            ..QaConfig::default()
        };
        let s_cls = class_similarity(&pred.probs, m, cfg.epsilon).map_err(|e| e.to_string())?;
        let s_box = box_iou_matrix(&pred.boxes);
        let o_cls = oracle_kl(&pred.probs, m, cfg.epsilon);
        let mut adj = vec![false; q * q];
        for i in 0..q {
            for j in 0..q {
                let o_box = oracle_iou(&pred.boxes[i * 4..i * 4 + 4], &pred.boxes[j * 4..j * 4 + 4]);
                if i != j && (s_cls[i * q + j] - o_cls[i * q + j]).abs() > 1e-10 {
                    return Err(format!("case {case}: class similarity ({i},{j}) {} vs {}", s_cls[i * q + j], o_cls[i * q + j]));
                }
                if (s_box[i * q + j] - o_box).abs() > 1e-10 {
                    return Err(format!("case {case}: box IoU ({i},{j}) {} vs {o_box}", s_box[i * q + j]));
                }
                adj[i * q + j] = i != j && o_cls[i * q + j] < cfg.t_c && o_box > cfg.t_b;
            }
        }
        let expect = closure_components(&adj, q);
        let plan = qa_apply(&pred, &cfg).map_err(|e| e.to_string())?;
        if plan.groups != expect {
            return Err(format!("case {case}: partition {:?} vs {expect:?}", plan.groups));
        }
        merged_any += plan.merges();
        for (g, members) in expect.iter().enumerate() {
            let k = members.len() as f64;
            for c in 0..m {
                let mean = members.iter().map(|&i| pred.probs[i * m + c]).sum::<f64>() / k;
                if (plan.merged.probs[g * m + c] - mean).abs() > 1e-12 {
                    return Err(format!("case {case}: merged prob of group {g}"));
                }
            }
            for c in 0..4 {
                let mean = members.iter().map(|&i| pred.boxes[i * 4 + c]).sum::<f64>() / k;
                if (plan.merged.boxes[g * 4 + c] - mean).abs() > 1e-12 {
                    return Err(format!("case {case}: merged box of group {g}"));
                }
            }
        }
    }
    if merged_any == 0 {
        return Err("no instance produced a merge".into());
    }
    Ok(())
}

// ---------------------------------------------------------- matching oracle

fn best_by_permutation(cost: &[f64], n_pred: usize, n_tgt: usize) -> f64 {
    fn go(t: usize, used: &mut [bool], acc: f64, cost: &[f64], n_pred: usize, n_tgt: usize, best: &mut f64) {
        if t == n_tgt {
            *best = best.min(acc);
            return;
        }
        for p in 0..n_pred {
            if !used[p] {
                used[p] = true;
                go(t + 1, used, acc + cost[p * n_tgt + t], cost, n_pred, n_tgt, best);
                used[p] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, &mut vec![false; n_pred], 0.0, cost, n_pred, n_tgt, &mut best);
    best
}

pub fn matching_oracle(n: usize, seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    for case in 0..n {
        let n_pred = r.random_range(1..=7);
        let n_tgt = r.random_range(0..=n_pred);
        let integer = case % 2 == 0;
        let cost: Vec<f64> = (0..n_pred * n_tgt)
            .map(|_| if integer { r.random_range(0..10) as f64 } else { r.random_range(-3.0..3.0) })
            .collect();
        let res = hungarian_match(&cost, n_pred, n_tgt).map_err(|e| e.to_string())?;
        let brute = best_by_permutation(&cost, n_pred, n_tgt);
        let got: f64 = res.pairs.iter().map(|&(p, t)| cost[p * n_tgt + t]).sum();
        let tol = if integer { 0.0 } else { 1e-12 };
        if (got - brute).abs() > tol || (res.total_cost - brute).abs() > tol {
            return Err(format!("case {case}: cost {got} (reported {}) vs optimum {brute}", res.total_cost));
        }
        let mut preds: Vec<usize> = res.pairs.iter().map(|p| p.0).collect();
        preds.sort_unstable();
        preds.dedup();
        if preds.len() != n_tgt || res.pairs.iter().enumerate().any(|(k, p)| p.1 != k) {
            return Err(format!("case {case}: not a valid assignment {:?}", res.pairs));
        }
        let s = r.random_range(0.01..100.0);
        let scaled: Vec<f64> = cost.iter().map(|c| c * s).collect();
        let again = hungarian_match(&scaled, n_pred, n_tgt).map_err(|e| e.to_string())?;
        if again.pairs != res.pairs {
            return Err(format!("case {case}: scaling by {s} changed {:?} to {:?}", res.pairs, again.pairs));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- AP oracle

/// All-pairs greedy matching and 101-point interpolation written as directly
/// as possible: precision at recall level r is the maximum precision over all
/// ranks reaching recall ≥ r.
pub fn brute_force_ap(dets: &[Vec<Detection>], gts: &[Vec<Target>], m: usize) -> (f64, f64, f64) {
    let thresholds = coco_thresholds();
    let mut table = vec![vec![None; thresholds.len()]; m];
    for (c, row) in table.iter_mut().enumerate() {
        let n_gt = gts.iter().flatten().filter(|t| t.class == c).count();
        if n_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, Detection)> = Vec::new();
        for (img, ds) in dets.iter().enumerate() {
            for d in ds.iter().filter(|d| d.class == c) {
                ranked.push((img, *d));
            }
        }
        ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
        for (k, &thr) in thresholds.iter().enumerate() {
            let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut curve = Vec::new();
            let mut tp = 0.0;
            for (rank, (img, d)) in ranked.iter().enumerate() {
                let mut best = -1.0;
                let mut pick = None;
                for (j, t) in gts[*img].iter().enumerate() {
                    if t.class != c || used[*img][j] {
                        continue;
                    }
                    let iou = oracle_iou(&d.bbox, &t.bbox);
                    if iou >= thr && iou > best {
                        best = iou;
                        pick = Some(j);
                    }
                }
                if let Some(j) = pick {
                    used[*img][j] = true;
                    tp += 1.0;
                }
                curve.push((tp / n_gt as f64, tp / (rank + 1) as f64));
            }
            let mut total = 0.0;
            for level in 0..=100 {
                let rl = level as f64 / 100.0;
                total += curve.iter().filter(|(rec, _)| *rec >= rl).map(|(_, p)| *p).fold(0.0, f64::max);
            }
            row[k] = Some(total / 101.0);
        }
    }
    let mean = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let all = mean(table.iter().flatten().flatten().copied().collect());
    let at = |k: usize| mean(table.iter().filter_map(|row| row[k]).collect());
    (all, at(0), at(5))
}

pub fn random_ap_case(r: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<Target>>, usize) {
    let m = r.random_range(1..=3);
    let images = r.random_range(1..=4);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let mut g = Vec::new();
        for _ in 0..r.random_range(0..=3) {
            let bbox = [r.random_range(0.2..0.8), r.random_range(0.2..0.8), r.random_range(0.1..0.4), r.random_range(0.1..0.4)];
            g.push(Target { class: r.random_range(0..m), bbox });
        }
        let mut d = Vec::new();
        for _ in 0..r.random_range(0..=5) {
            let bbox = if !g.is_empty() && r.random_bool(0.7) {
                let t: &Target = &g[r.random_range(0..g.len())];
                let mut b = t.bbox;
                b.iter_mut().for_each(|v| *v += r.random_range(-0.04..0.04));
                b[2] = b[2].abs().max(0.01);
                b[3] = b[3].abs().max(0.01);
                b
            } else {
                [r.random_range(0.2..0.8), r.random_range(0.2..0.8), r.random_range(0.05..0.4), r.random_range(0.05..0.4)]
            };
            d.push(Detection { class: r.random_range(0..m), score: r.random_range(0.0..1.0), bbox });
        }
        dets.push(d);
        gts.push(g);
    }
    (dets, gts, m)
}

pub fn ap_oracle(n: usize, seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    for case in 0..n {
        let (dets, gts, m) = random_ap_case(&mut r);
        let got = ap_report(&dets, &gts, m, 0.0);
        let (ap, ap50, ap75) = brute_force_ap(&dets, &gts, m);
        for (name, a, b) in [("ap", got.ap, ap), ("ap50", got.ap50, ap50), ("ap75", got.ap75, ap75)] {
            if (a - b).abs() > 1e-9 {
                return Err(format!("case {case}: {name} {a} vs {b}"));
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------ kernel oracles

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

pub fn conv2d_oracle(n: usize, seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    for case in 0..n {
        let (c_in, c_out) = (r.random_range(1..=6), r.random_range(1..=6));
        let (h, w) = (r.random_range(1..=7), r.random_range(1..=7));
        let pad = r.random_range(0..=2);
        let k = r.random_range(1..=(h.min(w) + 2 * pad).min(5));
        let stride = r.random_range(1..=3);
        let batch = r.random_range(1..=2);
        let x = tensor(&mut r, &[batch, c_in, h, w]);
        let wt = tensor(&mut r, &[c_out, c_in, k, k]);
        let b = tensor(&mut r, &[c_out]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&wt), tape.leaf(&b));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).map_err(|e| e.to_string())?;
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        let mut expect = vec![0.0; batch * c_out * oh * ow];
        for nb in 0..batch {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.data()[co];
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += x.at(&[nb, ci, iy as usize, ix as usize]) * wt.at(&[co, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        expect[((nb * c_out + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        if !close(tape.value(y), &expect, 1e-10) {
            return Err(format!("case {case}: conv2d c_in {c_in} c_out {c_out} {h}x{w} k {k} s {stride} p {pad}"));
        }
    }
    Ok(())
}

pub fn group_norm_oracle(n: usize, seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    for case in 0..n {
        let groups = r.random_range(1..=4);
        let c = groups * r.random_range(1..=3);
        let (batch, h, w) = (r.random_range(1..=2), r.random_range(1..=5), r.random_range(1..=5));
        let x = tensor(&mut r, &[batch, c, h, w]);
        let gamma = tensor(&mut r, &[c]);
        let beta = tensor(&mut r, &[c]);
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.leaf(&x), tape.leaf(&gamma), tape.leaf(&beta));
        let y = tape.group_norm(xv, groups, gv, bv, 1e-5).map_err(|e| e.to_string())?;
        let per = c / groups;
        let mut expect = vec![0.0; x.numel()];
        for nb in 0..batch {
            for g in 0..groups {
                let mut vals = Vec::new();
                for ch in g * per..(g + 1) * per {
                    for i in 0..h {
                        for j in 0..w {
                            vals.push(x.at(&[nb, ch, i, j]));
                        }
                    }
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                for ch in g * per..(g + 1) * per {
                    for i in 0..h {
                        for j in 0..w {
                            let xh = (x.at(&[nb, ch, i, j]) - mean) / (var + 1e-5).sqrt();
                            expect[((nb * c + ch) * h + i) * w + j] = gamma.data()[ch] * xh + beta.data()[ch];
                        }
                    }
                }
            }
        }
        if !close(tape.value(y), &expect, 1e-10) {
            return Err(format!("case {case}: group_norm"));
        }
    }
    Ok(())
}

pub fn linear_oracle(n: usize, seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    for case in 0..n {
        let (rows, d_in, d_out) = (r.random_range(1..=6), r.random_range(1..=9), r.random_range(1..=9));
        let x = tensor(&mut r, &[rows, d_in]);
        let w = tensor(&mut r, &[d_out, d_in]);
        let b = tensor(&mut r, &[d_out]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let y = tape.linear(xv, wv, Some(bv)).map_err(|e| e.to_string())?;
        let mut expect = vec![0.0; rows * d_out];
        for i in 0..rows {
            for o in 0..d_out {
                expect[i * d_out + o] = b.data()[o] + (0..d_in).map(|k| x.at(&[i, k]) * w.at(&[o, k])).sum::<f64>();
            }
        }
        if !close(tape.value(y), &expect, 1e-10) {
            return Err(format!("case {case}: linear"));
        }
    }
    Ok(())
}

fn bilinear_oracle(x: &Tensor, c: usize, px: f64, py: f64) -> f64 {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let xc = px.max(0.0).min((w - 1) as f64);
    let yc = py.max(0.0).min((h - 1) as f64);
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            // tent weights reproduce bilinear interpolation on the clamped point
            let wy = (1.0 - (yc - i as f64).abs()).max(0.0);
            let wx = (1.0 - (xc - j as f64).abs()).max(0.0);
            s += wx * wy * x.at(&[c, i, j]);
        }
    }
    s
}

pub fn roi_align_oracle(n: usize, seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    for case in 0..n {
        let (d, h, w) = (r.random_range(1..=4), r.random_range(1..=8), r.random_range(1..=8));
        let q = r.random_range(1..=3);
        let out = r.random_range(1..=4);
        let x = tensor(&mut r, &[d, h, w]);
        let mut boxes = Vec::new();
        for _ in 0..q {
            boxes.extend([r.random_range(-0.1..1.1), r.random_range(-0.1..1.1), r.random_range(0.05..0.9), r.random_range(0.05..0.9)]);
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = roi_align(&mut tape, xv, &boxes, out).map_err(|e| e.to_string())?;
        let mut expect = Vec::new();
        for b in boxes.chunks(4) {
            let (bw, bh) = (b[2] * w as f64, b[3] * h as f64);
            let (x0, y0) = (b[0] * w as f64 - bw / 2.0, b[1] * h as f64 - bh / 2.0);
            for c in 0..d {
                for by in 0..out {
                    for bx in 0..out {
                        let mut s = 0.0;
                        for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                            let py = y0 + (by as f64 + sy) * bh / out as f64 - 0.5;
                            let px = x0 + (bx as f64 + sx) * bw / out as f64 - 0.5;
                            s += bilinear_oracle(&x, c, px, py);
                        }
                        expect.push(s / 4.0);
                    }
                }
            }
        }
        if !close(tape.value(y), &expect, 1e-10) {
            return Err(format!("case {case}: roi_align {d}x{h}x{w} out {out}"));
        }
    }
    Ok(())
}

// ------------------------------------------------------ normalization checks

/// Softmax maps sum to one and pooled rows stay inside each channel's range.
pub fn normalization_invariants(n: usize, seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    for case in 0..n {
        let d = 4 * r.random_range(1..=3);
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
        let maps = r.random_range(1..=4);
        let spec = AmpSpec {
            depth: r.random_range(1..=3),
            gn_groups: 4,
            final_init_std: r.random_range(0.01..2.0),
            ..AmpSpec::new(d, maps)
        };
        let mut store = ParamStore::new(Precision::F64);
        let amp = AmpParams::init(&mut store, "amp", spec, &mut r).map_err(|e| e.to_string())?;
        let f = Tensor::new(&[d, h, w], uniform(&mut r, d * h * w, -3.0, 3.0)).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let fv = tape.leaf(&f);
        let a = project_attention_maps(&mut tape, &mut binder, fv, &amp).map_err(|e| e.to_string())?;
        for (i, map) in tape.value(a).chunks(h * w).enumerate() {
            let s: f64 = map.iter().sum();
            if (s - 1.0).abs() > 1e-6 || map.iter().any(|v| *v < 0.0) {
                return Err(format!("case {case}: map {i} sums to {s}"));
            }
        }
        let pooled = weighted_pool(&mut tape, fv, a).map_err(|e| e.to_string())?;
        let pv = tape.value(pooled);
        for ch in 0..d {
            let plane = &f.data()[ch * h * w..(ch + 1) * h * w];
            let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..maps {
                let v = pv[i * d + ch];
                if v < lo - 1e-12 || v > hi + 1e-12 {
                    return Err(format!("case {case}: pooled {v} outside [{lo}, {hi}]"));
                }
            }
        }
    }
    Ok(())
}
