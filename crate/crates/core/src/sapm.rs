//! Self-attention pooling: a conv stack projects features into one spatial
//! attention map per query, the maps softly pool the features, and a gated MLP
//! reweights the pooled channels.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const GN_EPS: f64 = 1e-5;

/// How projected logits become attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Softmax over all spatial positions of each map, scaled by `tau`.
    #[default]
    Softmax,
    /// Independent sigmoid per position.
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub bias: ParamId,
    /// Group-norm affine parameters; absent on the final conv.
    pub gn: Option<(ParamId, ParamId)>,
    pub padding: usize,
}

/// Attention map projection weights.
#[derive(Debug, Clone)]
pub struct AmpParams {
    pub conv_stack: Vec<ConvBlock>,
    pub channels: usize,
    pub maps: usize,
    pub gn_groups: usize,
    pub tau: f64,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmpSpec {
    pub channels: usize,
    pub maps: usize,
    pub depth: usize,
    pub gn_groups: usize,
    pub tau: f64,
    pub normalization: Normalization,
    /// Std of the final conv's initial weights.
    pub final_init_std: f64,
}

impl AmpSpec {
    pub fn new(channels: usize, maps: usize) -> Self {
        AmpSpec {
            channels,
            maps,
            depth: 3,
            gn_groups: 32,
            tau: 1.2,
            normalization: Normalization::Softmax,
            final_init_std: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.depth) {
            return Err(Error::config(format!("AMP depth {} outside 1..=5", self.depth)));
        }
        if self.depth > 1 && (self.gn_groups == 0 || !self.channels.is_multiple_of(self.gn_groups)) {
            return Err(Error::config(format!(
                "AMP group norm: {} channels not divisible into {} groups",
                self.channels, self.gn_groups
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("AMP temperature must be positive"));
        }
        if self.maps == 0 || self.channels == 0 {
            return Err(Error::config("AMP needs at least one channel and one map"));
        }
        Ok(())
    }
}

impl AmpParams {
    /// Registers a fresh conv stack: a 5×5 first conv, 3×3 afterwards, the
    /// last conv emitting one logit map per query.
    pub fn init(store: &mut ParamStore, prefix: &str, spec: AmpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let d = spec.channels;
        let mut init = Init { rng };
        let mut conv_stack = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let last = i + 1 == spec.depth;
            let k = if i == 0 { 5 } else { 3 };
            let c_out = if last { spec.maps } else { d };
            let fan_in = d * k * k;
            let (kernel, bias) = if last {
                (init.normal(&[c_out, d, k, k], spec.final_init_std), Tensor::zeros(&[c_out]))
            } else {
                (init.fan_in_uniform(&[c_out, d, k, k], fan_in), init.fan_in_uniform(&[c_out], fan_in))
            };
            let kernel = store.add(format!("{prefix}.conv{i}.weight"), kernel, ParamGroup::Head);
            let bias = store.add(format!("{prefix}.conv{i}.bias"), bias, ParamGroup::Head);
            let gn = (!last).then(|| {
                (
                    store.add(format!("{prefix}.gn{i}.weight"), Tensor::ones(&[d]), ParamGroup::Head),
                    store.add(format!("{prefix}.gn{i}.bias"), Tensor::zeros(&[d]), ParamGroup::Head),
                )
            });
            conv_stack.push(ConvBlock {
                kernel,
                bias,
                gn,
                padding: (k - 1) / 2,
            });
        }
        Ok(AmpParams {
            conv_stack,
            channels: d,
            maps: spec.maps,
            gn_groups: spec.gn_groups,
            tau: spec.tau,
            normalization: spec.normalization,
        })
    }

    pub fn depth(&self) -> usize {
        self.conv_stack.len()
    }
}

/// Channel reweighting MLP: two `d × d` linear layers with a ReLU between.
#[derive(Debug, Clone)]
pub struct CrParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub channels: usize,
}

impl CrParams {
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut init = Init { rng };
        let d = channels;
        let w1 = init.fan_in_uniform(&[d, d], d);
        let b1 = init.fan_in_uniform(&[d], d);
        let w2 = init.fan_in_uniform(&[d, d], d);
        let b2 = init.fan_in_uniform(&[d], d);
        CrParams {
            w1: store.add(format!("{prefix}.fc1.weight"), w1, ParamGroup::Head),
            b1: store.add(format!("{prefix}.fc1.bias"), b1, ParamGroup::Head),
            w2: store.add(format!("{prefix}.fc2.weight"), w2, ParamGroup::Head),
            b2: store.add(format!("{prefix}.fc2.bias"), b2, ParamGroup::Head),
            channels,
        }
    }
}

/// One pooling module: an AMP per feature scale and an optional CR stage.
#[derive(Debug, Clone)]
pub struct Sapm {
    pub amps: Vec<AmpParams>,
    pub cr: Option<CrParams>,
}

impl Sapm {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        scales: usize,
        spec: AmpSpec,
        with_cr: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let amps = (0..scales)
            .map(|s| AmpParams::init(store, &format!("{prefix}.amp{s}"), spec, rng))
            .collect::<Result<Vec<_>>>()?;
        let cr = with_cr.then(|| CrParams::init(store, &format!("{prefix}.cr"), spec.channels, rng));
        Ok(Sapm { amps, cr })
    }
}

#[derive(Debug, Clone)]
pub struct PooledFeatures {
    /// Final pooled (and reweighted, when CR is present) rows `[q, d]`.
    pub values: Var,
    /// Scale-averaged pooled rows before reweighting.
    pub pooled: Var,
    pub per_scale: Vec<Var>,
    /// Normalized attention maps, one `[q, h_s, w_s]` per scale.
    pub attention_maps: Vec<Var>,
}

/// Runs the conv stack over `[d, h, w]` (or a batch `[n, d, h, w]`) and
/// normalizes each resulting map. Output is `[q, h, w]` (or `[n, q, h, w]`).
pub fn project_attention_maps(tape: &mut Tape, binder: &mut Binder, features: Var, amp: &AmpParams) -> Result<Var> {
    let fshape = tape.shape(features).to_vec();
    let channels = match fshape[..] {
        [c, _, _] | [_, c, _, _] => c,
        _ => return Err(Error::dim("project_attention_maps", "feature rank", 3, fshape.len())),
    };
    if channels != amp.channels {
        return Err(Error::config(format!(
            "AMP expects {} feature channels, got {channels}",
            amp.channels
        )));
    }
    let mut x = features;
    for block in &amp.conv_stack {
        let k = binder.var(tape, block.kernel);
        let b = binder.var(tape, block.bias);
        x = tape.conv2d(x, k, Some(b), 1, block.padding)?;
        if let Some((g, bt)) = block.gn {
            let g = binder.var(tape, g);
            let bt = binder.var(tape, bt);
            x = tape.group_norm(x, amp.gn_groups, g, bt, GN_EPS)?;
            x = tape.relu(x);
        }
    }
    normalize_maps(tape, x, amp.tau, amp.normalization)
}

fn normalize_maps(tape: &mut Tape, logits: Var, tau: f64, normalization: Normalization) -> Result<Var> {
    match normalization {
        Normalization::Sigmoid => Ok(tape.sigmoid(logits)),
        Normalization::Softmax => {
            let shape = tape.shape(logits).to_vec();
            let plane: usize = shape[shape.len() - 2..].iter().product();
            let rows = tape.value(logits).len() / plane;
            let flat = tape.reshape(logits, &[rows, plane])?;
            let sm = tape.softmax(flat, tau)?;
            tape.reshape(sm, &shape)
        }
    }
}

/// `pooled[i] = Σ_{j,k} features[:, j, k] · maps[i, j, k]`.
pub fn weighted_pool(tape: &mut Tape, features: Var, maps: Var) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let ms = tape.shape(maps).to_vec();
    let (&[d, h, w], &[q, mh, mw]) = (&fs[..], &ms[..]) else {
        return Err(Error::dim("weighted_pool", "rank", 3, fs.len().max(ms.len())));
    };
    if (h, w) != (mh, mw) {
        return Err(Error::dim("weighted_pool", if h != mh { "height" } else { "width" }, h * w, mh * mw));
    }
    let f = tape.reshape(features, &[d, h * w])?;
    let a = tape.reshape(maps, &[q, h * w])?;
    tape.matmul(a, f, false, true)
}

/// Pools each patch of `[n, d, h, w]` with its own single map `[n, 1, h, w]`,
/// giving `[n, d]`.
pub fn weighted_pool_patches(tape: &mut Tape, patches: Var, maps: Var) -> Result<Var> {
    let ps = tape.shape(patches).to_vec();
    let [n, d, h, w] = ps[..] else {
        return Err(Error::dim("weighted_pool_patches", "patch rank", 4, ps.len()));
    };
    if tape.shape(maps) != [n, 1, h, w] {
        return Err(Error::dim("weighted_pool_patches", "map size", n * h * w, tape.value(maps).len()));
    }
    let x = tape.reshape(patches, &[n, d, h * w])?;
    let a = tape.reshape(maps, &[n, h * w])?;
    tape.batched_matvec(x, a)
}

/// `F^O = σ(MLP(F^P)) ⊙ F^P`.
pub fn channel_reweight(tape: &mut Tape, binder: &mut Binder, pooled: Var, cr: &CrParams) -> Result<Var> {
    let w1 = binder.var(tape, cr.w1);
    let b1 = binder.var(tape, cr.b1);
    let w2 = binder.var(tape, cr.w2);
    let b2 = binder.var(tape, cr.b2);
    let h = tape.linear(pooled, w1, Some(b1))?;
    let h = tape.relu(h);
    let h = tape.linear(h, w2, Some(b2))?;
    let gate = tape.sigmoid(h);
    tape.mul(gate, pooled)
}

/// Per-scale projection and pooling, averaged over scales, then reweighted once.
pub fn pool_multiscale(
    tape: &mut Tape,
    binder: &mut Binder,
    features: &[Var],
    amps: &[AmpParams],
    cr: Option<&CrParams>,
) -> Result<PooledFeatures> {
    if features.len() != amps.len() {
        return Err(Error::config(format!(
            "{} feature scales but {} attention projections",
            features.len(),
            amps.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::config("pooling needs at least one feature scale"));
    }
    let mut per_scale = Vec::with_capacity(features.len());
    let mut attention_maps = Vec::with_capacity(features.len());
    for (&f, amp) in features.iter().zip(amps) {
        let maps = project_attention_maps(tape, binder, f, amp)?;
        per_scale.push(weighted_pool(tape, f, maps)?);
        attention_maps.push(maps);
    }
    let pooled = if per_scale.len() == 1 {
        per_scale[0]
    } else {
        let stacked = tape.concat(&per_scale, 0)?;
        let (q, d) = (tape.shape(per_scale[0])[0], tape.shape(per_scale[0])[1]);
        let stacked = tape.reshape(stacked, &[per_scale.len(), q, d])?;
        tape.mean_axis(stacked, 0)?
    };
    let values = match cr {
        Some(cr) => channel_reweight(tape, binder, pooled, cr)?,
        None => pooled,
    };
    Ok(PooledFeatures {
        values,
        pooled,
        per_scale,
        attention_maps,
    })
}

pub fn sapm_forward(tape: &mut Tape, binder: &mut Binder, features: &[Var], sapm: &Sapm) -> Result<PooledFeatures> {
    pool_multiscale(tape, binder, features, &sapm.amps, sapm.cr.as_ref())
}

/// Local variant: every patch of `[n, d, h, w]` gets one attention map from the
/// shared single-map AMP; returns `[n, d]` after optional reweighting.
pub fn sapm_forward_patches(tape: &mut Tape, binder: &mut Binder, patches: Var, sapm: &Sapm) -> Result<Var> {
    let [amp] = &sapm.amps[..] else {
        return Err(Error::config("local pooling uses exactly one attention projection"));
    };
    if amp.maps != 1 {
        return Err(Error::config("local pooling projects one map per patch"));
    }
    let maps = project_attention_maps(tape, binder, patches, amp)?;
    let pooled = weighted_pool_patches(tape, patches, maps)?;
    match &sapm.cr {
        Some(cr) => channel_reweight(tape, binder, pooled, cr),
        None => Ok(pooled),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        Init { rng: &mut r }.uniform(shape, -1.0, 1.0)
    }

    fn small_spec(d: usize, q: usize) -> AmpSpec {
        AmpSpec {
            gn_groups: 2,
            final_init_std: 0.5,
            ..AmpSpec::new(d, q)
        }
    }

    #[test]
    fn softmax_maps_sum_to_one() {
        let mut store = ParamStore::new(Precision::F64);
        let amp = AmpParams::init(&mut store, "amp", small_spec(4, 3), &mut rng(1)).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let f = tape.leaf(&random_tensor(&[4, 5, 6], 2));
        let maps = project_attention_maps(&mut tape, &mut binder, f, &amp).unwrap();
        assert_eq!(tape.shape(maps), &[3, 5, 6]);
        for m in tape.value(maps).chunks(30) {
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(m.iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn zero_final_conv_gives_uniform_maps() {
        let mut store = ParamStore::new(Precision::F64);
        let amp = AmpParams::init(&mut store, "amp", small_spec(4, 2), &mut rng(3)).unwrap();
        let last = amp.conv_stack.last().unwrap().kernel;
        let n = store.get(last).numel();
        store.get_mut(last).assign(&vec![0.0; n]).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let f = tape.leaf(&random_tensor(&[4, 3, 3], 4));
        let maps = project_attention_maps(&mut tape, &mut binder, f, &amp).unwrap();
        for &a in tape.value(maps) {
            assert!((a - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let mut store = ParamStore::new(Precision::F64);
        let amp = AmpParams::init(&mut store, "amp", small_spec(4, 2), &mut rng(5)).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let f = tape.leaf(&random_tensor(&[6, 3, 3], 6));
        let err = project_attention_maps(&mut tape, &mut binder, f, &amp).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn depth_outside_range_rejected() {
        let mut store = ParamStore::new(Precision::F64);
        for depth in [0, 6] {
            let spec = AmpSpec { depth, ..small_spec(4, 2) };
            assert!(AmpParams::init(&mut store, &format!("a{depth}"), spec, &mut rng(0)).is_err());
        }
    }

    #[test]
    fn kernel_shapes_follow_the_stack_layout() {
        let mut store = ParamStore::new(Precision::F64);
        let amp = AmpParams::init(&mut store, "amp", AmpSpec::new(256, 300), &mut rng(0)).unwrap();
        let shapes: Vec<&[usize]> = amp.conv_stack.iter().map(|b| store.get(b.kernel).shape()).collect();
        assert_eq!(shapes, vec![&[256, 256, 5, 5][..], &[256, 256, 3, 3], &[300, 256, 3, 3]]);
        assert!(amp.conv_stack[..2].iter().all(|b| b.gn.is_some()));
        assert!(amp.conv_stack[2].gn.is_none());
    }

    #[test]
    fn delta_and_uniform_pooling() {
        let feats = random_tensor(&[3, 2, 2], 7);
        let mut tape = Tape::new();
        let f = tape.leaf(&feats);
        let mut maps = vec![0.0; 8];
        maps[3] = 1.0; // query 0 at (1,1)
        maps[4..].fill(0.25); // query 1 uniform
        let m = tape.constant(&[2, 2, 2], maps).unwrap();
        let p = weighted_pool(&mut tape, f, m).unwrap();
        let out = tape.value(p);
        for c in 0..3 {
            assert!((out[c] - feats.at(&[c, 1, 1])).abs() < 1e-15);
            let mean = (0..4).map(|i| feats.data()[c * 4 + i]).sum::<f64>() / 4.0;
            assert!((out[3 + c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn pooling_loop_oracle() {
        let feats = random_tensor(&[3, 2, 2], 8);
        let raw = random_tensor(&[2, 4], 9);
        let mut tape = Tape::new();
        let r = tape.leaf(&raw);
        let sm = tape.softmax(r, 1.0).unwrap();
        let maps = tape.reshape(sm, &[2, 2, 2]).unwrap();
        let mv = tape.value(maps).to_vec();
        let f = tape.leaf(&feats);
        let p = weighted_pool(&mut tape, f, maps).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for j in 0..2 {
                    for k in 0..2 {
                        s += feats.at(&[c, j, k]) * mv[i * 4 + j * 2 + k];
                    }
                }
                assert!((tape.value(p)[i * 3 + c] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn reweight_with_zero_mlp_halves() {
        let mut store = ParamStore::new(Precision::F64);
        let cr = CrParams::init(&mut store, "cr", 4, &mut rng(10));
        for id in [cr.w1, cr.b1, cr.w2, cr.b2] {
            let n = store.get(id).numel();
            store.get_mut(id).assign(&vec![0.0; n]).unwrap();
        }
        let x = random_tensor(&[3, 4], 11);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let v = tape.leaf(&x);
        let out = channel_reweight(&mut tape, &mut binder, v, &cr).unwrap();
        for (o, i) in tape.value(out).iter().zip(x.data()) {
            assert!((o - 0.5 * i).abs() < 1e-15);
        }
        let z = tape.leaf(&Tensor::zeros(&[3, 4]));
        let out = channel_reweight(&mut tape, &mut binder, z, &cr).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_count_mismatch_rejected() {
        let mut store = ParamStore::new(Precision::F64);
        let amp = AmpParams::init(&mut store, "amp", small_spec(4, 2), &mut rng(12)).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let f = tape.leaf(&random_tensor(&[4, 3, 3], 13));
        let err = pool_multiscale(&mut tape, &mut binder, &[f, f], &[amp], None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
