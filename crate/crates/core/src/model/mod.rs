//! Toy DETR-style detector whose content queries come from attention pooling
//! over the encoder output and are refined per layer from RoI-aligned patches.

pub mod checkpoint;
mod config;
pub mod embed;
pub mod layers;
pub mod roi;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::DetectorConfig;

use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamGroup, ParamId, ParamStore};
use crate::sapm::{sapm_forward, sapm_forward_patches, AmpSpec, PooledFeatures, Sapm, GN_EPS};
use crate::tensor::kernels;
use crate::tensor::{Precision, Tape, Tensor, Var};
use layers::{DecoderLayerP, EncoderLayerP, LinearP, MlpP};

/// Prior probability the class bias is initialized to.
const CLASS_PRIOR: f64 = 0.01;
/// Clamp for inverse-sigmoid of reference boxes.
pub const REF_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct FeatureScale {
    /// Encoded features `[d, h_s, w_s]`.
    pub map: Var,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

/// Encoder output for one image.
#[derive(Debug, Clone)]
pub struct FeatureMapSet {
    pub scales: Vec<FeatureScale>,
    pub image_size: (usize, usize),
    /// All scales' tokens concatenated, `[Σ h_s·w_s, d]`.
    pub memory: Var,
    pub memory_pos: Var,
}

impl FeatureMapSet {
    pub fn maps(&self) -> Vec<Var> {
        self.scales.iter().map(|s| s.map).collect()
    }
}

#[derive(Debug, Clone)]
pub struct QueryState {
    pub content: Var,
    pub positional: Var,
    /// cxcywh values in `[0, 1]`, `[q, 4]` row-major.
    pub reference_boxes: Vec<f64>,
    /// Inverse-sigmoid of the reference boxes as a tape value; carries gradient
    /// only for the first layer's learnable references.
    pub reference_logits: Var,
}

/// Per-layer predictions recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PredictionSet {
    pub logits: Var,
    pub probs: Var,
    pub boxes: Var,
}

/// Plain-value predictions for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub q: usize,
    pub m: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub boxes: Vec<f64>,
}

impl Predictions {
    pub fn from_tape(tape: &Tape, p: &PredictionSet) -> Self {
        let shape = tape.shape(p.probs);
        Predictions {
            q: shape[0],
            m: shape[1],
            logits: tape.value(p.logits).to_vec(),
            probs: tape.value(p.probs).to_vec(),
            boxes: tape.value(p.boxes).to_vec(),
        }
    }
}

pub struct DecodeOutput {
    pub features: FeatureMapSet,
    pub global: Option<PooledFeatures>,
    pub layers: Vec<PredictionSet>,
    /// Reference boxes each layer was conditioned on.
    pub references: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: ParamId,
    b: ParamId,
    gn: (ParamId, ParamId),
    gn_groups: usize,
    stride: usize,
    padding: usize,
}

impl ConvP {
    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gn_groups: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let mut init = Init { rng };
        let w = store.add(format!("{name}.weight"), init.fan_in_uniform(&[c_out, c_in, k, k], fan_in), group);
        let b = store.add(format!("{name}.bias"), init.fan_in_uniform(&[c_out], fan_in), group);
        let g = store.add(format!("{name}.norm.weight"), Tensor::ones(&[c_out]), group);
        let bt = store.add(format!("{name}.norm.bias"), Tensor::zeros(&[c_out]), group);
        ConvP {
            w,
            b,
            gn: (g, bt),
            gn_groups,
            stride,
            padding: (k - 1) / 2,
        }
    }

    fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var, relu: bool) -> Result<Var> {
        let w = binder.var(tape, self.w);
        let b = binder.var(tape, self.b);
        let y = tape.conv2d(x, w, Some(b), self.stride, self.padding)?;
        let g = binder.var(tape, self.gn.0);
        let bt = binder.var(tape, self.gn.1);
        let y = tape.group_norm(y, self.gn_groups, g, bt, GN_EPS)?;
        Ok(if relu { tape.relu(y) } else { y })
    }
}

fn backbone_groups(c: usize) -> usize {
    if c.is_multiple_of(8) {
        8
    } else {
        4
    }
}

pub struct Detector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    stem: Vec<ConvP>,
    downsample: Vec<ConvP>,
    input_proj: Vec<ConvP>,
    level_embed: Option<ParamId>,
    encoder: Vec<EncoderLayerP>,
    decoder: Vec<DecoderLayerP>,
    class_head: LinearP,
    box_head: MlpP,
    pos_head: MlpP,
    reference: ParamId,
    sapm_global: Option<Sapm>,
    sapm_local: Option<Sapm>,
}

impl Detector {
    /// Builds and initializes every parameter from `seed`.
    pub fn new(config: DetectorConfig, seed: u64, precision: Precision) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(precision);
        let c = &config;
        let [c1, c2, c3] = c.backbone_channels;
        let bb = ParamGroup::Backbone;
        let stem = [(3, c1), (c1, c2), (c2, c3)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| ConvP::init(&mut store, &format!("backbone.block{i}"), a, b, 3, 2, backbone_groups(b), bb, rng))
            .collect();
        let downsample = (1..c.scales)
            .map(|s| ConvP::init(&mut store, &format!("backbone.down{s}"), c3, c3, 3, 2, backbone_groups(c3), bb, rng))
            .collect();
        let input_proj = (0..c.scales)
            .map(|s| ConvP::init(&mut store, &format!("input_proj{s}"), c3, c.d, 1, 1, c.gn_groups, ParamGroup::Head, rng))
            .collect();
        let level_embed = (c.scales > 1).then(|| {
            let t = Init { rng: &mut *rng }.normal(&[c.scales, c.d], 1.0);
            store.add("level_embed", t, ParamGroup::Head)
        });
        let encoder = (0..c.encoder_layers)
            .map(|i| EncoderLayerP::init(&mut store, &format!("encoder.layers{i}"), c.d, c.heads, c.ffn_dim, rng))
            .collect();
        let decoder = (0..c.decoder_layers)
            .map(|i| DecoderLayerP::init(&mut store, &format!("decoder.layers{i}"), c.d, c.heads, c.ffn_dim, rng))
            .collect();
        let class_head = LinearP::init(&mut store, "class_head", c.d, c.m, ParamGroup::Head, rng);
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        store.get_mut(class_head.b).update(|_, _| prior);
        let box_head = MlpP::init(&mut store, "box_head", &[c.d, c.d, c.d, 4], true, rng);
        let pos_head = MlpP::init(&mut store, "pos_head", &[c.d, c.d, c.d], false, rng);
        let reference = {
            let t = Init { rng: &mut *rng }.uniform(&[c.q, 4], 0.0, 1.0);
            let t = Tensor::from_fn(&[c.q, 4], |i| kernels::logit(t.data()[i], REF_EPS));
            store.add("reference_logits", t, ParamGroup::Head)
        };
        let spec = |maps: usize, depth: usize| AmpSpec {
            depth,
            gn_groups: c.gn_groups,
            tau: c.tau,
            normalization: c.normalization,
            ..AmpSpec::new(c.d, maps)
        };
        let sapm_global = if c.sacq_global {
            Some(Sapm::init(&mut store, "sapm_global", c.scales, spec(c.q, c.amp_depth), c.channel_reweight, rng)?)
        } else {
            None
        };
        let sapm_local = if c.sacq_local {
            Some(Sapm::init(&mut store, "sapm_local", 1, spec(1, c.local_amp_depth), c.channel_reweight, rng)?)
        } else {
            None
        };
        Ok(Detector {
            config,
            store,
            stem,
            downsample,
            input_proj,
            level_embed,
            encoder,
            decoder,
            class_head,
            box_head,
            pos_head,
            reference,
            sapm_global,
            sapm_local,
        })
    }

    pub fn sapm_global(&self) -> Option<&Sapm> {
        self.sapm_global.as_ref()
    }

    pub fn sapm_local(&self) -> Option<&Sapm> {
        self.sapm_local.as_ref()
    }

    /// Strided conv stack, per-scale projection to `d`, then the shared
    /// encoder layers applied to each scale's tokens.
    pub fn backbone_encode(&self, tape: &mut Tape, binder: &mut Binder, image: Var) -> Result<FeatureMapSet> {
        let shape = tape.shape(image).to_vec();
        let [3, h, w] = shape[..] else {
            return Err(Error::dim("backbone_encode", "image shape", 3, shape.first().copied().unwrap_or(0)));
        };
        let d = self.config.d;
        let mut x = image;
        for block in &self.stem {
            x = block.forward(tape, binder, x, true)?;
        }
        let mut levels = vec![(x, 8usize)];
        for (i, down) in self.downsample.iter().enumerate() {
            let prev = levels[i].0;
            levels.push((down.forward(tape, binder, prev, true)?, 8 << (i + 1)));
        }
        let mut scales = Vec::with_capacity(levels.len());
        let mut tokens = Vec::with_capacity(levels.len());
        let mut positions = Vec::with_capacity(levels.len());
        for (s, (&(feat, stride), proj)) in levels.iter().zip(&self.input_proj).enumerate() {
            let f = proj.forward(tape, binder, feat, false)?;
            let (hs, ws) = (tape.shape(f)[1], tape.shape(f)[2]);
            let flat = tape.reshape(f, &[d, hs * ws])?;
            let mut t = tape.transpose(flat)?;
            let pos = tape.constant(&[hs * ws, d], embed::grid_sine_embedding(hs, ws, d))?;
            for layer in &self.encoder {
                t = layer.forward(tape, binder, t, pos)?;
            }
            let pos = match self.level_embed {
                Some(id) => {
                    let le = binder.var(tape, id);
                    let row = tape.gather_rows(le, &[s])?;
                    let row = tape.reshape(row, &[d])?;
                    tape.add_row(pos, row)?
                }
                None => pos,
            };
            let map = tape.transpose(t)?;
            let map = tape.reshape(map, &[d, hs, ws])?;
            scales.push(FeatureScale {
                map,
                stride,
                height: hs,
                width: ws,
            });
            tokens.push(t);
            positions.push(pos);
        }
        let (memory, memory_pos) = if tokens.len() == 1 {
            (tokens[0], positions[0])
        } else {
            (tape.concat(&tokens, 0)?, tape.concat(&positions, 0)?)
        };
        Ok(FeatureMapSet {
            scales,
            image_size: (h, w),
            memory,
            memory_pos,
        })
    }

    /// Pooled global features when enabled, otherwise zeros `[q, d]`.
    pub fn init_content_queries(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        features: &FeatureMapSet,
    ) -> Result<(Var, Option<PooledFeatures>)> {
        match &self.sapm_global {
            Some(sapm) => {
                let pooled = sapm_forward(tape, binder, &features.maps(), sapm)?;
                Ok((pooled.values, Some(pooled)))
            }
            None => {
                let (q, d) = (self.config.q, self.config.d);
                Ok((tape.constant(&[q, d], vec![0.0; q * d])?, None))
            }
        }
    }

    /// Sine embedding of the reference boxes followed by a two-layer MLP.
    pub fn positional_queries(&self, tape: &mut Tape, binder: &mut Binder, boxes: &[f64]) -> Result<Var> {
        let d = self.config.d;
        let e = tape.constant(&[boxes.len() / 4, d], embed::box_sine_embedding(boxes, d))?;
        self.pos_head.forward(tape, binder, e)
    }

    /// One decoder layer plus the shared prediction heads. Returns the updated
    /// content queries and this layer's predictions.
    pub fn decoder_layer(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        layer: usize,
        state: &QueryState,
        features: &FeatureMapSet,
    ) -> Result<(Var, PredictionSet)> {
        let dl = self
            .decoder
            .get(layer)
            .ok_or_else(|| Error::config(format!("decoder layer {layer} out of range")))?;
        let content = dl.forward(tape, binder, state.content, state.positional, features.memory, features.memory_pos)?;
        let logits = self.class_head.forward(tape, binder, content)?;
        let probs = tape.sigmoid(logits);
        let delta = self.box_head.forward(tape, binder, content)?;
        let z = tape.add(delta, state.reference_logits)?;
        let boxes = tape.sigmoid(z);
        Ok((content, PredictionSet { logits, probs, boxes }))
    }

    /// Adds locally pooled RoI features to `q_c1` when local enhancement is on.
    pub fn enhance_content_queries(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        q_c1: Var,
        boxes: &[f64],
        features: &FeatureMapSet,
    ) -> Result<Var> {
        let Some(sapm) = &self.sapm_local else {
            return Ok(q_c1);
        };
        let patches = roi::roi_align(tape, features.scales[0].map, boxes, self.config.roi_size)?;
        let q_c2 = sapm_forward_patches(tape, binder, patches, sapm)?;
        tape.add(q_c1, q_c2)
    }

    /// Full forward pass over one `[3, h, w]` image.
    pub fn decode(&self, tape: &mut Tape, binder: &mut Binder, image: &Tensor) -> Result<DecodeOutput> {
        self.decode_with_references(tape, binder, image, None)
    }

    /// As [`Detector::decode`], optionally substituting the reference boxes of
    /// layers `1..L` (index `l - 1`). References are detached either way, so
    /// feeding back a previous run's references yields the function whose
    /// exact derivative the tape computes.
    pub fn decode_with_references(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        image: &Tensor,
        fixed: Option<&[Vec<f64>]>,
    ) -> Result<DecodeOutput> {
        let img = tape.constant(image.shape(), image.data().to_vec())?;
        let features = self.backbone_encode(tape, binder, img)?;
        let (mut content, global) = self.init_content_queries(tape, binder, &features)?;
        let ref_logits = binder.var(tape, self.reference);
        let mut reference_logits = ref_logits;
        let mut reference_boxes: Vec<f64> = tape.value(ref_logits).iter().map(|&z| kernels::sigmoid(z)).collect();
        let n_layers = self.config.decoder_layers;
        let mut layers = Vec::with_capacity(n_layers);
        let mut references = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let positional = self.positional_queries(tape, binder, &reference_boxes)?;
            let state = QueryState {
                content,
                positional,
                reference_boxes: reference_boxes.clone(),
                reference_logits,
            };
            let (q_c1, pred) = self.decoder_layer(tape, binder, l, &state, &features)?;
            references.push(state.reference_boxes);
            layers.push(pred);
            if l + 1 == n_layers {
                break;
            }
            reference_boxes = match fixed {
                Some(f) => f
                    .get(l)
                    .cloned()
                    .ok_or_else(|| Error::config("missing fixed reference boxes"))?,
                None => tape.value(pred.boxes).to_vec(),
            };
            content = self.enhance_content_queries(tape, binder, q_c1, &reference_boxes, &features)?;
            let lg = reference_boxes.iter().map(|&b| kernels::logit(b, REF_EPS)).collect();
            reference_logits = tape.constant(&[self.config.q, 4], lg)?;
        }
        Ok(DecodeOutput {
            features,
            global,
            layers,
            references,
        })
    }

    /// Inference on one image: plain per-layer predictions.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<Predictions>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let out = self.decode(&mut tape, &mut binder, image)?;
        Ok(out.layers.iter().map(|p| Predictions::from_tape(&tape, p)).collect())
    }
}
