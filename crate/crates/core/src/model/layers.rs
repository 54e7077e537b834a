//! Parameterized building blocks shared by the encoder and decoder.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Binder, Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct LinearP {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearP {
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, group: ParamGroup, rng: &mut ChaCha8Rng) -> Self {
        let mut init = Init { rng };
        let w = store.add(format!("{name}.weight"), init.fan_in_uniform(&[d_out, d_in], d_in), group);
        let b = store.add(format!("{name}.bias"), init.fan_in_uniform(&[d_out], d_in), group);
        LinearP { w, b }
    }

    /// Weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, group: ParamGroup) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[d_out, d_in]), group);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), group);
        LinearP { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = binder.var(tape, self.w);
        let b = binder.var(tape, self.b);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormP {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormP {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNormP {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[d]), ParamGroup::Head),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), ParamGroup::Head),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let g = binder.var(tape, self.gamma);
        let b = binder.var(tape, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct MhaP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub out: LinearP,
    pub heads: usize,
}

impl MhaP {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Head;
        MhaP {
            q: LinearP::init(store, &format!("{name}.q_proj"), d, d, g, rng),
            k: LinearP::init(store, &format!("{name}.k_proj"), d, d, g, rng),
            v: LinearP::init(store, &format!("{name}.v_proj"), d, d, g, rng),
            out: LinearP::init(store, &format!("{name}.out_proj"), d, d, g, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, query: Var, key: Var, value: Var) -> Result<Var> {
        let q = self.q.forward(tape, binder, query)?;
        let k = self.k.forward(tape, binder, key)?;
        let v = self.v.forward(tape, binder, value)?;
        let a = tape.attention(q, k, v, self.heads)?;
        self.out.forward(tape, binder, a)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnP {
    pub up: LinearP,
    pub down: LinearP,
}

impl FfnP {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FfnP {
            up: LinearP::init(store, &format!("{name}.linear1"), d, hidden, ParamGroup::Head, rng),
            down: LinearP::init(store, &format!("{name}.linear2"), hidden, d, ParamGroup::Head, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, binder, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, binder, h)
    }
}

/// Post-norm encoder layer over tokens `[n, d]` with additive positions.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerP {
    pub attn: MhaP,
    pub norm1: LayerNormP,
    pub ffn: FfnP,
    pub norm2: LayerNormP,
}

impl EncoderLayerP {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, heads: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderLayerP {
            attn: MhaP::init(store, &format!("{name}.self_attn"), d, heads, rng),
            norm1: LayerNormP::init(store, &format!("{name}.norm1"), d),
            ffn: FfnP::init(store, &format!("{name}.ffn"), d, ffn_dim, rng),
            norm2: LayerNormP::init(store, &format!("{name}.norm2"), d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var, pos: Var) -> Result<Var> {
        let qk = tape.add(x, pos)?;
        let a = self.attn.forward(tape, binder, qk, qk, x)?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, binder, x)?;
        let f = self.ffn.forward(tape, binder, x)?;
        let x = tape.add(x, f)?;
        self.norm2.forward(tape, binder, x)
    }
}

/// Post-norm decoder layer: query self-attention, cross-attention into the
/// encoder memory, feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerP {
    pub self_attn: MhaP,
    pub norm1: LayerNormP,
    pub cross_attn: MhaP,
    pub norm2: LayerNormP,
    pub ffn: FfnP,
    pub norm3: LayerNormP,
}

impl DecoderLayerP {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, heads: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        DecoderLayerP {
            self_attn: MhaP::init(store, &format!("{name}.self_attn"), d, heads, rng),
            norm1: LayerNormP::init(store, &format!("{name}.norm1"), d),
            cross_attn: MhaP::init(store, &format!("{name}.cross_attn"), d, heads, rng),
            norm2: LayerNormP::init(store, &format!("{name}.norm2"), d),
            ffn: FfnP::init(store, &format!("{name}.ffn"), d, ffn_dim, rng),
            norm3: LayerNormP::init(store, &format!("{name}.norm3"), d),
        }
    }

    /// `content, pos: [q, d]`; `memory, memory_pos: [n, d]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        content: Var,
        pos: Var,
        memory: Var,
        memory_pos: Var,
    ) -> Result<Var> {
        let qk = tape.add(content, pos)?;
        let a = self.self_attn.forward(tape, binder, qk, qk, content)?;
        let x = tape.add(content, a)?;
        let x = self.norm1.forward(tape, binder, x)?;
        let q = tape.add(x, pos)?;
        let k = tape.add(memory, memory_pos)?;
        let c = self.cross_attn.forward(tape, binder, q, k, memory)?;
        let x = tape.add(x, c)?;
        let x = self.norm2.forward(tape, binder, x)?;
        let f = self.ffn.forward(tape, binder, x)?;
        let x = tape.add(x, f)?;
        self.norm3.forward(tape, binder, x)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct MlpP {
    pub layers: Vec<LinearP>,
}

impl MlpP {
    pub fn init(store: &mut ParamStore, name: &str, dims: &[usize], zero_last: bool, rng: &mut ChaCha8Rng) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let nm = format!("{name}.layers{i}");
                if zero_last && i + 1 == n {
                    LinearP::zeros(store, &nm, dims[i], dims[i + 1], ParamGroup::Head)
                } else {
                    LinearP::init(store, &nm, dims[i], dims[i + 1], ParamGroup::Head, rng)
                }
            })
            .collect();
        MlpP { layers }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let mut x = x;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, binder, x)?;
            if i + 1 < self.layers.len() {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}
