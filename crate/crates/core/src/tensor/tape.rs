use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&[f64], &[&[f64]], &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Reshape(Var),
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        d_in: usize,
        d_out: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        /// Per-image im2col buffers; empty when the kn2row path ran.
        cols: Vec<Vec<f64>>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        channels: usize,
        groups: usize,
        spatial: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        cols: usize,
        tau: f64,
    },
    Resample {
        x: Var,
        channels: usize,
        plane: usize,
        groups: usize,
        per_group: usize,
        offsets: Vec<usize>,
        taps: Vec<(usize, f64)>,
    },
    NarrowCols {
        x: Var,
        rows: usize,
        cols: usize,
        start: usize,
        len: usize,
    },
    GroupMean {
        x: Var,
        rows: usize,
        cols: usize,
        groups: Vec<Vec<usize>>,
    },
    BatchedMatvec {
        x: Var,
        a: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        nq: usize,
        nk: usize,
        d: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Focal {
        p: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
        scale: f64,
    },
    L1 {
        a: Var,
        target: Vec<f64>,
        scale: f64,
    },
    Giou {
        a: Var,
        target: Vec<f64>,
        scale: f64,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    tracked: bool,
}

/// Records a computation eagerly and differentiates it in reverse.
///
/// Every op validates shapes explicitly; there is no implicit broadcasting.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Lower clamp applied to every logarithm argument.
pub const LOG_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on a non-scalar node");
        val[0]
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a tensor as a leaf; it is tracked iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("constant", "data length", n, data.len()));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("variable", "data length", n, data.len()));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, true))
    }

    /// Copies a value into an untracked leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).to_vec();
        let shape = self.shape(v).to_vec();
        self.push(value, shape, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::dim(op, "rank", sa.len(), sb.len()));
        }
        for (&x, &y) in sa.iter().zip(sb) {
            if x != y {
                return Err(Error::dim(op, "axis size", x, y));
            }
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, shape, mk(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(value, shape, Op::Scale(a, s), tracked)
    }

    /// Adds a length-`d` row vector to every row of a `[.., d]` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::contract("add_row on a scalar"))?;
        if self.shape(row) != [d] {
            return Err(Error::dim("add_row", "row length", d, self.value(row).len()));
        }
        let r = self.value(row);
        let value = self.value(x).chunks_exact(d).flat_map(|c| c.iter().zip(r).map(|(a, b)| a + b)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x, row]);
        Ok(self.push(value, shape, Op::AddRow(x, row), tracked))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        self.push(value, shape, Op::Sigmoid(x), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        self.push(value, shape, Op::Relu(x), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(vec![s], vec![], Op::Sum(x), tracked)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("mean_axis", "axis", shape.len(), axis));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    value[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        value.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, out_shape, Op::MeanAxis { x, outer, len, inner }, tracked))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", "axis", base.len(), axis));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() {
                return Err(Error::dim("concat", "rank", base.len(), s.len()));
            }
            for (i, (&x, &y)) in s.iter().zip(&base).enumerate() {
                if i != axis && x != y {
                    return Err(Error::dim("concat", "non-concat axis", y, x));
                }
            }
            total += s[axis];
            widths.push(s[axis] * inner);
        }
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                value.extend_from_slice(&self.value(v)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = self.tracked(inputs);
        Ok(self.push(
            value,
            shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            tracked,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim("reshape", "element count", self.value(x).len(), n));
        }
        let value = self.value(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(x), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("transpose", x)?;
        let src = self.value(x);
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                value[c * rows + r] = src[r * cols + c];
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, vec![cols, rows], Op::Transpose { x, rows, cols }, tracked))
    }

    fn dims2(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, "rank", 2, s.len())),
        }
    }

    /// `op(a) · op(b)` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim("matmul", "inner dimension", k, k2));
        }
        let mut value = vec![0.0; m * n];
        kernels::matmul(m, k, n, self.value(a), ta, self.value(b), tb, &mut value, false);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, vec![m, n], Op::Matmul { a, b, ta, tb, m, k, n }, tracked))
    }

    /// `x · wᵀ + b` with `x: [n, d_in]`, `w: [d_out, d_in]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d_in) = self.dims2("linear", x)?;
        let (d_out, w_in) = self.dims2("linear", w)?;
        if w_in != d_in {
            return Err(Error::dim("linear", "input features", d_in, w_in));
        }
        let mut value = vec![0.0; n * d_out];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::dim("linear", "bias length", d_out, self.value(b).len()));
            }
            let bias = self.value(b);
            for row in value.chunks_exact_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul(n, d_in, d_out, self.value(x), false, self.value(w), true, &mut value, true);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let tracked = self.tracked(&inputs);
        Ok(self.push(value, vec![n, d_out], Op::Linear { x, w, b, n, d_in, d_out }, tracked))
    }

    /// Cross-correlation over `[c, h, w]` or a batch `[n, c, h, w]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c_in, h, wd) = match xs[..] {
            [c, h, w] => (None, c, h, w),
            [n, c, h, w] => (Some(n), c, h, w),
            _ => return Err(Error::dim("conv2d", "input rank", 3, xs.len())),
        };
        let (c_out, kc, kh, kw) = match *self.shape(w) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(Error::dim("conv2d", "kernel rank", 4, s.len())),
        };
        if kc != c_in {
            return Err(Error::dim("conv2d", "input channels", c_in, kc));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        if h + 2 * padding < kh {
            return Err(Error::dim("conv2d", "height", kh, h + 2 * padding));
        }
        if wd + 2 * padding < kw {
            return Err(Error::dim("conv2d", "width", kw, wd + 2 * padding));
        }
        let bias = match b {
            Some(b) => {
                if self.shape(b) != [c_out] {
                    return Err(Error::dim("conv2d", "bias length", c_out, self.value(b).len()));
                }
                self.value(b).to_vec()
            }
            None => vec![0.0; c_out],
        };
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            padding,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let n = batch.unwrap_or(1);
        let in_len = c_in * h * wd;
        let out_len = c_out * oh * ow;
        let mut value = vec![0.0; n * out_len];
        let mut cols = Vec::new();
        if kernels::use_kn2row(&geom) {
            let wt = kernels::kn2row_weights(self.value(w), &geom);
            for i in 0..n {
                let xin = &self.value(x)[i * in_len..(i + 1) * in_len];
                kernels::conv2d_forward_kn2row(xin, &wt, &bias, &geom, &mut value[i * out_len..(i + 1) * out_len]);
            }
        } else {
            for i in 0..n {
                let xin = &self.value(x)[i * in_len..(i + 1) * in_len];
                let col = kernels::conv2d_forward(xin, self.value(w), &bias, &geom, &mut value[i * out_len..(i + 1) * out_len]);
                cols.push(col);
            }
        }
        let shape = match batch {
            Some(n) => vec![n, c_out, oh, ow],
            None => vec![c_out, oh, ow],
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let tracked = self.tracked(&inputs);
        Ok(self.push(value, shape, Op::Conv2d { x, w, b, geom, cols }, tracked))
    }

    /// Group normalization over `[c, ...]` or a batch `[n, c, ...]` (rank 4).
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, channels, spatial) = match xs[..] {
            [c, h, w] => (1, c, h * w),
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(Error::dim("group_norm", "input rank", 3, xs.len())),
        };
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!("group_norm: {channels} channels not divisible into {groups} groups")));
        }
        self.norm_common("group_norm", x, gamma, beta, batch, channels, groups, spatial, eps)
    }

    /// Layer normalization over the last axis of `[n, d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2("layer_norm", x)?;
        // each row is one group holding `d` channels of spatial size 1
        self.norm_common("layer_norm", x, gamma, beta, n, d, 1, 1, eps)
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_common(
        &mut self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        channels: usize,
        groups: usize,
        spatial: usize,
        eps: f64,
    ) -> Result<Var> {
        if self.shape(gamma) != [channels] {
            return Err(Error::dim(op, "gamma length", channels, self.value(gamma).len()));
        }
        if self.shape(beta) != [channels] {
            return Err(Error::dim(op, "beta length", channels, self.value(beta).len()));
        }
        let block = channels / groups * spatial;
        let src = self.value(x);
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(batch * groups);
        for (xb, hb) in src.chunks_exact(block).zip(xhat.chunks_exact_mut(block)) {
            inv_std.push(kernels::normalize_block(xb, eps, hb).inv_std);
        }
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut value = vec![0.0; src.len()];
        for (i, (o, xh)) in value.iter_mut().zip(&xhat).enumerate() {
            let c = (i / spatial) % channels;
            *o = g[c] * xh + bt[c];
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            value,
            shape,
            Op::Norm {
                x,
                gamma,
                beta,
                batch,
                channels,
                groups,
                spatial,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Softmax of `tau · x` over the last axis.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        let cols = *self.shape(x).last().ok_or_else(|| Error::contract("softmax on a scalar"))?;
        if !(tau > 0.0) {
            return Err(Error::config("softmax temperature must be positive"));
        }
        let mut value = vec![0.0; self.value(x).len()];
        kernels::softmax_rows(self.value(x), cols, tau, &mut value);
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, shape, Op::Softmax { x, cols, tau }, tracked))
    }

    /// Per-map softmax over all spatial positions of `[q, h, w]`.
    pub fn spatial_softmax(&mut self, logits: Var, tau: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [q, h, w] = shape[..] else {
            return Err(Error::dim("spatial_softmax", "rank", 3, shape.len()));
        };
        let flat = self.reshape(logits, &[q, h * w])?;
        let sm = self.softmax(flat, tau)?;
        self.reshape(sm, &shape)
    }

    /// Gathers weighted taps from each channel plane of `x: [c, h, w]`.
    ///
    /// Output is `[groups, c, per_group]`; point `g * per_group + k` reads
    /// `taps[offsets[p]..offsets[p + 1]]` as `(flat pixel, weight)` pairs.
    pub fn resample(
        &mut self,
        x: Var,
        groups: usize,
        per_group: usize,
        offsets: Vec<usize>,
        taps: Vec<(usize, f64)>,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [channels, h, w] = xs[..] else {
            return Err(Error::dim("resample", "input rank", 3, xs.len()));
        };
        let plane = h * w;
        let points = groups * per_group;
        if offsets.len() != points + 1 {
            return Err(Error::dim("resample", "offset table", points + 1, offsets.len()));
        }
        if taps.iter().any(|&(i, _)| i >= plane) {
            return Err(Error::contract("resample tap outside the feature plane"));
        }
        // channels-last copy so each tap reads one contiguous row
        let src = transpose_planes(self.value(x), channels, plane);
        let mut value = vec![0.0; groups * channels * per_group];
        let mut acc = vec![0.0; channels];
        for p in 0..points {
            acc.fill(0.0);
            for &(i, wt) in &taps[offsets[p]..offsets[p + 1]] {
                acc.iter_mut().zip(&src[i * channels..(i + 1) * channels]).for_each(|(a, v)| *a += v * wt);
            }
            let (g, k) = (p / per_group, p % per_group);
            for (c, a) in acc.iter().enumerate() {
                value[(g * channels + c) * per_group + k] = *a;
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            value,
            vec![groups, channels, per_group],
            Op::Resample {
                x,
                channels,
                plane,
                groups,
                per_group,
                offsets,
                taps,
            },
            tracked,
        ))
    }

    /// Bilinear sample of every channel of `[c, h, w]` at pixel-space `(x, y)`.
    pub fn bilinear_sample(&mut self, input: Var, x: f64, y: f64) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let [c, h, w] = xs[..] else {
            return Err(Error::dim("bilinear_sample", "input rank", 3, xs.len()));
        };
        let taps = kernels::bilinear_taps(h, w, x, y).to_vec();
        let out = self.resample(input, 1, 1, vec![0, 4], taps)?;
        self.reshape(out, &[c])
    }

    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("narrow_cols", x)?;
        if start + len > cols {
            return Err(Error::dim("narrow_cols", "columns", cols, start + len));
        }
        let src = self.value(x);
        let value = (0..rows).flat_map(|r| src[r * cols + start..r * cols + start + len].iter().copied()).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, vec![rows, len], Op::NarrowCols { x, rows, cols, start, len }, tracked))
    }

    /// Averages the rows of `x: [rows, cols]` within each index group.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (rows, cols) = self.dims2("group_mean", x)?;
        let src = self.value(x);
        let mut value = vec![0.0; groups.len() * cols];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::contract("group_mean over an empty group"));
            }
            let out = &mut value[g * cols..(g + 1) * cols];
            for &r in members {
                if r >= rows {
                    return Err(Error::dim("group_mean", "row index", rows, r));
                }
                out.iter_mut().zip(&src[r * cols..(r + 1) * cols]).for_each(|(o, v)| *o += v);
            }
            let inv = 1.0 / members.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            value,
            vec![groups.len(), cols],
            Op::GroupMean {
                x,
                rows,
                cols,
                groups: groups.to_vec(),
            },
            tracked,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let groups: Vec<Vec<usize>> = rows.iter().map(|&r| vec![r]).collect();
        self.group_mean(x, &groups)
    }

    /// `out[b] = x[b] · a[b]` for `x: [batch, rows, cols]`, `a: [batch, cols]`.
    pub fn batched_matvec(&mut self, x: Var, a: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [batch, rows, cols] = xs[..] else {
            return Err(Error::dim("batched_matvec", "matrix rank", 3, xs.len()));
        };
        if self.shape(a) != [batch, cols] {
            return Err(Error::dim("batched_matvec", "vector length", batch * cols, self.value(a).len()));
        }
        let (xv, av) = (self.value(x), self.value(a));
        let mut value = vec![0.0; batch * rows];
        for b in 0..batch {
            let vec_b = &av[b * cols..(b + 1) * cols];
            for r in 0..rows {
                let row = &xv[(b * rows + r) * cols..(b * rows + r + 1) * cols];
                value[b * rows + r] = row.iter().zip(vec_b).map(|(p, q)| p * q).sum();
            }
        }
        let tracked = self.tracked(&[x, a]);
        Ok(self.push(value, vec![batch, rows], Op::BatchedMatvec { x, a, batch, rows, cols }, tracked))
    }

    /// Multi-head scaled dot-product attention. `q: [nq, d]`, `k, v: [nk, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (nq, d) = self.dims2("attention", q)?;
        let (nk, dk) = self.dims2("attention", k)?;
        if dk != d {
            return Err(Error::dim("attention", "key width", d, dk));
        }
        if self.shape(v) != [nk, d] {
            return Err(Error::dim("attention", "value rows", nk, self.shape(v)[0]));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let mut value = vec![0.0; nq * d];
        let mut probs = vec![0.0; heads * nq * nk];
        kernels::attention_forward(self.value(q), self.value(k), self.value(v), nq, nk, d, heads, &mut value, &mut probs);
        let tracked = self.tracked(&[q, k, v]);
        Ok(self.push(
            value,
            vec![nq, d],
            Op::Attention {
                q,
                k,
                v,
                nq,
                nk,
                d,
                heads,
                probs,
            },
            tracked,
        ))
    }

    /// Sigmoid focal loss on probabilities, summed over cells and multiplied by
    /// `scale`. `targets` holds 1 for positive cells and 0 elsewhere.
    pub fn focal_loss(&mut self, p: Var, targets: &[f64], alpha: f64, gamma: f64, scale: f64) -> Result<Var> {
        if targets.len() != self.value(p).len() {
            return Err(Error::dim("focal_loss", "target cells", self.value(p).len(), targets.len()));
        }
        let loss: f64 = self
            .value(p)
            .iter()
            .zip(targets)
            .map(|(&pv, &t)| focal_cell(pv, t, alpha, gamma).0)
            .sum();
        let tracked = self.tracked(&[p]);
        Ok(self.push(
            vec![loss * scale],
            vec![],
            Op::Focal {
                p,
                targets: targets.to_vec(),
                alpha,
                gamma,
                scale,
            },
            tracked,
        ))
    }

    /// `scale · Σ |a − target|`.
    pub fn l1_loss(&mut self, a: Var, target: &[f64], scale: f64) -> Result<Var> {
        if target.len() != self.value(a).len() {
            return Err(Error::dim("l1_loss", "target length", self.value(a).len(), target.len()));
        }
        let loss: f64 = self.value(a).iter().zip(target).map(|(x, t)| (x - t).abs()).sum();
        let tracked = self.tracked(&[a]);
        Ok(self.push(
            vec![loss * scale],
            vec![],
            Op::L1 {
                a,
                target: target.to_vec(),
                scale,
            },
            tracked,
        ))
    }

    /// `scale · Σ (1 − GIoU)` over row pairs of cxcywh boxes `a: [n, 4]`.
    pub fn giou_loss(&mut self, a: Var, target: &[f64], scale: f64) -> Result<Var> {
        let (_, four) = self.dims2("giou_loss", a)?;
        if four != 4 {
            return Err(Error::dim("giou_loss", "box width", 4, four));
        }
        if target.len() != self.value(a).len() {
            return Err(Error::dim("giou_loss", "target length", self.value(a).len(), target.len()));
        }
        let loss: f64 = self
            .value(a)
            .chunks_exact(4)
            .zip(target.chunks_exact(4))
            .map(|(p, t)| 1.0 - giou_cxcywh_grad(p, t).0)
            .sum();
        let tracked = self.tracked(&[a]);
        Ok(self.push(
            vec![loss * scale],
            vec![],
            Op::Giou {
                a,
                target: target.to_vec(),
                scale,
            },
            tracked,
        ))
    }

    /// Records an op with caller-supplied value and backward rule. The rule
    /// receives `(upstream grad, input values, output value)` and returns one
    /// gradient per input.
    pub fn custom<F>(&mut self, inputs: &[Var], shape: &[usize], value: Vec<f64>, backward: F) -> Result<Var>
    where
        F: Fn(&[f64], &[&[f64]], &[f64]) -> Vec<Vec<f64>> + Send + Sync + 'static,
    {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::dim("custom", "data length", n, value.len()));
        }
        let tracked = self.tracked(inputs);
        Ok(self.push(
            value,
            shape.to_vec(),
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            tracked,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            let contributions = self.node_backward(node, g);
            for (v, gv) in contributions {
                if !self.nodes[v.0].tracked {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.want(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(x, y)| x * y).collect()));
                }
                if self.want(*b) {
                    out.push((*b, g.iter().zip(va).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|x| x * s).collect())),
            Op::AddRow(x, row) => {
                out.push((*x, g.to_vec()));
                if self.want(*row) {
                    let d = self.value(*row).len();
                    let mut gr = vec![0.0; d];
                    for chunk in g.chunks_exact(d) {
                        gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    out.push((*row, gr));
                }
            }
            Op::Sigmoid(x) => {
                out.push((*x, g.iter().zip(&node.value).map(|(gv, y)| gv * y * (1.0 - y)).collect()));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                out.push((*x, g.iter().zip(xv).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect()));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::MeanAxis { x, outer, len, inner } => {
                let mut gx = vec![0.0; outer * len * inner];
                let inv = 1.0 / *len as f64;
                for o in 0..*outer {
                    for l in 0..*len {
                        for i in 0..*inner {
                            gx[(o * len + l) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Concat { inputs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut start = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.want(v) {
                        let mut gv = Vec::with_capacity(outer * w);
                        for o in 0..*outer {
                            gv.extend_from_slice(&g[o * total + start..o * total + start + w]);
                        }
                        out.push((v, gv));
                    }
                    start += w;
                }
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Transpose { x, rows, cols } => {
                let mut gx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        gx[r * cols + c] = g[c * rows + r];
                    }
                }
                out.push((*x, gx));
            }
            &Op::Matmul { a, b, ta, tb, m, k, n } => {
                if self.want(a) {
                    // dA = dC · op(B)ᵀ, stored in A's layout
                    let mut ga = vec![0.0; m * k];
                    if ta {
                        kernels::matmul(k, n, m, self.value(b), tb, g, true, &mut ga, false);
                    } else {
                        kernels::matmul(m, n, k, g, false, self.value(b), !tb, &mut ga, false);
                    }
                    out.push((a, ga));
                }
                if self.want(b) {
                    let mut gb = vec![0.0; k * n];
                    if tb {
                        kernels::matmul(n, m, k, g, true, self.value(a), ta, &mut gb, false);
                    } else {
                        kernels::matmul(k, m, n, self.value(a), !ta, g, false, &mut gb, false);
                    }
                    out.push((b, gb));
                }
            }
            &Op::Linear { x, w, b, n, d_in, d_out } => {
                if self.want(x) {
                    let mut gx = vec![0.0; n * d_in];
                    kernels::matmul(n, d_out, d_in, g, false, self.value(w), false, &mut gx, false);
                    out.push((x, gx));
                }
                if self.want(w) {
                    let mut gw = vec![0.0; d_out * d_in];
                    kernels::matmul(d_out, n, d_in, g, true, self.value(x), false, &mut gw, false);
                    out.push((w, gw));
                }
                if let Some(b) = b.filter(|b| self.want(*b)) {
                    let mut gb = vec![0.0; d_out];
                    for row in g.chunks_exact(d_out) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    out.push((b, gb));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let in_len = geom.c_in * geom.h * geom.w;
                let out_len = geom.c_out * geom.out_h() * geom.out_w();
                let xv = self.value(*x);
                let n = xv.len() / in_len;
                let wv = self.value(*w);
                let mut gx = self.want(*x).then(|| vec![0.0; n * in_len]);
                let mut gw = self.want(*w).then(|| vec![0.0; wv.len()]);
                let mut gb = b.filter(|b| self.want(*b)).map(|_| vec![0.0; geom.c_out]);
                if cols.is_empty() {
                    // kn2row layout; see kernels::use_kn2row
                    let wt = kernels::kn2row_weights(wv, geom);
                    let mut gwt = gw.as_ref().map(|v| vec![0.0; v.len()]);
                    for i in 0..n {
                        kernels::conv2d_backward_kn2row(
                            &g[i * out_len..(i + 1) * out_len],
                            &xv[i * in_len..(i + 1) * in_len],
                            &wt,
                            geom,
                            gx.as_mut().map(|v| &mut v[i * in_len..(i + 1) * in_len]),
                            gwt.as_deref_mut(),
                            gb.as_deref_mut(),
                        );
                    }
                    if let (Some(gw), Some(gwt)) = (gw.as_mut(), gwt) {
                        kernels::kn2row_weights_add_back(&gwt, geom, gw);
                    }
                } else {
                    for (i, col) in cols.iter().enumerate() {
                        kernels::conv2d_backward(
                            &g[i * out_len..(i + 1) * out_len],
                            col,
                            wv,
                            geom,
                            gx.as_mut().map(|v| &mut v[i * in_len..(i + 1) * in_len]),
                            gw.as_deref_mut(),
                            gb.as_deref_mut(),
                        );
                    }
                }
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gw) = gw {
                    out.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    out.push((*b, gb));
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                batch,
                channels,
                groups,
                spatial,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                if self.want(*gamma) || self.want(*beta) {
                    let mut gg = vec![0.0; *channels];
                    let mut gbt = vec![0.0; *channels];
                    for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
                        let c = (i / spatial) % channels;
                        gg[c] += gi * xh;
                        gbt[c] += gi;
                    }
                    if self.want(*gamma) {
                        out.push((*gamma, gg));
                    }
                    if self.want(*beta) {
                        out.push((*beta, gbt));
                    }
                }
                if self.want(*x) {
                    let block = channels / groups * spatial;
                    let mut dxhat = vec![0.0; g.len()];
                    for (i, (d, &gi)) in dxhat.iter_mut().zip(g).enumerate() {
                        *d = gi * gv[(i / spatial) % channels];
                    }
                    let mut gx = vec![0.0; g.len()];
                    for bidx in 0..batch * groups {
                        let r = bidx * block..(bidx + 1) * block;
                        kernels::normalize_block_backward(
                            &xhat[r.clone()],
                            &dxhat[r.clone()],
                            inv_std[bidx],
                            &mut gx[r],
                        );
                    }
                    out.push((*x, gx));
                }
            }
            Op::Softmax { x, cols, tau } => {
                let mut gx = vec![0.0; g.len()];
                kernels::softmax_rows_backward(&node.value, g, *cols, *tau, &mut gx);
                out.push((*x, gx));
            }
            Op::Resample {
                x,
                channels,
                plane,
                groups,
                per_group,
                offsets,
                taps,
            } => {
                let c = *channels;
                let mut gt = vec![0.0; plane * c];
                let mut up = vec![0.0; c];
                for p in 0..groups * per_group {
                    let (gi, k) = (p / per_group, p % per_group);
                    for (ch, u) in up.iter_mut().enumerate() {
                        *u = g[(gi * c + ch) * per_group + k];
                    }
                    for &(i, wt) in &taps[offsets[p]..offsets[p + 1]] {
                        gt[i * c..(i + 1) * c].iter_mut().zip(&up).for_each(|(a, u)| *a += u * wt);
                    }
                }
                out.push((*x, transpose_planes(&gt, *plane, c)));
            }
            Op::NarrowCols { x, rows, cols, start, len } => {
                let mut gx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                out.push((*x, gx));
            }
            Op::GroupMean { x, rows, cols, groups } => {
                let mut gx = vec![0.0; rows * cols];
                for (gi, members) in groups.iter().enumerate() {
                    let inv = 1.0 / members.len() as f64;
                    let up = &g[gi * cols..(gi + 1) * cols];
                    for &r in members {
                        gx[r * cols..(r + 1) * cols].iter_mut().zip(up).for_each(|(a, u)| *a += u * inv);
                    }
                }
                out.push((*x, gx));
            }
            &Op::BatchedMatvec { x, a, batch, rows, cols } => {
                let (xv, av) = (self.value(x), self.value(a));
                if self.want(x) {
                    let mut gx = vec![0.0; batch * rows * cols];
                    for b in 0..batch {
                        for r in 0..rows {
                            let up = g[b * rows + r];
                            let dst = &mut gx[(b * rows + r) * cols..(b * rows + r + 1) * cols];
                            dst.iter_mut().zip(&av[b * cols..(b + 1) * cols]).for_each(|(o, v)| *o = up * v);
                        }
                    }
                    out.push((x, gx));
                }
                if self.want(a) {
                    let mut ga = vec![0.0; batch * cols];
                    for b in 0..batch {
                        let dst = &mut ga[b * cols..(b + 1) * cols];
                        for r in 0..rows {
                            let up = g[b * rows + r];
                            let row = &xv[(b * rows + r) * cols..(b * rows + r + 1) * cols];
                            dst.iter_mut().zip(row).for_each(|(o, v)| *o += up * v);
                        }
                    }
                    out.push((a, ga));
                }
            }
            &Op::Attention {
                q,
                k,
                v,
                nq,
                nk,
                d,
                heads,
                ref probs,
            } => {
                let mut gq = self.want(q).then(|| vec![0.0; nq * d]);
                let mut gk = self.want(k).then(|| vec![0.0; nk * d]);
                let mut gv = self.want(v).then(|| vec![0.0; nk * d]);
                kernels::attention_backward(
                    self.value(q),
                    self.value(k),
                    self.value(v),
                    probs,
                    g,
                    nq,
                    nk,
                    d,
                    heads,
                    gq.as_deref_mut(),
                    gk.as_deref_mut(),
                    gv.as_deref_mut(),
                );
                out.extend(gq.map(|x| (q, x)));
                out.extend(gk.map(|x| (k, x)));
                out.extend(gv.map(|x| (v, x)));
            }
            Op::Focal {
                p,
                targets,
                alpha,
                gamma,
                scale,
            } => {
                let s = g[0] * scale;
                let gp = self
                    .value(*p)
                    .iter()
                    .zip(targets)
                    .map(|(&pv, &t)| s * focal_cell(pv, t, *alpha, *gamma).1)
                    .collect();
                out.push((*p, gp));
            }
            Op::L1 { a, target, scale } => {
                let s = g[0] * scale;
                let ga = self
                    .value(*a)
                    .iter()
                    .zip(target)
                    .map(|(x, t)| {
                        let d = x - t;
                        if d > 0.0 {
                            s
                        } else if d < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .collect();
                out.push((*a, ga));
            }
            Op::Giou { a, target, scale } => {
                let s = -g[0] * scale;
                let mut ga = Vec::with_capacity(target.len());
                for (p, t) in self.value(*a).chunks_exact(4).zip(target.chunks_exact(4)) {
                    let (_, d) = giou_cxcywh_grad(p, t);
                    ga.extend(d.iter().map(|x| x * s));
                }
                out.push((*a, ga));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&[f64]> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = backward(g, &vals, &node.value);
                for (v, gv) in inputs.iter().zip(grads) {
                    if self.want(*v) {
                        out.push((*v, gv));
                    }
                }
            }
        }
        out
    }
}

/// Focal loss of one cell and its derivative with respect to the probability.
pub fn focal_cell(p: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    if target > 0.5 {
        let lp = p.max(LOG_EPS).ln();
        let dlp = if p > LOG_EPS { 1.0 / p } else { 0.0 };
        let q = (1.0 - p).max(0.0);
        let w = q.powf(gamma);
        let dw = if gamma == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) };
        (-alpha * w * lp, -alpha * (dw * lp + w * dlp))
    } else {
        let q = 1.0 - p;
        let lq = q.max(LOG_EPS).ln();
        let dlq = if q > LOG_EPS { -1.0 / q } else { 0.0 };
        let pp = p.max(0.0);
        let w = pp.powf(gamma);
        let dw = if gamma == 0.0 { 0.0 } else { gamma * pp.powf(gamma - 1.0) };
        (-(1.0 - alpha) * w * lq, -(1.0 - alpha) * (dw * lq + w * dlq))
    }
}

/// GIoU of two cxcywh boxes and its gradient with respect to the first box.
pub fn giou_cxcywh_grad(p: &[f64], t: &[f64]) -> (f64, [f64; 4]) {
    let (x1, x2) = (p[0] - 0.5 * p[2], p[0] + 0.5 * p[2]);
    let (y1, y2) = (p[1] - 0.5 * p[3], p[1] + 0.5 * p[3]);
    let (tx1, tx2) = (t[0] - 0.5 * t[2], t[0] + 0.5 * t[2]);
    let (ty1, ty2) = (t[1] - 0.5 * t[3], t[1] + 0.5 * t[3]);

    let iw_raw = x2.min(tx2) - x1.max(tx1);
    let ih_raw = y2.min(ty2) - y1.max(ty1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let pw = x2 - x1;
    let ph = y2 - y1;
    let area_p = pw * ph;
    let area_t = (tx2 - tx1) * (ty2 - ty1);
    let union = area_p + area_t - inter;
    let cw = x2.max(tx2) - x1.min(tx1);
    let ch = y2.max(ty2) - y1.min(ty1);
    let hull = cw * ch;

    let u = union.max(LOG_EPS);
    let c = hull.max(LOG_EPS);
    let giou = inter / u + union / c - 1.0;

    // giou = I/U + U/C - 1 with U = Ap + At - I
    let d_inter = 1.0 / u + inter / (u * u) - 1.0 / c;
    let d_area = -inter / (u * u) + 1.0 / c;
    let d_hull = -union / (c * c);

    let mut g = [0.0; 4]; // d/d(x1, x2, y1, y2)
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let dx2 = if x2 <= tx2 { 1.0 } else { 0.0 };
        let dx1 = if x1 >= tx1 { -1.0 } else { 0.0 };
        let dy2 = if y2 <= ty2 { 1.0 } else { 0.0 };
        let dy1 = if y1 >= ty1 { -1.0 } else { 0.0 };
        g[0] += d_inter * ih * dx1;
        g[1] += d_inter * ih * dx2;
        g[2] += d_inter * iw * dy1;
        g[3] += d_inter * iw * dy2;
    }
    g[0] += d_area * -ph;
    g[1] += d_area * ph;
    g[2] += d_area * -pw;
    g[3] += d_area * pw;
    let hx2 = if x2 >= tx2 { 1.0 } else { 0.0 };
    let hx1 = if x1 <= tx1 { -1.0 } else { 0.0 };
    let hy2 = if y2 >= ty2 { 1.0 } else { 0.0 };
    let hy1 = if y1 <= ty1 { -1.0 } else { 0.0 };
    g[0] += d_hull * ch * hx1;
    g[1] += d_hull * ch * hx2;
    g[2] += d_hull * cw * hy1;
    g[3] += d_hull * cw * hy2;

    let grad = [g[0] + g[1], g[2] + g[3], 0.5 * (g[1] - g[0]), 0.5 * (g[3] - g[2])];
    (giou, grad)
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the right length when nothing reached it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }

    /// Adds the gradient of `v` into `t.grad` (no-op for untracked tensors).
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => {
                let zeros = vec![0.0; t.numel()];
                t.accumulate_grad(&zeros)
            }
        }
    }
}

/// `[a, b]` → `[b, a]`.
fn transpose_planes(x: &[f64], a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; a * b];
    for i in 0..a {
        for j in 0..b {
            out[j * a + i] = x[i * b + j];
        }
    }
    out
}
