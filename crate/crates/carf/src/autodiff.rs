//! Minimal reverse-mode autodiff tape.
//!
//! Not a general-purpose engine: the op set is exactly what the field
//! pipeline needs (dense linear layers, three activations, fake quantization,
//! weighted table gathers, ray compositing, MSE) plus shape plumbing. Nodes
//! are appended in evaluation order, so the construction order is already a
//! topological order and the backward sweep is a single reverse iteration —
//! deterministic by construction, no scheduling, no threading.
//!
//! Forward values are f32. Transcendentals and quantizer math run in f64 per
//! element before casting back, which keeps them reproducible and lets the
//! test oracles compare against 64-bit references.

use crate::error::{Error, Result};
use crate::quant::{QuantParams, QuantScheme};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Identity of a trainable leaf, used to collect gradients after backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKey {
    /// Index into the model's parameter tensor list.
    Model(usize),
    /// Soft bitwidth of registry component i.
    QuantB(usize),
    /// Value range of registry component i.
    QuantRv(usize),
    /// Range ceiling of registry component i (asymmetric components).
    QuantVmax(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Exp,
    Sigmoid,
}

/// One weighted table lookup: `out[out_base .. out_base+feat] +=
/// weight * table[table_base .. table_base+feat]`.
#[derive(Debug, Clone, Copy)]
pub struct GatherTerm {
    pub out_base: u32,
    pub table_base: u32,
    pub weight: f32,
}

/// Scalar leaves of one fake-quant node: gradients for the quantizer's
/// trainable parameters accumulate into these tape leaves.
#[derive(Debug, Clone, Copy)]
pub struct QuantLeaves {
    pub b: NodeId,
    pub r_v: NodeId,
    pub v_max: Option<NodeId>,
}

enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
    },
    Activation {
        kind: Activation,
        x: NodeId,
    },
    Mse {
        pred: NodeId,
        target: Tensor,
    },
    FakeQuant {
        x: NodeId,
        params: QuantParams,
        leaves: QuantLeaves,
    },
    GatherSum {
        table: NodeId,
        terms: Vec<GatherTerm>,
        feat: usize,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    Reshape {
        x: NodeId,
    },
    /// Per-ray alpha compositing. Inputs: densities [R,N], colors [R,N,3],
    /// segment lengths as a constant. Output [R,4]: RGB plus residual
    /// transmittance, so a background composite stays differentiable.
    VolumeRender {
        sigma: NodeId,
        color: NodeId,
        deltas: Vec<f32>,
    },
    /// out[r,c] = x[r,c] + bg[c] * x[r,3]
    CompositeBackground {
        x: NodeId,
        bg: [f32; 3],
    },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamKey>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
    /// Exponential evaluations clamped at the f32 ceiling this forward pass.
    pub exp_overflow_count: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, param: Option<ParamKey>) -> NodeId {
        self.nodes.push(Node { value, op, param });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last backward target w.r.t. node `id`, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── node constructors ──────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, None)
    }

    pub fn param_leaf(&mut self, value: Tensor, key: ParamKey) -> NodeId {
        self.push(value, Op::Leaf, Some(key))
    }

    /// y = x · Wᵀ (+ bias). x: [batch, in], w: [out, in], bias: [out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (batch, in_dim) = self.nodes[x].value.dims2()?;
        let (out_dim, w_in) = self.nodes[w].value.dims2()?;
        if in_dim != w_in {
            return Err(Error::ShapeMismatch(format!(
                "linear: input has {} columns, weights expect {}",
                in_dim, w_in
            )));
        }
        if let Some(b) = bias {
            if self.nodes[b].value.shape() != [out_dim] {
                return Err(Error::ShapeMismatch(format!(
                    "linear: bias shape {:?} does not match {} outputs",
                    self.nodes[b].value.shape(),
                    out_dim
                )));
            }
        }
        let xs = self.nodes[x].value.data();
        let ws = self.nodes[w].value.data();
        let mut out = vec![0.0f32; batch * out_dim];
        for r in 0..batch {
            let xrow = &xs[r * in_dim..(r + 1) * in_dim];
            let orow = &mut out[r * out_dim..(r + 1) * out_dim];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wrow = &ws[o * in_dim..(o + 1) * in_dim];
                let mut acc = 0.0f32;
                for i in 0..in_dim {
                    acc += xrow[i] * wrow[i];
                }
                *slot = acc;
            }
        }
        if let Some(b) = bias {
            let bs = self.nodes[b].value.data().to_vec();
            for r in 0..batch {
                for o in 0..out_dim {
                    out[r * out_dim + o] += bs[o];
                }
            }
        }
        let value = Tensor::new(vec![batch, out_dim], out)?;
        Ok(self.push(value, Op::Linear { x, w, bias }, None))
    }

    pub fn activation(&mut self, kind: Activation, x: NodeId) -> NodeId {
        let xs = self.nodes[x].value.data();
        let mut overflow = 0u64;
        let out: Vec<f32> = xs
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(0.0),
                Activation::Exp => {
                    let e = (v as f64).exp();
                    if e > f32::MAX as f64 {
                        overflow += 1;
                        f32::MAX
                    } else {
                        e as f32
                    }
                }
                Activation::Sigmoid => (1.0 / (1.0 + (-(v as f64)).exp())) as f32,
            })
            .collect();
        self.exp_overflow_count += overflow;
        let shape = self.nodes[x].value.shape().to_vec();
        let value = Tensor::new(shape, out).expect("same shape");
        self.push(value, Op::Activation { kind, x }, None)
    }

    /// Mean of squared elementwise differences. Scalar output.
    pub fn mse(&mut self, pred: NodeId, target: Tensor) -> Result<NodeId> {
        let p = &self.nodes[pred].value;
        if p.shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mse: prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        if p.numel() == 0 {
            return Err(Error::InvalidArgument("mse over an empty batch".into()));
        }
        let mut acc = 0.0f64;
        for (a, b) in p.data().iter().zip(target.data()) {
            let d = (*a - *b) as f64;
            acc += d * d;
        }
        let value = Tensor::scalar((acc / p.numel() as f64) as f32);
        Ok(self.push(value, Op::Mse { pred, target }, None))
    }

    /// Elementwise fake quantization with quantizer-parameter gradients
    /// routed into the given scalar leaves.
    pub fn fake_quant(&mut self, x: NodeId, params: QuantParams, leaves: QuantLeaves) -> NodeId {
        let xs = self.nodes[x].value.data();
        let mut out = vec![0.0f32; xs.len()];
        params.fake_quantize_slice(xs, &mut out);
        let shape = self.nodes[x].value.shape().to_vec();
        let value = Tensor::new(shape, out).expect("same shape");
        self.push(value, Op::FakeQuant { x, params, leaves }, None)
    }

    /// Weighted gather-sum over a flat table (interpolated grid lookups).
    pub fn gather_sum(
        &mut self,
        table: NodeId,
        terms: Vec<GatherTerm>,
        out_shape: Vec<usize>,
        feat: usize,
    ) -> NodeId {
        let t = self.nodes[table].value.data();
        let numel = out_shape.iter().product();
        let mut out = vec![0.0f32; numel];
        for term in &terms {
            let ob = term.out_base as usize;
            let tb = term.table_base as usize;
            for f in 0..feat {
                out[ob + f] += term.weight * t[tb + f];
            }
        }
        let value = Tensor::new(out_shape, out).expect("shape consistent");
        self.push(value, Op::GatherSum { table, terms, feat }, None)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.nodes[a].value.dims2()?;
        let (rb, cb) = self.nodes[b].value.dims2()?;
        if ra != rb {
            return Err(Error::ShapeMismatch(format!(
                "concat: {} rows vs {} rows",
                ra, rb
            )));
        }
        let da = self.nodes[a].value.data();
        let db = self.nodes[b].value.data();
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![ra, ca + cb], out)?;
        Ok(self.push(value, Op::ConcatCols { a, b }, None))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.nodes[x].value.dims2()?;
        if start >= end || end > cols {
            return Err(Error::InvalidArgument(format!(
                "slice {}..{} outside 0..{}",
                start, end, cols
            )));
        }
        let d = self.nodes[x].value.data();
        let width = end - start;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + end]);
        }
        let value = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(value, Op::SliceCols { x, start, end }, None))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].value.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape to {:?} changes element count",
                shape
            )));
        }
        let value = Tensor::new(shape, self.nodes[x].value.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, None))
    }

    /// Composite `samples` points per ray front to back.
    /// sigma: [rays, samples], color: [rays, samples, 3], deltas: rays*samples.
    /// Output [rays, 4] = (RGB, residual transmittance).
    pub fn volume_render(
        &mut self,
        sigma: NodeId,
        color: NodeId,
        deltas: Vec<f32>,
    ) -> Result<NodeId> {
        let (rays, samples) = self.nodes[sigma].value.dims2()?;
        let cshape = self.nodes[color].value.shape();
        if cshape != [rays, samples, 3] {
            return Err(Error::ShapeMismatch(format!(
                "volume render: colors {:?}, expected [{}, {}, 3]",
                cshape, rays, samples
            )));
        }
        if deltas.len() != rays * samples {
            return Err(Error::ShapeMismatch(format!(
                "volume render: {} deltas for {} samples",
                deltas.len(),
                rays * samples
            )));
        }
        let sg = self.nodes[sigma].value.data();
        let cl = self.nodes[color].value.data();
        let mut out = vec![0.0f32; rays * 4];
        for r in 0..rays {
            let mut transmittance = 1.0f64;
            let mut rgb = [0.0f64; 3];
            for i in 0..samples {
                let k = r * samples + i;
                let alpha = 1.0 - (-(sg[k] as f64) * deltas[k] as f64).exp();
                let w = transmittance * alpha;
                for ch in 0..3 {
                    rgb[ch] += w * cl[k * 3 + ch] as f64;
                }
                transmittance *= 1.0 - alpha;
            }
            for ch in 0..3 {
                out[r * 4 + ch] = rgb[ch] as f32;
            }
            out[r * 4 + 3] = transmittance as f32;
        }
        let value = Tensor::new(vec![rays, 4], out)?;
        Ok(self.push(
            value,
            Op::VolumeRender {
                sigma,
                color,
                deltas,
            },
            None,
        ))
    }

    /// Blend the residual transmittance against a constant background color.
    pub fn composite_background(&mut self, x: NodeId, bg: [f32; 3]) -> Result<NodeId> {
        let (rays, cols) = self.nodes[x].value.dims2()?;
        if cols != 4 {
            return Err(Error::ShapeMismatch(
                "background composite expects [rays, 4] input".into(),
            ));
        }
        let d = self.nodes[x].value.data();
        let mut out = vec![0.0f32; rays * 3];
        for r in 0..rays {
            for ch in 0..3 {
                out[r * 3 + ch] = d[r * 4 + ch] + bg[ch] * d[r * 4 + 3];
            }
        }
        let value = Tensor::new(vec![rays, 3], out)?;
        Ok(self.push(value, Op::CompositeBackground { x, bg }, None))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Visits nodes in reverse
    /// construction order (a reverse topological order) exactly once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss >= self.nodes.len() {
            return Err(Error::InvalidArgument(
                "backward target is not on the tape".into(),
            ));
        }
        if self.backward_done {
            return Err(Error::InvalidArgument(
                "backward already ran on this tape".into(),
            ));
        }
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        self.backward_done = true;
        self.grads[loss] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            let upstream = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &upstream);
            self.grads[id] = Some(upstream);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f32> {
        let numel = self.nodes[id].value.numel();
        self.grads[id].get_or_insert_with(|| vec![0.0; numel])
    }

    fn propagate(&mut self, id: NodeId, g: &[f32]) {
        // Split borrows: op data is read via raw indexing into self.nodes,
        // gradient buffers are written through grad_buf.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, bias } => {
                let (x, w, bias) = (*x, *w, *bias);
                let (batch, in_dim) = self.nodes[x].value.dims2().expect("checked");
                let (out_dim, _) = self.nodes[w].value.dims2().expect("checked");
                let xs = self.nodes[x].value.data().to_vec();
                let ws = self.nodes[w].value.data().to_vec();
                {
                    let gx = self.grad_buf(x);
                    for r in 0..batch {
                        for o in 0..out_dim {
                            let go = g[r * out_dim + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wrow = &ws[o * in_dim..(o + 1) * in_dim];
                            let gxr = &mut gx[r * in_dim..(r + 1) * in_dim];
                            for i in 0..in_dim {
                                gxr[i] += go * wrow[i];
                            }
                        }
                    }
                }
                {
                    let gw = self.grad_buf(w);
                    for r in 0..batch {
                        let xrow = &xs[r * in_dim..(r + 1) * in_dim];
                        for o in 0..out_dim {
                            let go = g[r * out_dim + o];
                            if go == 0.0 {
                                continue;
                            }
                            let gwr = &mut gw[o * in_dim..(o + 1) * in_dim];
                            for i in 0..in_dim {
                                gwr[i] += go * xrow[i];
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    let gb = self.grad_buf(b);
                    for r in 0..batch {
                        for o in 0..out_dim {
                            gb[o] += g[r * out_dim + o];
                        }
                    }
                }
            }
            Op::Activation { kind, x } => {
                let (kind, x) = (*kind, *x);
                let xs = self.nodes[x].value.data().to_vec();
                let ys = self.nodes[id].value.data().to_vec();
                let gx = self.grad_buf(x);
                match kind {
                    Activation::Relu => {
                        for i in 0..xs.len() {
                            if xs[i] > 0.0 {
                                gx[i] += g[i];
                            }
                        }
                    }
                    Activation::Exp => {
                        for i in 0..xs.len() {
                            // A clamped exponential is flat: no gradient.
                            if ys[i] < f32::MAX {
                                gx[i] += g[i] * ys[i];
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for i in 0..xs.len() {
                            let y = ys[i] as f64;
                            gx[i] += (g[i] as f64 * y * (1.0 - y)) as f32;
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pred = *pred;
                let t = target.data().to_vec();
                let p = self.nodes[pred].value.data().to_vec();
                let n = p.len() as f64;
                let g0 = g[0] as f64;
                let gp = self.grad_buf(pred);
                for i in 0..p.len() {
                    gp[i] += (g0 * 2.0 * (p[i] as f64 - t[i] as f64) / n) as f32;
                }
            }
            Op::FakeQuant { x, params, leaves } => {
                let (x, params, leaves) = (*x, *params, *leaves);
                let xs = self.nodes[x].value.data().to_vec();
                let mut acc_b = 0.0f64;
                let mut acc_rv = 0.0f64;
                let mut acc_vmax = 0.0f64;
                {
                    let gx = self.grad_buf(x);
                    for i in 0..xs.len() {
                        let gi = g[i] as f64;
                        if gi == 0.0 {
                            continue;
                        }
                        let v = xs[i] as f64;
                        if params.in_range(v) {
                            gx[i] += g[i];
                            // residual terms, shared by both parameter grads
                            let res = params.s * (v / params.s).round() - v;
                            acc_rv += gi * res / params.r_v;
                            acc_b += gi * (-res) * params.pow2b * LN2_F64 / params.r_q;
                        } else {
                            acc_rv += gi * params.grad_rv(v);
                            acc_b += gi * params.grad_b(v);
                            if params.scheme == QuantScheme::Asymmetric {
                                acc_vmax += gi;
                            }
                        }
                    }
                }
                self.grad_buf(leaves.b)[0] += acc_b as f32;
                self.grad_buf(leaves.r_v)[0] += acc_rv as f32;
                if let Some(vm) = leaves.v_max {
                    self.grad_buf(vm)[0] += acc_vmax as f32;
                }
            }
            Op::GatherSum { table, terms: _, feat } => {
                let (table, feat) = (*table, *feat);
                let terms = std::mem::take(match &mut self.nodes[id].op {
                    Op::GatherSum { terms, .. } => terms,
                    _ => unreachable!(),
                });
                {
                    let gt = self.grad_buf(table);
                    for term in &terms {
                        let ob = term.out_base as usize;
                        let tb = term.table_base as usize;
                        for f in 0..feat {
                            gt[tb + f] += term.weight * g[ob + f];
                        }
                    }
                }
                match &mut self.nodes[id].op {
                    Op::GatherSum { terms: slot, .. } => *slot = terms,
                    _ => unreachable!(),
                }
            }
            Op::ConcatCols { a, b } => {
                let (a, b) = (*a, *b);
                let (rows, ca) = self.nodes[a].value.dims2().expect("checked");
                let (_, cb) = self.nodes[b].value.dims2().expect("checked");
                {
                    let ga = self.grad_buf(a);
                    for r in 0..rows {
                        for c in 0..ca {
                            ga[r * ca + c] += g[r * (ca + cb) + c];
                        }
                    }
                }
                {
                    let gb = self.grad_buf(b);
                    for r in 0..rows {
                        for c in 0..cb {
                            gb[r * cb + c] += g[r * (ca + cb) + ca + c];
                        }
                    }
                }
            }
            Op::SliceCols { x, start, end } => {
                let (x, start, end) = (*x, *start, *end);
                let (rows, cols) = self.nodes[x].value.dims2().expect("checked");
                let width = end - start;
                let gx = self.grad_buf(x);
                for r in 0..rows {
                    for c in 0..width {
                        gx[r * cols + start + c] += g[r * width + c];
                    }
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                let gx = self.grad_buf(x);
                for i in 0..g.len() {
                    gx[i] += g[i];
                }
            }
            Op::VolumeRender {
                sigma,
                color,
                deltas: _,
            } => {
                let (sigma, color) = (*sigma, *color);
                let deltas = std::mem::take(match &mut self.nodes[id].op {
                    Op::VolumeRender { deltas, .. } => deltas,
                    _ => unreachable!(),
                });
                let (rays, samples) = self.nodes[sigma].value.dims2().expect("checked");
                let sg = self.nodes[sigma].value.data().to_vec();
                let cl = self.nodes[color].value.data().to_vec();
                let mut gsig = vec![0.0f32; rays * samples];
                let mut gcol = vec![0.0f32; rays * samples * 3];
                let mut alpha = vec![0.0f64; samples];
                let mut tprefix = vec![0.0f64; samples];
                for r in 0..rays {
                    let g_rgb = [
                        g[r * 4] as f64,
                        g[r * 4 + 1] as f64,
                        g[r * 4 + 2] as f64,
                    ];
                    let g_t = g[r * 4 + 3] as f64;
                    let mut transmittance = 1.0f64;
                    for i in 0..samples {
                        let k = r * samples + i;
                        alpha[i] = 1.0 - (-(sg[k] as f64) * deltas[k] as f64).exp();
                        tprefix[i] = transmittance;
                        transmittance *= 1.0 - alpha[i];
                    }
                    let t_rem = transmittance;
                    // suffix[ch] = Σ_{k>i} w_k c_k · g_rgb, built back to front
                    let mut suffix = 0.0f64;
                    for i in (0..samples).rev() {
                        let k = r * samples + i;
                        let w = tprefix[i] * alpha[i];
                        let mut c_dot_g = 0.0f64;
                        for ch in 0..3 {
                            let c = cl[k * 3 + ch] as f64;
                            c_dot_g += c * g_rgb[ch];
                            gcol[k * 3 + ch] = (w * g_rgb[ch]) as f32;
                        }
                        let d = deltas[k] as f64;
                        let ds = d * ((1.0 - alpha[i]) * tprefix[i] * c_dot_g - suffix)
                            - d * t_rem * g_t;
                        gsig[k] = ds as f32;
                        suffix += w * c_dot_g;
                    }
                }
                {
                    let gs = self.grad_buf(sigma);
                    for i in 0..gsig.len() {
                        gs[i] += gsig[i];
                    }
                }
                {
                    let gc = self.grad_buf(color);
                    for i in 0..gcol.len() {
                        gc[i] += gcol[i];
                    }
                }
                match &mut self.nodes[id].op {
                    Op::VolumeRender { deltas: slot, .. } => *slot = deltas,
                    _ => unreachable!(),
                }
            }
            Op::CompositeBackground { x, bg } => {
                let (x, bg) = (*x, *bg);
                let (rays, _) = self.nodes[id].value.dims2().expect("checked");
                let gx = self.grad_buf(x);
                for r in 0..rays {
                    let mut gt = 0.0f32;
                    for ch in 0..3 {
                        gx[r * 4 + ch] += g[r * 3 + ch];
                        gt += g[r * 3 + ch] * bg[ch];
                    }
                    gx[r * 4 + 3] += gt;
                }
            }
        }
    }

    /// Gradients of all parameter leaves, in construction order.
    pub fn param_grads(&self) -> Vec<(ParamKey, &[f32])> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                n.param
                    .map(|k| (k, self.grads[i].as_deref().unwrap_or(&[])))
            })
            .collect()
    }
}

const LN2_F64: f64 = std::f64::consts::LN_2;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_with_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0, 7.0, 13.0]);
    }

    #[test]
    fn linear_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        let err = tape.linear(x, w, None).unwrap_err();
        assert!(err.to_string().contains("3"));
    }

    #[test]
    fn activations_match_references() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.activation(Activation::Relu, x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let e_in = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, std::f64::consts::LN_2 as f32]).unwrap());
        let e = tape.activation(Activation::Exp, e_in);
        assert!((tape.value(e).data()[0] - 1.0).abs() < 1e-6);
        assert!((tape.value(e).data()[1] - 2.0).abs() < 1e-6);

        let s_in = tape.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let s = tape.activation(Activation::Sigmoid, s_in);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn exp_clamps_and_counts_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![200.0]).unwrap());
        let e = tape.activation(Activation::Exp, x);
        assert_eq!(tape.value(e).data()[0], f32::MAX);
        assert_eq!(tape.exp_overflow_count, 1);
    }

    #[test]
    fn mse_mean_over_elements() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let l = tape.mse(p, t).unwrap();
        assert_eq!(tape.value(l).data(), &[1.0]);
    }

    #[test]
    fn mse_rejects_empty_and_mismatched() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![0], vec![]).unwrap());
        let t = Tensor::new(vec![0], vec![]).unwrap();
        assert!(tape.mse(p, t).is_err());
        let p2 = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let t2 = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert!(tape.mse(p2, t2).is_err());
    }

    #[test]
    fn quadratic_gradient_through_linear_and_mse() {
        // loss = mse(w·1, 0) at w = 2 → d/dw = 2w = 4
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let w = tape.param_leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap(), ParamKey::Model(0));
        let y = tape.linear(x, w, None).unwrap();
        let l = tape.mse(y, Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0]);
    }

    #[test]
    fn relu_blocks_gradient_below_zero() {
        let mut tape = Tape::new();
        let x = tape.param_leaf(Tensor::new(vec![1], vec![-1.5]).unwrap(), ParamKey::Model(0));
        let r = tape.activation(Activation::Relu, x);
        let l = tape.mse(r, Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar_and_runs_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err()); // not scalar
        let mut tape = Tape::new();
        assert!(tape.backward(0).is_err()); // nothing on the tape
        let mut tape = Tape::new();
        let x = tape.param_leaf(Tensor::scalar(3.0), ParamKey::Model(0));
        let l = tape.mse(x, Tensor::scalar(0.0)).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.backward(l).is_err()); // second sweep rejected
    }

    #[test]
    fn two_sample_compositing_example() {
        // Two half-opaque samples: first contributes 0.5, second 0.25 of its
        // color; with colors (1, 0) the composite is 0.5 and the residual
        // transmittance 0.25.
        let ln2 = std::f64::consts::LN_2 as f32;
        let mut tape = Tape::new();
        let sigma = tape.leaf(Tensor::new(vec![1, 2], vec![ln2, ln2]).unwrap());
        let color = tape.leaf(
            Tensor::new(vec![1, 2, 3], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        let out = tape.volume_render(sigma, color, vec![1.0, 1.0]).unwrap();
        let v = tape.value(out).data();
        assert!((v[0] - 0.5).abs() < 1e-6);
        assert!((v[3] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn opaque_first_sample_dominates() {
        let mut tape = Tape::new();
        let sigma = tape.leaf(Tensor::new(vec![1, 2], vec![1e6, 1.0]).unwrap());
        let color = tape.leaf(
            Tensor::new(vec![1, 2, 3], vec![0.3, 0.6, 0.9, 1.0, 1.0, 1.0]).unwrap(),
        );
        let out = tape.volume_render(sigma, color, vec![1.0, 1.0]).unwrap();
        let v = tape.value(out).data();
        assert!((v[0] - 0.3).abs() < 1e-6);
        assert!((v[1] - 0.6).abs() < 1e-6);
        assert!((v[2] - 0.9).abs() < 1e-6);
        assert!(v[3].abs() < 1e-6);
    }

    #[test]
    fn empty_space_leaves_background() {
        let mut tape = Tape::new();
        let sigma = tape.leaf(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        let color = tape.leaf(Tensor::new(vec![1, 3, 3], vec![0.5; 9]).unwrap());
        let out = tape.volume_render(sigma, color, vec![0.5; 3]).unwrap();
        let white = tape.composite_background(out, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(tape.value(white).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn compositing_weights_sum_below_one() {
        let mut tape = Tape::new();
        let sigma = tape.leaf(Tensor::new(vec![1, 4], vec![0.5, 2.0, 0.1, 3.0]).unwrap());
        let color = tape.leaf(Tensor::new(vec![1, 4, 3], vec![1.0; 12]).unwrap());
        let out = tape.volume_render(sigma, color, vec![0.25; 4]).unwrap();
        let v = tape.value(out).data();
        // with all-one colors the RGB channel equals the weight sum
        assert!(v[0] >= 0.0 && v[0] <= 1.0);
        assert!((v[0] + v[3] - 1.0).abs() < 1e-6);
    }
}
