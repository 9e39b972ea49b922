//! Minimal reverse-mode automatic differentiation over dense f32 tensors.
//!
//! A [`Graph`] is an append-only arena of tensors; every op records its
//! inputs so [`Graph::backward`] can sweep the arena once in reverse
//! creation order (which is a reverse topological order by construction).
//! Graphs are confined to one thread; distinct graphs run concurrently.
//!
//! Every forward op validates that its output is finite, so NaN/Inf
//! propagation surfaces at the op that produced it instead of corrupting a
//! training run silently.

mod checkpoint;
mod gemm;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC};
pub use optim::{adam_step, AdamConfig, Parameter};

use gemm::{gemm, transpose};

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank-{expected} input, got shape {shape:?}")]
    BadRank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("conv2d: same-padding requires odd kernel dims, got {kh}x{kw}")]
    EvenKernel { kh: usize, kw: usize },
    #[error("avg_pool: spatial dims {h}x{w} not divisible by pool size {k}")]
    BadPool { h: usize, w: usize, k: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("parameter '{name}' has no gradient")]
    MissingGradient { name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a tensor in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Spatial padding policy for [`Graph::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so output spatial dims equal input dims; kernel must be odd.
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, factor: f32 },
    Relu { x: TensorId },
    Reshape { x: TensorId },
    Conv2d { x: TensorId, w: TensorId, b: TensorId, padding: Padding },
    AvgPool { x: TensorId, k: usize },
    GlobalAvgPool { x: TensorId },
    Dense { x: TensorId, w: TensorId, b: TensorId },
    SoftmaxCrossEntropy { logits: TensorId, probs: Vec<f32>, labels: Vec<usize> },
    MaskedSum { x: TensorId, mask: Vec<f32> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation graph holding tensor data and gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, data, op, needs_grad });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    /// Insert a leaf tensor. Gradients are accumulated for it (and for
    /// everything it reaches) iff `requires_grad` is set.
    pub fn leaf(&mut self, data: Vec<f32>, shape: &[usize], requires_grad: bool) -> TensorId {
        self.push(shape.to_vec(), data, Op::Leaf, requires_grad)
    }

    /// Insert a constant leaf (no gradient tracking).
    pub fn constant(&mut self, data: Vec<f32>, shape: &[usize]) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    /// Gradient of the last backward pass, if the tensor tracked one.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add { a, b }, needs))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        check_finite("mul", &data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul { a, b }, needs))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: TensorId, factor: f32) -> Result<TensorId> {
        let data: Vec<f32> = self.data(x).iter().map(|v| v * factor).collect();
        check_finite("scale", &data)?;
        let needs = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), data, Op::Scale { x, factor }, needs))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f32> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        check_finite("relu", &data)?;
        let needs = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), data, Op::Relu { x }, needs))
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }, needs))
    }

    /// 2D cross-correlation: `x: [N,C,H,W]`, `kernel: [F,C,kh,kw]`,
    /// `bias: [F]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
        padding: Padding,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(kernel).to_vec();
        if xs.len() != 4 {
            return Err(AutodiffError::BadRank { op: "conv2d", expected: 4, shape: xs });
        }
        if ws.len() != 4 {
            return Err(AutodiffError::BadRank { op: "conv2d", expected: 4, shape: ws });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kc != c {
            return Err(AutodiffError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        if self.shape(bias) != [f] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(bias).to_vec(),
                rhs: vec![f],
            });
        }
        if padding == Padding::Same && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(AutodiffError::EvenKernel { kh, kw });
        }
        let (oh, ow) = match padding {
            Padding::Same => (h, w),
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(AutodiffError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
                }
                (h - kh + 1, w - kw + 1)
            }
        };

        let ckk = c * kh * kw;
        let m = n * oh * ow;
        let mut col = vec![0.0f32; m * ckk];
        im2col(self.data(x), n, c, h, w, kh, kw, padding, oh, ow, &mut col);

        // out2[m, f] = col[m, ckk] * w^T[ckk, f]
        let mut wt = vec![0.0f32; ckk * f];
        transpose(f, ckk, self.data(kernel), &mut wt);
        let mut out2 = vec![0.0f32; m * f];
        gemm(m, ckk, f, &col, &wt, &mut out2);

        let bias_data = self.data(bias);
        let mut data = vec![0.0f32; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                let base = (ni * f + fi) * oh * ow;
                let b = bias_data[fi];
                for s in 0..oh * ow {
                    data[base + s] = out2[(ni * oh * ow + s) * f + fi] + b;
                }
            }
        }
        check_finite("conv2d", &data)?;
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            vec![n, f, oh, ow],
            data,
            Op::Conv2d { x, w: kernel, b: bias, padding },
            needs,
        ))
    }

    /// Non-overlapping `k x k` average pooling; spatial dims must divide `k`.
    pub fn avg_pool(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(AutodiffError::BadRank { op: "avg_pool", expected: 4, shape: xs });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(AutodiffError::BadPool { h, w, k });
        }
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f32;
        let src = self.data(x);
        let mut data = vec![0.0f32; n * c * oh * ow];
        for nc in 0..n * c {
            let sbase = nc * h * w;
            let dbase = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for dy in 0..k {
                        let row = sbase + (oy * k + dy) * w + ox * k;
                        for dx in 0..k {
                            acc += src[row + dx];
                        }
                    }
                    data[dbase + oy * ow + ox] = acc * inv;
                }
            }
        }
        check_finite("avg_pool", &data)?;
        let needs = self.needs(x);
        Ok(self.push(vec![n, c, oh, ow], data, Op::AvgPool { x, k }, needs))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(AutodiffError::BadRank { op: "global_avg_pool", expected: 4, shape: xs });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let inv = 1.0 / (h * w) as f32;
        let src = self.data(x);
        let mut data = vec![0.0f32; n * c];
        for nc in 0..n * c {
            let base = nc * h * w;
            let mut acc = 0.0f32;
            for s in 0..h * w {
                acc += src[base + s];
            }
            data[nc] = acc * inv;
        }
        check_finite("global_avg_pool", &data)?;
        let needs = self.needs(x);
        Ok(self.push(vec![n, c], data, Op::GlobalAvgPool { x }, needs))
    }

    /// Affine map `x * w + b` with `x: [N,D]`, `w: [D,K]`, `b: [K]`.
    pub fn dense(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(AutodiffError::ShapeMismatch { op: "dense", lhs: xs, rhs: ws });
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        if self.shape(b) != [k] {
            return Err(AutodiffError::ShapeMismatch {
                op: "dense",
                lhs: self.shape(b).to_vec(),
                rhs: vec![k],
            });
        }
        let mut data = vec![0.0f32; n * k];
        gemm(n, d, k, self.data(x), self.data(w), &mut data);
        let bias = self.data(b);
        for row in data.chunks_exact_mut(k) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        check_finite("dense", &data)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![n, k], data, Op::Dense { x, w, b }, needs))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max-subtraction. Returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: ls,
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (ls[0], ls[1]);
        for &label in labels {
            if label >= k {
                return Err(AutodiffError::LabelOutOfRange { label, classes: k });
            }
        }
        let src = self.data(logits);
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &src[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &v in row {
                denom += ((v - max) as f64).exp();
            }
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = (((v - max) as f64).exp() / denom) as f32;
            }
            loss += -(((row[labels[i]] - max) as f64) - denom.ln());
        }
        let data = vec![(loss / n as f64) as f32];
        check_finite("softmax_cross_entropy", &data)?;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            data,
            Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() },
            needs,
        ))
    }

    /// Scalar `sum(x * mask)` with a constant mask; selects or weights
    /// elements (e.g. one logit per batch row) for backward passes.
    pub fn masked_sum(&mut self, x: TensorId, mask: &[f32]) -> Result<TensorId> {
        if mask.len() != self.data(x).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_sum",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let total: f64 = self
            .data(x)
            .iter()
            .zip(mask)
            .map(|(&v, &m)| v as f64 * m as f64)
            .sum();
        let data = vec![total as f32];
        check_finite("masked_sum", &data)?;
        let needs = self.needs(x);
        Ok(self.push(vec![1], data, Op::MaskedSum { x, mask: mask.to_vec() }, needs))
    }

    /// Reverse sweep from a scalar loss: populates `grad` for every tensor
    /// with gradient tracking that the loss depends on. Each node is visited
    /// exactly once, in reverse creation (reverse topological) order.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = self.grads[id].take() else { continue };
            self.propagate(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<f32> {
        let len = self.nodes[id.0].data.len();
        self.grads[id.0].get_or_insert_with(|| vec![0.0f32; len])
    }

    fn propagate(&mut self, id: usize, gout: &[f32]) {
        // Ops only reference earlier ids, so reading node `id` while
        // writing parent grads never aliases.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    for (g, &go) in self.grad_buf(a).iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                if self.needs(b) {
                    for (g, &go) in self.grad_buf(b).iter_mut().zip(gout) {
                        *g += go;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bd = self.nodes[b.0].data.clone();
                    for ((g, &go), &bv) in self.grad_buf(a).iter_mut().zip(gout).zip(&bd) {
                        *g += go * bv;
                    }
                }
                if self.needs(b) {
                    let ad = self.nodes[a.0].data.clone();
                    for ((g, &go), &av) in self.grad_buf(b).iter_mut().zip(gout).zip(&ad) {
                        *g += go * av;
                    }
                }
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                if self.needs(x) {
                    for (g, &go) in self.grad_buf(x).iter_mut().zip(gout) {
                        *g += go * factor;
                    }
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if self.needs(x) {
                    let xd = self.nodes[x.0].data.clone();
                    for ((g, &go), &xv) in self.grad_buf(x).iter_mut().zip(gout).zip(&xd) {
                        if xv > 0.0 {
                            *g += go;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.needs(x) {
                    for (g, &go) in self.grad_buf(x).iter_mut().zip(gout) {
                        *g += go;
                    }
                }
            }
            Op::Conv2d { x, w, b, padding } => {
                let (x, w, b, padding) = (*x, *w, *b, *padding);
                self.conv2d_backward(id, x, w, b, padding, gout);
            }
            Op::AvgPool { x, k } => {
                let (x, k) = (*x, *k);
                if self.needs(x) {
                    let xs = self.nodes[x.0].shape.clone();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (oh, ow) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f32;
                    let gx = self.grad_buf(x);
                    for nc in 0..n * c {
                        let sbase = nc * h * w;
                        let dbase = nc * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = gout[dbase + oy * ow + ox] * inv;
                                for dy in 0..k {
                                    let row = sbase + (oy * k + dy) * w + ox * k;
                                    for dx in 0..k {
                                        gx[row + dx] += go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                if self.needs(x) {
                    let xs = self.nodes[x.0].shape.clone();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let inv = 1.0 / (h * w) as f32;
                    let gx = self.grad_buf(x);
                    for nc in 0..n * c {
                        let go = gout[nc] * inv;
                        let base = nc * h * w;
                        for s in 0..h * w {
                            gx[base + s] += go;
                        }
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.nodes[x.0].shape.clone();
                let ws = self.nodes[w.0].shape.clone();
                let (n, d, k) = (xs[0], xs[1], ws[1]);
                if self.needs(x) {
                    // dx = gout * w^T
                    let mut wt = vec![0.0f32; d * k];
                    transpose(d, k, &self.nodes[w.0].data, &mut wt);
                    let mut dx = vec![0.0f32; n * d];
                    gemm(n, k, d, gout, &wt, &mut dx);
                    for (g, &v) in self.grad_buf(x).iter_mut().zip(&dx) {
                        *g += v;
                    }
                }
                if self.needs(w) {
                    // dw = x^T * gout
                    let mut xt = vec![0.0f32; n * d];
                    transpose(n, d, &self.nodes[x.0].data, &mut xt);
                    let mut dw = vec![0.0f32; d * k];
                    gemm(d, n, k, &xt, gout, &mut dw);
                    for (g, &v) in self.grad_buf(w).iter_mut().zip(&dw) {
                        *g += v;
                    }
                }
                if self.needs(b) {
                    let gb = self.grad_buf(b);
                    for row in gout.chunks_exact(k) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let logits = *logits;
                if self.needs(logits) {
                    let probs = probs.clone();
                    let labels = labels.clone();
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = gout[0] / n as f32;
                    let gl = self.grad_buf(logits);
                    for i in 0..n {
                        for j in 0..k {
                            let delta = if j == labels[i] { 1.0 } else { 0.0 };
                            gl[i * k + j] += scale * (probs[i * k + j] - delta);
                        }
                    }
                }
            }
            Op::MaskedSum { x, mask } => {
                let x = *x;
                if self.needs(x) {
                    let mask = mask.clone();
                    let go = gout[0];
                    for (g, &m) in self.grad_buf(x).iter_mut().zip(&mask) {
                        *g += go * m;
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        out_id: usize,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        padding: Padding,
        gout: &[f32],
    ) {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let os = self.nodes[out_id].shape.clone();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let ckk = c * kh * kw;
        let m = n * oh * ow;

        // gout in [N,F,OH,OW] -> g2 in [M,F]
        let mut g2 = vec![0.0f32; m * f];
        for ni in 0..n {
            for fi in 0..f {
                let base = (ni * f + fi) * oh * ow;
                for s in 0..oh * ow {
                    g2[(ni * oh * ow + s) * f + fi] = gout[base + s];
                }
            }
        }

        if self.needs(b) {
            let gb = self.grad_buf(b);
            for row in g2.chunks_exact(f) {
                for (g, &v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }

        let needs_w = self.needs(w);
        let needs_x = self.needs(x);
        if needs_w {
            // dW[f, ckk] = g2^T[f, m] * col[m, ckk]; im2col is recomputed
            // here instead of cached to keep per-node memory flat.
            let mut col = vec![0.0f32; m * ckk];
            im2col(&self.nodes[x.0].data, n, c, h, wd, kh, kw, padding, oh, ow, &mut col);
            let mut g2t = vec![0.0f32; m * f];
            transpose(m, f, &g2, &mut g2t);
            let mut dw = vec![0.0f32; f * ckk];
            gemm(f, m, ckk, &g2t, &col, &mut dw);
            for (g, &v) in self.grad_buf(w).iter_mut().zip(&dw) {
                *g += v;
            }
        }
        if needs_x {
            // dcol[m, ckk] = g2[m, f] * w[f, ckk], scattered back by col2im.
            let mut dcol = vec![0.0f32; m * ckk];
            gemm(m, f, ckk, &g2, &self.nodes[w.0].data, &mut dcol);
            let gx = self.grad_buf(x);
            col2im(&dcol, n, c, h, wd, kh, kw, padding, oh, ow, gx);
        }
    }
}

fn pad_of(padding: Padding, kh: usize, kw: usize) -> (usize, usize) {
    match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
        Padding::Valid => (0, 0),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let (ph, pw) = pad_of(padding, kh, kw);
    let ckk = c * kh * kw;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    let xbase = (ni * c + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - ph as isize;
                        let cbase = row + ci * kh * kw + ky * kw;
                        if iy < 0 || iy >= h as isize {
                            for kx in 0..kw {
                                col[cbase + kx] = 0.0;
                            }
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        for kx in 0..kw {
                            let ix = (ox + kx) as isize - pw as isize;
                            col[cbase + kx] = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                x[xrow + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
    oh: usize,
    ow: usize,
    dx: &mut [f32],
) {
    let (ph, pw) = pad_of(padding, kh, kw);
    let ckk = c * kh * kw;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    let xbase = (ni * c + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let cbase = row + ci * kh * kw + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox + kx) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[xrow + ix as usize] += dcol[cbase + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}
