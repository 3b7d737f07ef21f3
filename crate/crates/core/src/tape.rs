//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations append nodes in execution order, which is already a
//! topological order of the computation DAG; `backward` replays the tape in
//! reverse, accumulating vector-Jacobian products into the inputs. Leaves
//! flagged `requires_grad` keep their gradient after the pass.

use crate::error::{Error, Result};
pub use crate::kernels::ConvSpec;
use crate::kernels::{self, pool_out_extent};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    /// x scaled by a single-element tensor.
    Scale { x: TensorId, s: TensorId },
    Relu { x: TensorId },
    Conv2d { input: TensorId, kernel: TensorId, spec: ConvSpec },
    BatchNorm { input: TensorId, gamma: TensorId, beta: TensorId, mode: BnMode, mean: Vec<F>, invstd: Vec<F> },
    MaxPool { x: TensorId, argmax: Vec<usize> },
    AvgPool { x: TensorId, k: usize, stride: usize, padding: usize },
    GlobalAvgPool { x: TensorId },
    Linear { x: TensorId, weight: TensorId, bias: TensorId },
    ConcatChannels { xs: Vec<TensorId> },
    /// Softmax over the last axis, independently per row.
    SoftmaxRows { x: TensorId },
    /// One element of a tensor as a scalar.
    Select { x: TensorId, index: usize },
    /// Spatial shift by (+1,+1) style offsets with zero fill.
    Shift2d { x: TensorId, dy: usize, dx: usize },
    /// All-zero output at the (possibly subsampled) shape of x.
    ZeroStrided { x: TensorId },
    SoftmaxCrossEntropy { logits: TensorId, labels: Vec<usize>, probs: Vec<F> },
    Sum { x: TensorId },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires: bool,
    grad: Option<Vec<F>>,
}

/// The gradient graph. Node insertion order is the topological order.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` target w.r.t. this node, if tracked.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Input node references of a node, in operand order.
    pub fn inputs(&self, id: TensorId) -> Vec<TensorId> {
        match &self.nodes[id.0].op {
            Op::Leaf => vec![],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { x, s } => vec![*x, *s],
            Op::Relu { x }
            | Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::SoftmaxRows { x }
            | Op::Select { x, .. }
            | Op::Shift2d { x, .. }
            | Op::ZeroStrided { x }
            | Op::Sum { x } => vec![*x],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Linear { x, weight, bias } => vec![*x, *weight, *bias],
            Op::ConcatChannels { xs } => xs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires: bool) -> TensorId {
        self.nodes.push(Node { value, op, requires, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires
    }

    // ---- forward operations -------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(
                "add",
                format!("shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }, self.requires(a) || self.requires(b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(
                "mul",
                format!("shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, self.requires(a) || self.requires(b)))
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn scale(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).numel() != 1 {
            return Err(Error::contract("scale", format!("scale factor has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|&v| v * sv).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Scale { x, s }, self.requires(x) || self.requires(s)))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Relu { x }, self.requires(x))
    }

    /// input [n,c,h,w] * kernel [o, c/groups, kh, kw] -> [n,o,oh,ow]; no bias.
    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId, spec: ConvSpec) -> Result<TensorId> {
        let ishape = self.shape(input);
        let kshape = self.shape(kernel);
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::contract(
                "conv2d",
                format!("expected 4-d input and kernel, got {ishape:?} and {kshape:?}"),
            ));
        }
        let [n, c, h, w] = [ishape[0], ishape[1], ishape[2], ishape[3]];
        let [o, i, kh, kw] = [kshape[0], kshape[1], kshape[2], kshape[3]];
        if spec.groups == 0 || c % spec.groups != 0 || o % spec.groups != 0 {
            return Err(Error::contract(
                "conv2d",
                format!("channels {c}/{o} not divisible by groups {}", spec.groups),
            ));
        }
        if i != c / spec.groups {
            return Err(Error::contract(
                "conv2d",
                format!("kernel input extent {i} != {}/{} channels per group", c, spec.groups),
            ));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::contract("conv2d", "stride and dilation must be positive".to_string()));
        }
        let span_h = spec.dilation * (kh - 1) + 1;
        let span_w = spec.dilation * (kw - 1) + 1;
        if h + 2 * spec.padding < span_h || w + 2 * spec.padding < span_w {
            return Err(Error::contract(
                "conv2d",
                format!("kernel span {span_h}x{span_w} exceeds padded input {h}x{w}"),
            ));
        }
        let oh = spec.out_extent(h, kh);
        let ow = spec.out_extent(w, kw);
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            [n, c, h, w],
            [o, i, kh, kw],
            &spec,
        );
        let t = Tensor::new(vec![n, o, oh, ow], out)?;
        let req = self.requires(input) || self.requires(kernel);
        Ok(self.push(t, Op::Conv2d { input, kernel, spec }, req))
    }

    /// Per-channel batch normalisation over (N,H,W). In train mode the batch
    /// statistics normalise the output and update the running buffers in
    /// place; eval mode normalises with the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &mut [F],
        running_var: &mut [F],
        mode: BnMode,
        eps: F,
        momentum: F,
    ) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(Error::contract("batch_norm", format!("expected 4-d input, got {ishape:?}")));
        }
        let [n, c, h, w] = [ishape[0], ishape[1], ishape[2], ishape[3]];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::contract(
                "batch_norm",
                format!("gamma/beta length must equal {c} channels"),
            ));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::contract("batch_norm", "running stats length mismatch".to_string()));
        }
        if eps <= F::zero() {
            return Err(Error::contract("batch_norm", "epsilon must be positive".to_string()));
        }
        let m = n * h * w;
        let plane = h * w;
        let x = self.value(input).data();
        let mut mean = vec![F::zero(); c];
        let mut invstd = vec![F::zero(); c];
        match mode {
            BnMode::Train => {
                let mf = F::from_usize(m);
                for ci in 0..c {
                    let mut acc = F::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for &v in &x[base..base + plane] {
                            acc = acc + v;
                        }
                    }
                    let mu = acc / mf;
                    let mut var = F::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for &v in &x[base..base + plane] {
                            let d = v - mu;
                            var = var + d * d;
                        }
                    }
                    let biased = var / mf;
                    mean[ci] = mu;
                    invstd[ci] = (biased + eps).sqrt().recip();
                    // single-element batches fall back to the biased (zero)
                    // variance so tiny desk-scale batches stay usable
                    let running = if m > 1 { var / F::from_usize(m - 1) } else { biased };
                    running_mean[ci] = (F::one() - momentum) * running_mean[ci] + momentum * mu;
                    running_var[ci] = (F::one() - momentum) * running_var[ci] + momentum * running;
                }
            }
            BnMode::Eval => {
                for ci in 0..c {
                    mean[ci] = running_mean[ci];
                    invstd[ci] = (running_var[ci] + eps).sqrt().recip();
                }
            }
        }
        let gamma_v = self.value(gamma).data().to_vec();
        let beta_v = self.value(beta).data().to_vec();
        let mut out = vec![F::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (mu, is, g, b) = (mean[ci], invstd[ci], gamma_v[ci], beta_v[ci]);
                for at in base..base + plane {
                    out[at] = (x[at] - mu) * is * g + b;
                }
            }
        }
        let t = Tensor::new(ishape, out)?;
        let req = self.requires(input) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(t, Op::BatchNorm { input, gamma, beta, mode, mean, invstd }, req))
    }

    pub fn max_pool2d(&mut self, x: TensorId, k: usize, stride: usize, padding: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::contract("max_pool2d", format!("expected 4-d input, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), dims, k, stride, padding);
        let oh = pool_out_extent(s[2], k, stride, padding);
        let ow = pool_out_extent(s[3], k, stride, padding);
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let req = self.requires(x);
        Ok(self.push(t, Op::MaxPool { x, argmax }, req))
    }

    pub fn avg_pool2d(&mut self, x: TensorId, k: usize, stride: usize, padding: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::contract("avg_pool2d", format!("expected 4-d input, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = kernels::avg_pool_forward(self.value(x).data(), dims, k, stride, padding);
        let oh = pool_out_extent(s[2], k, stride, padding);
        let ow = pool_out_extent(s[3], k, stride, padding);
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let req = self.requires(x);
        Ok(self.push(t, Op::AvgPool { x, k, stride, padding }, req))
    }

    /// [n,c,h,w] -> [n,c] spatial mean.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::contract("global_avg_pool", format!("expected 4-d input, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let pf = F::from_usize(plane);
        let v = self.value(x).data();
        let mut out = vec![F::zero(); s[0] * s[1]];
        for (i, slot) in out.iter_mut().enumerate() {
            let base = i * plane;
            let mut acc = F::zero();
            for &e in &v[base..base + plane] {
                acc = acc + e;
            }
            *slot = acc / pf;
        }
        let t = Tensor::new(vec![s[0], s[1]], out)?;
        let req = self.requires(x);
        Ok(self.push(t, Op::GlobalAvgPool { x }, req))
    }

    /// x [n,c] * weight [k,c] + bias [k] -> [n,k]
    pub fn linear(&mut self, x: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::contract(
                "linear",
                format!("incompatible shapes x{xs:?} w{ws:?} b{bs:?}"),
            ));
        }
        let (n, c, k) = (xs[0], xs[1], ws[0]);
        let mut out = vec![F::zero(); n * k];
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        kernels::matmul_abt_acc(xv, wv, n, c, k, &mut out);
        for row in out.chunks_mut(k) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o = *o + b;
            }
        }
        let t = Tensor::new(vec![n, k], out)?;
        let req = self.requires(x) || self.requires(weight) || self.requires(bias);
        Ok(self.push(t, Op::Linear { x, weight, bias }, req))
    }

    /// Concatenate along the channel axis; N, H, W must agree.
    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::contract("concat_channels", "empty input list".to_string()));
        }
        let first = self.shape(xs[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::contract("concat_channels", format!("expected 4-d inputs, got {first:?}")));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0usize;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::contract(
                    "concat_channels",
                    format!("shape {s:?} incompatible with {first:?}"),
                ));
            }
            c_total += s[1];
        }
        let plane = h * w;
        let mut out = vec![F::zero(); n * c_total * plane];
        for ni in 0..n {
            let mut c_off = 0usize;
            for &x in xs {
                let ci = self.shape(x)[1];
                let src = self.value(x).data();
                let sbase = ni * ci * plane;
                let dbase = (ni * c_total + c_off) * plane;
                out[dbase..dbase + ci * plane].copy_from_slice(&src[sbase..sbase + ci * plane]);
                c_off += ci;
            }
        }
        let t = Tensor::new(vec![n, c_total, h, w], out)?;
        let req = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(t, Op::ConcatChannels { xs: xs.to_vec() }, req))
    }

    /// Numerically stabilised softmax over the last axis.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| Error::contract("softmax_rows", "0-d input".to_string()))?;
        let v = self.value(x).data();
        let mut out = vec![F::zero(); v.len()];
        for (row_in, row_out) in v.chunks(k).zip(out.chunks_mut(k)) {
            let mut mx = row_in[0];
            for &e in row_in {
                if e > mx {
                    mx = e;
                }
            }
            let mut z = F::zero();
            for (o, &e) in row_out.iter_mut().zip(row_in) {
                *o = (e - mx).exp();
                z = z + *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / z;
            }
        }
        let t = Tensor::new(s, out)?;
        let req = self.requires(x);
        Ok(self.push(t, Op::SoftmaxRows { x }, req))
    }

    /// One element as a scalar tensor.
    pub fn select(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        if index >= self.value(x).numel() {
            return Err(Error::contract(
                "select",
                format!("index {index} out of range for {} elements", self.value(x).numel()),
            ));
        }
        let v = self.value(x).data()[index];
        let req = self.requires(x);
        Ok(self.push(Tensor::scalar(v), Op::Select { x, index }, req))
    }

    /// out[y][x] = in[y+dy][x+dx], zero-filled at the trailing border.
    pub fn shift2d(&mut self, x: TensorId, dy: usize, dx: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::contract("shift2d", format!("expected 4-d input, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let v = self.value(x).data();
        let mut out = vec![F::zero(); v.len()];
        let planes = s[0] * s[1];
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..h.saturating_sub(dy) {
                let src = base + (y + dy) * w + dx;
                let dst = base + y * w;
                let cols = w.saturating_sub(dx);
                out[dst..dst + cols].copy_from_slice(&v[src..src + cols]);
            }
        }
        let t = Tensor::new(s, out)?;
        let req = self.requires(x);
        Ok(self.push(t, Op::Shift2d { x, dy, dx }, req))
    }

    /// All-zero tensor at the shape of x spatially subsampled by `stride`.
    pub fn zeros_strided(&mut self, x: TensorId, stride: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::contract("zeros_strided", format!("expected 4-d input, got {s:?}")));
        }
        let oh = (s[2] - 1) / stride + 1;
        let ow = (s[3] - 1) / stride + 1;
        let t = Tensor::zeros(&[s[0], s[1], oh, ow]);
        let req = self.requires(x);
        Ok(self.push(t, Op::ZeroStrided { x }, req))
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::contract(
                "softmax_cross_entropy",
                format!("expected [batch, classes] logits, got {s:?}"),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::contract(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let v = self.value(logits).data();
        let mut probs = vec![F::zero(); v.len()];
        let mut loss = F::zero();
        for (i, (row_in, row_p)) in v.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let mut mx = row_in[0];
            for &e in row_in {
                if e > mx {
                    mx = e;
                }
            }
            let mut z = F::zero();
            for (p, &e) in row_p.iter_mut().zip(row_in) {
                *p = (e - mx).exp();
                z = z + *p;
            }
            for p in row_p.iter_mut() {
                *p = *p / z;
            }
            loss = loss - row_p[labels[i]].max(F::min_positive_value()).ln();
        }
        loss = loss / F::from_usize(n);
        let req = self.requires(logits);
        let t = Tensor::scalar(loss);
        Ok(self.push(t, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, req))
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let mut acc = F::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let req = self.requires(x);
        self.push(Tensor::scalar(acc), Op::Sum { x }, req)
    }

    // ---- backward ------------------------------------------------------------

    /// Populate gradients of `loss` w.r.t. every `requires_grad` node.
    /// `loss` must be a scalar.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.accumulate(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn add_grad(&self, grads: &mut [Option<Vec<F>>], id: TensorId, f: impl FnOnce(&mut [F])) {
        if !self.requires(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![F::zero(); self.nodes[id.0].value.numel()]);
        }
        f(slot.as_deref_mut().expect("just filled"));
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, i: usize, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::ZeroStrided { .. } => {}
            Op::Add { a, b } => {
                self.add_grad(grads, *a, |g| {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi = *gi + d;
                    }
                });
                self.add_grad(grads, *b, |g| {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi = *gi + d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.add_grad(grads, *a, |g| {
                    for ((gi, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *gi = *gi + d * o;
                    }
                });
                self.add_grad(grads, *b, |g| {
                    for ((gi, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *gi = *gi + d * o;
                    }
                });
            }
            Op::Scale { x, s } => {
                let sv = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                self.add_grad(grads, *x, |g| {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi = *gi + d * sv;
                    }
                });
                self.add_grad(grads, *s, |g| {
                    let mut acc = F::zero();
                    for (&d, &v) in dy.iter().zip(xv) {
                        acc = acc + d * v;
                    }
                    g[0] = g[0] + acc;
                });
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                self.add_grad(grads, *x, |g| {
                    for ((gi, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        if v > F::zero() {
                            *gi = *gi + d;
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel, spec } => {
                let ishape = self.shape(*input);
                let kshape = self.shape(*kernel);
                let dims = [ishape[0], ishape[1], ishape[2], ishape[3]];
                let kdims = [kshape[0], kshape[1], kshape[2], kshape[3]];
                let want_input = self.requires(*input);
                let want_kernel = self.requires(*kernel);
                let mut dinput = want_input.then(|| vec![F::zero(); self.value(*input).numel()]);
                let mut dkernel = want_kernel.then(|| vec![F::zero(); self.value(*kernel).numel()]);
                kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    dy,
                    dims,
                    kdims,
                    spec,
                    dinput.as_mut(),
                    dkernel.as_mut(),
                );
                if let Some(di) = dinput {
                    self.add_grad(grads, *input, |g| {
                        for (gi, d) in g.iter_mut().zip(di) {
                            *gi = *gi + d;
                        }
                    });
                }
                if let Some(dk) = dkernel {
                    self.add_grad(grads, *kernel, |g| {
                        for (gi, d) in g.iter_mut().zip(dk) {
                            *gi = *gi + d;
                        }
                    });
                }
            }
            Op::BatchNorm { input, gamma, beta, mode, mean, invstd } => {
                let s = self.shape(*input);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let m = n * plane;
                let mf = F::from_usize(m);
                let xv = self.value(*input).data();
                let gv = self.value(*gamma).data();
                // per-channel reductions of dy and dy*xhat
                let mut sum_dy = vec![F::zero(); c];
                let mut sum_dy_xhat = vec![F::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let (mu, is) = (mean[ci], invstd[ci]);
                        let mut a = F::zero();
                        let mut b = F::zero();
                        for at in base..base + plane {
                            let d = dy[at];
                            a = a + d;
                            b = b + d * (xv[at] - mu) * is;
                        }
                        sum_dy[ci] = sum_dy[ci] + a;
                        sum_dy_xhat[ci] = sum_dy_xhat[ci] + b;
                    }
                }
                self.add_grad(grads, *beta, |g| {
                    for (gi, &d) in g.iter_mut().zip(&sum_dy) {
                        *gi = *gi + d;
                    }
                });
                self.add_grad(grads, *gamma, |g| {
                    for (gi, &d) in g.iter_mut().zip(&sum_dy_xhat) {
                        *gi = *gi + d;
                    }
                });
                let train = *mode == BnMode::Train;
                self.add_grad(grads, *input, |g| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let (mu, is, ga) = (mean[ci], invstd[ci], gv[ci]);
                            if train {
                                let k = ga * is / mf;
                                let (sd, sdx) = (sum_dy[ci], sum_dy_xhat[ci]);
                                for at in base..base + plane {
                                    let xhat = (xv[at] - mu) * is;
                                    g[at] = g[at] + k * (mf * dy[at] - sd - xhat * sdx);
                                }
                            } else {
                                let k = ga * is;
                                for at in base..base + plane {
                                    g[at] = g[at] + k * dy[at];
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                self.add_grad(grads, *x, |g| {
                    for (&at, &d) in argmax.iter().zip(dy) {
                        g[at] = g[at] + d;
                    }
                });
            }
            Op::AvgPool { x, k, stride, padding } => {
                let s = self.shape(*x);
                let dims = [s[0], s[1], s[2], s[3]];
                self.add_grad(grads, *x, |g| {
                    kernels::avg_pool_backward(dy, dims, *k, *stride, *padding, g);
                });
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let pf = F::from_usize(plane);
                self.add_grad(grads, *x, |g| {
                    for (i, &d) in dy.iter().enumerate() {
                        let share = d / pf;
                        for gi in &mut g[i * plane..(i + 1) * plane] {
                            *gi = *gi + share;
                        }
                    }
                });
            }
            Op::Linear { x, weight, bias } => {
                let (n, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*weight)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*weight).data();
                self.add_grad(grads, *x, |g| {
                    kernels::matmul_acc(dy, wv, n, k, c, g);
                });
                self.add_grad(grads, *weight, |g| {
                    kernels::matmul_atb_acc(dy, xv, n, k, c, g);
                });
                self.add_grad(grads, *bias, |g| {
                    for row in dy.chunks(k) {
                        for (gi, &d) in g.iter_mut().zip(row) {
                            *gi = *gi + d;
                        }
                    }
                });
            }
            Op::ConcatChannels { xs } => {
                let out_shape = self.nodes[i].value.shape();
                let (n, c_total) = (out_shape[0], out_shape[1]);
                let plane = out_shape[2] * out_shape[3];
                let mut c_off = 0usize;
                for &x in xs {
                    let ci = self.shape(x)[1];
                    self.add_grad(grads, x, |g| {
                        for ni in 0..n {
                            let sbase = (ni * c_total + c_off) * plane;
                            let dbase = ni * ci * plane;
                            for j in 0..ci * plane {
                                g[dbase + j] = g[dbase + j] + dy[sbase + j];
                            }
                        }
                    });
                    c_off += ci;
                }
            }
            Op::SoftmaxRows { x } => {
                let k = *self.nodes[i].value.shape().last().expect("non-empty");
                let yv = self.nodes[i].value.data();
                self.add_grad(grads, *x, |g| {
                    for ((grow, drow), yrow) in g.chunks_mut(k).zip(dy.chunks(k)).zip(yv.chunks(k)) {
                        let mut dot = F::zero();
                        for (&d, &y) in drow.iter().zip(yrow) {
                            dot = dot + d * y;
                        }
                        for ((gi, &d), &y) in grow.iter_mut().zip(drow).zip(yrow) {
                            *gi = *gi + y * (d - dot);
                        }
                    }
                });
            }
            Op::Select { x, index } => {
                let d = dy[0];
                self.add_grad(grads, *x, |g| {
                    g[*index] = g[*index] + d;
                });
            }
            Op::Shift2d { x, dy: offy, dx: offx } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let planes = s[0] * s[1];
                self.add_grad(grads, *x, |g| {
                    for p in 0..planes {
                        let base = p * h * w;
                        for y in 0..h.saturating_sub(*offy) {
                            let dst = base + (y + offy) * w + offx;
                            let src = base + y * w;
                            let cols = w.saturating_sub(*offx);
                            for j in 0..cols {
                                g[dst + j] = g[dst + j] + dy[src + j];
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = dy[0] / F::from_usize(n);
                self.add_grad(grads, *logits, |g| {
                    for (bi, (grow, prow)) in g.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for (ci, (gi, &p)) in grow.iter_mut().zip(prow).enumerate() {
                            let target = if ci == labels[bi] { F::one() } else { F::zero() };
                            *gi = *gi + scale * (p - target);
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let d = dy[0];
                self.add_grad(grads, *x, |g| {
                    for gi in g.iter_mut() {
                        *gi = *gi + d;
                    }
                });
            }
        }
    }
}
