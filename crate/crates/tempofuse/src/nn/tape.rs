//! Reverse-mode autodiff over a per-step operation tape.
//!
//! A `Tape` records one forward pass; `backward` consumes it and leaves
//! gradients on the leaf nodes. Tapes are disposable: build, run backward
//! once, read the gradients, drop. Running backward twice is an error.
//!
//! With pattern recording enabled the tape folds every data-dependent
//! branch decision (ReLU signs, pool argmax choices) into a fingerprint;
//! the gradient checker compares fingerprints at perturbed parameters to
//! detect finite-difference steps that cross a kink.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::conv::{col2im_1d, col2im_2d, conv_out_len, im2col_1d, im2col_2d};
use super::scalar::Scalar;
use super::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer batchnorm running statistics, owned by the model and updated
/// only by train-mode forwards.
#[derive(Debug, Clone)]
pub struct BnState<T: Scalar> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    SumAll(NodeId),
    Relu(NodeId),
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        // Batch statistics were used, so they depend on x.
        train_stats: bool,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<u32>,
    },
    GlobalMaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    MeanPoolTime(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<bool>,
        scale: T,
    },
    Softmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<u32>,
        probs: Tensor<T>,
    },
    ConcatFeatures(Vec<NodeId>),
    StackToMap(Vec<NodeId>),
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Tensor<T>>>,
    mode: Mode,
    consumed: bool,
    record_patterns: bool,
    pattern_hash: u64,
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            grads: Vec::new(),
            mode,
            consumed: false,
            record_patterns: false,
            pattern_hash: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Fold ReLU/pool branch decisions into `pattern_fingerprint`.
    pub fn record_patterns(&mut self, on: bool) {
        self.record_patterns = on;
    }

    pub fn pattern_fingerprint(&self) -> u64 {
        self.pattern_hash
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Gradient of a leaf after backward.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    // No finiteness assertion here: diverging training runs legitimately
    // overflow, and the loop reports those as a typed error instead.
    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        NodeId(self.values.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.requires_grad[id.0])
    }

    fn mix(&mut self, v: u64) {
        let mut h = self.pattern_hash ^ v.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h = h.rotate_left(23).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        self.pattern_hash = h;
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let mut out = self.values[a.0].clone();
        out.add_assign(&self.values[b.0]);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Shape(format!(
                "elementwise mul of {:?} and {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let mut out = self.values[a.0].clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o = *o * v;
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, Op::MulElem(a, b), rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: T = self.values[x.0].data().iter().copied().sum();
        let rg = self.requires_grad[x.0];
        self.push(
            Tensor::from_vec(&[1], vec![s]).expect("scalar"),
            Op::SumAll(x),
            rg,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.values[x.0].clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        if self.record_patterns {
            let mut word = 0u64;
            let mut bits = 0u32;
            let mut pending = Vec::new();
            for &v in self.values[x.0].data() {
                word = (word << 1) | (v > T::zero()) as u64;
                bits += 1;
                if bits == 64 {
                    pending.push(word);
                    word = 0;
                    bits = 0;
                }
            }
            pending.push(word ^ bits as u64);
            for w in pending {
                self.mix(w);
            }
        }
        let rg = self.requires_grad[x.0];
        self.push(out, Op::Relu(x), rg)
    }

    /// y[n, o] = sum_i x[n, i] * w[o, i] + b[o].
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.values[x.0].shape(),
            self.values[w.0].shape(),
            self.values[b.0].shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::Shape(format!(
                "dense wants x[N,I] w[O,I] b[O], got {xs:?} {ws:?} {bs:?}"
            )));
        }
        let (n, f_in, f_out) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, f_out]);
        unsafe {
            T::gemm(
                n,
                f_in,
                f_out,
                T::one(),
                self.values[x.0].data().as_ptr(),
                f_in as isize,
                1,
                // w transposed via strides
                self.values[w.0].data().as_ptr(),
                1,
                f_in as isize,
                T::zero(),
                out.data_mut().as_mut_ptr(),
                f_out as isize,
                1,
            );
        }
        let bias = self.values[b.0].data();
        for row in out.data_mut().chunks_exact_mut(f_out) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v = *v + bv;
            }
        }
        let rg = self.needs_grad(&[x, w, b]);
        Ok(self.push(out, Op::Dense { x, w, b }, rg))
    }

    /// x[N,C,T] * w[O,C,K] + b[O] -> y[N,O,T'].
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.values[x.0].shape(),
            self.values[w.0].shape(),
            self.values[b.0].shape(),
        );
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::Shape(format!(
                "conv1d wants x[N,C,T] w[O,C,K] b[O], got {xs:?} {ws:?} {bs:?}"
            )));
        }
        let (n, c_in, t_in) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        let t_out = conv_out_len(t_in, k, stride, pad).ok_or_else(|| {
            Error::Shape(format!(
                "conv1d kernel {k} stride {stride} pad {pad} does not fit T={t_in}"
            ))
        })?;
        let mut out = Tensor::zeros(&[n, c_out, t_out]);
        let mut cols = vec![T::zero(); c_in * k * t_out];
        let bias = self.values[b.0].data().to_vec();
        for s in 0..n {
            im2col_1d(
                &self.values[x.0].data()[s * c_in * t_in..(s + 1) * c_in * t_in],
                c_in,
                t_in,
                k,
                stride,
                pad,
                t_out,
                &mut cols,
            );
            let y = &mut out.data_mut()[s * c_out * t_out..(s + 1) * c_out * t_out];
            unsafe {
                T::gemm(
                    c_out,
                    c_in * k,
                    t_out,
                    T::one(),
                    self.values[w.0].data().as_ptr(),
                    (c_in * k) as isize,
                    1,
                    cols.as_ptr(),
                    t_out as isize,
                    1,
                    T::zero(),
                    y.as_mut_ptr(),
                    t_out as isize,
                    1,
                );
            }
            for (co, row) in y.chunks_exact_mut(t_out).enumerate() {
                for v in row.iter_mut() {
                    *v = *v + bias[co];
                }
            }
        }
        let rg = self.needs_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv1d { x, w, b, stride, pad }, rg))
    }

    /// x[N,C,H,W] * w[O,C,Kh,Kw] + b[O] -> y[N,O,H',W'].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.values[x.0].shape(),
            self.values[w.0].shape(),
            self.values[b.0].shape(),
        );
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::Shape(format!(
                "conv2d wants x[N,C,H,W] w[O,C,Kh,Kw] b[O], got {xs:?} {ws:?} {bs:?}"
            )));
        }
        let (n, c_in, h_in, w_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let h_out = conv_out_len(h_in, kh, stride.0, pad.0);
        let w_out = conv_out_len(w_in, kw, stride.1, pad.1);
        let (h_out, w_out) = match (h_out, w_out) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d kernel {kh}x{kw} stride {stride:?} pad {pad:?} does not fit {h_in}x{w_in}"
                )))
            }
        };
        let plane_in = c_in * h_in * w_in;
        let plane_out = c_out * h_out * w_out;
        let mut out = Tensor::zeros(&[n, c_out, h_out, w_out]);
        let mut cols = vec![T::zero(); c_in * kh * kw * h_out * w_out];
        let bias = self.values[b.0].data().to_vec();
        for s in 0..n {
            im2col_2d(
                &self.values[x.0].data()[s * plane_in..(s + 1) * plane_in],
                c_in,
                (h_in, w_in),
                (kh, kw),
                stride,
                pad,
                (h_out, w_out),
                &mut cols,
            );
            let y = &mut out.data_mut()[s * plane_out..(s + 1) * plane_out];
            unsafe {
                T::gemm(
                    c_out,
                    c_in * kh * kw,
                    h_out * w_out,
                    T::one(),
                    self.values[w.0].data().as_ptr(),
                    (c_in * kh * kw) as isize,
                    1,
                    cols.as_ptr(),
                    (h_out * w_out) as isize,
                    1,
                    T::zero(),
                    y.as_mut_ptr(),
                    (h_out * w_out) as isize,
                    1,
                );
            }
            for (co, row) in y.chunks_exact_mut(h_out * w_out).enumerate() {
                for v in row.iter_mut() {
                    *v = *v + bias[co];
                }
            }
        }
        let rg = self.needs_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Normalize per channel (axis 1) over batch and spatial axes.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState<T>,
    ) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!("batchnorm input {xs:?} has no channel axis")));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.values[gamma.0].numel() != c || self.values[beta.0].numel() != c {
            return Err(Error::Shape(format!(
                "batchnorm over {c} channels, gamma/beta have {}/{}",
                self.values[gamma.0].numel(),
                self.values[beta.0].numel()
            )));
        }
        if state.running_mean.len() != c {
            return Err(Error::Shape(format!(
                "batchnorm state covers {} channels, input has {c}",
                state.running_mean.len()
            )));
        }
        let train = self.mode == Mode::Train;
        if train && n < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm in train mode needs a batch of at least 2".into(),
            ));
        }
        let m = n * spatial;
        let (mean, var): (Vec<T>, Vec<T>) = if train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let data = self.values[x.0].data();
            for ch in 0..c {
                let mut sum = 0.0f64;
                let mut sq = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * spatial;
                    for &v in &data[base..base + spatial] {
                        let v = v.as_f64();
                        sum += v;
                        sq += v * v;
                    }
                }
                let mu = sum / m as f64;
                mean[ch] = T::from_f64(mu);
                var[ch] = T::from_f64((sq / m as f64 - mu * mu).max(0.0));
            }
            for ch in 0..c {
                let mom = T::from_f64(BN_MOMENTUM);
                let keep = T::from_f64(1.0 - BN_MOMENTUM);
                state.running_mean[ch] = keep * state.running_mean[ch] + mom * mean[ch];
                state.running_var[ch] = keep * state.running_var[ch] + mom * var[ch];
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(BN_EPS)).sqrt())
            .collect();
        let mut out = Tensor::zeros(&xs);
        {
            let data = self.values[x.0].data();
            let g = self.values[gamma.0].data();
            let be = self.values[beta.0].data();
            let o = out.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * spatial;
                    for i in base..base + spatial {
                        o[i] = g[ch] * (data[i] - mean[ch]) * inv_std[ch] + be[ch];
                    }
                }
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train_stats: train,
            },
            rg,
        ))
    }

    pub fn maxpool2d(
        &mut self,
        x: NodeId,
        k: (usize, usize),
        stride: (usize, usize),
    ) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("maxpool2d input {xs:?} is not 4-D")));
        }
        let (n, c, h_in, w_in) = (xs[0], xs[1], xs[2], xs[3]);
        let h_out = conv_out_len(h_in, k.0, stride.0, 0);
        let w_out = conv_out_len(w_in, k.1, stride.1, 0);
        let (h_out, w_out) = match (h_out, w_out) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "maxpool window {k:?} stride {stride:?} does not fit {h_in}x{w_in}"
                )))
            }
        };
        let mut out = Tensor::zeros(&[n, c, h_out, w_out]);
        let mut argmax = vec![0u32; n * c * h_out * w_out];
        {
            let data = self.values[x.0].data();
            let o = out.data_mut();
            let mut oi = 0usize;
            for s in 0..n {
                for ch in 0..c {
                    let plane = &data[(s * c + ch) * h_in * w_in..(s * c + ch + 1) * h_in * w_in];
                    for oh in 0..h_out {
                        for ow in 0..w_out {
                            let mut best_idx = (oh * stride.0) * w_in + ow * stride.1;
                            let mut best = plane[best_idx];
                            for i in 0..k.0 {
                                for j in 0..k.1 {
                                    let idx = (oh * stride.0 + i) * w_in + (ow * stride.1 + j);
                                    if plane[idx] > best {
                                        best = plane[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            o[oi] = best;
                            argmax[oi] = best_idx as u32;
                            oi += 1;
                        }
                    }
                }
            }
        }
        if self.record_patterns {
            for &a in &argmax {
                self.mix(a as u64 + 1);
            }
        }
        let rg = self.requires_grad[x.0];
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, rg))
    }

    /// [N,C,H,W] -> [N,C], max over both spatial axes.
    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("global_max_pool input {xs:?} is not 4-D")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h * w == 0 {
            return Err(Error::Shape("global_max_pool over empty plane".into()));
        }
        let mut out = Tensor::zeros(&[n, c]);
        let mut argmax = vec![0u32; n * c];
        {
            let data = self.values[x.0].data();
            let o = out.data_mut();
            for nc in 0..n * c {
                let plane = &data[nc * h * w..(nc + 1) * h * w];
                let mut best = 0usize;
                for (i, &v) in plane.iter().enumerate() {
                    if v > plane[best] {
                        best = i;
                    }
                }
                o[nc] = plane[best];
                argmax[nc] = best as u32;
            }
        }
        if self.record_patterns {
            for &a in &argmax {
                self.mix(a as u64 + 1);
            }
        }
        let rg = self.requires_grad[x.0];
        Ok(self.push(out, Op::GlobalMaxPool { x, argmax }, rg))
    }

    /// [N,C,T] -> [N,C], mean over time.
    pub fn mean_pool_time(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 3 || xs[2] == 0 {
            return Err(Error::Shape(format!(
                "mean_pool_time wants non-empty [N,C,T], got {xs:?}"
            )));
        }
        let (n, c, t) = (xs[0], xs[1], xs[2]);
        let mut out = Tensor::zeros(&[n, c]);
        {
            let data = self.values[x.0].data();
            let o = out.data_mut();
            let inv = T::one() / T::from_f64(t as f64);
            for (nc, slot) in o.iter_mut().enumerate() {
                let row = &data[nc * t..(nc + 1) * t];
                *slot = row.iter().copied().sum::<T>() * inv;
            }
        }
        let rg = self.requires_grad[x.0];
        Ok(self.push(out, Op::MeanPoolTime(x), rg))
    }

    /// Inverted dropout: train mode zeroes with probability p and scales
    /// survivors by 1/(1-p); eval mode is the identity.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0,1), got {p}"
            )));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<bool> = (0..self.values[x.0].numel())
            .map(|_| rng.gen::<f64>() >= p)
            .collect();
        let mut out = self.values[x.0].clone();
        for (v, &keep) in out.data_mut().iter_mut().zip(&mask) {
            *v = if keep { *v * scale } else { T::zero() };
        }
        let rg = self.requires_grad[x.0];
        Ok(self.push(out, Op::Dropout { x, mask, scale }, rg))
    }

    /// Row-wise softmax of [N,K], stabilized by max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape(format!("softmax input {xs:?} is not 2-D")));
        }
        let k = xs[1];
        let mut out = self.values[x.0].clone();
        for row in out.data_mut().chunks_exact_mut(k) {
            softmax_row(row);
        }
        let rg = self.requires_grad[x.0];
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Mean over the batch of -log softmax(logits)[label]. Scalar output.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let xs = self.values[logits.0].shape().to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy of logits {xs:?} with {} labels",
                labels.len()
            )));
        }
        let (n, k) = (xs[0], xs[1]);
        if n == 0 {
            return Err(Error::EmptyInput("cross_entropy over empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = self.values[logits.0].clone();
        let mut loss = 0.0f64;
        for (row, &label) in probs.data_mut().chunks_exact_mut(k).zip(labels) {
            let log_p = softmax_row(row);
            loss -= log_p[label];
        }
        let loss = T::from_f64(loss / n as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.iter().map(|&l| l as u32).collect(),
            probs,
        };
        let rg = self.requires_grad[logits.0];
        Ok(self.push(Tensor::from_vec(&[1], vec![loss]).expect("scalar"), op, rg))
    }

    /// Concatenate [N,F_i] parts along the feature axis.
    pub fn concat_features(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat of no tensors".into()));
        }
        let n = self.values[parts[0].0].shape()[0];
        let mut f_total = 0usize;
        for &p in parts {
            let s = self.values[p.0].shape();
            if s.len() != 2 || s[0] != n {
                return Err(Error::Shape(format!(
                    "concat_features wants [N,F] parts with equal N, got {s:?}"
                )));
            }
            f_total += s[1];
        }
        let mut out = Tensor::zeros(&[n, f_total]);
        let mut offset = 0usize;
        for &p in parts {
            let f = self.values[p.0].shape()[1];
            let src = self.values[p.0].data();
            for row in 0..n {
                out.data_mut()[row * f_total + offset..row * f_total + offset + f]
                    .copy_from_slice(&src[row * f..(row + 1) * f]);
            }
            offset += f;
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(out, Op::ConcatFeatures(parts.to_vec()), rg))
    }

    /// Stack B vectors [N,C] into a [N,C,B,1] map for a 2-D conv.
    pub fn stack_to_map(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("stack of no tensors".into()));
        }
        let shape = self.values[parts[0].0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "stack_to_map wants [N,C] parts, got {shape:?}"
            )));
        }
        for &p in parts {
            if self.values[p.0].shape() != shape {
                return Err(Error::Shape("stack_to_map parts disagree on shape".into()));
            }
        }
        let (n, c, bcount) = (shape[0], shape[1], parts.len());
        let mut out = Tensor::zeros(&[n, c, bcount, 1]);
        for (bi, &p) in parts.iter().enumerate() {
            let src = self.values[p.0].data();
            let o = out.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    o[(s * c + ch) * bcount + bi] = src[s * c + ch];
                }
            }
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(out, Op::StackToMap(parts.to_vec()), rg))
    }

    /// Propagate d(loss)/d(node) to every leaf with requires_grad. Consumes
    /// the tape's ability to run again; build a fresh tape per step.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        self.consumed = true;
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads = (0..self.values.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(&[1], T::one()));

        let Tape {
            values,
            ops,
            requires_grad,
            grads,
            ..
        } = self;

        for id in (0..values.len()).rev() {
            if !requires_grad[id] {
                continue;
            }
            if matches!(ops[id], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &ops[id] {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    for &p in [a, b].into_iter() {
                        if requires_grad[p.0] {
                            ensure_grad(grads, values, p.0).add_assign(&g);
                        }
                    }
                }
                Op::MulElem(a, b) => {
                    let (a, b) = (*a, *b);
                    if requires_grad[a.0] {
                        let vb = values[b.0].data().to_vec();
                        let buf = ensure_grad(grads, values, a.0);
                        for ((d, &gv), &bv) in buf.data_mut().iter_mut().zip(g.data()).zip(&vb) {
                            *d = *d + gv * bv;
                        }
                    }
                    if requires_grad[b.0] {
                        let va = values[a.0].data().to_vec();
                        let buf = ensure_grad(grads, values, b.0);
                        for ((d, &gv), &av) in buf.data_mut().iter_mut().zip(g.data()).zip(&va) {
                            *d = *d + gv * av;
                        }
                    }
                }
                Op::SumAll(x) => {
                    let gv = g.scalar_value();
                    let buf = ensure_grad(grads, values, x.0);
                    for d in buf.data_mut() {
                        *d = *d + gv;
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    let signs: Vec<bool> =
                        values[x.0].data().iter().map(|&v| v > T::zero()).collect();
                    let buf = ensure_grad(grads, values, x.0);
                    for ((d, &gv), keep) in buf.data_mut().iter_mut().zip(g.data()).zip(signs) {
                        if keep {
                            *d = *d + gv;
                        }
                    }
                }
                Op::Dense { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let n = values[x.0].shape()[0];
                    let f_in = values[x.0].shape()[1];
                    let f_out = values[w.0].shape()[0];
                    if requires_grad[w.0] {
                        let xp = values[x.0].data().as_ptr();
                        let buf = ensure_grad(grads, values, w.0);
                        unsafe {
                            // dW += g^T x
                            T::gemm(
                                f_out,
                                n,
                                f_in,
                                T::one(),
                                g.data().as_ptr(),
                                1,
                                f_out as isize,
                                xp,
                                f_in as isize,
                                1,
                                T::one(),
                                buf.data_mut().as_mut_ptr(),
                                f_in as isize,
                                1,
                            );
                        }
                    }
                    if requires_grad[b.0] {
                        let buf = ensure_grad(grads, values, b.0);
                        for row in g.data().chunks_exact(f_out) {
                            for (d, &gv) in buf.data_mut().iter_mut().zip(row) {
                                *d = *d + gv;
                            }
                        }
                    }
                    if requires_grad[x.0] {
                        let wp = values[w.0].data().as_ptr();
                        let buf = ensure_grad(grads, values, x.0);
                        unsafe {
                            // dX += g W
                            T::gemm(
                                n,
                                f_out,
                                f_in,
                                T::one(),
                                g.data().as_ptr(),
                                f_out as isize,
                                1,
                                wp,
                                f_in as isize,
                                1,
                                T::one(),
                                buf.data_mut().as_mut_ptr(),
                                f_in as isize,
                                1,
                            );
                        }
                    }
                }
                Op::Conv1d { x, w, b, stride, pad } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let xs = values[x.0].shape();
                    let ws = values[w.0].shape();
                    let (n, c_in, t_in) = (xs[0], xs[1], xs[2]);
                    let (c_out, k) = (ws[0], ws[2]);
                    let t_out = g.shape()[2];
                    let mut cols = vec![T::zero(); c_in * k * t_out];
                    let mut dcols = vec![T::zero(); c_in * k * t_out];
                    for s in 0..n {
                        let gy = &g.data()[s * c_out * t_out..(s + 1) * c_out * t_out];
                        if requires_grad[w.0] {
                            im2col_1d(
                                &values[x.0].data()[s * c_in * t_in..(s + 1) * c_in * t_in],
                                c_in,
                                t_in,
                                k,
                                stride,
                                pad,
                                t_out,
                                &mut cols,
                            );
                            let buf = ensure_grad(grads, values, w.0);
                            unsafe {
                                // dW += gy cols^T
                                T::gemm(
                                    c_out,
                                    t_out,
                                    c_in * k,
                                    T::one(),
                                    gy.as_ptr(),
                                    t_out as isize,
                                    1,
                                    cols.as_ptr(),
                                    1,
                                    t_out as isize,
                                    T::one(),
                                    buf.data_mut().as_mut_ptr(),
                                    (c_in * k) as isize,
                                    1,
                                );
                            }
                        }
                        if requires_grad[x.0] {
                            let wp = values[w.0].data().as_ptr();
                            unsafe {
                                // dcols = W^T gy
                                T::gemm(
                                    c_in * k,
                                    c_out,
                                    t_out,
                                    T::one(),
                                    wp,
                                    1,
                                    (c_in * k) as isize,
                                    gy.as_ptr(),
                                    t_out as isize,
                                    1,
                                    T::zero(),
                                    dcols.as_mut_ptr(),
                                    t_out as isize,
                                    1,
                                );
                            }
                            let buf = ensure_grad(grads, values, x.0);
                            col2im_1d(
                                &dcols,
                                c_in,
                                t_in,
                                k,
                                stride,
                                pad,
                                t_out,
                                &mut buf.data_mut()[s * c_in * t_in..(s + 1) * c_in * t_in],
                            );
                        }
                    }
                    if requires_grad[b.0] {
                        let buf = ensure_grad(grads, values, b.0);
                        for s in 0..n {
                            for co in 0..c_out {
                                let row = &g.data()[(s * c_out + co) * t_out..(s * c_out + co + 1) * t_out];
                                let sum: T = row.iter().copied().sum();
                                buf.data_mut()[co] = buf.data_mut()[co] + sum;
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let xs = values[x.0].shape();
                    let ws = values[w.0].shape();
                    let (n, c_in, h_in, w_in) = (xs[0], xs[1], xs[2], xs[3]);
                    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                    let (h_out, w_out) = (g.shape()[2], g.shape()[3]);
                    let hw = h_out * w_out;
                    let krows = c_in * kh * kw;
                    let plane_in = c_in * h_in * w_in;
                    let mut cols = vec![T::zero(); krows * hw];
                    let mut dcols = vec![T::zero(); krows * hw];
                    for s in 0..n {
                        let gy = &g.data()[s * c_out * hw..(s + 1) * c_out * hw];
                        if requires_grad[w.0] {
                            im2col_2d(
                                &values[x.0].data()[s * plane_in..(s + 1) * plane_in],
                                c_in,
                                (h_in, w_in),
                                (kh, kw),
                                stride,
                                pad,
                                (h_out, w_out),
                                &mut cols,
                            );
                            let buf = ensure_grad(grads, values, w.0);
                            unsafe {
                                T::gemm(
                                    c_out,
                                    hw,
                                    krows,
                                    T::one(),
                                    gy.as_ptr(),
                                    hw as isize,
                                    1,
                                    cols.as_ptr(),
                                    1,
                                    hw as isize,
                                    T::one(),
                                    buf.data_mut().as_mut_ptr(),
                                    krows as isize,
                                    1,
                                );
                            }
                        }
                        if requires_grad[x.0] {
                            let wp = values[w.0].data().as_ptr();
                            unsafe {
                                T::gemm(
                                    krows,
                                    c_out,
                                    hw,
                                    T::one(),
                                    wp,
                                    1,
                                    krows as isize,
                                    gy.as_ptr(),
                                    hw as isize,
                                    1,
                                    T::zero(),
                                    dcols.as_mut_ptr(),
                                    hw as isize,
                                    1,
                                );
                            }
                            let buf = ensure_grad(grads, values, x.0);
                            col2im_2d(
                                &dcols,
                                c_in,
                                (h_in, w_in),
                                (kh, kw),
                                stride,
                                pad,
                                (h_out, w_out),
                                &mut buf.data_mut()[s * plane_in..(s + 1) * plane_in],
                            );
                        }
                    }
                    if requires_grad[b.0] {
                        let buf = ensure_grad(grads, values, b.0);
                        for s in 0..n {
                            for co in 0..c_out {
                                let row = &g.data()[(s * c_out + co) * hw..(s * c_out + co + 1) * hw];
                                let sum: T = row.iter().copied().sum();
                                buf.data_mut()[co] = buf.data_mut()[co] + sum;
                            }
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    train_stats,
                } => {
                    let (x, gamma, beta, train_stats) = (*x, *gamma, *beta, *train_stats);
                    let mean = mean.clone();
                    let inv_std = inv_std.clone();
                    let xs = values[x.0].shape().to_vec();
                    let (n, c) = (xs[0], xs[1]);
                    let spatial: usize = xs[2..].iter().product();
                    let m = n * spatial;
                    let gamma_v = values[gamma.0].data().to_vec();
                    // Per-channel reductions of g and g*x_hat.
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    {
                        let xd = values[x.0].data();
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * spatial;
                                for i in base..base + spatial {
                                    let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                                    sum_g[ch] = sum_g[ch] + g.data()[i];
                                    sum_gx[ch] = sum_gx[ch] + g.data()[i] * xhat;
                                }
                            }
                        }
                    }
                    if requires_grad[beta.0] {
                        let buf = ensure_grad(grads, values, beta.0);
                        for (d, &v) in buf.data_mut().iter_mut().zip(&sum_g) {
                            *d = *d + v;
                        }
                    }
                    if requires_grad[gamma.0] {
                        let buf = ensure_grad(grads, values, gamma.0);
                        for (d, &v) in buf.data_mut().iter_mut().zip(&sum_gx) {
                            *d = *d + v;
                        }
                    }
                    if requires_grad[x.0] {
                        let xd = values[x.0].data().to_vec();
                        let buf = ensure_grad(grads, values, x.0);
                        let inv_m = T::one() / T::from_f64(m as f64);
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * spatial;
                                let k = gamma_v[ch] * inv_std[ch];
                                for i in base..base + spatial {
                                    let d = if train_stats {
                                        let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                                        k * (g.data()[i]
                                            - inv_m * (sum_g[ch] + xhat * sum_gx[ch]))
                                    } else {
                                        k * g.data()[i]
                                    };
                                    buf.data_mut()[i] = buf.data_mut()[i] + d;
                                }
                            }
                        }
                    }
                }
                Op::MaxPool2d { x, argmax, .. } => {
                    let x = *x;
                    let argmax = argmax.clone();
                    let xs = values[x.0].shape().to_vec();
                    let (h_in, w_in) = (xs[2], xs[3]);
                    let per_plane_out = g.shape()[2] * g.shape()[3];
                    let buf = ensure_grad(grads, values, x.0);
                    for (oi, (&gv, &am)) in g.data().iter().zip(&argmax).enumerate() {
                        let plane = oi / per_plane_out;
                        let idx = plane * h_in * w_in + am as usize;
                        buf.data_mut()[idx] = buf.data_mut()[idx] + gv;
                    }
                }
                Op::GlobalMaxPool { x, argmax } => {
                    let x = *x;
                    let argmax = argmax.clone();
                    let xs = values[x.0].shape().to_vec();
                    let plane = xs[2] * xs[3];
                    let buf = ensure_grad(grads, values, x.0);
                    for (nc, (&gv, &am)) in g.data().iter().zip(&argmax).enumerate() {
                        let idx = nc * plane + am as usize;
                        buf.data_mut()[idx] = buf.data_mut()[idx] + gv;
                    }
                }
                Op::MeanPoolTime(x) => {
                    let x = *x;
                    let t = values[x.0].shape()[2];
                    let inv = T::one() / T::from_f64(t as f64);
                    let buf = ensure_grad(grads, values, x.0);
                    for (nc, &gv) in g.data().iter().enumerate() {
                        let row = &mut buf.data_mut()[nc * t..(nc + 1) * t];
                        for d in row {
                            *d = *d + gv * inv;
                        }
                    }
                }
                Op::Dropout { x, mask, scale } => {
                    let (x, scale) = (*x, *scale);
                    let mask = mask.clone();
                    let buf = ensure_grad(grads, values, x.0);
                    for ((d, &gv), keep) in buf.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        if keep {
                            *d = *d + gv * scale;
                        }
                    }
                }
                Op::Softmax(x) => {
                    let x = *x;
                    let k = values[id].shape()[1];
                    let y = values[id].data().to_vec();
                    let buf = ensure_grad(grads, values, x.0);
                    for (row, (yrow, grow)) in y
                        .chunks_exact(k)
                        .zip(g.data().chunks_exact(k))
                        .enumerate()
                    {
                        let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        let out_row = &mut buf.data_mut()[row * k..(row + 1) * k];
                        for ((d, &yv), &gv) in out_row.iter_mut().zip(yrow).zip(grow) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let probs = probs.clone();
                    let n = labels.len();
                    let k = probs.shape()[1];
                    let gscale = g.scalar_value() / T::from_f64(n as f64);
                    let buf = ensure_grad(grads, values, logits.0);
                    for (row, &label) in labels.iter().enumerate() {
                        for col in 0..k {
                            let p = probs.data()[row * k + col];
                            let onehot = if col == label as usize { T::one() } else { T::zero() };
                            let idx = row * k + col;
                            buf.data_mut()[idx] = buf.data_mut()[idx] + gscale * (p - onehot);
                        }
                    }
                }
                Op::ConcatFeatures(parts) => {
                    let parts = parts.clone();
                    let n = g.shape()[0];
                    let f_total = g.shape()[1];
                    let mut offset = 0usize;
                    for p in parts {
                        let f = values[p.0].shape()[1];
                        if requires_grad[p.0] {
                            let buf = ensure_grad(grads, values, p.0);
                            for row in 0..n {
                                let src = &g.data()[row * f_total + offset..row * f_total + offset + f];
                                let dst = &mut buf.data_mut()[row * f..(row + 1) * f];
                                for (d, &gv) in dst.iter_mut().zip(src) {
                                    *d = *d + gv;
                                }
                            }
                        }
                        offset += f;
                    }
                }
                Op::StackToMap(parts) => {
                    let parts = parts.clone();
                    let n = g.shape()[0];
                    let c = g.shape()[1];
                    let bcount = g.shape()[2];
                    for (bi, p) in parts.into_iter().enumerate() {
                        if !requires_grad[p.0] {
                            continue;
                        }
                        let buf = ensure_grad(grads, values, p.0);
                        for s in 0..n {
                            for ch in 0..c {
                                let idx = s * c + ch;
                                buf.data_mut()[idx] =
                                    buf.data_mut()[idx] + g.data()[(idx) * bcount + bi];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn ensure_grad<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    values: &[Tensor<T>],
    id: usize,
) -> &'a mut Tensor<T> {
    grads[id].get_or_insert_with(|| Tensor::zeros(values[id].shape()))
}

/// In-place softmax of one row; returns the log-probabilities so
/// cross-entropy can reuse the stabilized computation.
fn softmax_row<T: Scalar>(row: &mut [T]) -> Vec<f64> {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |acc, v| acc.max(v.as_f64()));
    let mut denom = 0.0f64;
    let shifted: Vec<f64> = row
        .iter()
        .map(|v| {
            let e = v.as_f64() - max;
            denom += e.exp();
            e
        })
        .collect();
    let log_denom = denom.ln();
    let mut log_p = Vec::with_capacity(row.len());
    for (slot, z) in row.iter_mut().zip(&shifted) {
        log_p.push(z - log_denom);
        *slot = T::from_f64((z - log_denom).exp());
    }
    log_p
}
