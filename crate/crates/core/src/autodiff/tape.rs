//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is a topological
//! order by construction and `backward` is one reverse sweep. Parameters are
//! borrowed from a [`ParamStore`] rather than copied onto the tape.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm running-statistics momentum (weight kept on the old value).
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch statistics measured by a train-mode batch norm; the caller folds
/// them into the running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased per-channel variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
        inner: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2x {
        input: Var,
    },
    Relu(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        channels: usize,
        inner: usize,
        train: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
    Sum(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

enum Source<T> {
    Leaf,
    Param(ParamId),
    Op(Op<T>),
}

struct Node<T> {
    source: Source<T>,
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient reaching `v`, if it requires grad and the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

fn relu_fn<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.source) {
            (Some(t), _) => t,
            (None, Source::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node {
            source: Source::Op(op),
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an external tensor. Leaves with `requires_grad` receive
    /// gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            source: Source::Leaf,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// The tape variable bound to a stored parameter (recorded once per tape).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            source: Source::Param(id),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("left {sa:?} vs right {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(Op::Scale(a, factor), out, &[a])
    }

    /// Adds a per-feature bias: `[N,D] + [D]` or per-channel `[N,C,H,W] + [C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bshape = self.shape(bias).to_vec();
        if shape.len() < 2 || bshape.len() != 1 || bshape[0] != shape[1] {
            return Err(Error::shape(
                "add_bias",
                format!("input {shape:?} vs bias {bshape:?}"),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let channels = shape[1];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + b[(i / inner) % channels];
        }
        Ok(self.push(Op::AddBias { x, bias, inner }, out, &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("left {sa:?} vs right {sb:?}: inner extents must agree"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(Op::MatMul { a, b, m, k, n }, out, &[a, b]))
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(Error::shape(
                "conv2d",
                format!("input {si:?} must be [N,C,H,W] and kernel {sk:?} must be [F,C,3,3]"),
            ));
        }
        if si[1] != sk[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but kernel expects {}", si[1], sk[1]),
            ));
        }
        let geom = ConvGeom {
            batch: si[0],
            in_channels: si[1],
            filters: sk[0],
            height: si[2],
            width: si[3],
        };
        let data = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), geom);
        let out = Tensor::new(&[si[0], sk[0], si[2], si[3]], data)?;
        Ok(self.push(Op::Conv2d { input, kernel, geom }, out, &[input, kernel]))
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("maxpool2d", format!("expected [N,C,H,W], got {s:?}")));
        }
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape(
                "maxpool2d",
                format!("spatial extent {}x{} must be even", s[2], s[3]),
            ));
        }
        let (data, argmax) = kernels::maxpool2x2(self.value(input).data(), s[0] * s[1], s[2], s[3]);
        let out = Tensor::new(&[s[0], s[1], s[2] / 2, s[3] / 2], data)?;
        Ok(self.push(Op::MaxPool2d { input, argmax }, out, &[input]))
    }

    /// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("expected [N,C,H,W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(src.len() * 4);
        for p in 0..s[0] * s[1] {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data.push(plane[(y / 2) * w + x / 2]);
                }
            }
        }
        let out = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], data)?;
        Ok(self.push(Op::Upsample2x { input }, out, &[input]))
    }

    /// Fingerprint of every piecewise choice recorded so far: ReLU on/off
    /// masks and max-pool winners. Two evaluations with equal fingerprints
    /// lie on the same linear piece of those ops.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.source {
                Source::Op(Op::Relu(input)) => {
                    for &v in self.value(*input).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Source::Op(Op::MaxPool2d { argmax, .. }) => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(relu_fn);
        self.push(Op::Relu(input), out, &[input])
    }

    /// Batch normalization over dim 1 of `[N,D]` or `[N,C,H,W]`.
    ///
    /// `running` supplies `(mean, var)` for inference mode and is ignored in
    /// training mode, where the batch statistics are returned instead.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: (&[T], &[T]),
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected [N,D] or [N,C,H,W], got {s:?}"),
            ));
        }
        let (n, channels) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [channels] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} has shape {:?}, expected [{channels}]", self.shape(v)),
                ));
            }
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::InvalidArgument(
                "batch_norm in training mode needs a batch of at least 2".into(),
            ));
        }
        let x = self.value(input).data();
        let eps = T::of(BN_EPSILON);
        let count = n * inner;
        let (mean, var_biased, stats) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for (i, &v) in x.iter().enumerate() {
                    let c = (i / inner) % channels;
                    mean[c] = mean[c] + v;
                }
                let cnt = T::of(count as f64);
                for m in &mut mean {
                    *m = *m / cnt;
                }
                for (i, &v) in x.iter().enumerate() {
                    let c = (i / inner) % channels;
                    let d = v - mean[c];
                    var[c] = var[c] + d * d;
                }
                let unbiased = T::of(count as f64 / (count as f64 - 1.0));
                for v in &mut var {
                    *v = *v / cnt;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbiased).collect(),
                };
                (mean, var, Some(stats))
            }
            Mode::Infer => {
                let (rm, rv) = running;
                if rm.len() != channels || rv.len() != channels {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running statistics must have {channels} entries"),
                    ));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for (i, &v) in x.iter().enumerate() {
            let c = (i / inner) % channels;
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            out.push(g[c] * h + b[c]);
        }
        let out = Tensor::new(&s, out)?;
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            channels,
            inner,
            train: mode == Mode::Train,
        };
        Ok((self.push(op, out, &[input, gamma, beta]), stats))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity in
    /// inference mode.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if mode == Mode::Infer || p == 0.0 {
            let n = self.value(input).numel();
            let out = self.value(input).clone();
            return Ok(self.push(
                Op::Dropout {
                    input,
                    mask: vec![T::one(); n],
                },
                out,
                &[input],
            ));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(Op::Dropout { input, mask }, out, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshape(shape)?;
        Ok(self.push(Op::Reshape(input), out, &[input]))
    }

    /// `[N, ...] -> [N, prod(...)]`
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let rest: usize = s[1..].iter().product();
        self.reshape(input, &[s[0], rest.max(1)])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: T = self.value(input).data().iter().copied().sum();
        self.push(Op::Sum(input), Tensor::scalar(total), &[input])
    }

    /// Row softmax of `[N,C]` logits.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[1] < 2 {
            return Err(Error::shape(
                "softmax",
                format!("expected [N,C] with C >= 2, got {s:?}"),
            ));
        }
        if !self.value(logits).all_finite() {
            return Err(Error::Numeric("softmax received non-finite logits".into()));
        }
        let data = kernels::softmax_rows(self.value(logits).data(), s[0], s[1]);
        let out = Tensor::new(&s, data)?;
        Ok(self.push(Op::Softmax(logits), out, &[logits]))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("cross_entropy", format!("expected [N,C], got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for a batch of {n}", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "target index {t} out of range for {c} classes"
            )));
        }
        let z = self.value(logits);
        if !z.all_finite() {
            return Err(Error::Numeric("cross_entropy received non-finite logits".into()));
        }
        let z = z.data();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &z[r * c..(r + 1) * c];
            total = total + (kernels::log_sum_exp(row) - row[t]);
        }
        let loss = total / T::of(n as f64);
        let probs = kernels::softmax_rows(z, n, c);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(op, Tensor::scalar(loss), &[logits]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("prediction {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        let p = self.value(pred).data();
        let n = T::of(p.len() as f64);
        let total: T = p
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let op = Op::Mse {
            pred,
            target: target.data().to_vec(),
        };
        Ok(self.push(op, Tensor::scalar(total / n), &[pred]))
    }

    /// Reverse sweep from a scalar `loss` seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one())?);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Source::Op(op) = &self.nodes[i].source else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let out = self.nodes[i].value.as_ref().expect("op nodes hold values");
            self.backward_op(op, out, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut params: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        let mut nodes: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        for (i, (node, g)) in self.nodes.iter().zip(grads).enumerate() {
            match node.source {
                Source::Param(id) => {
                    params[id.0] = Some(g.unwrap_or_else(|| Tensor::zeros_like(self.value(Var(i)))));
                    nodes.push(None);
                }
                Source::Leaf if node.requires_grad => {
                    nodes.push(Some(g.unwrap_or_else(|| Tensor::zeros_like(self.value(Var(i))))));
                }
                _ => nodes.push(None),
            }
        }
        Ok(Gradients { nodes, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v), data).expect("gradient matches input shape")
    }

    fn backward_op(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    let d = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let d = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.accumulate(grads, *a, g.map(|v| v * f));
            }
            Op::AddBias { x, bias, inner } => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let channels = self.shape(*bias)[0];
                    let mut d = vec![T::zero(); channels];
                    for (i, &v) in gd.iter().enumerate() {
                        let c = (i / inner) % channels;
                        d[c] = d[c] + v;
                    }
                    self.accumulate(grads, *bias, self.like(*bias, d));
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.requires_grad(*a) {
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    let d = kernels::matmul(gd, &bt, m, n, k);
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.requires_grad(*b) {
                    let at = kernels::transpose(self.value(*a).data(), m, k);
                    let d = kernels::matmul(&at, gd, k, m, n);
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                if self.requires_grad(*input) {
                    let d = kernels::conv2d_backward_input(gd, self.value(*kernel).data(), *geom);
                    self.accumulate(grads, *input, self.like(*input, d));
                }
                if self.requires_grad(*kernel) {
                    let d = kernels::conv2d_backward_kernel(gd, self.value(*input).data(), *geom);
                    self.accumulate(grads, *kernel, self.like(*kernel, d));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).numel()];
                for (&idx, &v) in argmax.iter().zip(gd) {
                    d[idx] = d[idx] + v;
                }
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::Upsample2x { input } => {
                let s = self.shape(*input);
                let (h, w) = (s[2], s[3]);
                let mut d = vec![T::zero(); self.value(*input).numel()];
                for p in 0..s[0] * s[1] {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let t = &mut dst[(y / 2) * w + x / 2];
                            *t = *t + src[y * 2 * w + x];
                        }
                    }
                }
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                inner,
                train,
            } => {
                let (channels, inner) = (*channels, *inner);
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for (i, (&gv, &h)) in gd.iter().zip(xhat).enumerate() {
                    let c = (i / inner) % channels;
                    dgamma[c] = dgamma[c] + gv * h;
                    dbeta[c] = dbeta[c] + gv;
                }
                if self.requires_grad(*input) {
                    let gam = self.value(*gamma).data();
                    let d = if *train {
                        let count = T::of((gd.len() / channels) as f64);
                        gd.iter()
                            .zip(xhat)
                            .enumerate()
                            .map(|(i, (&gv, &h))| {
                                let c = (i / inner) % channels;
                                gam[c] * inv_std[c] / count
                                    * (count * gv - dbeta[c] - h * dgamma[c])
                            })
                            .collect()
                    } else {
                        gd.iter()
                            .enumerate()
                            .map(|(i, &gv)| {
                                let c = (i / inner) % channels;
                                gam[c] * inv_std[c] * gv
                            })
                            .collect()
                    };
                    self.accumulate(grads, *input, self.like(*input, d));
                }
                self.accumulate(grads, *gamma, self.like(*gamma, dgamma));
                self.accumulate(grads, *beta, self.like(*beta, dbeta));
            }
            Op::Dropout { input, mask } => {
                let d = gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::Reshape(input) => {
                let d = g.data().to_vec();
                self.accumulate(grads, *input, self.like(*input, d));
            }
            Op::Sum(input) => {
                let gv = gd[0];
                let n = self.value(*input).numel();
                self.accumulate(grads, *input, self.like(*input, vec![gv; n]));
            }
            Op::Softmax(logits) => {
                let s = self.shape(*logits);
                let (n, c) = (s[0], s[1]);
                let y = out.data();
                let mut d = vec![T::zero(); n * c];
                for r in 0..n {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *logits, self.like(*logits, d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let n = targets.len();
                let scale = gd[0] / T::of(n as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] = d[r * c + t] - scale;
                }
                self.accumulate(grads, *logits, self.like(*logits, d));
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let scale = gd[0] * T::of(2.0 / p.len() as f64);
                let d = p.iter().zip(target).map(|(&a, &b)| (a - b) * scale).collect();
                self.accumulate(grads, *pred, self.like(*pred, d));
            }
        }
        Ok(())
    }
}
