use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, Window};
use super::{check_finite, dim_err, Result, Scalar, Tensor, TensorError};
use crate::params::ParamStore;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention-style mask for [`Tape::softmax`]; `true` keeps an entry.
#[derive(Clone, Debug)]
pub enum Mask {
    /// Same key mask for every row.
    Keys(Vec<bool>),
    /// Row `i` may see columns `0..=i`.
    Causal,
    /// Explicit `rows×cols` mask.
    Full(Vec<bool>),
}

impl Mask {
    fn expand(&self, rows: usize, cols: usize) -> Result<Vec<bool>> {
        match self {
            Mask::Keys(keys) => {
                if keys.len() != cols {
                    return dim_err("softmax", format!("key mask len {} != {cols}", keys.len()));
                }
                Ok((0..rows).flat_map(|_| keys.iter().copied()).collect())
            }
            Mask::Causal => Ok((0..rows)
                .flat_map(|r| (0..cols).map(move |c| c <= r))
                .collect()),
            Mask::Full(m) => {
                if m.len() != rows * cols {
                    return dim_err("softmax", format!("mask len {} != {}", m.len(), rows * cols));
                }
                Ok(m.clone())
            }
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, k: Var, g: Window, cout: usize },
    ConvTranspose2d { x: Var, k: Var, g: Window, cin: usize },
    Depthwise { x: Var, k: Var, g: Window },
    ChannelBias { x: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddRow { x: Var, b: Var },
    MulRow { x: Var, g: Var },
    Scale { x: Var, c: T },
    ScaleBy { x: Var, w: Var, idx: usize },
    Relu { x: Var },
    Reshape { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Softmax { x: Var },
    LayerNorm { x: Var, inv_std: Vec<T> },
    Embedding { table: Var, ids: Vec<usize>, pad: Option<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, active: Vec<bool>, count: usize },
    DotConst { x: Var, w: Vec<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of applied primitives for reverse-mode accumulation.
///
/// Every primitive returns a fresh buffer. Parameters are shared with the
/// [`ParamStore`] through `Arc` and registered once per tape, so repeated
/// uses of the same parameter accumulate into one gradient.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    track_params: bool,
    visited: Vec<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            track_params: true,
            visited: Vec::new(),
        }
    }

    /// A tape on which parameters are recorded as constants, e.g. for
    /// inference or input saliency.
    pub fn without_param_grads() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers (once per tape) the named parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let (value, trainable) = store.get_shared(name).ok_or_else(|| TensorError::Input {
            op: "param",
            detail: format!("unknown parameter {name}"),
        })?;
        let rg = self.track_params && trainable;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return dim_err(op, format!("expected rank {rank}, got shape {s:?}"));
        }
        Ok(s)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.expect_rank("conv2d", x, 3)?.to_vec();
        let ks = self.expect_rank("conv2d", k, 4)?.to_vec();
        if ks[1] != xs[0] {
            return dim_err("conv2d", format!("input has {} channels, kernel expects {}", xs[0], ks[1]));
        }
        if stride == 0 {
            return dim_err("conv2d", "stride must be >= 1");
        }
        if ks[2] > xs[1] + 2 * pad || ks[3] > xs[2] + 2 * pad {
            return dim_err("conv2d", format!("kernel {ks:?} larger than padded input {xs:?}"));
        }
        let g = Window {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), ks[0], &g);
        let t = Tensor::new(&[ks[0], g.out_h(), g.out_w()], out)?;
        self.push_op("conv2d", t, Op::Conv2d { x, k, g, cout: ks[0] }, &[x, k])
    }

    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let xs = self.expect_rank("conv_transpose2d", x, 3)?.to_vec();
        let ks = self.expect_rank("conv_transpose2d", k, 4)?.to_vec();
        if ks[0] != xs[0] {
            return dim_err(
                "conv_transpose2d",
                format!("input has {} channels, kernel expects {}", xs[0], ks[0]),
            );
        }
        if stride == 0 {
            return dim_err("conv_transpose2d", "stride must be >= 1");
        }
        let g = kernels::transpose_window(ks[1], xs[1], xs[2], ks[2], ks[3], stride);
        let out = kernels::conv_transpose2d_forward(self.value(x).data(), self.value(k).data(), xs[0], &g);
        let t = Tensor::new(&[ks[1], g.height, g.width], out)?;
        self.push_op(
            "conv_transpose2d",
            t,
            Op::ConvTranspose2d { x, k, g, cin: xs[0] },
            &[x, k],
        )
    }

    /// Depthwise convolution, stride 1. Kernel is `c×1×kh×kw`.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, pad: usize) -> Result<Var> {
        let xs = self.expect_rank("depthwise_conv2d", x, 3)?.to_vec();
        let ks = self.expect_rank("depthwise_conv2d", k, 4)?.to_vec();
        if ks[0] != xs[0] || ks[1] != 1 {
            return dim_err("depthwise_conv2d", format!("kernel {ks:?} incompatible with input {xs:?}"));
        }
        if ks[2] > xs[1] + 2 * pad || ks[3] > xs[2] + 2 * pad {
            return dim_err("depthwise_conv2d", format!("kernel {ks:?} larger than padded input {xs:?}"));
        }
        let g = Window {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kh: ks[2],
            kw: ks[3],
            stride: 1,
            pad,
        };
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(k).data(), &g);
        let t = Tensor::new(&[xs[0], g.out_h(), g.out_w()], out)?;
        self.push_op("depthwise_conv2d", t, Op::Depthwise { x, k, g }, &[x, k])
    }

    /// Adds `b[c]` to every element of channel `c` of a `c×…` tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b);
        if bs.len() != 1 || bs[0] != xs[0] {
            return dim_err("channel_bias", format!("bias {bs:?} vs input {xs:?}"));
        }
        let inner = self.value(x).len() / xs[0];
        let bd = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (c, chunk) in out.chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bd[c]);
        }
        let t = Tensor::new(&xs, out)?;
        self.push_op("channel_bias", t, Op::ChannelBias { x, b }, &[x, b])
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xs = self.expect_rank("maxpool2d", x, 3)?.to_vec();
        if window == 0 || xs[1] % window != 0 || xs[2] % window != 0 {
            return dim_err("maxpool2d", format!("extents {xs:?} not divisible by window {window}"));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), xs[0], xs[1], xs[2], window);
        let t = Tensor::new(&[xs[0], xs[1] / window, xs[2] / window], out)?;
        self.push_op("maxpool2d", t, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a)·op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let as_ = self.expect_rank("matmul", a, 2)?.to_vec();
        let bs = self.expect_rank("matmul", b, 2)?.to_vec();
        let (m, ka) = if ta { (as_[1], as_[0]) } else { (as_[0], as_[1]) };
        let (kb, n) = if tb { (bs[1], bs[0]) } else { (bs[0], bs[1]) };
        if ka != kb {
            return dim_err("matmul", format!("inner extents differ: {as_:?} x {bs:?}"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, ka, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let t = Tensor::new(&[m, n], out)?;
        self.push_op("matmul", t, Op::MatMul { a, b, ta, tb, m, k: ka, n }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        self.push_op("add", t, Op::Add { a, b }, &[a, b])
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.row_broadcast("add_row", x, b, |v, r| v + r)?;
        let t = Tensor::new(&shape, out)?;
        self.push_op("add_row", t, Op::AddRow { x, b }, &[x, b])
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (out, shape) = self.row_broadcast("mul_row", x, g, |v, r| v * r)?;
        let t = Tensor::new(&shape, out)?;
        self.push_op("mul_row", t, Op::MulRow { x, g }, &[x, g])
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        x: Var,
        r: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<T>, Vec<usize>)> {
        let xs = self.expect_rank(op, x, 2)?.to_vec();
        let rs = self.shape(r);
        if rs.len() != 1 || rs[0] != xs[1] {
            return dim_err(op, format!("row vector {rs:?} vs matrix {xs:?}"));
        }
        let rd = self.value(r).data();
        let out = self
            .value(x)
            .data()
            .chunks(xs[1])
            .flat_map(|row| row.iter().zip(rd).map(|(&v, &b)| f(v, b)))
            .collect();
        Ok((out, xs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x), out)?;
        self.push_op("scale", t, Op::Scale { x, c }, &[x])
    }

    /// Multiplies `x` by the scalar `w[idx]`, differentiable in both.
    pub fn scale_by(&mut self, x: Var, w: Var, idx: usize) -> Result<Var> {
        let wl = self.value(w).len();
        if idx >= wl {
            return Err(TensorError::Index {
                op: "scale_by",
                index: idx,
                limit: wl,
            });
        }
        let c = self.value(w).data()[idx];
        let out = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x), out)?;
        self.push_op("scale_by", t, Op::ScaleBy { x, w, idx }, &[x, w])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::new(self.shape(x), out)?;
        self.push_op("relu", t, Op::Relu { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)));
        }
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        self.push_op("reshape", t, Op::Reshape { x }, &[x])
    }

    /// Concatenates along `axis`, preserving operand order.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Input {
                op: "concat",
                detail: "no operands".into(),
            });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let off_axis_match = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !off_axis_match {
                return dim_err("concat", format!("{s:?} vs {base:?} off axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        self.push_op("concat", t, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return dim_err("narrow", format!("{start}+{len} on axis {axis} of {xs:?}"));
        }
        let (outer, inner) = outer_inner(&xs, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        self.push_op("narrow", t, Op::Narrow { x, axis, start }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().unwrap();
        let rows = self.value(x).len() / n;
        let keep = mask.map(|m| m.expand(rows, n)).transpose()?;
        let out = kernels::softmax_rows(self.value(x).data(), n, keep.as_deref());
        let t = Tensor::new(&xs, out)?;
        self.push_op("softmax", t, Op::Softmax { x }, &[x])
    }

    /// Normalises each row of the last axis to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().unwrap();
        let (out, inv_std) = kernels::layer_norm_rows(self.value(x).data(), n, eps);
        let t = Tensor::new(&xs, out)?;
        self.push_op("layer_norm", t, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Row gather from a `vocab×dim` table. Rows whose id equals `pad`
    /// receive no gradient.
    pub fn embedding(&mut self, table: Var, ids: &[usize], pad: Option<usize>) -> Result<Var> {
        let ts = self.expect_rank("embedding", table, 2)?.to_vec();
        if ids.is_empty() {
            return Err(TensorError::Input {
                op: "embedding",
                detail: "empty id sequence".into(),
            });
        }
        let dim = ts[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= ts[0] {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    limit: ts[0],
                });
            }
            out.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let t = Tensor::new(&[ids.len(), dim], out)?;
        self.push_op(
            "embedding",
            t,
            Op::Embedding { table, ids: ids.to_vec(), pad },
            &[table],
        )
    }

    /// Mean negative log-likelihood over positions whose target is not
    /// `pad`. Returns a one-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: Option<usize>) -> Result<Var> {
        let ls = self.expect_rank("cross_entropy", logits, 2)?.to_vec();
        if targets.len() != ls[0] {
            return dim_err("cross_entropy", format!("{} targets for {} steps", targets.len(), ls[0]));
        }
        let active: Vec<bool> = targets.iter().map(|&t| Some(t) != pad).collect();
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(TensorError::Input {
                op: "cross_entropy",
                detail: "no non-pad targets".into(),
            });
        }
        let v = ls[1];
        let clamp = T::lit(-(1e-12f64).ln());
        let data = self.value(logits).data();
        let mut total = T::zero();
        for (step, (&t, &on)) in targets.iter().zip(&active).enumerate() {
            if !on {
                continue;
            }
            if t >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    limit: v,
                });
            }
            total += row_nll(&data[step * v..(step + 1) * v], t).min(clamp);
        }
        let loss = total / T::from_usize(count).unwrap();
        let t = Tensor::scalar(loss);
        self.push_op(
            "cross_entropy",
            t,
            Op::CrossEntropy { logits, targets: targets.to_vec(), active, count },
            &[logits],
        )
    }

    /// `Σ x_i w_i` for a constant weight vector; reduces any tensor to a scalar.
    pub fn dot_const(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return dim_err("dot_const", format!("{} weights for {} values", w.len(), self.value(x).len()));
        }
        let s = self.value(x).data().iter().zip(&w).fold(T::zero(), |a, (&x, &w)| a + x * w);
        self.push_op("dot_const", Tensor::scalar(s), Op::DotConst { x, w }, &[x])
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Node indices visited by the last [`backward`](Self::backward) call,
    /// in visiting order.
    pub fn backward_order(&self) -> &[usize] {
        &self.visited
    }

    /// Gradients of every trainable parameter registered on this tape, in
    /// registration order. Parameters that received no gradient get zeros.
    pub fn param_grads(&self) -> Vec<(String, Vec<T>)> {
        self.param_order
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(name, v)| {
                let g = self
                    .grad(*v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); self.value(*v).len()]);
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse-mode accumulation from `root`, seeded with ones.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.grads = vec![None; self.nodes.len()];
        self.visited.clear();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one(); self.value(root).len()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.visited.push(i);
            }
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        for g in self.grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        // Split borrow: read the node, then accumulate into its inputs.
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, g: win, cout } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    *cout,
                    win,
                    self.rg(*x),
                    self.rg(*k),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dk.map(|d| (*k, d)));
            }
            Op::ConvTranspose2d { x, k, g: win, cin } => {
                let (dx, dk) = kernels::conv_transpose2d_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    *cin,
                    win,
                    self.rg(*x),
                    self.rg(*k),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dk.map(|d| (*k, d)));
            }
            Op::Depthwise { x, k, g: win } => {
                let (dx, dk) = kernels::depthwise_backward(self.value(*x).data(), self.value(*k).data(), g, win);
                out.push((*x, dx));
                out.push((*k, dk));
            }
            Op::ChannelBias { x, b } => {
                let c = self.value(*b).len();
                let inner = g.len() / c;
                let db = g.chunks(inner).map(|ch| ch.iter().copied().sum()).collect();
                out.push((*x, g.to_vec()));
                out.push((*b, db));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                out.push((*x, dx));
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let bd = self.value(*b).data();
                    let mut da = vec![T::zero(); m * k];
                    if *ta {
                        // dA (k×m stored) = op(B)·Gᵀ
                        T::gemm(k, n, m, bd, *tb, g, true, &mut da, false);
                    } else {
                        // dA (m×k) = G·op(B)ᵀ
                        T::gemm(m, n, k, g, false, bd, !*tb, &mut da, false);
                    }
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data();
                    let mut db = vec![T::zero(); k * n];
                    if *tb {
                        // dB (n×k stored) = Gᵀ·op(A)
                        T::gemm(n, m, k, g, true, ad, *ta, &mut db, false);
                    } else {
                        // dB (k×n) = op(A)ᵀ·G
                        T::gemm(k, m, n, ad, !*ta, g, false, &mut db, false);
                    }
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::AddRow { x, b } => {
                let n = self.value(*b).len();
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                out.push((*x, g.to_vec()));
                out.push((*b, db));
            }
            Op::MulRow { x, g: gain } => {
                let n = self.value(*gain).len();
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let mut dgain = vec![T::zero(); n];
                let mut dx = vec![T::zero(); g.len()];
                for (r, row) in g.chunks(n).enumerate() {
                    for j in 0..n {
                        dgain[j] += row[j] * xd[r * n + j];
                        dx[r * n + j] = row[j] * gd[j];
                    }
                }
                out.push((*x, dx));
                out.push((*gain, dgain));
            }
            Op::Scale { x, c } => out.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::ScaleBy { x, w, idx } => {
                let c = self.value(*w).data()[*idx];
                let xd = self.value(*x).data();
                let mut dw = vec![T::zero(); self.value(*w).len()];
                dw[*idx] = g.iter().zip(xd).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv);
                out.push((*x, g.iter().map(|&v| v * c).collect()));
                out.push((*w, dw));
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out.push((p, dp));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, inner) = outer_inner(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, dx));
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let s = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - s);
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let nf = T::from_usize(n).unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for (r, ((yr, gr), dr)) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                    let mg = gr.iter().copied().sum::<T>() / nf;
                    let mgy = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv) / nf;
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                out.push((*x, dx));
            }
            Op::Embedding { table, ids, pad } => {
                let dim = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).len()];
                for (row, &id) in ids.iter().enumerate() {
                    if Some(id) == *pad {
                        continue;
                    }
                    dt[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(&g[row * dim..(row + 1) * dim])
                        .for_each(|(d, &v)| *d += v);
                }
                out.push((*table, dt));
            }
            Op::CrossEntropy { logits, targets, active, count } => {
                let ls = self.shape(*logits);
                let v = ls[1];
                let data = self.value(*logits).data();
                let clamp = T::lit(-(1e-12f64).ln());
                let scale = g[0] / T::from_usize(*count).unwrap();
                let mut dl = vec![T::zero(); data.len()];
                for (step, (&t, &on)) in targets.iter().zip(active).enumerate() {
                    let row = &data[step * v..(step + 1) * v];
                    if !on || row_nll(row, t) >= clamp {
                        continue;
                    }
                    let p = kernels::softmax_rows(row, v, None);
                    let dst = &mut dl[step * v..(step + 1) * v];
                    for (j, (d, &pj)) in dst.iter_mut().zip(&p).enumerate() {
                        let y = if j == t { T::one() } else { T::zero() };
                        *d = scale * (pj - y);
                    }
                }
                out.push((*logits, dl));
            }
            Op::DotConst { x, w } => out.push((*x, w.iter().map(|&wv| wv * g[0]).collect())),
        }
        for (v, d) in out {
            self.accumulate(v, d);
        }
    }
}

/// `logsumexp(row) − row[t]`.
fn row_nll<T: Scalar>(row: &[T], t: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    lse - row[t]
}
