use super::kernels::{self, ConvDims};
pub use super::kernels::ConvGeometry;
use super::tensor::{axis_extents, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One hardest-pair selection of the batch-hard triplet loss.
#[derive(Debug, Clone, Copy)]
struct TripletTerm {
    anchor: usize,
    positive: usize,
    negative: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Square(Var),
    Log(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        eps: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        dims: ConvDims,
    },
    MulChannels(Var, Var),
    AddChannels(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BatchHardTriplet {
        x: Var,
        active: Vec<TripletTerm>,
        valid_anchors: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records differentiable operations in execution order.
///
/// Nodes are appended as operations run, so the recorded order is already a
/// topological order and [`Tape::backward`] simply walks it in reverse. Nodes
/// whose inputs need no gradient keep only their value, which makes an
/// inference pass over constants cheap.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `b` must equal `a`, be a single element, or match a trailing suffix of `a`.
fn check_broadcast(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    let nb: usize = b.iter().product();
    if nb == 1 || a == b || (b.len() <= a.len() && a.ends_with(b)) {
        Ok(())
    } else {
        Err(Error::dim(format!(
            "{op}: cannot broadcast {b:?} onto {a:?}"
        )))
    }
}

/// Sums `g` (shaped like the broadcast output) down to `nb` elements.
fn reduce_broadcast<T: Scalar>(g: &[T], nb: usize) -> Vec<T> {
    if g.len() == nb {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); nb];
    for chunk in g.chunks(nb) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn channel_extents(shape: &[usize], nv: usize, op: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 || shape[1] != nv {
        return Err(Error::dim(format!(
            "{op}: vector of length {nv} does not match channel axis of {shape:?}"
        )));
    }
    axis_extents(shape, 1)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::gemm(m, k, n, self.value(a).data(), self.value(b).data());
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose: expected a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(r, c, self.value(x).data());
        let out = Tensor::from_parts(vec![c, r], data);
        Ok(self.push(out, &[x], Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, &[x], Op::Reshape(x)))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        check_broadcast(self.shape(a), self.shape(b), name)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, &[a, b], op))
    }

    /// `a + b`, with `b` broadcast from a scalar or trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, &[x], Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, &[x], Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, &[x], Op::Square(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, &[x], Op::Log(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_extents(xv.shape(), axis)?;
        let src = xv.data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mut max = T::neg_infinity();
                for i in 0..len {
                    max = max.max(src[idx(i)]);
                }
                let mut sum = T::zero();
                for i in 0..len {
                    let e = (src[idx(i)] - max).exp();
                    data[idx(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    data[idx(i)] = data[idx(i)] / sum;
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, &[x], Op::Softmax { x, axis }))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.numel()).unwrap();
        let sum: T = xv.data().iter().copied().sum();
        self.push(Tensor::scalar(sum / n), &[x], Op::Mean(x))
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_extents(xv.shape(), axis)?;
        let src = xv.data();
        let denom = T::from_usize(len).unwrap();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &src[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        for d in &mut data {
            *d = *d / denom;
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, &[x], Op::MeanAxis { x, axis }))
    }

    /// `v / max(‖v‖₂, eps)` for every slice along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_extents(xv.shape(), axis)?;
        let src = xv.data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mut sq = T::zero();
                for i in 0..len {
                    sq += src[idx(i)] * src[idx(i)];
                }
                let denom = sq.sqrt().max(eps);
                for i in 0..len {
                    data[idx(i)] = src[idx(i)] / denom;
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, &[x], Op::L2Normalize { x, axis, eps }))
    }

    /// Standardizes every slice along `axis`, then applies `gamma`/`beta` along it.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::config(format!("layer_norm: eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let (outer, len, inner) = axis_extents(xv.shape(), axis)?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != len || b.len() != len {
            return Err(Error::dim(format!(
                "layer_norm: gamma/beta lengths {}/{} do not match axis extent {len}",
                g.len(),
                b.len()
            )));
        }
        let src = xv.data();
        let n = T::from_usize(len).unwrap();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut data = vec![T::zero(); src.len()];
        let mut mean = vec![T::zero(); inner];
        let mut var = vec![T::zero(); inner];
        for o in 0..outer {
            let base = o * len * inner;
            mean.fill(T::zero());
            var.fill(T::zero());
            for i in 0..len {
                let row = &src[base + i * inner..base + (i + 1) * inner];
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m = *m / n;
            }
            for i in 0..len {
                let row = &src[base + i * inner..base + (i + 1) * inner];
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            let r = &mut rstd[o * inner..(o + 1) * inner];
            for (r, &s) in r.iter_mut().zip(&var) {
                *r = T::one() / (s / n + eps).sqrt();
            }
            for i in 0..len {
                let off = base + i * inner;
                for j in 0..inner {
                    let h = (src[off + j] - mean[j]) * r[j];
                    xhat[off + j] = h;
                    data[off + j] = h * g[i] + b[i];
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
        ))
    }

    /// Cross-correlation of `x[N×C×H×W]` with `w[O×C/groups×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d: expected 4-d input and weight, got {sx:?} and {sw:?}"
            )));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, cg, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let groups = geom.groups;
        if groups == 0 || c % groups != 0 || o % groups != 0 {
            return Err(Error::config(format!(
                "conv2d: {c} input and {o} output channels are not divisible into {groups} groups"
            )));
        }
        if cg != c / groups {
            return Err(Error::dim(format!(
                "conv2d: weight expects {cg} channels per group but input gives {}",
                c / groups
            )));
        }
        let (ho, wo) = match (geom.output_extent(h, kh), geom.output_extent(wd, kw)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::dim(format!(
                    "conv2d: kernel {kh}×{kw} does not fit input {h}×{wd} with {geom:?}"
                )))
            }
        };
        let dims = ConvDims {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            ho,
            wo,
            geom,
        };
        let data = kernels::conv2d_forward(&dims, self.value(x).data(), self.value(w).data());
        let out = Tensor::from_parts(vec![n, o, ho, wo], data);
        Ok(self.push(out, &[x, w], Op::Conv2d { x, w, dims }))
    }

    /// Multiplies channel `c` of `x[N×C×…]` by `v[c]`.
    pub fn mul_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let vv = self.value(v).data();
        let xv = self.value(x);
        let (_, len, inner) = channel_extents(xv.shape(), vv.len(), "mul_channels")?;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a * vv[(i / inner) % len])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, &[x, v], Op::MulChannels(x, v)))
    }

    /// Adds `v[c]` to channel `c` of `x[N×C×…]`.
    pub fn add_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let vv = self.value(v).data();
        let xv = self.value(x);
        let (_, len, inner) = channel_extents(xv.shape(), vv.len(), "add_channels")?;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vv[(i / inner) % len])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, &[x, v], Op::AddChannels(x, v)))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` row-wise.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {s:?} do not match {} labels",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::data(format!(
                "cross_entropy: sample {i} has label {l} outside [0, {k})"
            )));
        }
        let src = lv.data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                sum += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / sum;
            }
            total += sum.ln() + max - row[label];
        }
        let loss = total / T::from_usize(n).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Batch-hard triplet loss on the rows of `x[N×D]` with Euclidean distances.
    ///
    /// For every anchor with at least one positive, the farthest positive and
    /// the nearest negative are selected (first index wins ties) and the
    /// hinge `max(0, d_pos − d_neg + margin)` is averaged over those anchors.
    pub fn batch_hard_triplet(&mut self, x: Var, labels: &[usize], margin: T) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!(
                "batch_hard_triplet: descriptors {s:?} do not match {} labels",
                labels.len()
            )));
        }
        let n = s[0];
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(Error::data(
                "batch_hard_triplet: degenerate batch with fewer than two classes",
            ));
        }
        let dist = pairwise_distances(xv);
        let mut active = Vec::new();
        let mut total = T::zero();
        let mut valid = 0usize;
        for a in 0..n {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = dist[a * n + j];
                if labels[j] == labels[a] {
                    if pos.map_or(true, |p| d > dist[a * n + p]) {
                        pos = Some(j);
                    }
                } else if neg.map_or(true, |q| d < dist[a * n + q]) {
                    neg = Some(j);
                }
            }
            let (Some(p), Some(q)) = (pos, neg) else {
                continue;
            };
            valid += 1;
            let term = dist[a * n + p] - dist[a * n + q] + margin;
            if term > T::zero() {
                total += term;
                active.push(TripletTerm {
                    anchor: a,
                    positive: p,
                    negative: q,
                });
            }
        }
        if valid == 0 {
            return Err(Error::data(
                "batch_hard_triplet: no anchor has a positive in this batch",
            ));
        }
        let loss = total / T::from_usize(valid).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            &[x],
            Op::BatchHardTriplet {
                x,
                active,
                valid_anchors: valid,
            },
        ))
    }

    /// Reverse pass from the one-element tensor `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward: loss must hold one element, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(data) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gy = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let bt = kernels::transpose(k, n, bv.data());
                    self.accumulate(grads, *a, kernels::gemm(m, n, k, gy, &bt));
                }
                if self.requires_grad(*b) {
                    let at = kernels::transpose(m, k, av.data());
                    self.accumulate(grads, *b, kernels::gemm(k, m, n, &at, gy));
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                self.accumulate(grads, *x, kernels::transpose(s[0], s[1], gy));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gy.to_vec()),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                self.accumulate(grads, *a, gy.to_vec());
                if self.requires_grad(*b) {
                    let nb = self.value(*b).numel();
                    let red = reduce_broadcast(gy, nb).into_iter().map(|v| v * sign).collect();
                    self.accumulate(grads, *b, red);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len();
                if self.requires_grad(*a) {
                    let da = gy.iter().enumerate().map(|(i, &g)| g * bv[i % nb]).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let prod: Vec<T> = gy.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, reduce_broadcast(&prod, nb));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, gy.iter().map(|&g| g * *s).collect()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = gy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = T::one() + T::one();
                let dx = gy.iter().zip(xv).map(|(&g, &v)| two * v * g).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let dx = gy.iter().zip(xv).map(|(&g, &v)| g / v).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis).unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let mut dot = T::zero();
                        for i in 0..len {
                            dot += gy[idx(i)] * y[idx(i)];
                        }
                        for i in 0..len {
                            dx[idx(i)] = y[idx(i)] * (gy[idx(i)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = gy[0] / T::from_usize(n).unwrap();
                self.accumulate(grads, *x, vec![v; n]);
            }
            Op::MeanAxis { x, axis } => {
                let xs = self.value(*x).shape();
                let (outer, len, inner) = axis_extents(xs, *axis).unwrap();
                let denom = T::from_usize(len).unwrap();
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..len {
                        let dst = &mut dx[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, &g) in dst.iter_mut().zip(&gy[o * inner..(o + 1) * inner]) {
                            *d = g / denom;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2Normalize { x, axis, eps } => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis).unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let mut sq = T::zero();
                        let mut dot = T::zero();
                        for i in 0..len {
                            sq += xv[idx(i)] * xv[idx(i)];
                            dot += gy[idx(i)] * y[idx(i)];
                        }
                        let norm = sq.sqrt();
                        if norm > *eps {
                            for i in 0..len {
                                dx[idx(i)] = (gy[idx(i)] - y[idx(i)] * dot) / norm;
                            }
                        } else {
                            for i in 0..len {
                                dx[idx(i)] = gy[idx(i)] / *eps;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis).unwrap();
                let g = self.value(*gamma).data();
                let n = T::from_usize(len).unwrap();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![T::zero(); len];
                    let mut db = vec![T::zero(); len];
                    for o in 0..outer {
                        for i in 0..len {
                            let off = (o * len + i) * inner;
                            for j in 0..inner {
                                dg[i] += gy[off + j] * xhat[off + j];
                                db[i] += gy[off + j];
                            }
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); gy.len()];
                    let mut sum_d = vec![T::zero(); inner];
                    let mut sum_dh = vec![T::zero(); inner];
                    for o in 0..outer {
                        sum_d.fill(T::zero());
                        sum_dh.fill(T::zero());
                        for i in 0..len {
                            let off = (o * len + i) * inner;
                            for j in 0..inner {
                                let d = gy[off + j] * g[i];
                                sum_d[j] += d;
                                sum_dh[j] += d * xhat[off + j];
                            }
                        }
                        let r = &rstd[o * inner..(o + 1) * inner];
                        for i in 0..len {
                            let off = (o * len + i) * inner;
                            for j in 0..inner {
                                let d = gy[off + j] * g[i];
                                dx[off + j] =
                                    r[j] / n * (n * d - sum_d[j] - xhat[off + j] * sum_dh[j]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Conv2d { x, w, dims } => {
                let (dx, dw) = kernels::conv2d_backward(
                    dims,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::MulChannels(x, v) | Op::AddChannels(x, v) => {
                let is_mul = matches!(node.op, Op::MulChannels(..));
                let vv = self.value(*v).data();
                let (_, len, inner) = axis_extents(node.value.shape(), 1).unwrap();
                if self.requires_grad(*x) {
                    let dx = if is_mul {
                        gy.iter()
                            .enumerate()
                            .map(|(i, &g)| g * vv[(i / inner) % len])
                            .collect()
                    } else {
                        gy.to_vec()
                    };
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*v) {
                    let xv = self.value(*x).data();
                    let mut dv = vec![T::zero(); len];
                    for (i, &g) in gy.iter().enumerate() {
                        let c = (i / inner) % len;
                        dv[c] += if is_mul { g * xv[i] } else { g };
                    }
                    self.accumulate(grads, *v, dv);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n.max(1);
                let scale = gy[0] / T::from_usize(n).unwrap();
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= scale;
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::BatchHardTriplet {
                x,
                active,
                valid_anchors,
            } => {
                let xv = self.value(*x);
                let d = xv.shape()[1];
                let data = xv.data();
                let coef = gy[0] / T::from_usize(*valid_anchors).unwrap();
                let mut dx = vec![T::zero(); data.len()];
                // d‖a − b‖/da = (a − b)/‖a − b‖, taken as zero at coincident points.
                let mut pull = |from: usize, to: usize, sign: T| {
                    let (ra, rb) = (&data[from * d..(from + 1) * d], &data[to * d..(to + 1) * d]);
                    let dist = row_distance(ra, rb);
                    if dist > T::zero() {
                        let c = sign * coef / dist;
                        for k in 0..d {
                            let diff = ra[k] - rb[k];
                            dx[from * d + k] += c * diff;
                            dx[to * d + k] -= c * diff;
                        }
                    }
                };
                for t in active {
                    pull(t.anchor, t.positive, T::one());
                    pull(t.anchor, t.negative, -T::one());
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn row_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut sq = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        sq += d * d;
    }
    sq.sqrt()
}

/// Row-wise Euclidean distance matrix of a 2-d tensor.
pub(crate) fn pairwise_distances<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let data = x.data();
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = row_distance(&data[i * d..(i + 1) * d], &data[j * d..(j + 1) * d]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}
