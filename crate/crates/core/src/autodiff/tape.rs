use std::collections::HashMap;
use std::ops::Range;

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding of a stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that keeps height and width for odd kernels.
    Same,
    /// No padding; output extent is `input - kernel + 1`.
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        pad_top: usize,
        pad_left: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Abs(Var),
    Sqrt(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    SpatialMean(Var),
    SpatialVar(Var),
    SumChannels(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Grl(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records a forward computation so that a single reverse sweep can
/// produce gradients for every node that depends on a trainable leaf.
///
/// Nodes are appended in evaluation order, so every parent precedes its
/// children. A tape supports exactly one [`Tape::backward`] call.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
    consumed: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if it received any.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Smallest distance from a recorded input to a point where its op is
    /// not differentiable: rectifier, absolute-value and clamp breakpoints,
    /// square roots of values near zero and near-ties inside pooling
    /// windows. Exact ties are skipped; they only arise between rectified
    /// zeros, whose breakpoints are measured at the rectifier.
    pub(crate) fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let input = |x: &Var| self.value(*x).data();
            match &node.op {
                Op::Relu(x) | Op::Abs(x) | Op::Sqrt(x) => {
                    margin = input(x).iter().fold(margin, |m, v| m.min(v.abs()));
                }
                Op::Clamp { x, lo, hi } => {
                    margin = input(x)
                        .iter()
                        .fold(margin, |m, v| m.min((v - lo).abs()).min((v - hi).abs()));
                }
                Op::MaxPool2 { x, argmax } => {
                    let xs = self.value(*x).shape();
                    let (h, w) = (xs[2], xs[3]);
                    let data = input(x);
                    for &best in argmax {
                        let (plane, pos) = (best / (h * w), best % (h * w));
                        let (y0, x0) = (pos / w / 2 * 2, pos % w / 2 * 2);
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = plane * h * w + (y0 + dy) * w + x0 + dx;
                            let gap = data[best] - data[idx];
                            if idx != best && gap > 0.0 {
                                margin = margin.min(gap);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Parents of `v` in recording order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        op_parents(&self.nodes[v.0].op)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op_parents(&op)
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input that is not backed by a parameter store.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds the parameter `id` from `store` to this tape.
    ///
    /// Repeated calls for the same id return the same node, so every use of
    /// a parameter within one forward pass shares one gradient accumulator.
    pub fn param(&mut self, store: &ParamStore, id: &str) -> Result<Var> {
        let pos = store
            .position(id)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{id}`")))?;
        if let Some(&v) = self.bound.get(&pos) {
            return Ok(v);
        }
        let v = self.leaf(store.by_position(pos).value.clone());
        self.bound.insert(pos, v);
        Ok(v)
    }

    /// `(store position, node)` for every bound parameter, in position order.
    pub(crate) fn bound_params(&self) -> Vec<(usize, Var)> {
        let mut out: Vec<_> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        out.sort_unstable();
        out
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("lhs {sa:?} vs rhs {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bpj) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out)))
    }

    /// Adds a length-`n` bias vector to every row of an `m × n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::dim(
                "add_row_bias",
                format!("input {sx:?} vs bias {sb:?}"),
            ));
        }
        let n = sx[1];
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        Ok(self.push(Op::AddRowBias(x, bias), out))
    }

    /// Adds a per-channel bias to an `N × C × H × W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(Error::dim(
                "add_channel_bias",
                format!("input {sx:?} vs bias {sb:?}"),
            ));
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let bc = b[i % c];
            plane.iter_mut().for_each(|v| *v += bc);
        }
        Ok(self.push(Op::AddChannelBias(x, bias), out))
    }

    /// Stride-1 cross-correlation of `x: N×C×H×W` with `w: F×C×kh×kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input {sx:?} vs kernel {sw:?}"),
            ));
        }
        let geom = ConvGeometry::new(&sx, &sw, padding)?;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let (k, p) = (geom.taps(), geom.oh * geom.ow);
        let mut out = vec![0.0; geom.n * geom.f * p];
        let mut cols = Vec::new();
        let mut fm = Vec::new();
        for samples in geom.chunks() {
            let cnp = samples.len() * p;
            geom.im2col(xv, samples.clone(), &mut cols);
            fm.clear();
            fm.resize(geom.f * cnp, 0.0);
            gemm_acc(geom.f, k, cnp, wv, &cols, &mut fm);
            geom.scatter_fm(&fm, samples, &mut out);
        }
        let shape = vec![geom.n, geom.f, geom.oh, geom.ow];
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                pad_top: geom.pad_top,
                pad_left: geom.pad_left,
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::dim("max_pool2", format!("input {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = vec![s[0], s[1], oh, ow];
        Ok(self.push(Op::MaxPool2 { x, argmax }, Tensor::from_parts(shape, out)))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), out)
    }

    /// Natural logarithm; callers clamp inputs away from zero.
    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push(Op::Ln(x), out)
    }

    /// Absolute value with subgradient 0 at the origin.
    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(Op::Abs(x), out)
    }

    /// Square root of non-negative input; the gradient at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0).sqrt());
        self.push(Op::Sqrt(x), out)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp { x, lo, hi }, out)
    }

    /// Identity in the forward pass; negates the gradient in the backward pass.
    pub fn grl(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(Op::Grl(x), out)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), out)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let out = self.value(x).map(|v| v + offset);
        self.push(Op::AddScalar(x), out)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), out))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(m))
    }

    /// Per-sample, per-channel mean over the spatial axes: `N×C×H×W → N×C`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(
                "spatial_mean",
                format!("expected N×C×H×W, got {s:?}"),
            ));
        }
        let hw = s[2] * s[3];
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(
            Op::SpatialMean(x),
            Tensor::from_parts(vec![s[0], s[1]], out),
        ))
    }

    /// Per-sample, per-channel unbiased variance over the spatial axes.
    pub fn spatial_var(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(
                "spatial_var",
                format!("expected N×C×H×W, got {s:?}"),
            ));
        }
        let hw = s[2] * s[3];
        if hw < 2 {
            return Err(Error::DegenerateReduction(format!(
                "variance over a {}×{} spatial extent",
                s[2], s[3]
            )));
        }
        let out = self.value(x).data().chunks(hw).map(unbiased_var).collect();
        Ok(self.push(Op::SpatialVar(x), Tensor::from_parts(vec![s[0], s[1]], out)))
    }

    /// Sums `N×C×…` over every axis except the channel axis, giving `[C]`.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("sum_channels", format!("input {s:?}")));
        }
        let (c, inner) = (s[1], s[2..].iter().product::<usize>());
        let mut out = vec![0.0; c];
        for (i, chunk) in self.value(x).data().chunks(inner).enumerate() {
            out[i % c] += chunk.iter().sum::<f64>();
        }
        Ok(self.push(Op::SumChannels(x), Tensor::from_parts(vec![c], out)))
    }

    // ---- shape algebra --------------------------------------------------

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{base:?} vs {s:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// Slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xv[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(
            Op::Narrow { x, axis, start },
            Tensor::from_parts(shape, out),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape).map_err(|_| {
            Error::dim(
                "reshape",
                format!("{:?} cannot become {shape:?}", self.shape(x)),
            )
        })?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// Row-major flatten to one dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    /// Flattens all but the leading (batch) axis.
    pub fn flatten_batch(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[b, rest])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from the scalar `root`.
    ///
    /// Gradients are summed over every path. Calling this twice on one tape
    /// is rejected: record a fresh forward pass instead.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gv = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gv[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gv[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, &gj) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aip * gj;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::AddRowBias(x, b) => {
                if self.wants(*b) {
                    let n = self.shape(*b)[0];
                    let mut db = vec![0.0; n];
                    for row in gv.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vec![n], db));
                }
                self.accumulate_ref(grads, *x, g);
            }
            Op::AddChannelBias(x, b) => {
                if self.wants(*b) {
                    let s = self.shape(*x);
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let mut db = vec![0.0; c];
                    for (p, plane) in gv.chunks(hw).enumerate() {
                        db[p % c] += plane.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vec![c], db));
                }
                self.accumulate_ref(grads, *x, g);
            }
            Op::Conv2d {
                x,
                w,
                pad_top,
                pad_left,
            } => {
                let (sx, sw) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let geom =
                    ConvGeometry::with_padding(&sx, &sw, *pad_top, *pad_left, node.value.shape());
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let (k, p) = (geom.taps(), geom.oh * geom.ow);
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                let mut w_t = vec![0.0; wv.len()];
                for f in 0..geom.f {
                    for t in 0..k {
                        w_t[t * geom.f + f] = wv[f * k + t];
                    }
                }
                let mut dx = vec![0.0; if want_x { xv.len() } else { 0 }];
                let mut dw = vec![0.0; if want_w { wv.len() } else { 0 }];
                let (mut g_fm, mut cols, mut dcols) = (Vec::new(), Vec::new(), Vec::new());
                for samples in geom.chunks() {
                    let cnp = samples.len() * p;
                    geom.gather_fm(gv, samples.clone(), &mut g_fm);
                    if want_x {
                        dcols.clear();
                        dcols.resize(k * cnp, 0.0);
                        gemm_acc(k, geom.f, cnp, &w_t, &g_fm, &mut dcols);
                        geom.col2im_acc(&dcols, samples.clone(), &mut dx);
                    }
                    if want_w {
                        geom.im2col(xv, samples, &mut cols);
                        gemm_nt_acc(geom.f, cnp, k, &g_fm, &cols, &mut dw);
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::from_parts(sx.clone(), dx));
                }
                if want_w {
                    self.accumulate(grads, *w, Tensor::from_parts(sw, dw));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, &go) in argmax.iter().zip(gv) {
                    dx[src] += go;
                }
                self.accumulate(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), dx));
            }
            Op::Relu(x) => {
                let d = zip_map(self.value(*x), g, |xi, gi| if xi > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(&node.value, g, |y, gi| gi * y * (1.0 - y));
                self.accumulate(grads, *x, d);
            }
            Op::Ln(x) => {
                let d = zip_map(self.value(*x), g, |xi, gi| gi / xi);
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let d = zip_map(self.value(*x), g, |xi, gi| {
                    if xi > 0.0 {
                        gi
                    } else if xi < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Sqrt(x) => {
                let d = zip_map(
                    &node.value,
                    g,
                    |y, gi| if y > 0.0 { gi / (2.0 * y) } else { 0.0 },
                );
                self.accumulate(grads, *x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let d = zip_map(self.value(*x), g, |xi, gi| {
                    if xi >= *lo && xi <= *hi {
                        gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::SpatialMean(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f64;
                let d = gv
                    .iter()
                    .flat_map(|&gp| std::iter::repeat_n(gp * inv, hw))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), d));
            }
            Op::SpatialVar(x) => {
                let t = self.value(*x);
                let hw = t.shape()[2] * t.shape()[3];
                let scale = 2.0 / (hw as f64 - 1.0);
                let mut d = Vec::with_capacity(t.len());
                for (plane, &gp) in t.data().chunks(hw).zip(gv) {
                    let mean = plane.iter().sum::<f64>() / hw as f64;
                    d.extend(plane.iter().map(|&v| gp * scale * (v - mean)));
                }
                self.accumulate(grads, *x, Tensor::from_parts(t.shape().to_vec(), d));
            }
            Op::SumChannels(x) => {
                let s = self.shape(*x);
                let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                let n = s.iter().product::<usize>() / inner;
                let d = (0..n)
                    .flat_map(|i| std::iter::repeat_n(gv[i % c], inner))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), d));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let ps = self.shape(*p);
                    let chunk = ps[*axis] * inner;
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let from = o * total + offset;
                            d.extend_from_slice(&gv[from..from + chunk]);
                        }
                        self.accumulate(grads, *p, Tensor::from_parts(ps.to_vec(), d));
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x);
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut d = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let to = (o * s[*axis] + start) * inner;
                    let from = o * len * inner;
                    d[to..to + len * inner].copy_from_slice(&gv[from..from + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), d));
            }
            Op::Reshape(x) => {
                let d = Tensor::from_parts(self.shape(*x).to_vec(), gv.to_vec());
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.accumulate_ref(grads, *a, g);
                self.accumulate_ref(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate_ref(grads, *a, g);
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_map(self.value(*b), g, |y, gi| gi * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_map(self.value(*a), g, |x, gi| gi * x));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_map(bv, g, |y, gi| gi / y));
                }
                if self.wants(*b) {
                    let d = zip_map(&node.value, g, |q, gi| gi * q);
                    let d = zip_map(bv, &d, |y, gq| -gq / y);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, g.map(|v| v * factor));
            }
            Op::AddScalar(x) => self.accumulate_ref(grads, *x, g),
            Op::Sum(x) => {
                let d = Tensor::full(self.shape(*x), gv[0]);
                self.accumulate(grads, *x, d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let d = Tensor::full(self.shape(*x), gv[0] / n);
                self.accumulate(grads, *x, d);
            }
            Op::Grl(x) => {
                self.accumulate(grads, *x, g.map(|v| -v));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        }
    }

    fn accumulate_ref(&self, grads: &mut [Option<Tensor>], v: Var, d: &Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(d),
            slot @ None => *slot = Some(d.clone()),
        }
    }
}

fn op_parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::AddRowBias(a, b)
        | Op::AddChannelBias(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b) => vec![*a, *b],
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::Concat { parts, .. } => parts.clone(),
        Op::MaxPool2 { x, .. }
        | Op::Clamp { x, .. }
        | Op::Narrow { x, .. }
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Ln(x)
        | Op::Abs(x)
        | Op::Sqrt(x)
        | Op::SpatialMean(x)
        | Op::SpatialVar(x)
        | Op::SumChannels(x)
        | Op::Reshape(x)
        | Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Grl(x) => vec![*x],
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn unbiased_var(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Column tile of the blocked products; a tile of one operand row fits in L1.
const TILE: usize = 128;

/// `c[m×n] += a[m×k] · b[k×n]`, blocked over columns of `b`.
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for j0 in (0..n).step_by(TILE) {
        let j1 = (j0 + TILE).min(n);
        for i in 0..m {
            let c_row = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let aip = a[i * k + p];
                for (o, &bv) in c_row.iter_mut().zip(&b[p * n + j0..p * n + j1]) {
                    *o += aip * bv;
                }
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`, blocked over the shared `n` axis.
fn gemm_nt_acc(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for j0 in (0..n).step_by(TILE) {
        let j1 = (j0 + TILE).min(n);
        for i in 0..m {
            let a_row = &a[i * n + j0..i * n + j1];
            for p in 0..k {
                let b_row = &b[p * n + j0..p * n + j1];
                let mut acc = [0.0; 4];
                let mut ca = a_row.chunks_exact(4);
                let mut cb = b_row.chunks_exact(4);
                for (x, y) in (&mut ca).zip(&mut cb) {
                    for l in 0..4 {
                        acc[l] += x[l] * y[l];
                    }
                }
                let tail: f64 = ca
                    .remainder()
                    .iter()
                    .zip(cb.remainder())
                    .map(|(x, y)| x * y)
                    .sum();
                c[i * k + p] += (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
            }
        }
    }
}

/// Index arithmetic shared by the convolution forward and backward loops.
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize], padding: Padding) -> Result<Self> {
        let (h, w, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        let (ph, pw) = match padding {
            Padding::Same => (kh - 1, kw - 1),
            Padding::Valid => (0, 0),
        };
        if kh > h + ph || kw > w + pw {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {kh}×{kw} exceeds padded input {}×{}",
                    h + ph,
                    w + pw
                ),
            ));
        }
        Ok(Self {
            n: sx[0],
            c: sx[1],
            h,
            w,
            f: sw[0],
            kh,
            kw,
            oh: h + ph - kh + 1,
            ow: w + pw - kw + 1,
            pad_top: ph / 2,
            pad_left: pw / 2,
        })
    }

    fn with_padding(
        sx: &[usize],
        sw: &[usize],
        pad_top: usize,
        pad_left: usize,
        out: &[usize],
    ) -> Self {
        Self {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            f: sw[0],
            kh: sw[2],
            kw: sw[3],
            oh: out[2],
            ow: out[3],
            pad_top,
            pad_left,
        }
    }

    /// Number of kernel taps per output value, `C·kh·kw`.
    fn taps(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Consecutive sample ranges small enough that one range's unfolded
    /// columns stay cache resident.
    fn chunks(&self) -> impl Iterator<Item = Range<usize>> {
        const COLUMN_BUDGET: usize = 1024;
        let step = (COLUMN_BUDGET / (self.oh * self.ow)).max(1);
        let n = self.n;
        (0..n).step_by(step).map(move |s| s..(s + step).min(n))
    }

    /// Calls `visit(x_offset, row, col_offset, len)` for every contiguous run
    /// of output columns touched by one kernel tap on one output row of the
    /// given samples. `row` indexes the tap in `C×kh×kw` order and
    /// `col_offset` points into a row of `samples.len()·OH·OW` positions.
    fn for_each_tap(
        &self,
        samples: Range<usize>,
        mut visit: impl FnMut(usize, usize, usize, usize),
    ) {
        let plane = self.oh * self.ow;
        for (local, n) in samples.enumerate() {
            for c in 0..self.c {
                let x_base = (n * self.c + c) * self.h * self.w;
                for ky in 0..self.kh {
                    let oy_lo = self.pad_top.saturating_sub(ky);
                    let oy_hi = (self.h + self.pad_top).saturating_sub(ky).min(self.oh);
                    for kx in 0..self.kw {
                        let ox_lo = self.pad_left.saturating_sub(kx);
                        let ox_hi = (self.w + self.pad_left).saturating_sub(kx).min(self.ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let row = (c * self.kh + ky) * self.kw + kx;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - self.pad_top;
                            let ix = ox_lo + kx - self.pad_left;
                            visit(
                                x_base + iy * self.w + ix,
                                row,
                                local * plane + oy * self.ow + ox_lo,
                                ox_hi - ox_lo,
                            );
                        }
                    }
                }
            }
        }
    }

    /// Unfolds `samples` of `x` into a `taps × (samples·OH·OW)` matrix;
    /// padded taps are zero.
    fn im2col(&self, x: &[f64], samples: Range<usize>, cols: &mut Vec<f64>) {
        let cnp = samples.len() * self.oh * self.ow;
        cols.clear();
        cols.resize(self.taps() * cnp, 0.0);
        self.for_each_tap(samples, |x_at, row, col_at, len| {
            let dst = row * cnp + col_at;
            cols[dst..dst + len].copy_from_slice(&x[x_at..x_at + len]);
        });
    }

    /// Adjoint of [`Self::im2col`]: adds column entries back onto `dx`.
    fn col2im_acc(&self, cols: &[f64], samples: Range<usize>, dx: &mut [f64]) {
        let cnp = samples.len() * self.oh * self.ow;
        self.for_each_tap(samples, |x_at, row, col_at, len| {
            let src = row * cnp + col_at;
            for (d, &v) in dx[x_at..x_at + len].iter_mut().zip(&cols[src..src + len]) {
                *d += v;
            }
        });
    }

    /// Writes an `F × (samples·P)` block into the `N×F×P` output.
    fn scatter_fm(&self, fm: &[f64], samples: Range<usize>, out: &mut [f64]) {
        let p = self.oh * self.ow;
        let cnp = samples.len() * p;
        for f in 0..self.f {
            for (local, n) in samples.clone().enumerate() {
                let src = f * cnp + local * p;
                let dst = (n * self.f + f) * p;
                out[dst..dst + p].copy_from_slice(&fm[src..src + p]);
            }
        }
    }

    /// Reads the `samples` of an `N×F×P` tensor as an `F × (samples·P)` block.
    fn gather_fm(&self, g: &[f64], samples: Range<usize>, fm: &mut Vec<f64>) {
        let p = self.oh * self.ow;
        let cnp = samples.len() * p;
        fm.clear();
        fm.resize(self.f * cnp, 0.0);
        for f in 0..self.f {
            for (local, n) in samples.clone().enumerate() {
                let src = (n * self.f + f) * p;
                let dst = f * cnp + local * p;
                fm[dst..dst + p].copy_from_slice(&g[src..src + p]);
            }
        }
    }
}
