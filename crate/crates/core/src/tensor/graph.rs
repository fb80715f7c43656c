//! Eager reverse-mode graph.
//!
//! Every op evaluates immediately and appends a node; node ids are therefore
//! a topological order and `backward` is a single reverse sweep. A graph is
//! built per forward pass and dropped afterwards.

use super::gemm::{gemm, Transpose};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Zero padding mode for `conv2d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` zeros on each side.
    Same,
    Valid,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Same => (kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Column matrix `[C·k·k, N·OH·OW]`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols_n = self.batch * self.spatial();
        let mut cols = vec![0.0; self.patch_len() * cols_n];
        let plane = self.in_h * self.in_w;
        for c in 0..self.in_c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for n in 0..self.batch {
                        let src = &x[(n * self.in_c + c) * plane..(n * self.in_c + c + 1) * plane];
                        for oh in 0..self.out_h {
                            let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                            if ih < 0 || ih >= self.in_h as isize {
                                continue;
                            }
                            let base = n * self.spatial() + oh * self.out_w;
                            for ow in 0..self.out_w {
                                let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                                if iw >= 0 && iw < self.in_w as isize {
                                    dst_row[base + ow] = src[ih as usize * self.in_w + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let cols_n = self.batch * self.spatial();
        let plane = self.in_h * self.in_w;
        for c in 0..self.in_c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                    for n in 0..self.batch {
                        let dst =
                            &mut dx[(n * self.in_c + c) * plane..(n * self.in_c + c + 1) * plane];
                        for oh in 0..self.out_h {
                            let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                            if ih < 0 || ih >= self.in_h as isize {
                                continue;
                            }
                            let base = n * self.spatial() + oh * self.out_w;
                            for ow in 0..self.out_w {
                                let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                                if iw >= 0 && iw < self.in_w as isize {
                                    dst[ih as usize * self.in_w + iw as usize] +=
                                        src_row[base + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PoolKind {
    Max,
    Avg,
}

/// Pooling windows per output row/column as half-open input ranges.
#[derive(Debug, Clone)]
struct PoolGeom {
    batch_planes: usize,
    in_h: usize,
    in_w: usize,
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl PoolGeom {
    fn fixed(extent: usize, kernel: usize, stride: usize) -> Vec<(usize, usize)> {
        let out = (extent - kernel) / stride + 1;
        (0..out)
            .map(|o| (o * stride, o * stride + kernel))
            .collect()
    }

    /// Adaptive bins: `[floor(i·H/h), ceil((i+1)·H/h))`.
    fn adaptive(extent: usize, target: usize) -> Vec<(usize, usize)> {
        (0..target)
            .map(|i| (i * extent / target, ((i + 1) * extent).div_ceil(target)))
            .collect()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    LogSoftmax(Var),
    CrossEntropy(Var, Vec<usize>),
    StopGradient,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Pool {
        input: Var,
        kind: PoolKind,
        geom: PoolGeom,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradient buffers produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, with unreached nodes reported as zeros.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Rhs broadcast rule: `rhs` is a suffix of `lhs`'s shape, or a single value.
fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    let n: usize = rhs.iter().product();
    n == 1 || (rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs)
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(Error::dims(op_name, av.shape(), bv.shape()));
        }
        let bd = bv.data();
        let period = bd.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % period]))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    /// Elementwise `a + b`; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dims("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            Transpose::No,
            bv.data(),
            Transpose::No,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let value = Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().map(|&x| f(x)).collect(),
        );
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums the trailing axis away.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let k = av.last_dim();
        let data: Vec<f64> = av.data().chunks(k).map(|r| r.iter().sum()).collect();
        let shape = av.shape()[..av.rank().saturating_sub(1)].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, data), Op::SumLast(a), rg)
    }

    /// Concatenates along the trailing axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = self.value(*first).shape()[..self.value(*first).rank() - 1].to_vec();
        let mut width = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dims("concat", self.value(*first).shape(), s));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Flattens all axes after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// Row-wise `z - max z - ln Σ exp(z - max z)` over the trailing axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.last_dim() < 2 {
            return Err(Error::shape(
                "log_softmax",
                "trailing axis must have at least 2 classes",
            ));
        }
        if !av.all_finite() {
            return Err(Error::NonFinite { op: "log_softmax" });
        }
        let data: Vec<f64> = av
            .data()
            .chunks(av.last_dim())
            .flat_map(super::log_softmax_row)
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    pub fn cross_entropy(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.value(log_probs);
        if lp.rank() != 2 || lp.shape()[0] != labels.len() {
            return Err(Error::dims("cross_entropy", lp.shape(), &[labels.len()]));
        }
        let k = lp.shape()[1];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Label {
                    index: i,
                    label: y,
                    classes: k,
                });
            }
            total -= lp.row(i)[y];
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        let rg = self.rg(log_probs);
        Ok(self.push(value, Op::CrossEntropy(log_probs, labels.to_vec()), rg))
    }

    /// Identity forward; blocks all gradient flow to `a` and its ancestors.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// 2-D convolution, input `[N,C,H,W]`, kernel `[O,C,k,k]`, bias `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != ks[3] || bs != [ks[0]] {
            return Err(Error::dims("conv2d", xs, ks));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let k = ks[2];
        let pad = padding.amount(k);
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::dims("conv2d", xs, ks));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ks[0],
            k,
            stride,
            pad,
            out_h: (xs[2] + 2 * pad - k) / stride + 1,
            out_w: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let cols = geom.im2col(self.value(input).data());
        let cols_n = geom.batch * geom.spatial();
        // [O, N·S]
        let mut prod = vec![0.0; geom.out_c * cols_n];
        gemm(
            geom.out_c,
            geom.patch_len(),
            cols_n,
            self.value(kernel).data(),
            Transpose::No,
            &cols,
            Transpose::No,
            0.0,
            &mut prod,
        );
        let s = geom.spatial();
        let bias_v = self.value(bias).data();
        let mut out = vec![0.0; geom.batch * geom.out_c * s];
        for o in 0..geom.out_c {
            for n in 0..geom.batch {
                let src = &prod[o * cols_n + n * s..o * cols_n + (n + 1) * s];
                let dst = &mut out[(n * geom.out_c + o) * s..(n * geom.out_c + o + 1) * s];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + bias_v[o];
                }
            }
        }
        let shape = vec![geom.batch, geom.out_c, geom.out_h, geom.out_w];
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        // The column matrix is only needed for the kernel gradient.
        let cols = if self.rg(kernel) { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    fn pool(
        &mut self,
        input: Var,
        kind: PoolKind,
        rows: Vec<(usize, usize)>,
        cols: Vec<(usize, usize)>,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let geom = PoolGeom {
            batch_planes: xs[0] * xs[1],
            in_h: xs[2],
            in_w: xs[3],
            rows,
            cols,
        };
        let (oh, ow) = (geom.rows.len(), geom.cols.len());
        let x = self.value(input).data();
        let plane = geom.in_h * geom.in_w;
        let mut out = Vec::with_capacity(geom.batch_planes * oh * ow);
        let mut argmax = Vec::new();
        for p in 0..geom.batch_planes {
            let src = &x[p * plane..(p + 1) * plane];
            for &(r0, r1) in &geom.rows {
                for &(c0, c1) in &geom.cols {
                    match kind {
                        PoolKind::Max => {
                            let mut best = r0 * geom.in_w + c0;
                            for r in r0..r1 {
                                for c in c0..c1 {
                                    if src[r * geom.in_w + c] > src[best] {
                                        best = r * geom.in_w + c;
                                    }
                                }
                            }
                            argmax.push(p * plane + best);
                            out.push(src[best]);
                        }
                        PoolKind::Avg => {
                            let mut s = 0.0;
                            for r in r0..r1 {
                                for c in c0..c1 {
                                    s += src[r * geom.in_w + c];
                                }
                            }
                            out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
                        }
                    }
                }
            }
        }
        let shape = vec![xs[0], xs[1], oh, ow];
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Pool {
                input,
                kind,
                geom,
                argmax,
            },
            rg,
        ))
    }

    fn check_pool_input(&self, op: &'static str, input: Var, h: usize, w: usize) -> Result<()> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(Error::shape(op, format!("expected [N,C,H,W], got {xs:?}")));
        }
        if xs[2] < h || xs[3] < w {
            return Err(Error::shape(
                op,
                format!("input {xs:?} smaller than window/target {h}x{w}"),
            ));
        }
        Ok(())
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.fixed_pool(input, PoolKind::Max, kernel, stride)
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.fixed_pool(input, PoolKind::Avg, kernel, stride)
    }

    fn fixed_pool(
        &mut self,
        input: Var,
        kind: PoolKind,
        kernel: usize,
        stride: usize,
    ) -> Result<Var> {
        if kernel == 0 || stride == 0 {
            return Err(Error::shape("pool2d", "kernel and stride must be positive"));
        }
        self.check_pool_input("pool2d", input, kernel, kernel)?;
        let xs = self.shape(input);
        let rows = PoolGeom::fixed(xs[2], kernel, stride);
        let cols = PoolGeom::fixed(xs[3], kernel, stride);
        self.pool(input, kind, rows, cols)
    }

    /// Average pooling to a fixed output size.
    pub fn adaptive_avg_pool2d(&mut self, input: Var, target: (usize, usize)) -> Result<Var> {
        self.adaptive_pool(input, PoolKind::Avg, target)
    }

    /// Max pooling to a fixed output size.
    pub fn adaptive_max_pool2d(&mut self, input: Var, target: (usize, usize)) -> Result<Var> {
        self.adaptive_pool(input, PoolKind::Max, target)
    }

    fn adaptive_pool(&mut self, input: Var, kind: PoolKind, (h, w): (usize, usize)) -> Result<Var> {
        if h == 0 || w == 0 {
            return Err(Error::shape("adaptive_pool2d", "target must be positive"));
        }
        self.check_pool_input("adaptive_pool2d", input, h, w)?;
        let xs = self.shape(input);
        let rows = PoolGeom::adaptive(xs[2], h);
        let cols = PoolGeom::adaptive(xs[3], w);
        self.pool(input, kind, rows, cols)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if self.rg(v) {
                accumulate(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.rg(*b) {
                    let period = val(*b).len();
                    let mut gb = vec![0.0; period];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % period] += sign * gi;
                    }
                    send(*b, gb);
                }
                send(*a, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let period = bv.len();
                if self.rg(*b) {
                    let mut gb = vec![0.0; period];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % period] += gi * av[i];
                    }
                    send(*b, gb);
                }
                if self.rg(*a) {
                    send(
                        *a,
                        g.iter()
                            .enumerate()
                            .map(|(i, gi)| gi * bv[i % period])
                            .collect(),
                    );
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        Transpose::No,
                        val(*b),
                        Transpose::Yes,
                        0.0,
                        &mut ga,
                    );
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        val(*a),
                        Transpose::Yes,
                        g,
                        Transpose::No,
                        0.0,
                        &mut gb,
                    );
                    send(*b, gb);
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Exp(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect());
            }
            Op::Ln(a) => {
                let av = val(*a);
                send(*a, g.iter().zip(av).map(|(gi, x)| gi / x).collect());
            }
            Op::Softplus(a) => {
                let av = val(*a);
                send(
                    *a,
                    g.iter().zip(av).map(|(gi, &x)| gi * sigmoid(x)).collect(),
                );
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|gi| gi * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumLast(a) => {
                let k = self.nodes[a.0].value.last_dim();
                send(
                    *a,
                    g.iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi, k))
                        .collect(),
                );
            }
            Op::Concat(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                        }
                        send(p, gp);
                    }
                    offset += w;
                }
            }
            Op::LogSoftmax(a) => {
                let k = node.value.last_dim();
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(ga.chunks_mut(k)) {
                    let total: f64 = gr.iter().sum();
                    for i in 0..k {
                        out[i] = gr[i] - yr[i].exp() * total;
                    }
                }
                send(*a, ga);
            }
            Op::CrossEntropy(lp, labels) => {
                let k = self.nodes[lp.0].value.last_dim();
                let mut ga = vec![0.0; labels.len() * k];
                let w = -g[0] / labels.len() as f64;
                for (i, &y) in labels.iter().enumerate() {
                    ga[i * k + y] = w;
                }
                send(*lp, ga);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let s = geom.spatial();
                let cols_n = geom.batch * s;
                // dOut rearranged to [O, N·S].
                let mut gout = vec![0.0; geom.out_c * cols_n];
                for n in 0..geom.batch {
                    for o in 0..geom.out_c {
                        gout[o * cols_n + n * s..o * cols_n + (n + 1) * s].copy_from_slice(
                            &g[(n * geom.out_c + o) * s..(n * geom.out_c + o + 1) * s],
                        );
                    }
                }
                if self.rg(*bias) {
                    send(*bias, gout.chunks(cols_n).map(|r| r.iter().sum()).collect());
                }
                if self.rg(*kernel) {
                    let mut gk = vec![0.0; geom.out_c * geom.patch_len()];
                    gemm(
                        geom.out_c,
                        cols_n,
                        geom.patch_len(),
                        &gout,
                        Transpose::No,
                        cols,
                        Transpose::Yes,
                        0.0,
                        &mut gk,
                    );
                    send(*kernel, gk);
                }
                if self.rg(*input) {
                    let mut gcols = vec![0.0; geom.patch_len() * cols_n];
                    gemm(
                        geom.patch_len(),
                        geom.out_c,
                        cols_n,
                        val(*kernel),
                        Transpose::Yes,
                        &gout,
                        Transpose::No,
                        0.0,
                        &mut gcols,
                    );
                    let mut gx = vec![0.0; val(*input).len()];
                    geom.col2im(&gcols, &mut gx);
                    send(*input, gx);
                }
            }
            Op::Pool {
                input,
                kind,
                geom,
                argmax,
            } => {
                let mut gx = vec![0.0; val(*input).len()];
                match kind {
                    PoolKind::Max => {
                        for (gi, &src) in g.iter().zip(argmax) {
                            gx[src] += gi;
                        }
                    }
                    PoolKind::Avg => {
                        let plane = geom.in_h * geom.in_w;
                        let mut it = g.iter();
                        for p in 0..geom.batch_planes {
                            for &(r0, r1) in &geom.rows {
                                for &(c0, c1) in &geom.cols {
                                    let gi = it.next().copied().unwrap_or(0.0);
                                    let share = gi / ((r1 - r0) * (c1 - c0)) as f64;
                                    for r in r0..r1 {
                                        for c in c0..c1 {
                                            gx[p * plane + r * geom.in_w + c] += share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                send(*input, gx);
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
