//! Parameterised layers shared by the backbone and the internal classifiers,
//! plus their FLOP counts.
//!
//! FLOP convention: a multiply-accumulate counts as two operations, bias adds
//! and elementwise activations/pools count one operation per output element.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Padding, Tensor, Var};

/// Kaiming-style uniform init with bound `sqrt(6 / fan_in)`.
fn kaiming_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_in(-bound, bound)).collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::dims("dense", weight.shape(), bias.shape()));
        }
        Ok(DenseLayer { weight, bias })
    }

    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        DenseLayer {
            weight: kaiming_uniform(rng, &[inputs, outputs], inputs),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn flops(&self) -> u64 {
        let (i, o) = (self.inputs() as u64, self.outputs() as u64);
        2 * i * o + o
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDense {
        BoundDense {
            weight: leaf(g, &self.weight, trainable),
            bias: leaf(g, &self.bias, trainable),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl BoundDense {
    /// `x·W + b` for `x` of shape `[N, in]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xw = g.matmul(x, self.weight)?;
        g.add(xw, self.bias)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight, self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[out_c, in_c, k, k]`
    pub kernel: Tensor,
    /// `[out_c]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub kernel: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvLayer {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != 4 || ks[2] != ks[3] || bias.shape() != [ks[0]] {
            return Err(Error::dims("conv", ks, bias.shape()));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be at least 1".into()));
        }
        Ok(ConvLayer {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn init(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        rng: &mut Rng,
    ) -> Self {
        ConvLayer {
            kernel: kaiming_uniform(rng, &[out_c, in_c, k, k], in_c * k * k),
            bias: Tensor::zeros(&[out_c]),
            stride: stride.max(1),
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    /// Per-sample output shape `[out_c, oh, ow]` for input `[c, h, w]`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let k = self.kernel_size();
        let pad = self.padding.amount(k);
        if input.len() != 3
            || input[0] != self.in_channels()
            || input[1] + 2 * pad < k
            || input[2] + 2 * pad < k
        {
            return Err(Error::Config(format!(
                "conv with kernel {:?} cannot consume input {input:?}",
                self.kernel.shape()
            )));
        }
        Ok(vec![
            self.out_channels(),
            (input[1] + 2 * pad - k) / self.stride + 1,
            (input[2] + 2 * pad - k) / self.stride + 1,
        ])
    }

    pub fn flops(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let k = self.kernel_size() as u64;
        let (ic, oc) = (self.in_channels() as u64, self.out_channels() as u64);
        let spatial = (out[1] * out[2]) as u64;
        Ok(2 * k * k * ic * oc * spatial + oc * spatial)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundConv {
        BoundConv {
            kernel: leaf(g, &self.kernel, trainable),
            bias: leaf(g, &self.bias, trainable),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("kernel", &self.kernel), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

impl BoundConv {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.conv2d(x, self.kernel, self.bias, self.stride, self.padding)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.kernel, self.bias]
    }
}

/// Learnable mix of average and max pooling to a fixed spatial size:
/// `γ·avg_pool(x) + (1 − γ)·max_pool(x)`. γ is not clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct SdnPool {
    pub gamma: Tensor,
    pub target: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct BoundSdnPool {
    pub gamma: Var,
    pub target: (usize, usize),
}

impl SdnPool {
    pub fn new(target: (usize, usize)) -> Self {
        SdnPool {
            gamma: Tensor::scalar(0.5),
            target,
        }
    }

    pub fn with_gamma(target: (usize, usize), gamma: f64) -> Self {
        SdnPool {
            gamma: Tensor::scalar(gamma),
            target,
        }
    }

    /// Average pool, max pool and the mix each count once per output element.
    pub fn flops(&self, channels: usize) -> u64 {
        3 * (channels * self.target.0 * self.target.1) as u64
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundSdnPool {
        BoundSdnPool {
            gamma: leaf(g, &self.gamma, trainable),
            target: self.target,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("gamma", &self.gamma)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma]
    }
}

impl BoundSdnPool {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let avg = g.adaptive_avg_pool2d(x, self.target)?;
        let max = g.adaptive_max_pool2d(x, self.target)?;
        let neg = g.scale(self.gamma, -1.0);
        let one_minus = g.add_scalar(neg, 1.0);
        let a = g.mul(avg, self.gamma)?;
        let b = g.mul(max, one_minus)?;
        g.add(a, b)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.gamma]
    }
}

/// Functional form of [`SdnPool`] for a single forward evaluation.
pub fn sdn_pool(g: &mut Graph, x: Var, pool: &SdnPool) -> Result<Var> {
    let bound = pool.bind(g, false);
    bound.forward(g, x)
}

fn leaf(g: &mut Graph, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

/// Backbone building block.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv(ConvLayer),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Flatten,
}

impl Layer {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                if input != [d.inputs()] {
                    return Err(Error::Config(format!(
                        "dense layer expects [{}], got {input:?}",
                        d.inputs()
                    )));
                }
                Ok(vec![d.outputs()])
            }
            Layer::Conv(c) => c.output_shape(input),
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { kernel, stride } => {
                if input.len() != 3 || input[1] < *kernel || input[2] < *kernel || *stride == 0 {
                    return Err(Error::Config(format!(
                        "max pool {kernel}/{stride} cannot consume {input:?}"
                    )));
                }
                Ok(vec![
                    input[0],
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                ])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// FLOPs for one sample given the per-sample input shape.
    pub fn flops(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let elems = out.iter().product::<usize>() as u64;
        Ok(match self {
            Layer::Dense(d) => d.flops(),
            Layer::Conv(c) => c.flops(input)?,
            Layer::Relu | Layer::MaxPool { .. } => elems,
            Layer::Flatten => 0,
        })
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Dense(d) => d.params(),
            Layer::Conv(c) => c.params(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => d.params_mut(),
            Layer::Conv(c) => c.params_mut(),
            _ => Vec::new(),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLayer {
        match self {
            Layer::Dense(d) => BoundLayer::Dense(d.bind(g, trainable)),
            Layer::Conv(c) => BoundLayer::Conv(c.bind(g, trainable)),
            Layer::Relu => BoundLayer::Relu,
            Layer::MaxPool { kernel, stride } => BoundLayer::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            Layer::Flatten => BoundLayer::Flatten,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BoundLayer {
    Dense(BoundDense),
    Conv(BoundConv),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Flatten,
}

impl BoundLayer {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            BoundLayer::Dense(d) => d.forward(g, x),
            BoundLayer::Conv(c) => c.forward(g, x),
            BoundLayer::Relu => Ok(g.relu(x)),
            BoundLayer::MaxPool { kernel, stride } => g.max_pool2d(x, *kernel, *stride),
            BoundLayer::Flatten => g.flatten(x),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        match self {
            BoundLayer::Dense(d) => d.vars(),
            BoundLayer::Conv(c) => c.vars(),
            _ => Vec::new(),
        }
    }
}

/// Sum of per-layer FLOPs along a sequence, threading the shape through.
pub fn sequence_flops(layers: &[Layer], input: &[usize]) -> Result<u64> {
    let mut shape = input.to_vec();
    let mut total = 0;
    for layer in layers {
        total += layer.flops(&shape)?;
        shape = layer.output_shape(&shape)?;
    }
    Ok(total)
}


/// Supervision for a batch: class indices or full target distributions.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Hard(Vec<usize>),
    /// `[N, K]`, rows sum to one.
    Soft(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Hard(l) => l.len(),
            Targets::Soft(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Hard(l) => Targets::Hard(indices.iter().map(|&i| l[i]).collect()),
            Targets::Soft(t) => Targets::Soft(t.select_rows(indices)),
        }
    }
}

/// Mean negative log-likelihood; for soft targets `−(1/N) Σ t ⊙ log p`,
/// which is the forward KL divergence up to the targets' entropy.
pub fn nll_loss(g: &mut Graph, log_probs: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Hard(labels) => g.cross_entropy(log_probs, labels),
        Targets::Soft(t) => {
            if t.shape() != g.shape(log_probs) {
                return Err(Error::dims("nll_loss", g.shape(log_probs), t.shape()));
            }
            let n = t.shape()[0] as f64;
            let tv = g.constant(t.clone());
            let prod = g.mul(log_probs, tv)?;
            let s = g.sum(prod);
            Ok(g.scale(s, -1.0 / n))
        }
    }
}

/// Entropy term that turns [`nll_loss`] on soft targets into a KL divergence.
pub fn mean_entropy(targets: &Tensor) -> f64 {
    let n = targets.shape()[0] as f64;
    -targets
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
        / n
}
