//! Internal classifiers attached to backbone taps, chained by cascade
//! connections that pass the previous head's logits forward.

use crate::backbone::BackboneModel;
use crate::error::{Error, Result};
use crate::nn::{BoundConv, BoundDense, BoundSdnPool, ConvLayer, DenseLayer, SdnPool};
use crate::rng::Rng;
use crate::tensor::{log_softmax_row, Graph, Padding, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// SDN pool output size for spatial taps (clipped to the conv output).
    pub pool_target: (usize, usize),
    /// Conv output channels = input channels / divisor (at least 1).
    pub channel_divisor: usize,
    /// Conv stride; `None` uses 2 when both spatial extents exceed 8, else 1.
    pub stride: Option<usize>,
    pub cascade: bool,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            pool_target: (2, 2),
            channel_divisor: 1,
            stride: None,
            cascade: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InternalClassifier {
    index: usize,
    tap_shape: Vec<usize>,
    conv: ConvLayer,
    pool: SdnPool,
    linear: DenseLayer,
    cascade_enabled: bool,
    num_classes: usize,
}

/// Head parameters bound into one graph.
#[derive(Debug, Clone)]
pub struct BoundHead {
    index: usize,
    vector_tap: bool,
    expects_cascade: bool,
    conv: BoundConv,
    pool: BoundSdnPool,
    linear: BoundDense,
}

impl InternalClassifier {
    /// Head `index` (1-based) over a per-sample tap of shape `[C, H, W]`, or
    /// `[D]` for dense backbones, which is treated as a `D×1×1` map and
    /// gets a 1×1 conv.
    pub fn new(
        index: usize,
        tap_shape: &[usize],
        num_classes: usize,
        cfg: &HeadConfig,
    ) -> Result<Self> {
        if index == 0 {
            return Err(Error::Config("head indices start at 1".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "heads need at least 2 classes, got {num_classes}"
            )));
        }
        let mut rng = Rng::derive(cfg.seed, 0x1C00 + index as u64);
        let divisor = cfg.channel_divisor.max(1);
        let (conv, pool) = match *tap_shape {
            [d] => {
                let out = (d / divisor).max(1);
                (
                    ConvLayer::init(d, out, 1, 1, Padding::Same, &mut rng),
                    SdnPool::new((1, 1)),
                )
            }
            [c, h, w] => {
                let stride = cfg.stride.unwrap_or(if h > 8 && w > 8 { 2 } else { 1 });
                let out = (c / divisor).max(1);
                let conv = ConvLayer::init(c, out, 3, stride, Padding::Same, &mut rng);
                let s = conv.output_shape(tap_shape)?;
                let target = (
                    cfg.pool_target.0.min(s[1]).max(1),
                    cfg.pool_target.1.min(s[2]).max(1),
                );
                (conv, SdnPool::new(target))
            }
            _ => {
                return Err(Error::Config(format!(
                    "unsupported tap shape {tap_shape:?}"
                )))
            }
        };
        let features = conv.out_channels() * pool.target.0 * pool.target.1;
        let cascade_enabled = cfg.cascade;
        let width = features
            + if cascade_enabled && index > 1 {
                num_classes
            } else {
                0
            };
        let linear = DenseLayer::init(width, num_classes, &mut rng);
        Ok(InternalClassifier {
            index,
            tap_shape: tap_shape.to_vec(),
            conv,
            pool,
            linear,
            cascade_enabled,
            num_classes,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn cascade_enabled(&self) -> bool {
        self.cascade_enabled
    }

    /// True when this head consumes the previous head's logits.
    pub fn expects_cascade(&self) -> bool {
        self.cascade_enabled && self.index > 1
    }

    pub fn conv(&self) -> &ConvLayer {
        &self.conv
    }

    pub fn pool(&self) -> &SdnPool {
        &self.pool
    }

    pub fn linear(&self) -> &DenseLayer {
        &self.linear
    }

    pub fn linear_mut(&mut self) -> &mut DenseLayer {
        &mut self.linear
    }

    pub fn conv_mut(&mut self) -> &mut ConvLayer {
        &mut self.conv
    }

    pub fn pool_mut(&mut self) -> &mut SdnPool {
        &mut self.pool
    }

    fn conv_input(&self) -> Vec<usize> {
        match *self.tap_shape {
            [d] => vec![d, 1, 1],
            _ => self.tap_shape.clone(),
        }
    }

    /// conv + relu + pool + linear for one sample.
    pub fn flops(&self) -> u64 {
        let conv_out = self
            .conv
            .output_shape(&self.conv_input())
            .expect("validated at construction");
        let relu = conv_out.iter().product::<usize>() as u64;
        self.conv
            .flops(&self.conv_input())
            .expect("validated at construction")
            + relu
            + self.pool.flops(self.conv.out_channels())
            + self.linear.flops()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundHead {
        BoundHead {
            index: self.index,
            vector_tap: self.tap_shape.len() == 1,
            expects_cascade: self.expects_cascade(),
            conv: self.conv.bind(g, trainable),
            pool: self.pool.bind(g, trainable),
            linear: self.linear.bind(g, trainable),
        }
    }

    /// Named parameters, `ic{m}.{layer}.{name}`.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let m = self.index;
        let mut out = Vec::new();
        for (n, t) in self.conv.params() {
            out.push((format!("ic{m}.conv.{n}"), t));
        }
        for (n, t) in self.pool.params() {
            out.push((format!("ic{m}.pool.{n}"), t));
        }
        for (n, t) in self.linear.params() {
            out.push((format!("ic{m}.linear.{n}"), t));
        }
        out
    }

    /// Same order as [`named_params`](Self::named_params) and [`BoundHead::vars`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.conv.params_mut();
        out.extend(self.pool.params_mut());
        out.extend(self.linear.params_mut());
        out
    }

    pub fn param_bytes(&self) -> Vec<u8> {
        self.named_params()
            .iter()
            .flat_map(|(_, t)| t.to_le_bytes())
            .collect()
    }

    /// Replaces every parameter by name; all of `ic{m}.*` must be present.
    pub fn load(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.params_mut()) {
            let t = lookup(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::dims("load", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        Ok(())
    }
}

impl BoundHead {
    pub fn index(&self) -> usize {
        self.index
    }

    /// Logits `[N, K]` from a tap activation. `prev_logits` must be present
    /// exactly when the head takes a cascade input; `detach` stops its
    /// gradient.
    pub fn forward(
        &self,
        g: &mut Graph,
        activation: Var,
        prev_logits: Option<Var>,
        detach: bool,
    ) -> Result<Var> {
        match (self.expects_cascade, prev_logits.is_some()) {
            (true, false) => {
                return Err(Error::Cascade {
                    head: self.index,
                    msg: "cascade input missing".into(),
                })
            }
            (false, true) => {
                return Err(Error::Cascade {
                    head: self.index,
                    msg: "unexpected cascade input".into(),
                })
            }
            _ => {}
        }
        let x = if self.vector_tap {
            let s = g.shape(activation).to_vec();
            if s.len() != 2 {
                return Err(Error::shape(
                    "head",
                    format!("expected [N, D] activation, got {s:?}"),
                ));
            }
            g.reshape(activation, &[s[0], s[1], 1, 1])?
        } else {
            activation
        };
        let h = self.conv.forward(g, x)?;
        let h = g.relu(h);
        let h = self.pool.forward(g, h)?;
        let mut h = g.flatten(h)?;
        if let Some(prev) = prev_logits {
            let prev = if detach { g.stop_gradient(prev) } else { prev };
            h = g.concat_last(&[h, prev])?;
        }
        self.linear.forward(g, h)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.conv.vars();
        v.extend(self.pool.vars());
        v.extend(self.linear.vars());
        v
    }
}

/// Builds one head per backbone tap.
pub fn build_heads(backbone: &BackboneModel, cfg: &HeadConfig) -> Result<Vec<InternalClassifier>> {
    backbone
        .tap_shapes()
        .iter()
        .enumerate()
        .map(|(i, s)| InternalClassifier::new(i + 1, s, backbone.num_classes(), cfg))
        .collect()
}

/// Runs bound heads left to right; head m gets head m−1's logits when it
/// takes a cascade input. Returns the logits of every head.
pub fn cascade_forward_all(
    g: &mut Graph,
    heads: &[BoundHead],
    taps: &[Var],
    detach: bool,
) -> Result<Vec<Var>> {
    if heads.len() != taps.len() {
        return Err(Error::Config(format!(
            "{} heads for {} taps",
            heads.len(),
            taps.len()
        )));
    }
    let mut out: Vec<Var> = Vec::with_capacity(heads.len());
    for (head, &tap) in heads.iter().zip(taps) {
        let prev = if head.expects_cascade {
            out.last().copied()
        } else {
            None
        };
        let logits = head.forward(g, tap, prev, detach).map_err(|e| match e {
            Error::Head { .. } | Error::Cascade { .. } => e,
            other => Error::Head {
                head: head.index,
                source: Box::new(other),
            },
        })?;
        out.push(logits);
    }
    Ok(out)
}

/// Evaluated head and backbone outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// Per head, `[N, K]`.
    pub logits: Vec<Tensor>,
    /// Per head, `[N, K]`.
    pub log_probs: Vec<Tensor>,
    /// Backbone logits `[N, K]`.
    pub final_logits: Tensor,
}

impl HeadOutputs {
    pub fn num_heads(&self) -> usize {
        self.logits.len()
    }

    pub fn len(&self) -> usize {
        self.final_logits.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Probabilities of head `m` (0-based) for sample `n`.
    pub fn probs(&self, m: usize, n: usize) -> Vec<f64> {
        self.log_probs[m].row(n).iter().map(|v| v.exp()).collect()
    }
}

/// Forward pass of backbone and all heads (constants only).
pub fn head_outputs(
    backbone: &BackboneModel,
    heads: &[InternalClassifier],
    x: &Tensor,
) -> Result<HeadOutputs> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let taps = backbone.forward_with_taps(&mut g, xv)?;
    let bound: Vec<BoundHead> = heads.iter().map(|h| h.bind(&mut g, false)).collect();
    let logits = cascade_forward_all(&mut g, &bound, &taps.taps, true)?;
    let logits: Vec<Tensor> = logits.iter().map(|&v| g.value(v).clone()).collect();
    let log_probs = logits.iter().map(log_softmax_rows).collect();
    Ok(HeadOutputs {
        logits,
        log_probs,
        final_logits: g.value(taps.logits).clone(),
    })
}

/// Batched [`head_outputs`] over the whole input tensor.
pub fn head_outputs_batched(
    backbone: &BackboneModel,
    heads: &[InternalClassifier],
    x: &Tensor,
    batch: usize,
) -> Result<HeadOutputs> {
    let n = x.shape()[0];
    let idx: Vec<usize> = (0..n).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(batch.max(1)) {
        parts.push(head_outputs(backbone, heads, &x.select_rows(chunk))?);
    }
    let cat = |get: &dyn Fn(&HeadOutputs) -> &Tensor| -> Tensor {
        let k = get(&parts[0]).shape()[1];
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|p| get(p).data().iter().copied())
            .collect();
        Tensor::new(vec![n, k], data).expect("consistent batches")
    };
    let m = parts[0].num_heads();
    Ok(HeadOutputs {
        logits: (0..m).map(|j| cat(&|p| &p.logits[j])).collect(),
        log_probs: (0..m).map(|j| cat(&|p| &p.log_probs[j])).collect(),
        final_logits: cat(&|p| &p.final_logits),
    })
}

pub(crate) fn log_softmax_rows(t: &Tensor) -> Tensor {
    let k = t.last_dim();
    let data: Vec<f64> = t.data().chunks(k).flat_map(log_softmax_row).collect();
    Tensor::new(vec![t.len() / k, k], data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::CnnSpec;
    use crate::gradcheck::random_tensor;

    fn cnn() -> BackboneModel {
        BackboneModel::cnn(
            &CnnSpec {
                input: vec![1, 12, 12],
                channels: 4,
                blocks: 3,
                pool: false,
                classes: 3,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn cascade_width_adds_k() {
        let cfg = HeadConfig::default();
        let with = InternalClassifier::new(2, &[4, 6, 6], 5, &cfg).unwrap();
        let without = InternalClassifier::new(
            2,
            &[4, 6, 6],
            5,
            &HeadConfig {
                cascade: false,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(with.linear().inputs(), without.linear().inputs() + 5);
        let first = InternalClassifier::new(1, &[4, 6, 6], 5, &cfg).unwrap();
        assert!(!first.expects_cascade());
        assert_eq!(first.linear().inputs(), without.linear().inputs());
    }

    #[test]
    fn cascade_contract_errors() {
        let cfg = HeadConfig::default();
        let h1 = InternalClassifier::new(1, &[4, 6, 6], 3, &cfg).unwrap();
        let h2 = InternalClassifier::new(2, &[4, 6, 6], 3, &cfg).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4, 6, 6], 0.1));
        let prev = g.constant(Tensor::zeros(&[2, 3]));
        let b1 = h1.bind(&mut g, false);
        let b2 = h2.bind(&mut g, false);
        assert!(matches!(
            b1.forward(&mut g, x, Some(prev), true),
            Err(Error::Cascade { head: 1, .. })
        ));
        assert!(matches!(
            b2.forward(&mut g, x, None, true),
            Err(Error::Cascade { head: 2, .. })
        ));
        assert!(b2.forward(&mut g, x, Some(prev), true).is_ok());
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut h = InternalClassifier::new(2, &[4, 6, 6], 3, &HeadConfig::default()).unwrap();
        for t in h.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        h.linear_mut().bias = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let mut rng = Rng::new(3);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&mut rng, &[2, 4, 6, 6], -1.0, 1.0));
        let prev = g.constant(random_tensor(&mut rng, &[2, 3], -1.0, 1.0));
        let b = h.bind(&mut g, false);
        let out = b.forward(&mut g, x, Some(prev), true).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_head_ignores_other_heads() {
        let bb = cnn();
        let heads = build_heads(&bb, &HeadConfig::default()).unwrap();
        let mut rng = Rng::new(1);
        let x = random_tensor(&mut rng, &[3, 1, 12, 12], 0.0, 1.0);
        let base = head_outputs(&bb, &heads, &x).unwrap();
        let mut perturbed = heads.clone();
        for h in perturbed.iter_mut().skip(1) {
            for t in h.params_mut() {
                t.data_mut().iter_mut().for_each(|v| *v += 0.3);
            }
        }
        let other = head_outputs(&bb, &perturbed, &x).unwrap();
        assert_eq!(base.logits[0], other.logits[0]);
        assert_ne!(base.logits[1], other.logits[1]);
    }

    #[test]
    fn perturbing_first_head_moves_later_heads() {
        let bb = cnn();
        let heads = build_heads(&bb, &HeadConfig::default()).unwrap();
        let mut rng = Rng::new(2);
        let x = random_tensor(&mut rng, &[3, 1, 12, 12], 0.0, 1.0);
        let base = head_outputs(&bb, &heads, &x).unwrap();
        let mut perturbed = heads.clone();
        perturbed[0].linear_mut().bias.data_mut()[0] += 1e-3;
        let other = head_outputs(&bb, &perturbed, &x).unwrap();
        assert_ne!(base.logits[1], other.logits[1]);
        assert_ne!(base.logits[2], other.logits[2]);
    }

    #[test]
    fn disabled_cascade_equals_independent_heads() {
        let bb = cnn();
        let cfg = HeadConfig {
            cascade: false,
            ..Default::default()
        };
        let heads = build_heads(&bb, &cfg).unwrap();
        let mut rng = Rng::new(4);
        let x = random_tensor(&mut rng, &[2, 1, 12, 12], 0.0, 1.0);
        let all = head_outputs(&bb, &heads, &x).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let taps = bb.forward_with_taps(&mut g, xv).unwrap();
        for (m, h) in heads.iter().enumerate() {
            let b = h.bind(&mut g, false);
            let out = b.forward(&mut g, taps.taps[m], None, true).unwrap();
            assert_eq!(g.value(out), &all.logits[m]);
        }
    }

    #[test]
    fn head_outputs_are_distributions_and_deterministic() {
        let bb = cnn();
        let heads = build_heads(&bb, &HeadConfig::default()).unwrap();
        let mut rng = Rng::new(5);
        let x = random_tensor(&mut rng, &[4, 1, 12, 12], 0.0, 1.0);
        let a = head_outputs(&bb, &heads, &x).unwrap();
        let b = head_outputs(&bb, &heads, &x).unwrap();
        assert_eq!(a, b);
        for m in 0..3 {
            for n in 0..4 {
                let p = a.probs(m, n);
                assert!(p.iter().all(|&v| v >= 0.0));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let batched = head_outputs_batched(&bb, &heads, &x, 3).unwrap();
        assert_eq!(batched.final_logits, a.final_logits);
    }

    #[test]
    fn vector_taps_use_pointwise_conv() {
        let bb = BackboneModel::mlp(2, &[8, 8], 3, 0).unwrap();
        let cfg = HeadConfig {
            channel_divisor: 4,
            ..Default::default()
        };
        let heads = build_heads(&bb, &cfg).unwrap();
        assert_eq!(heads[0].conv().kernel.shape(), &[2, 8, 1, 1]);
        // conv 2·8·2+2, relu 2, pool 3·2, linear 2·2·3+3
        assert_eq!(heads[0].flops(), 34 + 2 + 6 + 15);
        let x = Tensor::new(vec![2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let out = head_outputs(&bb, &heads, &x).unwrap();
        assert_eq!(out.logits[1].shape(), &[2, 3]);
    }

    #[test]
    fn spatial_head_stride_rule() {
        let big = InternalClassifier::new(1, &[4, 14, 14], 3, &HeadConfig::default()).unwrap();
        let small = InternalClassifier::new(1, &[4, 7, 7], 3, &HeadConfig::default()).unwrap();
        assert_eq!(big.conv().stride, 2);
        assert_eq!(small.conv().stride, 1);
        let tiny = InternalClassifier::new(1, &[4, 1, 1], 3, &HeadConfig::default()).unwrap();
        assert_eq!(tiny.pool().target, (1, 1));
    }
}
