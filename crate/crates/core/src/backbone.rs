//! The frozen base network with designated tap points.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{nll_loss, sequence_flops, BoundLayer, ConvLayer, DenseLayer, Layer, Targets};
use crate::optim::{LrSchedule, Optimizer, OptimizerKind};
use crate::rng::Rng;
use crate::tensor::{Graph, Padding, Tensor, Var};

/// Hidden activations at every tap plus the final logits of one forward pass.
#[derive(Debug, Clone)]
pub struct TapActivations {
    pub taps: Vec<Var>,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    layers: Vec<Layer>,
    taps: Vec<usize>,
    frozen: bool,
    input_shape: Vec<usize>,
    num_classes: usize,
}

/// Convolutional backbone: `blocks × [conv k3 s1 same → relu (→ maxpool 2)]`
/// then a dense classifier, with a tap after each block.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnSpec {
    pub input: Vec<usize>,
    pub channels: usize,
    pub blocks: usize,
    pub pool: bool,
    pub classes: usize,
}

/// Architecture of a reference backbone.
#[derive(Debug, Clone, PartialEq)]
pub enum BackboneSpec {
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    Cnn(CnnSpec),
}

impl BackboneModel {
    pub fn from_spec(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        match spec {
            BackboneSpec::Mlp {
                input,
                hidden,
                classes,
            } => BackboneModel::mlp(*input, hidden, *classes, seed),
            BackboneSpec::Cnn(c) => BackboneModel::cnn(c, seed),
        }
    }

    pub fn new(
        layers: Vec<Layer>,
        taps: Vec<usize>,
        input_shape: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::Config("backbone needs at least one tap".into()));
        }
        if taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "tap indices {taps:?} must be strictly increasing"
            )));
        }
        if *taps.last().expect("non-empty") + 1 >= layers.len() {
            return Err(Error::Config(format!(
                "last tap {} must precede the final classifier layer (layers: {})",
                taps.last().expect("non-empty"),
                layers.len()
            )));
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape != [num_classes] {
            return Err(Error::Config(format!(
                "backbone produces {shape:?}, expected [{num_classes}] logits"
            )));
        }
        Ok(BackboneModel {
            layers,
            taps,
            frozen: false,
            input_shape,
            num_classes,
        })
    }

    /// `input → hidden[0] → … → classes` with ReLUs and a tap after each ReLU.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::derive(seed, 0xB0);
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut width = input;
        for &h in hidden {
            layers.push(Layer::Dense(DenseLayer::init(width, h, &mut rng)));
            layers.push(Layer::Relu);
            taps.push(layers.len() - 1);
            width = h;
        }
        layers.push(Layer::Dense(DenseLayer::init(width, classes, &mut rng)));
        BackboneModel::new(layers, taps, vec![input], classes)
    }

    pub fn cnn(spec: &CnnSpec, seed: u64) -> Result<Self> {
        if spec.input.len() != 3 || spec.blocks == 0 {
            return Err(Error::Config(format!("invalid cnn spec {spec:?}")));
        }
        let mut rng = Rng::derive(seed, 0xB0);
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut shape = spec.input.clone();
        for _ in 0..spec.blocks {
            let conv = ConvLayer::init(shape[0], spec.channels, 3, 1, Padding::Same, &mut rng);
            layers.push(Layer::Conv(conv));
            layers.push(Layer::Relu);
            if spec.pool {
                layers.push(Layer::MaxPool {
                    kernel: 2,
                    stride: 2,
                });
            }
            taps.push(layers.len() - 1);
            for l in &layers[layers.len() - if spec.pool { 3 } else { 2 }..] {
                shape = l.output_shape(&shape)?;
            }
        }
        layers.push(Layer::Flatten);
        let flat: usize = shape.iter().product();
        layers.push(Layer::Dense(DenseLayer::init(flat, spec.classes, &mut rng)));
        BackboneModel::new(layers, taps, spec.input.clone(), spec.classes)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn tap_indices(&self) -> &[usize] {
        &self.taps
    }

    /// Number of taps `M`.
    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Per-sample activation shape at every tap.
    pub fn tap_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .expect("validated at construction");
            if self.taps.contains(&i) {
                out.push(shape.clone());
            }
        }
        out
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            let mut want = vec![s.first().copied().unwrap_or(0)];
            want.extend_from_slice(&self.input_shape);
            return Err(Error::dims("backbone", s, &want));
        }
        Ok(())
    }

    /// Layer index range of segment `m` (0-based): up to and including tap
    /// `m`, or the tail after the last tap when `m == M`.
    pub fn segment(&self, m: usize) -> std::ops::Range<usize> {
        let start = if m == 0 { 0 } else { self.taps[m - 1] + 1 };
        let end = if m < self.taps.len() {
            self.taps[m] + 1
        } else {
            self.layers.len()
        };
        start..end
    }

    /// Runs layers `range` on `x`. Parameters are bound as constants unless
    /// `trainable` is set.
    pub fn forward_layers(
        &self,
        g: &mut Graph,
        x: Var,
        range: std::ops::Range<usize>,
        trainable: bool,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers[range] {
            let bound = layer.bind(g, trainable);
            h = bound.forward(g, h)?;
        }
        Ok(h)
    }

    /// One pass that records the activation at every tap and the logits.
    pub fn forward_with_taps(&self, g: &mut Graph, x: Var) -> Result<TapActivations> {
        self.check_input(g, x)?;
        let mut taps = Vec::with_capacity(self.taps.len());
        let mut h = x;
        for m in 0..=self.taps.len() {
            h = self.forward_layers(g, h, self.segment(m), false)?;
            if m < self.taps.len() {
                taps.push(h);
            }
        }
        Ok(TapActivations { taps, logits: h })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        self.forward_layers(g, x, 0..self.layers.len(), false)
    }

    /// Logits for a batch, outside of any caller graph.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    /// FLOPs of the backbone up to and including tap `m` (1-based); `M + 1`
    /// returns the full network.
    pub fn prefix_flops(&self, m: usize) -> Result<u64> {
        let m_max = self.taps.len();
        if m == 0 || m > m_max + 1 {
            return Err(Error::Index {
                what: "tap",
                index: m,
                valid: format!("1..={}", m_max + 1),
            });
        }
        let end = if m <= m_max {
            self.taps[m - 1] + 1
        } else {
            self.layers.len()
        };
        sequence_flops(&self.layers[..end], &self.input_shape)
    }

    pub fn full_flops(&self) -> u64 {
        self.prefix_flops(self.taps.len() + 1)
            .expect("validated at construction")
    }

    /// Named parameters, `backbone.{layer}.{name}`.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(move |(n, t)| (format!("backbone.{i}.{n}"), t))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Replaces every parameter by name and freezes the model.
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
        self.frozen = true;
        Ok(())
    }

    /// Little-endian bytes of every parameter, for immutability checks.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.named_params()
            .iter()
            .flat_map(|(_, t)| t.to_le_bytes())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

/// Trains all backbone parameters by minibatch descent on cross-entropy and
/// freezes the result.
pub fn pretrain_backbone(
    model: BackboneModel,
    dataset: &Dataset,
    cfg: &PretrainConfig,
) -> Result<BackboneModel> {
    if dataset.num_classes() != model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, backbone {}",
            dataset.num_classes(),
            model.num_classes()
        )));
    }
    let targets = Targets::Hard(dataset.labels().to_vec());
    fit_backbone(model, dataset.inputs(), &targets, cfg).map(|(m, _)| m)
}

/// Minibatch training on arbitrary targets; returns the frozen model and
/// the mean loss of every epoch.
pub fn fit_backbone(
    mut model: BackboneModel,
    inputs: &Tensor,
    targets: &Targets,
    cfg: &PretrainConfig,
) -> Result<(BackboneModel, Vec<f64>)> {
    if model.frozen {
        return Err(Error::Config(
            "backbone is frozen; its weights are not modified".into(),
        ));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("invalid pretrain config {cfg:?}")));
    }
    let n = targets.len();
    let mut opt = {
        let params: Vec<&Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
        Optimizer::new(cfg.optimizer, &params)
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.lr, epoch);
        let order = Rng::derive(cfg.seed, epoch as u64).permutation(n);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let x = g.constant(inputs.select_rows(chunk));
            let mut h = x;
            let mut vars = Vec::new();
            for layer in &model.layers {
                let bound: BoundLayer = layer.bind(&mut g, true);
                vars.extend(bound.vars());
                h = bound.forward(&mut g, h)?;
            }
            let lp = g.log_softmax(h)?;
            let loss = nll_loss(&mut g, lp, &targets.select(chunk))?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::training(
                    "pretrain",
                    format!("epoch {epoch}: loss is {value}"),
                ));
            }
            total += value * chunk.len() as f64;
            let grads = g.backward(loss)?;
            let gs: Vec<Option<&[f64]>> = vars.iter().map(|&v| grads.get_slice(v)).collect();
            opt.step(&mut model.params_mut(), &gs, lr)?;
        }
        history.push(total / n as f64);
    }
    model.freeze();
    Ok((model, history))
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(model: &BackboneModel, dataset: &Dataset) -> Result<f64> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = dataset.batch(chunk);
        let logits = model.predict_logits(&x)?;
        for (r, &label) in y.iter().enumerate() {
            if crate::tensor::argmax(logits.row(r)) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}
