//! Two-stage training on a frozen backbone: heads first, then per-stage
//! ensembles on the heads' cached outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backbone::{pretrain_backbone, BackboneModel, BackboneSpec, PretrainConfig};
use crate::bundle::{CostTable, Ensembles, ModelBundle};
use crate::checkpoint;
use crate::data::Dataset;
use crate::ensemble::{train_ensembles, EnsembleKind, EnsembleTrainConfig};
use crate::error::{Error, Result};
use crate::heads::{
    build_heads, cascade_forward_all, head_outputs_batched, BoundHead, HeadConfig,
    InternalClassifier,
};
use crate::nn::{nll_loss, Targets};
use crate::optim::{LrSchedule, Optimizer, OptimizerKind};
use crate::rng::Rng;
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub stop_gradient: bool,
    pub cascade: bool,
    /// `None` skips the ensemble stage.
    pub ensemble: Option<EnsembleKind>,
    pub ensemble_train: EnsembleTrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            lr: 1e-3,
            schedule: LrSchedule::Step {
                milestones: vec![15],
                factor: 0.1,
            },
            optimizer: OptimizerKind::adam(),
            seed: 0,
            stop_gradient: true,
            cascade: true,
            ensemble: Some(EnsembleKind::Geometric),
            ensemble_train: EnsembleTrainConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "invalid head training config: epochs {}, batch {}, lr {}",
                self.epochs, self.batch_size, self.lr
            )));
        }
        Ok(())
    }
}

/// Mean per-head loss of every epoch, `[epoch][head]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub head_losses: Vec<Vec<f64>>,
}

struct HeadPass {
    g: Graph,
    vars: Vec<Vec<Var>>,
    losses: Vec<Var>,
}

/// Builds the joint forward pass of all heads on one batch.
fn head_pass(
    backbone: &BackboneModel,
    heads: &[InternalClassifier],
    x: &Tensor,
    targets: &Targets,
    detach: bool,
) -> Result<HeadPass> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let taps = backbone.forward_with_taps(&mut g, xv)?;
    let bound: Vec<BoundHead> = heads.iter().map(|h| h.bind(&mut g, true)).collect();
    let logits = cascade_forward_all(&mut g, &bound, &taps.taps, detach)?;
    let mut losses = Vec::with_capacity(heads.len());
    for (m, &l) in logits.iter().enumerate() {
        let lp = g.log_softmax(l).map_err(|e| Error::Head {
            head: m + 1,
            source: Box::new(e),
        })?;
        losses.push(nll_loss(&mut g, lp, targets)?);
    }
    Ok(HeadPass {
        vars: bound.iter().map(BoundHead::vars).collect(),
        g,
        losses,
    })
}

fn total_loss(g: &mut Graph, losses: &[Var], active: &[bool]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&l, _) in losses.iter().zip(active).filter(|(_, &a)| a) {
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    total.ok_or_else(|| Error::Config("no active heads".into()))
}

/// Trains all heads jointly on `Σ_m L(p_m)` with the backbone held fixed.
/// With `cfg.stop_gradient`, cascade inputs pass values but no gradient.
pub fn train_heads(
    backbone: &BackboneModel,
    heads: Vec<InternalClassifier>,
    inputs: &Tensor,
    targets: &Targets,
    cfg: &TrainConfig,
) -> Result<(Vec<InternalClassifier>, TrainHistory)> {
    let active = vec![true; heads.len()];
    train_heads_masked(backbone, heads, inputs, targets, cfg, &active)
}

/// [`train_heads`] restricted to the heads flagged in `active`; the others
/// are left untouched.
pub fn train_heads_masked(
    backbone: &BackboneModel,
    mut heads: Vec<InternalClassifier>,
    inputs: &Tensor,
    targets: &Targets,
    cfg: &TrainConfig,
    active: &[bool],
) -> Result<(Vec<InternalClassifier>, TrainHistory)> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        return Err(Error::Config(
            "heads train on a frozen backbone only".into(),
        ));
    }
    if heads.len() != backbone.num_taps() || active.len() != heads.len() {
        return Err(Error::Config(format!(
            "{} heads ({} flags) for {} taps",
            heads.len(),
            active.len(),
            backbone.num_taps()
        )));
    }
    let n = targets.len();
    if inputs.shape()[0] != n {
        return Err(Error::dims("train_heads", &[inputs.shape()[0]], &[n]));
    }
    let mut opts: Vec<Optimizer> = heads
        .iter()
        .map(|h| {
            let ps: Vec<&Tensor> = h.named_params().into_iter().map(|(_, t)| t).collect();
            Optimizer::new(cfg.optimizer, &ps)
        })
        .collect();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.lr, epoch);
        let order = Rng::derive(cfg.seed, 0x7000 + epoch as u64).permutation(n);
        let mut sums = vec![0.0; heads.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let mut pass = head_pass(
                backbone,
                &heads,
                &inputs.select_rows(chunk),
                &targets.select(chunk),
                cfg.stop_gradient,
            )?;
            for (m, &l) in pass.losses.iter().enumerate() {
                let v = pass.g.value(l).item();
                if !v.is_finite() {
                    return Err(Error::training(
                        format!("heads, epoch {epoch}, head {}", m + 1),
                        format!("loss is {v}"),
                    ));
                }
                sums[m] += v * chunk.len() as f64;
            }
            let total = total_loss(&mut pass.g, &pass.losses, active)?;
            let grads = pass.g.backward(total)?;
            for (m, head) in heads.iter_mut().enumerate() {
                if !active[m] {
                    continue;
                }
                let gs: Vec<Option<&[f64]>> =
                    pass.vars[m].iter().map(|&v| grads.get_slice(v)).collect();
                opts[m].step(&mut head.params_mut(), &gs, lr)?;
            }
        }
        history
            .head_losses
            .push(sums.iter().map(|s| s / n as f64).collect());
    }
    Ok((heads, history))
}

fn flat_grad(grads: &Gradients, vars: &[Var]) -> Vec<f64> {
    vars.iter()
        .flat_map(|&v| grads.get_or_zeros(v).into_data())
        .collect()
}

/// Per-head parameter gradients of the summed loss of the heads in
/// `losses_from` (1-based indices), on one batch.
pub fn head_gradients(
    backbone: &BackboneModel,
    heads: &[InternalClassifier],
    x: &Tensor,
    targets: &Targets,
    detach: bool,
    losses_from: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut pass = head_pass(backbone, heads, x, targets, detach)?;
    let active: Vec<bool> = (1..=heads.len())
        .map(|m| losses_from.contains(&m))
        .collect();
    let total = total_loss(&mut pass.g, &pass.losses, &active)?;
    let grads = pass.g.backward(total)?;
    Ok(pass.vars.iter().map(|vs| flat_grad(&grads, vs)).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// For every head `j`, the cosine between the gradient of the total loss
/// and the gradient of head `j`'s own loss, both taken with respect to
/// head `j`'s parameters.
pub fn grad_cosine_diagnostic(
    backbone: &BackboneModel,
    heads: &[InternalClassifier],
    x: &Tensor,
    targets: &Targets,
    detach: bool,
) -> Result<Vec<f64>> {
    let all: Vec<usize> = (1..=heads.len()).collect();
    let total = head_gradients(backbone, heads, x, targets, detach, &all)?;
    let mut out = Vec::with_capacity(heads.len());
    for j in 1..=heads.len() {
        let own = head_gradients(backbone, heads, x, targets, detach, &[j])?;
        out.push(cosine(&total[j - 1], &own[j - 1]).ok_or(Error::UndefinedCosine { head: j })?);
    }
    Ok(out)
}

/// Everything needed to build and train a bundle from scratch.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub backbone: BackboneSpec,
    pub pretrain: PretrainConfig,
    pub heads: HeadConfig,
    pub train: TrainConfig,
    /// Batch size for cached forward passes.
    pub eval_batch: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub bundle: ModelBundle,
    pub history: TrainHistory,
    /// Cached head log-probs on the training set, `[m][N, K]`.
    pub train_log_probs: Vec<Tensor>,
}

/// Builds the untrained bundle architecture for `cfg` (used to load
/// checkpoints).
pub fn architecture(cfg: &PipelineConfig) -> Result<ModelBundle> {
    let backbone = BackboneModel::from_spec(&cfg.backbone, cfg.pretrain.seed)?;
    let heads = build_heads(&backbone, &head_config(cfg))?;
    let ensembles = cfg.train.ensemble.map(|kind| Ensembles {
        kind,
        stages: (1..=heads.len())
            .map(|m| {
                crate::ensemble::EnsembleParams::new(m, backbone.num_classes())
                    .expect("valid stage")
            })
            .collect(),
    });
    ModelBundle::new(backbone, heads, ensembles)
}

fn head_config(cfg: &PipelineConfig) -> HeadConfig {
    HeadConfig {
        cascade: cfg.train.cascade,
        seed: cfg.train.seed,
        ..cfg.heads.clone()
    }
}

/// Pretrains (unless a frozen backbone is given), trains heads, then
/// trains ensembles on the heads' cached training-set outputs.
pub fn train_full_pipeline(
    train: &Dataset,
    cfg: &PipelineConfig,
    pretrained: Option<BackboneModel>,
) -> Result<PipelineOutput> {
    let backbone = match pretrained {
        Some(b) if b.is_frozen() => b,
        Some(_) => return Err(Error::Config("supplied backbone is not frozen".into())),
        None => {
            let model = BackboneModel::from_spec(&cfg.backbone, cfg.pretrain.seed)?;
            pretrain_backbone(model, train, &cfg.pretrain)
                .map_err(|e| stage_error("pretrain", e))?
        }
    };
    let heads = build_heads(&backbone, &head_config(cfg))?;
    let targets = Targets::Hard(train.labels().to_vec());
    let (heads, history) = train_heads(&backbone, heads, train.inputs(), &targets, &cfg.train)
        .map_err(|e| stage_error("heads", e))?;
    let cached = head_outputs_batched(&backbone, &heads, train.inputs(), cfg.eval_batch)?;
    let ensembles = match cfg.train.ensemble {
        Some(kind) => {
            let ecfg = EnsembleTrainConfig {
                kind,
                ..cfg.train.ensemble_train.clone()
            };
            let stages = train_ensembles(&cached.log_probs, &targets, &ecfg)
                .map_err(|e| stage_error("ensembles", e))?;
            Some(Ensembles { kind, stages })
        }
        None => None,
    };
    Ok(PipelineOutput {
        bundle: ModelBundle::new(backbone, heads, ensembles)?,
        history,
        train_log_probs: cached.log_probs,
    })
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Training { stage: s, msg } => Error::Training {
            stage: format!("{stage}: {s}"),
            msg,
        },
        other => other,
    }
}

/// Ordered `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// Writes `model.ckpt` and returns its path.
pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("model.ckpt");
    checkpoint::save(&path, &bundle.named_tensors())?;
    Ok(path)
}

/// Cost table summary lines for a manifest.
pub fn cost_lines(costs: &CostTable, manifest: &mut Manifest, prefix: &str) {
    for (i, c) in costs.exits.iter().enumerate() {
        let key = if i + 1 == costs.exits.len() {
            format!("{prefix}.final")
        } else {
            format!("{prefix}.exit{}", i + 1)
        };
        manifest.push(key, c);
    }
}
