//! Per-stage weighted ensembles over the heads seen so far.
//!
//! Stage `m` combines heads `1..=m` as
//! `q_i ∝ b_i · Π_j p_{j,i}^{w_j}`, evaluated in log space, with
//! `w = softplus(raw_w)` and `b = softplus(raw_b)` so both stay positive.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{nll_loss, Targets};
use crate::optim::{LrSchedule, Optimizer, OptimizerKind};
use crate::tensor::{logsumexp, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    Geometric,
    Additive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleParams {
    stage: usize,
    /// `[m]`
    pub raw_w: Tensor,
    /// `[K]`
    pub raw_b: Tensor,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    // ln(e^y − 1), rearranged to stay finite for large y
    y + (-(-y).exp_m1()).ln()
}

impl EnsembleParams {
    /// Unweighted geometric mean with a uniform prior.
    pub fn new(stage: usize, num_classes: usize) -> Result<Self> {
        if stage == 0 || num_classes < 2 {
            return Err(Error::Config(format!(
                "ensemble needs stage >= 1 and >= 2 classes, got stage {stage}, {num_classes} classes"
            )));
        }
        Ok(EnsembleParams {
            stage,
            raw_w: Tensor::full(&[stage], softplus_inv(1.0 / stage as f64)),
            raw_b: Tensor::full(&[num_classes], softplus_inv(1.0 / num_classes as f64)),
        })
    }

    /// Parameters whose effective weights and priors are `w` and `b`.
    pub fn from_effective(w: &[f64], b: &[f64]) -> Result<Self> {
        if w.is_empty() || b.len() < 2 || w.iter().chain(b).any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!(
                "effective weights must be positive: w={w:?} b={b:?}"
            )));
        }
        Ok(EnsembleParams {
            stage: w.len(),
            raw_w: Tensor::vector(w.iter().map(|&v| softplus_inv(v)).collect()),
            raw_b: Tensor::vector(b.iter().map(|&v| softplus_inv(v)).collect()),
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn num_classes(&self) -> usize {
        self.raw_b.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.raw_w.data().iter().map(|&v| softplus(v)).collect()
    }

    pub fn priors(&self) -> Vec<f64> {
        self.raw_b.data().iter().map(|&v| softplus(v)).collect()
    }

    fn check(&self, m: usize, k: usize) -> Result<()> {
        if m != self.stage {
            return Err(Error::Stage {
                expected: self.stage,
                got: m,
            });
        }
        if k != self.num_classes() {
            return Err(Error::dims("ensemble", &[k], self.raw_b.shape()));
        }
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            (format!("ens{}.raw_w", self.stage), &self.raw_w),
            (format!("ens{}.raw_b", self.stage), &self.raw_b),
        ]
    }

    /// FLOPs of one stage evaluation per sample: the weighted log-sum with
    /// prior, then normalization.
    pub fn flops(&self) -> u64 {
        let (m, k) = (self.stage as u64, self.num_classes() as u64);
        2 * m * k + 3 * k
    }
}

/// Log of the geometric combination for one sample. `log_p[j]` is the
/// log-distribution of head `j + 1`.
pub fn geometric_log_combine(log_p: &[&[f64]], params: &EnsembleParams) -> Result<Vec<f64>> {
    let k = log_p.first().map_or(0, |r| r.len());
    params.check(log_p.len(), k)?;
    if log_p.iter().any(|r| r.len() != k) {
        return Err(Error::shape(
            "geometric_combine",
            "head distributions differ in length",
        ));
    }
    let w = params.weights();
    let b = params.priors();
    let s: Vec<f64> = (0..k)
        .map(|i| b[i].ln() + log_p.iter().zip(&w).map(|(lp, wj)| wj * lp[i]).sum::<f64>())
        .collect();
    let z = logsumexp(&s);
    Ok(s.iter().map(|v| v - z).collect())
}

pub fn geometric_combine(log_p: &[&[f64]], params: &EnsembleParams) -> Result<Vec<f64>> {
    Ok(geometric_log_combine(log_p, params)?
        .iter()
        .map(|v| v.exp())
        .collect())
}

/// `q_i ∝ Σ_j w_j p_{j,i} + b_i`.
pub fn additive_combine(p: &[&[f64]], params: &EnsembleParams) -> Result<Vec<f64>> {
    let k = p.first().map_or(0, |r| r.len());
    params.check(p.len(), k)?;
    if p.iter().any(|r| r.len() != k) {
        return Err(Error::shape(
            "additive_combine",
            "head distributions differ in length",
        ));
    }
    let w = params.weights();
    let b = params.priors();
    let s: Vec<f64> = (0..k)
        .map(|i| b[i] + p.iter().zip(&w).map(|(pj, wj)| wj * pj[i]).sum::<f64>())
        .collect();
    let z: f64 = s.iter().sum();
    Ok(s.iter().map(|v| v / z).collect())
}

/// Log-distribution of stage `params.stage()` for sample `n` of cached
/// head log-probs.
pub fn combine_cached(
    kind: EnsembleKind,
    head_log_probs: &[Tensor],
    n: usize,
    params: &EnsembleParams,
) -> Result<Vec<f64>> {
    let rows: Vec<&[f64]> = head_log_probs.iter().map(|t| t.row(n)).collect();
    combine_rows(kind, &rows, params)
}

/// Log-distribution of stage `params.stage()` from the first `m` head
/// log-distributions of one sample.
pub fn combine_rows<R: AsRef<[f64]>>(
    kind: EnsembleKind,
    head_lp: &[R],
    params: &EnsembleParams,
) -> Result<Vec<f64>> {
    let m = params.stage();
    if head_lp.len() < m {
        return Err(Error::Stage {
            expected: m,
            got: head_lp.len(),
        });
    }
    let rows: Vec<&[f64]> = head_lp[..m].iter().map(AsRef::as_ref).collect();
    match kind {
        EnsembleKind::Geometric => geometric_log_combine(&rows, params),
        EnsembleKind::Additive => {
            let probs: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().map(|v| v.exp()).collect())
                .collect();
            let refs: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
            Ok(additive_combine(&refs, params)?
                .iter()
                .map(|v| v.ln())
                .collect())
        }
    }
}

/// Head log-probs of stages `1..=m` laid out as `[N·K, m]`.
pub fn stack_log_probs(head_log_probs: &[Tensor], m: usize) -> Result<Tensor> {
    let first = head_log_probs
        .first()
        .ok_or_else(|| Error::Config("no head outputs".into()))?;
    let (n, k) = (first.shape()[0], first.shape()[1]);
    if head_log_probs.len() < m || head_log_probs[..m].iter().any(|t| t.shape() != [n, k]) {
        return Err(Error::shape(
            "stack_log_probs",
            "head outputs must share [N, K]",
        ));
    }
    let mut data = Vec::with_capacity(n * k * m);
    for r in 0..n * k {
        for t in &head_log_probs[..m] {
            data.push(t.data()[r]);
        }
    }
    Tensor::new(vec![n * k, m], data)
}

/// Stage log-distributions `[N, K]` in a graph, from stacked head log-probs
/// `[N·K, m]` and bound raw parameters.
pub fn ensemble_log_probs(
    g: &mut Graph,
    kind: EnsembleKind,
    stacked: Var,
    raw_w: Var,
    raw_b: Var,
    n: usize,
    k: usize,
) -> Result<Var> {
    let m = g.shape(raw_w)[0];
    let w = g.softplus(raw_w);
    let w = g.reshape(w, &[m, 1])?;
    let b = g.softplus(raw_b);
    let s = match kind {
        EnsembleKind::Geometric => {
            let ws = g.matmul(stacked, w)?;
            let ws = g.reshape(ws, &[n, k])?;
            let lb = g.ln(b);
            g.add(ws, lb)?
        }
        EnsembleKind::Additive => {
            let p = g.exp(stacked);
            let ws = g.matmul(p, w)?;
            let ws = g.reshape(ws, &[n, k])?;
            let total = g.add(ws, b)?;
            g.ln(total)
        }
    };
    g.log_softmax(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTrainConfig {
    pub kind: EnsembleKind,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
}

impl Default for EnsembleTrainConfig {
    fn default() -> Self {
        EnsembleTrainConfig {
            kind: EnsembleKind::Geometric,
            epochs: 500,
            lr: 1.0,
            optimizer: OptimizerKind::sgd(),
            schedule: LrSchedule::Cosine { total: 500 },
        }
    }
}

/// Mean loss of stage `params` on cached head outputs.
pub fn ensemble_loss(
    kind: EnsembleKind,
    head_log_probs: &[Tensor],
    targets: &Targets,
    params: &EnsembleParams,
) -> Result<f64> {
    let stacked = stack_log_probs(head_log_probs, params.stage())?;
    let (n, k) = (head_log_probs[0].shape()[0], head_log_probs[0].shape()[1]);
    let mut g = Graph::new();
    let s = g.constant(stacked);
    let w = g.constant(params.raw_w.clone());
    let b = g.constant(params.raw_b.clone());
    let lp = ensemble_log_probs(&mut g, kind, s, w, b, n, k)?;
    let loss = nll_loss(&mut g, lp, targets)?;
    Ok(g.value(loss).item())
}

/// Full-batch training of one stage on frozen cached head log-probs.
pub fn train_stage(
    stage: usize,
    head_log_probs: &[Tensor],
    targets: &Targets,
    cfg: &EnsembleTrainConfig,
) -> Result<(EnsembleParams, Vec<f64>)> {
    let (n, k) = (head_log_probs[0].shape()[0], head_log_probs[0].shape()[1]);
    if targets.len() != n {
        return Err(Error::dims("train_ensembles", &[targets.len()], &[n]));
    }
    let stacked = stack_log_probs(head_log_probs, stage)?;
    let mut params = EnsembleParams::new(stage, k)?;
    let mut opt = Optimizer::new(cfg.optimizer, &[&params.raw_w, &params.raw_b]);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut g = Graph::new();
        let s = g.constant(stacked.clone());
        let w = g.param(params.raw_w.clone());
        let b = g.param(params.raw_b.clone());
        let lp = ensemble_log_probs(&mut g, cfg.kind, s, w, b, n, k)?;
        let loss = nll_loss(&mut g, lp, targets)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::training(
                format!("ensemble stage {stage}"),
                format!("epoch {epoch}: loss is {value}"),
            ));
        }
        history.push(value);
        let grads = g.backward(loss)?;
        let lr = cfg.schedule.lr_at(cfg.lr, epoch);
        opt.step(
            &mut [&mut params.raw_w, &mut params.raw_b],
            &[grads.get_slice(w), grads.get_slice(b)],
            lr,
        )?;
    }
    Ok((params, history))
}

/// Trains stages `1..=M` independently (in parallel) on cached head
/// log-probs `head_log_probs[m]` of shape `[N, K]`.
pub fn train_ensembles(
    head_log_probs: &[Tensor],
    targets: &Targets,
    cfg: &EnsembleTrainConfig,
) -> Result<Vec<EnsembleParams>> {
    if head_log_probs.is_empty() {
        return Err(Error::Config("no head outputs to ensemble".into()));
    }
    (1..=head_log_probs.len())
        .into_par_iter()
        .map(|m| train_stage(m, head_log_probs, targets, cfg).map(|(p, _)| p))
        .collect()
}

/// Writes cached head outputs as `sample_id,head,class,log_prob`, heads
/// numbered from 1.
pub fn write_log_prob_csv<W: Write>(mut out: W, head_log_probs: &[Tensor]) -> std::io::Result<()> {
    writeln!(out, "sample_id,head,class,log_prob")?;
    if let Some(first) = head_log_probs.first() {
        let k = first.last_dim();
        for n in 0..first.len() / k {
            for (m, t) in head_log_probs.iter().enumerate() {
                for (c, v) in t.row(n).iter().enumerate() {
                    writeln!(out, "{n},{},{c},{v}", m + 1)?;
                }
            }
        }
    }
    Ok(())
}
