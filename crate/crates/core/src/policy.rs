//! Exit policies and the per-sample early-exit evaluator.

use std::io::Write;

use rayon::prelude::*;

use crate::bundle::{CostTable, ModelBundle};
use crate::data::Dataset;
use crate::ensemble::combine_rows;
use crate::error::{Error, Result};
use crate::heads::BoundHead;
use crate::tensor::{argmax, log_softmax_row, softmax_row, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExitIndex {
    /// 1-based head index.
    Head(usize),
    Final,
}

impl ExitIndex {
    /// Position on the exit axis: `m` for head `m`, `M + 1` for the end.
    pub fn ordinal(self, num_heads: usize) -> usize {
        match self {
            ExitIndex::Head(m) => m,
            ExitIndex::Final => num_heads + 1,
        }
    }
}

impl std::fmt::Display for ExitIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExitIndex::Head(m) => write!(f, "{m}"),
            ExitIndex::Final => f.write_str("final"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitDecision {
    pub exit: ExitIndex,
    pub pred: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    /// Exit at the first stage whose top probability exceeds `tau`.
    Threshold { tau: f64 },
    /// Exit once `t` preceding heads agree with the current one.
    Patience { t: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbSource {
    Heads,
    Ensembles,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub source: ProbSource,
}

impl PolicyConfig {
    pub fn threshold(tau: f64, source: ProbSource) -> Self {
        PolicyConfig {
            kind: PolicyKind::Threshold { tau },
            source,
        }
    }

    pub fn patience(t: usize) -> Self {
        PolicyConfig {
            kind: PolicyKind::Patience { t },
            source: ProbSource::Heads,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            PolicyKind::Patience { t: 0 } => {
                Err(Error::Config("patience must be at least 1".into()))
            }
            PolicyKind::Patience { .. } if self.source != ProbSource::Heads => {
                Err(Error::Config("patience reads head predictions only".into()))
            }
            PolicyKind::Threshold { tau } if tau.is_nan() => {
                Err(Error::Config("threshold is NaN".into()))
            }
            _ => Ok(()),
        }
    }

    /// Whether ensemble stages are evaluated (and charged) on the way.
    pub fn uses_ensembles(&self) -> bool {
        self.source == ProbSource::Ensembles
    }
}

fn check_costs(num_heads: usize, costs: &[u64]) -> Result<()> {
    if costs.len() != num_heads + 1 {
        return Err(Error::Config(format!(
            "cost table has {} entries, expected {} for {num_heads} heads",
            costs.len(),
            num_heads + 1
        )));
    }
    if costs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "costs must be strictly increasing: {costs:?}"
        )));
    }
    Ok(())
}

fn threshold_hit(dist: &[f64], tau: f64) -> bool {
    dist.iter().copied().fold(f64::NEG_INFINITY, f64::max) > tau
}

/// Exits at the first stage whose top probability is strictly above `tau`,
/// otherwise falls through to the backbone's prediction.
pub fn run_threshold_exit(
    dists: &[Vec<f64>],
    final_logits: &[f64],
    tau: f64,
    costs: &[u64],
) -> Result<ExitDecision> {
    check_costs(dists.len(), costs)?;
    for (i, d) in dists.iter().enumerate() {
        if threshold_hit(d, tau) {
            return Ok(ExitDecision {
                exit: ExitIndex::Head(i + 1),
                pred: argmax(d),
                flops: costs[i],
            });
        }
    }
    Ok(ExitDecision {
        exit: ExitIndex::Final,
        pred: argmax(final_logits),
        flops: costs[dists.len()],
    })
}

fn patience_hit(preds: &[usize], m: usize, t: usize) -> bool {
    m > t && preds[m - 1 - t..m].iter().all(|&p| p == preds[m - 1])
}

/// Exits at the first head `m > t` whose prediction equals those of the
/// `t` heads before it.
pub fn run_patience_exit(
    preds: &[usize],
    final_pred: usize,
    t: usize,
    costs: &[u64],
) -> Result<ExitDecision> {
    if t == 0 {
        return Err(Error::Config("patience must be at least 1".into()));
    }
    check_costs(preds.len(), costs)?;
    for m in 1..=preds.len() {
        if patience_hit(preds, m, t) {
            return Ok(ExitDecision {
                exit: ExitIndex::Head(m),
                pred: preds[m - 1],
                flops: costs[m - 1],
            });
        }
    }
    Ok(ExitDecision {
        exit: ExitIndex::Final,
        pred: final_pred,
        flops: costs[preds.len()],
    })
}

/// Outputs of one stage of inference for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub head_log_probs: Vec<f64>,
    pub ensemble_log_probs: Option<Vec<f64>>,
}

/// Runs a bundle on one sample one stage at a time, so evaluation can stop
/// at any head without touching later layers.
pub struct StageRunner<'a> {
    bundle: &'a ModelBundle,
    with_ensembles: bool,
    g: Graph,
    h: Var,
    prev: Option<Var>,
    next: usize,
    head_lp: Vec<Vec<f64>>,
}

impl<'a> StageRunner<'a> {
    /// `x` is a batch of one: `[1, ...input_shape]`.
    pub fn new(bundle: &'a ModelBundle, x: Tensor, with_ensembles: bool) -> Result<Self> {
        if with_ensembles && bundle.ensembles.is_none() {
            return Err(Error::Config("bundle has no ensembles".into()));
        }
        let want: Vec<usize> = std::iter::once(1)
            .chain(bundle.backbone.input_shape().iter().copied())
            .collect();
        if x.shape() != want.as_slice() {
            return Err(Error::dims("stage runner", x.shape(), &want));
        }
        let mut g = Graph::new();
        let h = g.constant(x);
        Ok(StageRunner {
            bundle,
            with_ensembles,
            g,
            h,
            prev: None,
            next: 0,
            head_lp: Vec::new(),
        })
    }

    /// Stages completed so far.
    pub fn stage(&self) -> usize {
        self.next
    }

    /// Advances the backbone to the next tap and evaluates that head (and
    /// ensemble stage).
    pub fn step(&mut self) -> Result<StageOutput> {
        let m = self.next;
        if m >= self.bundle.num_heads() {
            return Err(Error::Index {
                what: "stage",
                index: m + 1,
                valid: format!("1..={}", self.bundle.num_heads()),
            });
        }
        let bb = &self.bundle.backbone;
        self.h = bb.forward_layers(&mut self.g, self.h, bb.segment(m), false)?;
        let head: BoundHead = self.bundle.heads[m].bind(&mut self.g, false);
        let prev = if self.bundle.heads[m].expects_cascade() {
            self.prev
        } else {
            None
        };
        let logits = head
            .forward(&mut self.g, self.h, prev, true)
            .map_err(|e| Error::Head {
                head: m + 1,
                source: Box::new(e),
            })?;
        self.prev = Some(logits);
        let lp = log_softmax_row(self.g.value(logits).data());
        self.head_lp.push(lp.clone());
        let ens = if self.with_ensembles {
            let e = self.bundle.ensembles.as_ref().expect("checked in new");
            Some(combine_rows(e.kind, &self.head_lp, &e.stages[m])?)
        } else {
            None
        };
        self.next += 1;
        Ok(StageOutput {
            head_log_probs: lp,
            ensemble_log_probs: ens,
        })
    }

    /// Runs the remaining backbone layers and returns the final logits.
    /// Heads not yet stepped are skipped.
    pub fn finish(mut self) -> Result<Vec<f64>> {
        let bb = &self.bundle.backbone;
        let start = bb.segment(self.next).start;
        let end = bb.layers().len();
        let out = bb.forward_layers(&mut self.g, self.h, start..end, false)?;
        Ok(self.g.value(out).data().to_vec())
    }
}

/// Per-sample evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTrace {
    pub sample_id: usize,
    pub exit: ExitIndex,
    pub pred: usize,
    pub label: usize,
    pub correct: bool,
    pub flops: u64,
    /// Distribution the decision was read from.
    pub dist: Vec<f64>,
}

/// Cost table matching what a policy evaluates.
pub fn policy_costs(bundle: &ModelBundle, policy: &PolicyConfig) -> Result<CostTable> {
    bundle.cost_table(policy.uses_ensembles())
}

fn sample(dataset: &Dataset, n: usize) -> Tensor {
    dataset.inputs().select_rows(&[n])
}

/// Early-exit inference on every sample: each sample runs stage by stage
/// and stops as soon as the policy fires.
pub fn evaluate_policy(
    dataset: &Dataset,
    bundle: &ModelBundle,
    policy: &PolicyConfig,
) -> Result<Vec<EvalTrace>> {
    policy.validate()?;
    let costs = policy_costs(bundle, policy)?;
    let m_total = bundle.num_heads();
    (0..dataset.len())
        .into_par_iter()
        .map(|n| {
            let label = dataset.labels()[n];
            let mut runner = StageRunner::new(bundle, sample(dataset, n), policy.uses_ensembles())?;
            let mut preds = Vec::with_capacity(m_total);
            for m in 1..=m_total {
                let out = runner.step()?;
                let lp = match policy.source {
                    ProbSource::Heads => out.head_log_probs,
                    ProbSource::Ensembles => out.ensemble_log_probs.expect("ensembles requested"),
                };
                let dist: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                let hit = match policy.kind {
                    PolicyKind::Threshold { tau } => threshold_hit(&dist, tau),
                    PolicyKind::Patience { t } => {
                        preds.push(argmax(&lp));
                        patience_hit(&preds, m, t)
                    }
                };
                if hit {
                    let pred = argmax(&lp);
                    return Ok(EvalTrace {
                        sample_id: n,
                        exit: ExitIndex::Head(m),
                        pred,
                        label,
                        correct: pred == label,
                        flops: costs.exits[m - 1],
                        dist,
                    });
                }
            }
            let logits = runner.finish()?;
            let pred = argmax(&logits);
            Ok(EvalTrace {
                sample_id: n,
                exit: ExitIndex::Final,
                pred,
                label,
                correct: pred == label,
                flops: costs.final_cost(),
                dist: softmax_row(&logits),
            })
        })
        .collect()
}

/// Every stage's outputs for one sample, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutputs {
    pub label: usize,
    pub head_log_probs: Vec<Vec<f64>>,
    pub ensemble_log_probs: Option<Vec<Vec<f64>>>,
    pub final_logits: Vec<f64>,
}

/// Runs every stage on every sample with the same stage runner the
/// early-exit evaluator uses, so cached decisions are bit-identical.
pub fn cache_outputs(dataset: &Dataset, bundle: &ModelBundle) -> Result<Vec<SampleOutputs>> {
    let with_ens = bundle.ensembles.is_some();
    (0..dataset.len())
        .into_par_iter()
        .map(|n| {
            let mut runner = StageRunner::new(bundle, sample(dataset, n), with_ens)?;
            let mut heads = Vec::new();
            let mut ens = Vec::new();
            for _ in 0..bundle.num_heads() {
                let out = runner.step()?;
                heads.push(out.head_log_probs);
                if let Some(e) = out.ensemble_log_probs {
                    ens.push(e);
                }
            }
            Ok(SampleOutputs {
                label: dataset.labels()[n],
                head_log_probs: heads,
                ensemble_log_probs: with_ens.then_some(ens),
                final_logits: runner.finish()?,
            })
        })
        .collect()
}

/// Applies a policy to cached outputs.
pub fn decide_cached(
    outputs: &[SampleOutputs],
    policy: &PolicyConfig,
    costs: &CostTable,
) -> Result<Vec<EvalTrace>> {
    policy.validate()?;
    outputs
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let lps = match policy.source {
                ProbSource::Heads => &s.head_log_probs,
                ProbSource::Ensembles => s
                    .ensemble_log_probs
                    .as_ref()
                    .ok_or_else(|| Error::Config("cached outputs lack ensembles".into()))?,
            };
            let dists: Vec<Vec<f64>> = lps
                .iter()
                .map(|r| r.iter().map(|v| v.exp()).collect())
                .collect();
            let d = match policy.kind {
                PolicyKind::Threshold { tau } => {
                    run_threshold_exit(&dists, &s.final_logits, tau, &costs.exits)?
                }
                PolicyKind::Patience { t } => {
                    let preds: Vec<usize> = lps.iter().map(|r| argmax(r)).collect();
                    run_patience_exit(&preds, argmax(&s.final_logits), t, &costs.exits)?
                }
            };
            let dist = match d.exit {
                ExitIndex::Head(m) => dists[m - 1].clone(),
                ExitIndex::Final => softmax_row(&s.final_logits),
            };
            Ok(EvalTrace {
                sample_id: n,
                exit: d.exit,
                pred: d.pred,
                label: s.label,
                correct: d.pred == s.label,
                flops: d.flops,
                dist,
            })
        })
        .collect()
}

/// Mean FLOPs and accuracy of a trace.
pub fn summarize(traces: &[EvalTrace]) -> (f64, f64) {
    let n = traces.len().max(1) as f64;
    let flops = traces.iter().map(|t| t.flops as f64).sum::<f64>() / n;
    let acc = traces.iter().filter(|t| t.correct).count() as f64 / n;
    (flops, acc)
}

pub fn write_trace_csv<W: Write>(mut out: W, traces: &[EvalTrace]) -> std::io::Result<()> {
    writeln!(out, "sample_id,exit_index,pred,label,correct,flops")?;
    for t in traces {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            t.sample_id, t.exit, t.pred, t.label, t.correct as u8, t.flops
        )?;
    }
    Ok(())
}
