//! Command bodies shared by the binary and the tests.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use ztw_core::bundle::ModelBundle;
use ztw_core::checkpoint;
use ztw_core::data::Dataset;
use ztw_core::ensemble::ensemble_loss;
use ztw_core::metrics::{
    default_grid, hindsight_improvability, parse_grid, read_frontier_csv, render_budget_table,
    sweep_frontier, write_frontier_csv, write_hi_csv, Budget, CorrectnessMatrix, FrontierPoint,
};
use ztw_core::nn::Targets;
use ztw_core::policy::{
    cache_outputs, evaluate_policy, policy_costs, summarize, write_trace_csv, PolicyConfig,
    ProbSource, SampleOutputs,
};
use ztw_core::rl::{
    base_policy_returns, clone_expert, distill_heads, eval_return_vs_cost, write_return_csv,
    ExpertPolicy, ReturnPoint, ToyEnv,
};
use ztw_core::tensor::argmax;
use ztw_core::trainer::{architecture, cost_lines, save_bundle, train_full_pipeline, Manifest};
use ztw_core::{Error, Result, Tensor};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoCascade,
    NoEnsemble,
    NoStopGrad,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "no-cascade" => Ok(Ablation::NoCascade),
            "no-ensemble" => Ok(Ablation::NoEnsemble),
            "no-stopgrad" => Ok(Ablation::NoStopGrad),
            _ => Err(Error::Config(format!("unknown ablation `{s}`"))),
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        let (k, v) = match self {
            Ablation::NoCascade => ("trainer.cascade", "false"),
            Ablation::NoEnsemble => ("trainer.ensemble_kind", "none"),
            Ablation::NoStopGrad => ("trainer.stop_gradient", "false"),
        };
        cfg.set(k, v).expect("known key");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyName {
    Ztw,
    Sdn,
    Pbee,
}

impl PolicyName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ztw" => Ok(PolicyName::Ztw),
            "sdn" => Ok(PolicyName::Sdn),
            "pbee" => Ok(PolicyName::Pbee),
            _ => Err(Error::Config(format!(
                "unknown policy `{s}` (ztw, sdn or pbee)"
            ))),
        }
    }

    /// Policy at grid value `v`: a threshold, or a patience count for PBEE.
    pub fn at(self, v: f64) -> Result<PolicyConfig> {
        Ok(match self {
            PolicyName::Ztw => PolicyConfig::threshold(v, ProbSource::Ensembles),
            PolicyName::Sdn => PolicyConfig::threshold(v, ProbSource::Heads),
            PolicyName::Pbee => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "patience {v} is not a positive integer"
                    )));
                }
                PolicyConfig::patience(v as usize)
            }
        })
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn csv<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    body(&mut buf).expect("writing to memory");
    write(path, buf)
}

/// Accuracy and loss figures from a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub base_test_accuracy: f64,
    pub head_test_accuracy: Vec<f64>,
    pub ensemble_test_accuracy: Vec<f64>,
    pub head_train_loss: Vec<f64>,
    pub ensemble_train_loss: Vec<f64>,
    pub checkpoint: PathBuf,
}

fn accuracy_of(outputs: &[SampleOutputs], pick: impl Fn(&SampleOutputs) -> &[f64]) -> f64 {
    outputs
        .iter()
        .filter(|o| argmax(pick(o)) == o.label)
        .count() as f64
        / outputs.len() as f64
}

fn mean_nll(log_probs: &Tensor, labels: &[usize]) -> f64 {
    let k = log_probs.shape()[1];
    -labels
        .iter()
        .enumerate()
        .map(|(n, &y)| log_probs.data()[n * k + y])
        .sum::<f64>()
        / labels.len() as f64
}

/// Trains a bundle and writes `config.txt`, `model.ckpt`, `train_log.csv`
/// and `manifest.txt` under `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    let (train_set, test_set) = cfg.datasets()?;
    let pipeline = cfg.pipeline(train_set.sample_shape(), train_set.num_classes())?;
    create_dir(out)?;
    write(&out.join(CONFIG_FILE), cfg.render())?;
    let result = train_full_pipeline(&train_set, &pipeline, None)?;
    let ckpt = save_bundle(&result.bundle, out)?;

    let m_total = result.bundle.num_heads();
    csv(&out.join("train_log.csv"), |w| {
        use std::io::Write;
        let heads: Vec<String> = (1..=m_total).map(|m| format!("head{m}")).collect();
        writeln!(w, "epoch,{}", heads.join(","))?;
        for (e, row) in result.history.head_losses.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{},{}", e + 1, cells.join(","))?;
        }
        Ok(())
    })?;

    let labels = train_set.labels();
    let head_train_loss: Vec<f64> = result
        .train_log_probs
        .iter()
        .map(|lp| mean_nll(lp, labels))
        .collect();
    let targets = Targets::Hard(labels.to_vec());
    let ensemble_train_loss = match &result.bundle.ensembles {
        Some(ens) => ens
            .stages
            .iter()
            .map(|p| ensemble_loss(ens.kind, &result.train_log_probs, &targets, p))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let outputs = cache_outputs(&test_set, &result.bundle)?;
    let head_test_accuracy = (0..m_total)
        .map(|m| accuracy_of(&outputs, |o| &o.head_log_probs[m]))
        .collect();
    let ensemble_test_accuracy = match result.bundle.ensembles {
        Some(_) => (0..m_total)
            .map(|m| {
                accuracy_of(&outputs, |o| {
                    &o.ensemble_log_probs.as_ref().expect("ensembles")[m]
                })
            })
            .collect(),
        None => Vec::new(),
    };
    let report = TrainReport {
        base_test_accuracy: accuracy_of(&outputs, |o| &o.final_logits),
        head_test_accuracy,
        ensemble_test_accuracy,
        head_train_loss,
        ensemble_train_loss,
        checkpoint: ckpt.clone(),
    };

    let mut man = Manifest::default();
    man.push("command", "train");
    man.push("seed", cfg.seed()?);
    man.push("dataset.train.sha256", train_set.hash());
    man.push("dataset.test.sha256", test_set.hash());
    man.push("dataset.train.samples", train_set.len());
    man.push("dataset.test.samples", test_set.len());
    man.push("checkpoint.sha256", sha256_file(&ckpt)?);
    man.push("test_accuracy.base", report.base_test_accuracy);
    for (m, a) in report.head_test_accuracy.iter().enumerate() {
        man.push(format!("test_accuracy.head{}", m + 1), a);
    }
    for (m, a) in report.ensemble_test_accuracy.iter().enumerate() {
        man.push(format!("test_accuracy.ensemble{}", m + 1), a);
    }
    for (m, l) in report.head_train_loss.iter().enumerate() {
        man.push(format!("train_loss.head{}", m + 1), l);
    }
    for (m, l) in report.ensemble_train_loss.iter().enumerate() {
        man.push(format!("train_loss.ensemble{}", m + 1), l);
    }
    man.push("flops.backbone", result.bundle.backbone.full_flops());
    cost_lines(&result.bundle.cost_table(false)?, &mut man, "flops.heads");
    if result.bundle.ensembles.is_some() {
        cost_lines(
            &result.bundle.cost_table(true)?,
            &mut man,
            "flops.ensembles",
        );
    }
    man.write(&out.join("manifest.txt"))?;
    Ok(report)
}

/// A trained run: its configuration and restored bundle.
pub struct LoadedRun {
    pub config: RunConfig,
    pub bundle: ModelBundle,
}

/// Restores a bundle from a checkpoint and the `config.txt` beside it.
pub fn load_run(checkpoint: &Path) -> Result<LoadedRun> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::Io {
        path: cfg_path.clone(),
        source: e,
    })?;
    let config = RunConfig::parse(&text)?;
    let (train_set, _) = config.datasets()?;
    let pipeline = config.pipeline(train_set.sample_shape(), train_set.num_classes())?;
    let mut bundle = architecture(&pipeline)?;
    bundle.load_tensors(checkpoint::load(checkpoint)?)?;
    bundle.backbone.freeze();
    Ok(LoadedRun { config, bundle })
}

/// `train` or `test` split of the run's dataset.
pub fn dataset_for(cfg: &RunConfig, which: &str) -> Result<Dataset> {
    let (train, test) = cfg.datasets()?;
    match which {
        "train" => Ok(train),
        "test" => Ok(test),
        _ => Err(Error::Config(format!(
            "unknown dataset split `{which}` (train or test)"
        ))),
    }
}

fn command_manifest(
    command: &str,
    run: &LoadedRun,
    checkpoint: &Path,
    data: &Dataset,
) -> Result<Manifest> {
    let mut man = Manifest::default();
    man.push("command", command);
    man.push("checkpoint", checkpoint.display());
    man.push("checkpoint.sha256", sha256_file(checkpoint)?);
    man.push("dataset.split", data.split());
    man.push("dataset.sha256", data.hash());
    man.push("dataset.samples", data.len());
    for line in run.config.render().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            man.push(format!("config.{k}"), v);
        }
    }
    Ok(man)
}

fn require_ensembles(bundle: &ModelBundle, policy: PolicyName) -> Result<()> {
    if policy == PolicyName::Ztw && bundle.ensembles.is_none() {
        return Err(Error::Config(
            "ztw policy needs a checkpoint trained with ensembles".into(),
        ));
    }
    Ok(())
}

/// Early-exit evaluation at one policy value: `trace.csv` and a summary
/// in `evaluate_manifest.txt`. Returns mean FLOPs and accuracy.
pub fn evaluate(
    checkpoint: &Path,
    policy: PolicyName,
    value: f64,
    split: &str,
    out: &Path,
) -> Result<(f64, f64)> {
    let run = load_run(checkpoint)?;
    require_ensembles(&run.bundle, policy)?;
    let data = dataset_for(&run.config, split)?;
    let traces = evaluate_policy(&data, &run.bundle, &policy.at(value)?)?;
    let (flops, acc) = summarize(&traces);
    create_dir(out)?;
    csv(&out.join("trace.csv"), |w| write_trace_csv(w, &traces))?;
    let mut man = command_manifest("evaluate", &run, checkpoint, &data)?;
    man.push("policy.value", value);
    man.push("mean_flops", flops);
    man.push("accuracy", acc);
    man.write(&out.join("evaluate_manifest.txt"))?;
    Ok((flops, acc))
}

/// Frontier over `grid` (or the default grid) written to `frontier.csv`.
pub fn sweep(
    checkpoint: &Path,
    policy: PolicyName,
    grid: Option<&str>,
    split: &str,
    out: &Path,
) -> Result<Vec<FrontierPoint>> {
    let run = load_run(checkpoint)?;
    require_ensembles(&run.bundle, policy)?;
    let data = dataset_for(&run.config, split)?;
    let grid = match grid {
        Some(spec) => parse_grid(spec)?,
        None if policy == PolicyName::Pbee => {
            (1..=run.bundle.num_heads()).map(|t| t as f64).collect()
        }
        None => default_grid(),
    };
    let template = policy.at(grid[0])?;
    let costs = policy_costs(&run.bundle, &template)?;
    let outputs = cache_outputs(&data, &run.bundle)?;
    let points = sweep_frontier(
        &outputs,
        &grid,
        &template,
        &costs,
        run.bundle.backbone.full_flops(),
    )?;
    create_dir(out)?;
    csv(&out.join("frontier.csv"), |w| {
        write_frontier_csv(w, &points)
    })?;
    let mut man = command_manifest("sweep", &run, checkpoint, &data)?;
    man.push("grid.points", grid.len());
    man.write(&out.join("sweep_manifest.txt"))?;
    Ok(points)
}

/// Hindsight improvability per head, written to `hi.csv`.
pub fn hi(
    checkpoint: &Path,
    split: &str,
    source: ProbSource,
    out: &Path,
) -> Result<Vec<Option<f64>>> {
    let run = load_run(checkpoint)?;
    if source == ProbSource::Ensembles && run.bundle.ensembles.is_none() {
        return Err(Error::Config(
            "ensemble source needs a checkpoint trained with ensembles".into(),
        ));
    }
    let data = dataset_for(&run.config, split)?;
    let outputs = cache_outputs(&data, &run.bundle)?;
    let values = hindsight_improvability(&CorrectnessMatrix::from_outputs(&outputs, source)?);
    create_dir(out)?;
    csv(&out.join("hi.csv"), |w| write_hi_csv(w, &values))?;
    command_manifest("hi", &run, checkpoint, &data)?.write(&out.join("hi_manifest.txt"))?;
    Ok(values)
}

/// Budget table from a frontier CSV.
pub fn budget(frontier: &Path, budgets: &str) -> Result<String> {
    let text = fs::read_to_string(frontier).map_err(|e| Error::Io {
        path: frontier.to_path_buf(),
        source: e,
    })?;
    let points = read_frontier_csv(&text)?;
    let budgets = budgets
        .split(',')
        .map(|b| Budget::parse(b.trim()))
        .collect::<Result<Vec<_>>>()?;
    Ok(render_budget_table(&points, &budgets))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub base_returns: Vec<f64>,
    pub kl_history: Vec<Vec<f64>>,
    pub points: Vec<ReturnPoint>,
}

/// Clones the expert into a policy network, distills its heads and writes
/// `return_vs_cost.csv`, `kl.csv`, `model.ckpt` and `manifest.txt`.
pub fn distill(cfg: &RunConfig, out: &Path) -> Result<DistillReport> {
    let env = ToyEnv::new(cfg.env()?)?;
    let expert = ExpertPolicy {
        epsilon: cfg.expert_epsilon()?,
    };
    let episodes = cfg.rl_episodes()?;
    let grid = parse_grid(cfg.get("rl.grid"))?;
    let dcfg = cfg.distill()?;
    create_dir(out)?;
    write(&out.join(CONFIG_FILE), cfg.render())?;
    let mut backbone = clone_expert(&env, &expert, cfg.rl_channels()?, &cfg.behavior_cloning()?)?;
    backbone.freeze();
    let base_returns = base_policy_returns(&env, &backbone, episodes)?;
    let result = distill_heads(&env, backbone, &expert, &dcfg)?;
    let points = eval_return_vs_cost(&env, &result.bundle, &grid, episodes)?;

    let ckpt = save_bundle(&result.bundle, out)?;
    csv(&out.join("return_vs_cost.csv"), |w| {
        write_return_csv(w, &points)
    })?;
    csv(&out.join("kl.csv"), |w| {
        use std::io::Write;
        let m_total = result.bundle.num_heads();
        let heads: Vec<String> = (1..=m_total).map(|m| format!("head{m}")).collect();
        writeln!(w, "epoch,{}", heads.join(","))?;
        for (e, row) in result.kl_history.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{},{}", e + 1, cells.join(","))?;
        }
        Ok(())
    })?;
    let mut man = Manifest::default();
    man.push("command", "distill");
    man.push("seed", cfg.seed()?);
    man.push("checkpoint.sha256", sha256_file(&ckpt)?);
    man.push("buffer.samples", result.buffer.len());
    man.push(
        "base.mean_return",
        base_returns.iter().sum::<f64>() / base_returns.len() as f64,
    );
    cost_lines(
        &result
            .bundle
            .cost_table(result.bundle.ensembles.is_some())?,
        &mut man,
        "flops",
    );
    man.write(&out.join("manifest.txt"))?;
    Ok(DistillReport {
        base_returns,
        kl_history: result.kl_history,
        points,
    })
}
