//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ztw_core::backbone::{BackboneSpec, CnnSpec, PretrainConfig};
use ztw_core::data::{gen_spirals, read_idx, split, Dataset, SpiralSpec, SplitTag};
use ztw_core::ensemble::{EnsembleKind, EnsembleTrainConfig};
use ztw_core::heads::HeadConfig;
use ztw_core::optim::{LrSchedule, OptimizerKind};
use ztw_core::rl::{DistillConfig, EnvConfig};
use ztw_core::trainer::{PipelineConfig, TrainConfig};
use ztw_core::{Error, Result};

/// Every recognised key with its default, in the order the resolved config
/// is written.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("dataset.kind", "spirals"),
    ("dataset.seed", "0"),
    ("dataset.classes", "4"),
    ("dataset.per_class", "500"),
    ("dataset.noise", "0.1"),
    ("dataset.revolutions", "1.0"),
    ("dataset.split", "0.8,0,0.2"),
    ("dataset.dir", "data/mnist"),
    ("dataset.train_size", "10000"),
    ("dataset.test_size", "2000"),
    ("model.kind", "mlp"),
    ("model.hidden", "64,64,64"),
    ("model.channels", "16"),
    ("model.blocks", "3"),
    ("model.pool", "true"),
    ("heads.channel_divisor", "4"),
    ("heads.pool", "2"),
    ("heads.stride", "auto"),
    ("pretrain.epochs", "150"),
    ("pretrain.batch_size", "64"),
    ("pretrain.lr", "0.003"),
    ("pretrain.optimizer", "adam"),
    ("pretrain.schedule", "cosine"),
    ("trainer.epochs", "50"),
    ("trainer.batch_size", "64"),
    ("trainer.lr", "0.001"),
    ("trainer.optimizer", "adam"),
    ("trainer.schedule", "step:15:0.1"),
    ("trainer.stop_gradient", "true"),
    ("trainer.cascade", "true"),
    ("trainer.ensemble_kind", "geometric"),
    ("ensemble.epochs", "500"),
    ("ensemble.lr", "1.0"),
    ("ensemble.optimizer", "sgd"),
    ("ensemble.schedule", "cosine"),
    ("eval.batch", "256"),
    ("rl.width", "7"),
    ("rl.height", "7"),
    ("rl.step_limit", "30"),
    ("rl.goal_reward", "1.0"),
    ("rl.step_penalty", "0.01"),
    ("rl.epsilon", "0.1"),
    ("rl.channels", "8"),
    ("rl.bc_epochs", "30"),
    ("rl.bc_lr", "0.003"),
    ("rl.rounds", "4"),
    ("rl.steps_per_round", "1024"),
    ("rl.epochs_per_round", "5"),
    ("rl.batch_size", "64"),
    ("rl.lr", "0.001"),
    ("rl.episodes", "10"),
    ("rl.grid", "0.25:1:0.05,1.01"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the lines of `text`. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    /// All keys in canonical order.
    pub fn render(&self) -> String {
        DEFAULTS
            .iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k)))
            .collect()
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{}`", self.get(key))))
    }

    fn positive(&self, key: &str) -> Result<usize> {
        match self.parsed::<usize>(key)? {
            0 => Err(Error::Config(format!("`{key}` must be at least 1"))),
            v => Ok(v),
        }
    }

    fn positive_f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parsed(key)?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Config(format!("`{key}` must be positive")))
        }
    }

    fn flag(&self, key: &str) -> Result<bool> {
        self.parsed(key)
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`")))
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("seed")
    }

    fn optimizer(&self, key: &str) -> Result<OptimizerKind> {
        let v = self.get(key);
        let mut parts = v.split(':');
        let bad = || Error::Config(format!("`{key}`: unknown optimizer `{v}`"));
        let num = |s: Option<&str>, default: f64| -> Result<f64> {
            s.map_or(Ok(default), |s| s.parse().map_err(|_| bad()))
        };
        match parts.next() {
            Some("sgd") => Ok(OptimizerKind::Sgd {
                momentum: num(parts.next(), 0.0)?,
            }),
            Some("adam") => Ok(OptimizerKind::Adam {
                beta1: num(parts.next(), 0.9)?,
                beta2: num(parts.next(), 0.999)?,
                eps: num(parts.next(), 1e-8)?,
            }),
            _ => Err(bad()),
        }
    }

    /// `constant`, `cosine` (over the section's epochs) or
    /// `step:M1,M2:FACTOR`.
    fn schedule(&self, key: &str, epochs: usize) -> Result<LrSchedule> {
        let v = self.get(key);
        let bad = || Error::Config(format!("`{key}`: unknown schedule `{v}`"));
        match v {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine { total: epochs }),
            _ => {
                let rest = v.strip_prefix("step:").ok_or_else(bad)?;
                let (ms, factor) = rest.rsplit_once(':').ok_or_else(bad)?;
                Ok(LrSchedule::Step {
                    milestones: ms
                        .split(',')
                        .map(|m| m.trim().parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?,
                    factor: factor.parse().map_err(|_| bad())?,
                })
            }
        }
    }

    pub fn ensemble_kind(&self) -> Result<Option<EnsembleKind>> {
        match self.get("trainer.ensemble_kind") {
            "geometric" => Ok(Some(EnsembleKind::Geometric)),
            "additive" => Ok(Some(EnsembleKind::Additive)),
            "none" => Ok(None),
            v => Err(Error::Config(format!(
                "`trainer.ensemble_kind`: unknown kind `{v}`"
            ))),
        }
    }

    pub fn pipeline(&self, input: &[usize], classes: usize) -> Result<PipelineConfig> {
        let seed = self.seed()?;
        let backbone = match self.get("model.kind") {
            "mlp" => {
                if input.len() != 1 {
                    return Err(Error::Config(format!(
                        "mlp needs flat inputs, dataset has {input:?}"
                    )));
                }
                BackboneSpec::Mlp {
                    input: input[0],
                    hidden: self.list("model.hidden")?,
                    classes,
                }
            }
            "cnn" => BackboneSpec::Cnn(CnnSpec {
                input: input.to_vec(),
                channels: self.positive("model.channels")?,
                blocks: self.positive("model.blocks")?,
                pool: self.flag("model.pool")?,
                classes,
            }),
            v => return Err(Error::Config(format!("`model.kind`: unknown model `{v}`"))),
        };
        let pre_epochs = self.positive("pretrain.epochs")?;
        let pretrain = PretrainConfig {
            epochs: pre_epochs,
            batch_size: self.positive("pretrain.batch_size")?,
            lr: self.positive_f64("pretrain.lr")?,
            optimizer: self.optimizer("pretrain.optimizer")?,
            schedule: self.schedule("pretrain.schedule", pre_epochs)?,
            seed,
        };
        let pool = self.positive("heads.pool")?;
        let heads = HeadConfig {
            pool_target: (pool, pool),
            channel_divisor: self.positive("heads.channel_divisor")?,
            stride: match self.get("heads.stride") {
                "auto" => None,
                _ => Some(self.positive("heads.stride")?),
            },
            cascade: self.flag("trainer.cascade")?,
            seed,
        };
        let epochs = self.positive("trainer.epochs")?;
        let ens_epochs = self.positive("ensemble.epochs")?;
        let kind = self.ensemble_kind()?;
        let train = TrainConfig {
            epochs,
            batch_size: self.positive("trainer.batch_size")?,
            lr: self.positive_f64("trainer.lr")?,
            schedule: self.schedule("trainer.schedule", epochs)?,
            optimizer: self.optimizer("trainer.optimizer")?,
            seed,
            stop_gradient: self.flag("trainer.stop_gradient")?,
            cascade: self.flag("trainer.cascade")?,
            ensemble: kind,
            ensemble_train: EnsembleTrainConfig {
                kind: kind.unwrap_or(EnsembleKind::Geometric),
                epochs: ens_epochs,
                lr: self.positive_f64("ensemble.lr")?,
                optimizer: self.optimizer("ensemble.optimizer")?,
                schedule: self.schedule("ensemble.schedule", ens_epochs)?,
            },
        };
        Ok(PipelineConfig {
            backbone,
            pretrain,
            heads,
            train,
            eval_batch: self.positive("eval.batch")?,
        })
    }

    /// Train and test splits named by `dataset.*`.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.get("dataset.kind") {
            "spirals" => {
                let full = gen_spirals(&SpiralSpec {
                    classes: self.positive("dataset.classes")?,
                    per_class: self.positive("dataset.per_class")?,
                    noise: self.parsed("dataset.noise")?,
                    revolutions: self.parsed("dataset.revolutions")?,
                    seed: self.parsed("dataset.seed")?,
                })?;
                let f: Vec<f64> = self.list("dataset.split")?;
                let fractions: [f64; 3] = f
                    .try_into()
                    .map_err(|_| Error::Config("`dataset.split` needs three fractions".into()))?;
                let parts = split(&full, fractions, self.parsed("dataset.seed")?)?;
                let test = parts.test.ok_or_else(|| {
                    Error::Config("`dataset.split` leaves no test samples".into())
                })?;
                Ok((parts.train, test))
            }
            "mnist" => {
                let dir = PathBuf::from(self.get("dataset.dir"));
                let train = read_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let test = read_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                )?;
                let n_train = self.positive("dataset.train_size")?.min(train.len());
                let n_test = self.positive("dataset.test_size")?.min(test.len());
                Ok((
                    train.take(n_train, SplitTag::Train)?,
                    test.take(n_test, SplitTag::Test)?,
                ))
            }
            v => Err(Error::Config(format!(
                "`dataset.kind`: unknown dataset `{v}`"
            ))),
        }
    }

    pub fn env(&self) -> Result<EnvConfig> {
        Ok(EnvConfig {
            width: self.positive("rl.width")?,
            height: self.positive("rl.height")?,
            step_limit: self.positive("rl.step_limit")?,
            goal_reward: self.parsed("rl.goal_reward")?,
            step_penalty: self.parsed("rl.step_penalty")?,
            seed: self.seed()?,
        })
    }

    pub fn expert_epsilon(&self) -> Result<f64> {
        let e: f64 = self.parsed("rl.epsilon")?;
        if (0.0..=1.0).contains(&e) {
            Ok(e)
        } else {
            Err(Error::Config("`rl.epsilon` must lie in [0, 1]".into()))
        }
    }

    pub fn behavior_cloning(&self) -> Result<PretrainConfig> {
        let epochs = self.positive("rl.bc_epochs")?;
        Ok(PretrainConfig {
            epochs,
            batch_size: self.positive("rl.batch_size")?,
            lr: self.positive_f64("rl.bc_lr")?,
            optimizer: OptimizerKind::adam(),
            schedule: LrSchedule::Cosine { total: epochs },
            seed: self.seed()?,
        })
    }

    pub fn distill(&self) -> Result<DistillConfig> {
        Ok(DistillConfig {
            rounds: self.positive("rl.rounds")?,
            steps_per_round: self.positive("rl.steps_per_round")?,
            epochs_per_round: self.positive("rl.epochs_per_round")?,
            batch_size: self.positive("rl.batch_size")?,
            lr: self.positive_f64("rl.lr")?,
            seed: self.seed()?,
            stop_gradient: self.flag("trainer.stop_gradient")?,
            cascade: self.flag("trainer.cascade")?,
            ensemble: self.ensemble_kind()?,
            ensemble_epochs: self.positive("ensemble.epochs")?,
        })
    }

    pub fn rl_channels(&self) -> Result<usize> {
        self.positive("rl.channels")
    }

    pub fn rl_episodes(&self) -> Result<usize> {
        self.parsed("rl.episodes")
    }
}
