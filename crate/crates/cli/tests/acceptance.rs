//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the output.
//! MNIST files are read from `ZTW_MNIST_DIR` or `<workspace>/data/mnist`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ztw_cli::commands::{self, PolicyName, TrainReport};
use ztw_cli::config::RunConfig;
use ztw_core::backbone::{BackboneModel, CnnSpec};
use ztw_core::bundle::{Ensembles, ModelBundle};
use ztw_core::data::{Dataset, SplitTag};
use ztw_core::ensemble::{ensemble_log_probs, geometric_combine, EnsembleKind, EnsembleParams};
use ztw_core::gradcheck::{check, random_tensor, random_tensor_away_from_zero, GradCheckConfig};
use ztw_core::heads::{build_heads, head_outputs, HeadConfig, InternalClassifier};
use ztw_core::metrics::{
    default_grid, hindsight_improvability, select_tau_for_budget, Budget, CorrectnessMatrix,
};
use ztw_core::nn::{BoundSdnPool, Targets};
use ztw_core::policy::{
    cache_outputs, decide_cached, evaluate_policy, policy_costs, ExitIndex, PolicyConfig,
    ProbSource,
};
use ztw_core::rng::Rng;
use ztw_core::tensor::{argmax, Padding};
use ztw_core::trainer::{grad_cosine_diagnostic, head_gradients};
use ztw_core::{Graph, Result, Tensor};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("workspace root")
}

// ---------------------------------------------------------------- 2

fn max_err(
    reports: &mut Vec<(String, f64)>,
    name: &str,
    r: Result<ztw_core::gradcheck::GradCheckReport>,
) {
    let e = r.map(|r| r.max_rel_error).unwrap_or(f64::INFINITY);
    reports.push((name.to_string(), e));
}

/// Numeric gradient of the summed head losses with respect to every head
/// parameter, compared with `head_gradients` without detaching.
///
/// Head parameters are jittered first: freshly initialised conv biases are
/// exactly zero, which puts the head ReLU on its kink wherever a tap patch
/// is all zeros.
fn head_chain_error(
    backbone: &BackboneModel,
    heads: &[InternalClassifier],
    x: &Tensor,
    labels: &[usize],
    rng: &mut Rng,
) -> f64 {
    let mut heads = heads.to_vec();
    for head in &mut heads {
        for t in head.params_mut() {
            for v in t.data_mut() {
                *v += rng.uniform_in(-0.2, 0.2);
            }
        }
    }
    let heads = &heads[..];
    let targets = Targets::Hard(labels.to_vec());
    let all: Vec<usize> = (1..=heads.len()).collect();
    let analytic = head_gradients(backbone, heads, x, &targets, false, &all).unwrap();
    let loss = |hs: &[InternalClassifier]| -> f64 {
        let out = head_outputs(backbone, hs, x).unwrap();
        let k = out.log_probs[0].shape()[1];
        out.log_probs
            .iter()
            .map(|lp| {
                -labels
                    .iter()
                    .enumerate()
                    .map(|(n, &y)| lp.data()[n * k + y])
                    .sum::<f64>()
                    / labels.len() as f64
            })
            .sum()
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut work = heads.to_vec();
    for j in 0..heads.len() {
        let mut flat = 0;
        let sizes: Vec<usize> = work[j].params_mut().iter().map(|t| t.len()).collect();
        for (p, &len) in sizes.iter().enumerate() {
            for e in 0..len {
                let orig = work[j].params_mut()[p].data()[e];
                work[j].params_mut()[p].data_mut()[e] = orig + h;
                let plus = loss(&work);
                work[j].params_mut()[p].data_mut()[e] = orig - h;
                let minus = loss(&work);
                work[j].params_mut()[p].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[j][flat];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
                flat += 1;
            }
        }
    }
    worst
}

fn criterion_2() -> Outcome {
    let mut errs: Vec<(String, f64)> = Vec::new();
    let cfg = GradCheckConfig::default();
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let a = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let row = random_tensor(&mut rng, &[4], -2.0, 2.0);
        let s = random_tensor(&mut rng, &[], -2.0, 2.0);
        let pos = random_tensor(&mut rng, &[3, 4], 0.2, 3.0);
        let kinked = random_tensor_away_from_zero(&mut rng, &[3, 4], 1e-2);
        let m = random_tensor(&mut rng, &[4, 5], -2.0, 2.0);
        let narrow = random_tensor(&mut rng, &[3, 2], -2.0, 2.0);
        max_err(
            &mut errs,
            "add",
            check(&[a.clone(), b.clone()], seed, cfg, |g, v| g.add(v[0], v[1])),
        );
        max_err(
            &mut errs,
            "add_row",
            check(&[a.clone(), row.clone()], seed, cfg, |g, v| {
                g.add(v[0], v[1])
            }),
        );
        max_err(
            &mut errs,
            "sub",
            check(&[a.clone(), row.clone()], seed, cfg, |g, v| {
                g.sub(v[0], v[1])
            }),
        );
        max_err(
            &mut errs,
            "mul",
            check(&[a.clone(), b.clone()], seed, cfg, |g, v| g.mul(v[0], v[1])),
        );
        max_err(
            &mut errs,
            "mul_scalar",
            check(&[a.clone(), s.clone()], seed, cfg, |g, v| g.mul(v[0], v[1])),
        );
        max_err(
            &mut errs,
            "matmul",
            check(&[a.clone(), m.clone()], seed, cfg, |g, v| {
                g.matmul(v[0], v[1])
            }),
        );
        max_err(
            &mut errs,
            "relu",
            check(std::slice::from_ref(&kinked), seed, cfg, |g, v| {
                Ok(g.relu(v[0]))
            }),
        );
        max_err(
            &mut errs,
            "exp",
            check(std::slice::from_ref(&a), seed, cfg, |g, v| Ok(g.exp(v[0]))),
        );
        max_err(
            &mut errs,
            "ln",
            check(std::slice::from_ref(&pos), seed, cfg, |g, v| Ok(g.ln(v[0]))),
        );
        max_err(
            &mut errs,
            "softplus",
            check(std::slice::from_ref(&a), seed, cfg, |g, v| {
                Ok(g.softplus(v[0]))
            }),
        );
        max_err(
            &mut errs,
            "scale",
            check(std::slice::from_ref(&a), seed, cfg, |g, v| {
                Ok(g.scale(v[0], -1.7))
            }),
        );
        max_err(
            &mut errs,
            "add_scalar",
            check(std::slice::from_ref(&a), seed, cfg, |g, v| {
                Ok(g.add_scalar(v[0], 0.3))
            }),
        );
        max_err(
            &mut errs,
            "sum",
            check(std::slice::from_ref(&a), seed, cfg, |g, v| Ok(g.sum(v[0]))),
        );
        max_err(
            &mut errs,
            "mean",
            check(std::slice::from_ref(&a), seed, cfg, |g, v| Ok(g.mean(v[0]))),
        );
        max_err(
            &mut errs,
            "sum_last",
            check(std::slice::from_ref(&a), seed, cfg, |g, v| {
                Ok(g.sum_last(v[0]))
            }),
        );
        max_err(
            &mut errs,
            "concat",
            check(&[a.clone(), narrow.clone()], seed, cfg, |g, v| {
                g.concat_last(&[v[0], v[1]])
            }),
        );
        max_err(
            &mut errs,
            "reshape",
            check(std::slice::from_ref(&a), seed, cfg, |g, v| {
                g.reshape(v[0], &[2, 6])
            }),
        );
        max_err(
            &mut errs,
            "flatten",
            check(std::slice::from_ref(&a), seed, cfg, |g, v| g.flatten(v[0])),
        );
        max_err(
            &mut errs,
            "log_softmax",
            check(std::slice::from_ref(&a), seed, cfg, |g, v| {
                g.log_softmax(v[0])
            }),
        );
        max_err(
            &mut errs,
            "cross_entropy",
            check(std::slice::from_ref(&a), seed, cfg, |g, v| {
                let lp = g.log_softmax(v[0])?;
                g.cross_entropy(lp, &[1, 3, 0])
            }),
        );

        let x = random_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
        let k = random_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let bias = random_tensor(&mut rng, &[3], -1.0, 1.0);
        for (stride, pad) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
            max_err(
                &mut errs,
                "conv2d",
                check(&[x.clone(), k.clone(), bias.clone()], seed, cfg, |g, v| {
                    g.conv2d(v[0], v[1], v[2], stride, pad)
                }),
            );
        }
        max_err(
            &mut errs,
            "max_pool",
            check(std::slice::from_ref(&x), seed, cfg, |g, v| {
                g.max_pool2d(v[0], 2, 2)
            }),
        );
        max_err(
            &mut errs,
            "avg_pool",
            check(std::slice::from_ref(&x), seed, cfg, |g, v| {
                g.avg_pool2d(v[0], 2, 1)
            }),
        );
        max_err(
            &mut errs,
            "adaptive_avg",
            check(std::slice::from_ref(&x), seed, cfg, |g, v| {
                g.adaptive_avg_pool2d(v[0], (2, 2))
            }),
        );
        max_err(
            &mut errs,
            "adaptive_max",
            check(std::slice::from_ref(&x), seed, cfg, |g, v| {
                g.adaptive_max_pool2d(v[0], (2, 3))
            }),
        );
        let gamma = Tensor::scalar(rng.uniform_in(-0.5, 1.5));
        max_err(
            &mut errs,
            "sdn_pool",
            check(&[x.clone(), gamma], seed, cfg, |g, v| {
                BoundSdnPool {
                    gamma: v[1],
                    target: (2, 2),
                }
                .forward(g, v[0])
            }),
        );

        // ensemble parameters end to end
        let (n, kc, stage) = (4, 3, 3);
        let stacked = ztw_core::ensemble::stack_log_probs(
            &(0..stage)
                .map(|_| {
                    let mut g = Graph::new();
                    let l = g.constant(random_tensor(&mut rng, &[n, kc], -2.0, 2.0));
                    let lp = g.log_softmax(l).unwrap();
                    g.value(lp).clone()
                })
                .collect::<Vec<_>>(),
            stage,
        )
        .unwrap();
        let raw_w = random_tensor(&mut rng, &[stage], -1.0, 1.0);
        let raw_b = random_tensor(&mut rng, &[kc], -1.0, 1.0);
        for kind in [EnsembleKind::Geometric, EnsembleKind::Additive] {
            max_err(
                &mut errs,
                "ensemble",
                check(&[raw_w.clone(), raw_b.clone()], seed, cfg, |g, v| {
                    let s = g.constant(stacked.clone());
                    let lp = ensemble_log_probs(g, kind, s, v[0], v[1], n, kc)?;
                    g.cross_entropy(lp, &[0, 2, 1, 1])
                }),
            );
        }

        // head parameters end to end through the cascade, on vector and
        // spatial taps
        let mut mlp = BackboneModel::mlp(3, &[6, 6], 3, seed).unwrap();
        mlp.freeze();
        let heads = build_heads(
            &mlp,
            &HeadConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let xm = random_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        let ym: Vec<usize> = (0..5).map(|_| rng.below(3)).collect();
        errs.push((
            "heads_mlp".into(),
            head_chain_error(&mlp, &heads, &xm, &ym, &mut rng),
        ));
        let mut cnn = BackboneModel::cnn(
            &CnnSpec {
                input: vec![1, 6, 6],
                channels: 2,
                blocks: 2,
                pool: false,
                classes: 3,
            },
            seed,
        )
        .unwrap();
        cnn.freeze();
        let heads = build_heads(
            &cnn,
            &HeadConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let xc = random_tensor(&mut rng, &[3, 1, 6, 6], 0.0, 1.0);
        let yc: Vec<usize> = (0..3).map(|_| rng.below(3)).collect();
        errs.push((
            "heads_cnn".into(),
            head_chain_error(&cnn, &heads, &xc, &yc, &mut rng),
        ));
    }
    let (name, worst) = errs.iter().fold(("".to_string(), 0.0f64), |acc, (n, e)| {
        if *e > acc.1 || e.is_nan() {
            (n.clone(), *e)
        } else {
            acc
        }
    });
    outcome(
        worst < 1e-4,
        format!(
            "{} checks over {} seeds, max rel err {worst:.2e} ({name})",
            errs.len(),
            SEEDS.len()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = Rng::new(33);
    let (mut worst_diff, mut worst_sum) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let m = 1 + rng.below(5);
        let k = 2 + rng.below(9);
        let probs: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.05, 1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let w: Vec<f64> = (0..m).map(|_| rng.uniform_in(0.1, 2.0)).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.1, 2.0)).collect();
        let params = EnsembleParams::from_effective(&w, &b).unwrap();
        let logs: Vec<Vec<f64>> = probs
            .iter()
            .map(|p| p.iter().map(|v| v.ln()).collect())
            .collect();
        let refs: Vec<&[f64]> = logs.iter().map(Vec::as_slice).collect();
        let q = geometric_combine(&refs, &params).unwrap();
        let (pw, pb) = (params.weights(), params.priors());
        let naive: Vec<f64> = (0..k)
            .map(|c| pb[c] * (0..m).map(|j| probs[j][c].powf(pw[j])).product::<f64>())
            .collect();
        let z: f64 = naive.iter().sum();
        for c in 0..k {
            worst_diff = worst_diff.max((q[c] - naive[c] / z).abs());
        }
        worst_sum = worst_sum.max((q.iter().sum::<f64>() - 1.0).abs());
    }
    let mut extreme_ok = true;
    for case in 0..50u64 {
        let mut rng = Rng::new(900 + case);
        let m = 1 + rng.below(4);
        let k = 2 + rng.below(5);
        let logs: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..k)
                    .map(|c| {
                        if c == 0 && case % 2 == 0 {
                            0.0
                        } else {
                            (1e-300f64).ln() - rng.uniform_in(0.0, 5.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let w: Vec<f64> = (0..m).map(|_| rng.uniform_in(0.5, 4.0)).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.1, 2.0)).collect();
        let params = EnsembleParams::from_effective(&w, &b).unwrap();
        let refs: Vec<&[f64]> = logs.iter().map(Vec::as_slice).collect();
        let q = geometric_combine(&refs, &params).unwrap();
        let s: f64 = q.iter().sum();
        extreme_ok &= q.iter().all(|v| v.is_finite()) && (s - 1.0).abs() <= 1e-9;
        worst_sum = worst_sum.max((s - 1.0).abs());
    }
    outcome(
        worst_diff <= 1e-9 && worst_sum <= 1e-9 && extreme_ok,
        format!("1000 cases max |q - naive| {worst_diff:.2e}, max |sum q - 1| {worst_sum:.2e}, 1e-300 cases finite: {extreme_ok}"),
    )
}

// ---------------------------------------------------------------- 4, 5 fixtures

fn random_bundle(seed: u64) -> (ModelBundle, Dataset) {
    let mut bb = BackboneModel::cnn(
        &CnnSpec {
            input: vec![1, 8, 8],
            channels: 3,
            blocks: 3,
            pool: false,
            classes: 4,
        },
        seed,
    )
    .unwrap();
    bb.freeze();
    let heads = build_heads(
        &bb,
        &HeadConfig {
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    let mut rng = Rng::derive(seed, 5);
    let stages = (1..=heads.len())
        .map(|m| {
            let w: Vec<f64> = (0..m).map(|_| rng.uniform_in(0.2, 2.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.uniform_in(0.2, 2.0)).collect();
            EnsembleParams::from_effective(&w, &b).unwrap()
        })
        .collect();
    let bundle = ModelBundle::new(
        bb,
        heads,
        Some(Ensembles {
            kind: EnsembleKind::Geometric,
            stages,
        }),
    )
    .unwrap();
    let x = random_tensor(&mut rng, &[60, 1, 8, 8], 0.0, 1.0);
    let y = (0..60).map(|_| rng.below(4)).collect();
    (bundle, Dataset::new(x, y, 4, SplitTag::Test).unwrap())
}

struct Fixture {
    name: String,
    bundle: ModelBundle,
    data: Dataset,
}

fn load_fixture(name: &str, ckpt: &Path, max_samples: usize) -> Fixture {
    let run = commands::load_run(ckpt).unwrap();
    let data = commands::dataset_for(&run.config, "test").unwrap();
    let data = data
        .take(max_samples.min(data.len()), SplitTag::Test)
        .unwrap();
    Fixture {
        name: name.into(),
        bundle: run.bundle,
        data,
    }
}

fn sources(bundle: &ModelBundle) -> Vec<ProbSource> {
    if bundle.ensembles.is_some() {
        vec![ProbSource::Heads, ProbSource::Ensembles]
    } else {
        vec![ProbSource::Heads]
    }
}

fn criterion_4(fixtures: &[Fixture]) -> Outcome {
    let mut checked = 0;
    for f in fixtures {
        let base = f.bundle.backbone.predict_logits(f.data.inputs()).unwrap();
        let k = f.bundle.num_classes();
        for src in sources(&f.bundle) {
            let traces =
                evaluate_policy(&f.data, &f.bundle, &PolicyConfig::threshold(1.01, src)).unwrap();
            for t in &traces {
                let row = &base.data()[t.sample_id * k..(t.sample_id + 1) * k];
                let x = f.data.inputs().data();
                let per = x.len() / f.data.len();
                let mut shape = vec![1];
                shape.extend_from_slice(f.data.sample_shape());
                let single = Tensor::new(
                    shape,
                    x[t.sample_id * per..(t.sample_id + 1) * per].to_vec(),
                )
                .unwrap();
                let alone = f.bundle.backbone.predict_logits(&single).unwrap();
                if t.exit != ExitIndex::Final || t.pred != argmax(row) || alone.data() != row {
                    return outcome(
                        false,
                        format!(
                            "{}: sample {} differs from the base network",
                            f.name, t.sample_id
                        ),
                    );
                }
                checked += 1;
            }
        }
    }
    outcome(
        true,
        format!(
            "{checked} decisions on {} fixtures equal base predictions bitwise",
            fixtures.len()
        ),
    )
}

fn criterion_5(fixtures: &[Fixture], naive_fixture: &Fixture) -> Outcome {
    let grid = default_grid();
    for f in fixtures {
        let outputs = cache_outputs(&f.data, &f.bundle).unwrap();
        for src in sources(&f.bundle) {
            let costs = policy_costs(&f.bundle, &PolicyConfig::threshold(0.5, src)).unwrap();
            let mut prev: Option<Vec<usize>> = None;
            for &tau in &grid {
                let traces =
                    decide_cached(&outputs, &PolicyConfig::threshold(tau, src), &costs).unwrap();
                let exits: Vec<usize> = traces
                    .iter()
                    .map(|t| t.exit.ordinal(f.bundle.num_heads()))
                    .collect();
                if let Some(p) = &prev {
                    if let Some(n) = (0..exits.len()).find(|&n| exits[n] < p[n]) {
                        return outcome(
                            false,
                            format!("{} {src:?}: sample {n} exits earlier at tau {tau}", f.name),
                        );
                    }
                }
                prev = Some(exits);
            }
        }
    }
    let f = naive_fixture;
    let outputs = cache_outputs(&f.data, &f.bundle).unwrap();
    for src in sources(&f.bundle) {
        let costs = policy_costs(&f.bundle, &PolicyConfig::threshold(0.5, src)).unwrap();
        for &tau in &grid {
            let policy = PolicyConfig::threshold(tau, src);
            if decide_cached(&outputs, &policy, &costs).unwrap()
                != evaluate_policy(&f.data, &f.bundle, &policy).unwrap()
            {
                return outcome(
                    false,
                    format!("cached sweep differs from naive evaluation at tau {tau} ({src:?})"),
                );
            }
        }
    }
    outcome(
        true,
        format!(
            "exit index monotone over {} thresholds on {} fixtures; cached == naive on {} samples",
            grid.len(),
            fixtures.len(),
            f.data.len()
        ),
    )
}

// ---------------------------------------------------------------- 6

fn brute_force_hi(rows: &[Vec<bool>]) -> Vec<Option<f64>> {
    let m_total = rows[0].len();
    (0..m_total)
        .map(|m| {
            let wrong: BTreeSet<usize> = (0..rows.len()).filter(|&n| !rows[n][m]).collect();
            let mut earlier_right = BTreeSet::new();
            for j in 0..m {
                earlier_right.extend((0..rows.len()).filter(|&n| rows[n][j]));
            }
            if wrong.is_empty() {
                None
            } else {
                Some(wrong.intersection(&earlier_right).count() as f64 / wrong.len() as f64)
            }
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let mut rng = Rng::new(66);
    let (mut undefined, mut first_zero) = (0, 0);
    for case in 0..100 {
        let n = 1 + rng.below(50);
        let m = 1 + rng.below(6);
        let p_right = rng.uniform_in(0.0, 1.0);
        let rows: Vec<Vec<bool>> = (0..n)
            .map(|_| (0..m).map(|_| rng.uniform() < p_right).collect())
            .collect();
        let got = hindsight_improvability(&CorrectnessMatrix::new(rows.clone()).unwrap());
        let want = brute_force_hi(&rows);
        if got != want {
            return outcome(false, format!("case {case}: {got:?} vs oracle {want:?}"));
        }
        match got[0] {
            Some(v) if v != 0.0 => return outcome(false, format!("case {case}: HI_1 = {v}")),
            Some(_) => first_zero += 1,
            None => {}
        }
        undefined += got.iter().filter(|v| v.is_none()).count();
    }
    outcome(
        true,
        format!("100 matrices match the set oracle; HI_1 = 0 in {first_zero} defined cases; {undefined} undefined entries marked"),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let mut pairs = 0;
    for seed in SEEDS {
        let mut bb = BackboneModel::cnn(
            &CnnSpec {
                input: vec![1, 10, 10],
                channels: 3,
                blocks: 4,
                pool: false,
                classes: 3,
            },
            seed,
        )
        .unwrap();
        bb.freeze();
        let heads = build_heads(
            &bb,
            &HeadConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let mut rng = Rng::new(seed + 70);
        let x = random_tensor(&mut rng, &[6, 1, 10, 10], 0.0, 1.0);
        let y = Targets::Hard((0..6).map(|_| rng.below(3)).collect());
        let m_total = heads.len();
        for j in 1..m_total {
            for later in j + 1..=m_total {
                let g = head_gradients(&bb, &heads, &x, &y, true, &[later]).unwrap();
                if g[j - 1].iter().any(|&v| v != 0.0) {
                    return outcome(
                        false,
                        format!("seed {seed}: loss of head {later} reaches head {j}"),
                    );
                }
                pairs += 1;
            }
        }
        let cos = grad_cosine_diagnostic(&bb, &heads, &x, &y, true).unwrap();
        if cos.iter().any(|&c| c != 1.0) {
            return outcome(false, format!("seed {seed}: cosine {cos:?}"));
        }
    }
    outcome(
        true,
        format!(
            "{pairs} (head, later loss) pairs give exact zeros; cosine 1.0 on {} seeds",
            SEEDS.len()
        ),
    )
}

// ---------------------------------------------------------------- 8, 9

struct Experiment {
    ztw: TrainReport,
    sdn: TrainReport,
    ztw_50: Option<f64>,
    sdn_50: Option<f64>,
    table: String,
}

fn experiment(cfg: &RunConfig, dir: &Path) -> Result<Experiment> {
    let ztw = commands::train(cfg, &dir.join("ztw"))?;
    let mut sdn_cfg = cfg.clone();
    for a in ["no-cascade", "no-ensemble"] {
        commands::Ablation::parse(a)?.apply(&mut sdn_cfg);
    }
    let sdn = commands::train(&sdn_cfg, &dir.join("sdn"))?;
    let zf = commands::sweep(
        &ztw.checkpoint,
        PolicyName::Ztw,
        None,
        "test",
        &dir.join("sweep_ztw"),
    )?;
    let sf = commands::sweep(
        &sdn.checkpoint,
        PolicyName::Sdn,
        None,
        "test",
        &dir.join("sweep_sdn"),
    )?;
    let at_half = |pts| {
        select_tau_for_budget(pts, Budget::Fraction(0.5))
            .ok()
            .map(|p| p.accuracy)
    };
    let table = commands::budget(&dir.join("sweep_ztw/frontier.csv"), "0.25,0.5,0.75,1.0,max")?;
    Ok(Experiment {
        ztw_50: at_half(&zf),
        sdn_50: at_half(&sf),
        ztw,
        sdn,
        table,
    })
}

/// (a) and (b) for one run, as failure messages.
fn check_ab(tag: &str, r: &TrainReport) -> Vec<String> {
    let mut fails = Vec::new();
    for m in 0..r.ensemble_train_loss.len() {
        let best = r.head_train_loss[..=m]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if r.ensemble_train_loss[m] > best + 0.01 {
            fails.push(format!(
                "{tag} (a) stage {}: ensemble loss {:.4} > {:.4} + 0.01",
                m + 1,
                r.ensemble_train_loss[m],
                best
            ));
        }
    }
    let (q, p) = (
        *r.ensemble_test_accuracy.last().unwrap(),
        *r.head_test_accuracy.last().unwrap(),
    );
    if q < p - 0.005 {
        fails.push(format!("{tag} (b): q_M {q:.4} < p_M {p:.4} - 0.005"));
    }
    fails
}

fn criterion_8(root: &Path) -> (Outcome, Vec<PathBuf>) {
    let start = Instant::now();
    let base = RunConfig::load(&workspace().join("configs/spirals.txt")).unwrap();
    let mut fails = Vec::new();
    let (mut z50, mut s50) = (Vec::new(), Vec::new());
    let mut ckpts = Vec::new();
    let mut ab = Vec::new();
    for seed in [0u64, 1, 2] {
        let mut cfg = base.clone();
        cfg.set("seed", &seed.to_string()).unwrap();
        let dir = root.join(format!("spirals{seed}"));
        let e = match experiment(&cfg, &dir) {
            Ok(e) => e,
            Err(err) => return (outcome(false, format!("seed {seed}: {err}")), ckpts),
        };
        fails.extend(check_ab(&format!("seed {seed}"), &e.ztw));
        ab.push(format!(
            "q_M {:.4}/p_M {:.4}",
            e.ztw.ensemble_test_accuracy.last().unwrap(),
            e.ztw.head_test_accuracy.last().unwrap()
        ));
        match (e.ztw_50, e.sdn_50) {
            (Some(z), Some(s)) => {
                z50.push(z);
                s50.push(s);
            }
            _ => fails.push(format!("seed {seed} (c): 50% budget infeasible")),
        }
        ckpts.push(e.ztw.checkpoint.clone());
        ckpts.push(e.sdn.checkpoint.clone());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (z, s) = (mean(&z50), mean(&s50));
    if z < s - 0.005 {
        fails.push(format!("(c): ZTW {z:.4} < SDN {s:.4} - 0.005"));
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(300) {
        fails.push(format!("runtime {elapsed:.1?} over 5 min"));
    }
    let detail = if fails.is_empty() {
        format!(
            "(a) holds on all stages; (b) {}; (c) ZTW {z:.4} vs SDN {s:.4} at 50%; {elapsed:.1?}",
            ab.join(", ")
        )
    } else {
        fails.join("; ")
    };
    (outcome(fails.is_empty(), detail), ckpts)
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("ZTW_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data/mnist"))
}

fn criterion_9(root: &Path) -> (Outcome, Option<PathBuf>) {
    let start = Instant::now();
    let dir = mnist_dir();
    if !dir.join("train-images-idx3-ubyte").exists() {
        return (
            outcome(
                false,
                format!("MNIST IDX files not found in {}", dir.display()),
            ),
            None,
        );
    }
    let mut cfg = RunConfig::load(&workspace().join("configs/mnist.txt")).unwrap();
    cfg.set("dataset.dir", dir.to_str().unwrap()).unwrap();
    let e = match experiment(&cfg, &root.join("mnist")) {
        Ok(e) => e,
        Err(err) => return (outcome(false, err.to_string()), None),
    };
    let mut fails = check_ab("", &e.ztw);
    if e.ztw.base_test_accuracy < 0.95 {
        fails.push(format!(
            "base accuracy {:.4} < 0.95",
            e.ztw.base_test_accuracy
        ));
    }
    match (e.ztw_50, e.sdn_50) {
        (Some(z), Some(s)) if z < s - 0.005 => {
            fails.push(format!("(c): ZTW {z:.4} < SDN {s:.4} - 0.005"))
        }
        (Some(_), Some(_)) => {}
        _ => fails.push("(c): 50% budget infeasible".into()),
    }
    let header: Vec<&str> = e
        .table
        .lines()
        .next()
        .unwrap_or("")
        .split_whitespace()
        .collect();
    if header != ["25%", "50%", "75%", "100%", "Max"] {
        fails.push(format!("table header {header:?}"));
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(900) {
        fails.push(format!("runtime {elapsed:.1?} over 15 min"));
    }
    print!(
        "{}",
        e.table
            .lines()
            .map(|l| format!("    {l}\n"))
            .collect::<String>()
    );
    let detail = if fails.is_empty() {
        format!(
            "base {:.4}; q_M {:.4} vs p_M {:.4}; 50%: ZTW {:.4} vs SDN {:.4}; {elapsed:.1?}",
            e.ztw.base_test_accuracy,
            e.ztw.ensemble_test_accuracy.last().unwrap(),
            e.ztw.head_test_accuracy.last().unwrap(),
            e.ztw_50.unwrap(),
            e.sdn_50.unwrap()
        )
    } else {
        fails.join("; ")
    };
    (outcome(fails.is_empty(), detail), Some(e.ztw.checkpoint))
}

// ---------------------------------------------------------------- 10

fn criterion_10(root: &Path) -> Outcome {
    let start = Instant::now();
    let mut cfg = RunConfig::load(&workspace().join("configs/gridworld.txt")).unwrap();
    cfg.set("rl.grid", "0.5,1.01").unwrap();
    let r = match commands::distill(&cfg, &root.join("rl")) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut fails = Vec::new();
    let n = r.base_returns.len() as f64;
    let base_mean = r.base_returns.iter().sum::<f64>() / n;
    let base_std = (r
        .base_returns
        .iter()
        .map(|v| (v - base_mean).powi(2))
        .sum::<f64>()
        / (n - 1.0))
        .sqrt();
    let (half, full) = (&r.points[0], &r.points[1]);
    if full.mean_return != base_mean || full.std_return != base_std {
        fails.push(format!(
            "tau 1.01 return {} ± {} vs base {base_mean} ± {base_std}",
            full.mean_return, full.std_return
        ));
    }
    if !(half.mean_step_flops < full.mean_step_flops) {
        fails.push(format!(
            "flops/step at 0.5 {} not below 1.01 {}",
            half.mean_step_flops, full.mean_step_flops
        ));
    }
    let (first, last) = (r.kl_history.first().unwrap(), r.kl_history.last().unwrap());
    if first.iter().zip(last).any(|(a, b)| !(b < a)) {
        fails.push(format!("KL first {first:?} last {last:?}"));
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(300) {
        fails.push(format!("runtime {elapsed:.1?} over 5 min"));
    }
    let detail = if fails.is_empty() {
        format!(
            "return at 1.01 {:.3} = base {base_mean:.3}; flops/step {:.0} < {:.0}; KL {first:.3?} -> {last:.3?}; {elapsed:.1?}",
            full.mean_return, half.mean_step_flops, full.mean_step_flops
        )
    } else {
        fails.join("; ")
    };
    outcome(fails.is_empty(), detail)
}

// ---------------------------------------------------------------- 11

fn ztw(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ztw"))
        .args(args)
        .output()
        .expect("run ztw")
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn criterion_11(root: &Path) -> Outcome {
    let cfg_path = root.join("small.txt");
    std::fs::write(
        &cfg_path,
        "dataset.per_class = 100\npretrain.epochs = 20\ntrainer.epochs = 5\nensemble.epochs = 50\nmodel.hidden = 16,16,16\n",
    )
    .unwrap();
    let rl_path = root.join("rl_small.txt");
    std::fs::write(&rl_path, "rl.width = 5\nrl.height = 5\nrl.bc_epochs = 5\nrl.rounds = 2\nrl.steps_per_round = 128\nensemble.epochs = 50\nrl.grid = 0.5,0.9,1.01\n").unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let rl = rl_path.to_str().unwrap();
    let runs: Vec<(&str, Vec<String>)> = vec![
        (
            "train",
            vec![
                "train",
                "--config",
                cfg,
                "--seed",
                "3",
                "--out",
                "{d}/train",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "evaluate",
            vec![
                "evaluate",
                "--checkpoint",
                "{d}/train/model.ckpt",
                "--policy",
                "ztw",
                "--value",
                "0.8",
                "--out",
                "{d}/eval",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "sweep",
            vec![
                "sweep",
                "--checkpoint",
                "{d}/train/model.ckpt",
                "--policy",
                "pbee",
                "--grid",
                "1,2,3",
                "--out",
                "{d}/sweep",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "hi",
            vec![
                "hi",
                "--checkpoint",
                "{d}/train/model.ckpt",
                "--out",
                "{d}/hi",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "budget",
            vec![
                "budget",
                "--frontier",
                "{d}/sweep/frontier.csv",
                "--out",
                "{d}/budget.txt",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "distill",
            vec!["distill", "--config", rl, "--seed", "4", "--out", "{d}/rl"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
    ];
    let mut trees = Vec::new();
    for rep in ["a", "b"] {
        let d = root.join(format!("det_{rep}"));
        for (name, args) in &runs {
            let args: Vec<String> = args
                .iter()
                .map(|a| a.replace("{d}", d.to_str().unwrap()))
                .collect();
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            let out = ztw(&refs);
            if !out.status.success() {
                return outcome(
                    false,
                    format!("{name} failed: {}", String::from_utf8_lossy(&out.stderr)),
                );
            }
        }
        trees.push(files_under(&d));
    }
    // manifests quote the absolute checkpoint path, which differs by run directory
    let strip = |bytes: &[u8], d: &str| {
        String::from_utf8_lossy(bytes)
            .replace(d, "{d}")
            .into_bytes()
    };
    let a: Vec<_> = trees[0]
        .iter()
        .map(|(p, b)| (p.clone(), strip(b, root.join("det_a").to_str().unwrap())))
        .collect();
    let b: Vec<_> = trees[1]
        .iter()
        .map(|(p, b)| (p.clone(), strip(b, root.join("det_b").to_str().unwrap())))
        .collect();
    let raw_same = trees[0]
        .iter()
        .zip(&trees[1])
        .filter(|((p, _), _)| p.extension().is_some_and(|e| e == "ckpt" || e == "csv"))
        .all(|((pa, ba), (pb, bb))| pa == pb && ba == bb);
    let differing: Vec<String> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    outcome(
        a.len() == b.len() && differing.is_empty() && raw_same,
        if differing.is_empty() {
            format!(
                "{} artifacts from 6 commands identical across re-runs",
                a.len()
            )
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

// ----------------------------------------------------------------

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut results: Vec<(usize, Outcome, Duration)> = Vec::new();
    let mut run = |id: usize, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let d = t.elapsed();
        println!(
            "{} criterion {id}: {} [{d:.1?}]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, o, d));
        results.iter().all(|r| r.1.pass)
    };

    run(2, &mut criterion_2);
    run(3, &mut criterion_3);
    run(6, &mut criterion_6);
    run(7, &mut criterion_7);
    let mut spiral_ckpts = Vec::new();
    run(8, &mut || {
        let (o, c) = criterion_8(root);
        spiral_ckpts = c;
        o
    });
    let mut mnist_ckpt = None;
    run(9, &mut || {
        let (o, c) = criterion_9(root);
        mnist_ckpt = c;
        o
    });

    let mut fixtures: Vec<Fixture> = [7u64, 8]
        .iter()
        .map(|&s| {
            let (bundle, data) = random_bundle(s);
            Fixture {
                name: format!("random cnn {s}"),
                bundle,
                data,
            }
        })
        .collect();
    for (i, c) in spiral_ckpts.iter().enumerate() {
        fixtures.push(load_fixture(&format!("spirals run {i}"), c, 400));
    }
    if let Some(c) = &mnist_ckpt {
        fixtures.push(load_fixture("mnist", c, 300));
    }
    run(4, &mut || criterion_4(&fixtures));
    run(5, &mut || match spiral_ckpts.first() {
        Some(c) => criterion_5(&fixtures, &load_fixture("spirals 200", c, 200)),
        None => outcome(false, "no trained spirals fixture"),
    });
    run(10, &mut || criterion_10(root));
    let others_pass = run(11, &mut || criterion_11(root));
    run(1, &mut || {
        outcome(
            others_pass,
            "full-scale tables are replaced by criteria 2-11 at desk scale; passes when all of them pass",
        )
    });

    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria pass",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
