//! Central finite-difference checks for graph gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it is checking.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares analytic and numeric gradients of `Σ weights ⊙ build(inputs)`.
///
/// `build` receives the inputs bound as parameters and returns any tensor;
/// it is projected onto fixed random weights (drawn from `seed`) so every
/// output element carries a distinct upstream gradient.
pub fn check<F>(
    inputs: &[Tensor],
    seed: u64,
    cfg: GradCheckConfig,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let projection: std::cell::RefCell<Option<Tensor>> = std::cell::RefCell::new(None);
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let mut proj = projection.borrow_mut();
        let weights = proj.get_or_insert_with(|| {
            let mut rng = Rng::new(seed);
            let shape = g.shape(out).to_vec();
            let data = (0..g.value(out).len())
                .map(|_| rng.uniform_in(-1.0, 1.0))
                .collect();
            Tensor::new(shape, data).expect("projection shape")
        });
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        Ok((g, vars, loss))
    };

    let (g, vars, loss) = eval(inputs)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let original = input.data()[ei];
            work[ti].data_mut()[ei] = original + cfg.step;
            let (gp, _, lp) = eval(&work)?;
            let plus = gp.value(lp).item();
            work[ti].data_mut()[ei] = original - cfg.step;
            let (gm, _, lm) = eval(&work)?;
            let minus = gm.value(lm).item();
            work[ti].data_mut()[ei] = original;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[ti].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Random tensor with entries in `[lo, hi)`.
pub fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_in(lo, hi)).collect(),
    )
    .expect("positive shape")
}

/// Random tensor whose entries stay at least `gap` away from zero, so kinks
/// (relu, max) are not straddled by the finite-difference step.
pub fn random_tensor_away_from_zero(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.uniform_in(gap, 1.0);
            if rng.uniform() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}
