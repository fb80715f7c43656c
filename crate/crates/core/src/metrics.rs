//! Hindsight Improvability, threshold sweeps and budgeted selection.

use std::io::Write;

use crate::bundle::CostTable;
use crate::error::{Error, Result};
use crate::policy::{
    decide_cached, summarize, PolicyConfig, PolicyKind, ProbSource, SampleOutputs,
};
use crate::tensor::argmax;

/// `correct[n][m]`: whether head `m + 1` classified sample `n` correctly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectnessMatrix {
    rows: Vec<Vec<bool>>,
    heads: usize,
}

impl CorrectnessMatrix {
    pub fn new(rows: Vec<Vec<bool>>) -> Result<Self> {
        let heads = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || heads == 0 || rows.iter().any(|r| r.len() != heads) {
            return Err(Error::Config(
                "correctness matrix must be non-empty and rectangular".into(),
            ));
        }
        Ok(CorrectnessMatrix { rows, heads })
    }

    /// From cached outputs, judging heads or ensemble stages by argmax.
    pub fn from_outputs(outputs: &[SampleOutputs], source: ProbSource) -> Result<Self> {
        let rows = outputs
            .iter()
            .map(|s| {
                let lps = match source {
                    ProbSource::Heads => &s.head_log_probs,
                    ProbSource::Ensembles => s
                        .ensemble_log_probs
                        .as_ref()
                        .ok_or_else(|| Error::Config("outputs lack ensembles".into()))?,
                };
                Ok(lps.iter().map(|lp| argmax(lp) == s.label).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        CorrectnessMatrix::new(rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_heads(&self) -> usize {
        self.heads
    }

    pub fn get(&self, n: usize, m: usize) -> bool {
        self.rows[n][m]
    }
}

/// For each head `m`, the fraction of its mistakes that some earlier head
/// got right. `None` where head `m` makes no mistakes.
pub fn hindsight_improvability(cm: &CorrectnessMatrix) -> Vec<Option<f64>> {
    let mut earlier_right = vec![false; cm.len()];
    let mut out = Vec::with_capacity(cm.num_heads());
    for m in 0..cm.num_heads() {
        let mut wrong = 0usize;
        let mut recoverable = 0usize;
        for (n, row) in cm.rows.iter().enumerate() {
            if !row[m] {
                wrong += 1;
                if earlier_right[n] {
                    recoverable += 1;
                }
            }
        }
        out.push((wrong > 0).then(|| recoverable as f64 / wrong as f64));
        for (n, row) in cm.rows.iter().enumerate() {
            earlier_right[n] |= row[m];
        }
    }
    out
}

pub fn write_hi_csv<W: Write>(mut out: W, hi: &[Option<f64>]) -> std::io::Result<()> {
    writeln!(out, "head,hi,undefined_flag")?;
    for (m, h) in hi.iter().enumerate() {
        match h {
            Some(v) => writeln!(out, "{},{v},0", m + 1)?,
            None => writeln!(out, "{},NA,1", m + 1)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontierPoint {
    pub tau: f64,
    pub mean_flops: f64,
    /// Mean FLOPs relative to the backbone alone.
    pub flops_fraction: f64,
    pub accuracy: f64,
}

/// Parses comma-separated values and inclusive `start:stop:step` ranges,
/// e.g. `0:1:0.01,1.01`. Values are rounded to 10 decimals and must be
/// strictly increasing.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = |msg: String| Error::Config(format!("grid {spec:?}: {msg}"));
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad(format!("{s:?} is not a number")))
    };
    let round = |v: f64| (v * 1e10).round() / 1e10;
    let mut out = Vec::new();
    for part in spec.split(',') {
        let pieces: Vec<&str> = part.split(':').collect();
        match pieces.as_slice() {
            [v] => out.push(round(num(v)?)),
            [a, b, s] => {
                let (start, stop, step) = (num(a)?, num(b)?, num(s)?);
                if !(step > 0.0) || stop < start {
                    return Err(bad(format!(
                        "range {part:?} needs start <= stop and step > 0"
                    )));
                }
                let count = ((stop - start) / step + 1e-9).floor() as usize;
                out.extend((0..=count).map(|i| round(start + i as f64 * step)));
            }
            _ => return Err(bad(format!("cannot parse {part:?}"))),
        }
    }
    if out.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad("values must be strictly increasing".into()));
    }
    Ok(out)
}

/// Default threshold grid: 0.00 to 1.00 in steps of 0.01, then 1.01.
pub fn default_grid() -> Vec<f64> {
    parse_grid("0:1:0.01,1.01").expect("static grid")
}

fn policy_at(template: &PolicyConfig, value: f64) -> Result<PolicyConfig> {
    Ok(match template.kind {
        PolicyKind::Threshold { .. } => PolicyConfig::threshold(value, template.source),
        PolicyKind::Patience { .. } => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!(
                    "patience grid value {value} is not a positive integer"
                )));
            }
            PolicyConfig::patience(value as usize)
        }
    })
}

/// One frontier point per grid value, all decided from the same cached
/// per-sample outputs.
pub fn sweep_frontier(
    outputs: &[SampleOutputs],
    grid: &[f64],
    template: &PolicyConfig,
    costs: &CostTable,
    full_flops: u64,
) -> Result<Vec<FrontierPoint>> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "grid must be non-empty and strictly increasing".into(),
        ));
    }
    grid.iter()
        .map(|&v| {
            let traces = decide_cached(outputs, &policy_at(template, v)?, costs)?;
            let (mean_flops, accuracy) = summarize(&traces);
            Ok(FrontierPoint {
                tau: v,
                mean_flops,
                flops_fraction: mean_flops / full_flops as f64,
                accuracy,
            })
        })
        .collect()
}

pub fn write_frontier_csv<W: Write>(mut out: W, points: &[FrontierPoint]) -> std::io::Result<()> {
    writeln!(out, "tau,mean_flops,flops_fraction,accuracy")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{}",
            p.tau, p.mean_flops, p.flops_fraction, p.accuracy
        )?;
    }
    Ok(())
}

/// Reads a frontier CSV back.
pub fn read_frontier_csv(text: &str) -> Result<Vec<FrontierPoint>> {
    let mut lines = text.lines();
    if lines.next() != Some("tau,mean_flops,flops_fraction,accuracy") {
        return Err(Error::Config("frontier CSV header mismatch".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let v: Vec<f64> = l
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("frontier line {}: {e}", i + 2)))?;
            if v.len() != 4 {
                return Err(Error::Config(format!(
                    "frontier line {} has {} fields",
                    i + 2,
                    v.len()
                )));
            }
            Ok(FrontierPoint {
                tau: v[0],
                mean_flops: v[1],
                flops_fraction: v[2],
                accuracy: v[3],
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    /// Fraction of the backbone's FLOPs, in `(0, 1]`.
    Fraction(f64),
    /// No limit: best accuracy anywhere on the grid.
    Max,
}

impl Budget {
    pub fn parse(s: &str) -> Result<Budget> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("max") || t == "inf" {
            return Ok(Budget::Max);
        }
        let v = t
            .strip_suffix('%')
            .map(|p| p.parse::<f64>().map(|x| x / 100.0))
            .unwrap_or_else(|| t.parse::<f64>())
            .map_err(|_| Error::Config(format!("budget {s:?} is not a number")))?;
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Config(format!(
                "budget {s:?} must lie in (0, 1] or be \"max\""
            )));
        }
        Ok(Budget::Fraction(v))
    }

    pub fn label(&self) -> String {
        match self {
            Budget::Fraction(f) => format!("{}%", (f * 100.0 * 1e6).round() / 1e6),
            Budget::Max => "Max".into(),
        }
    }
}

/// Largest grid value whose mean cost fits the budget, with the accuracy
/// there. `Max` picks the most accurate point (ties to the larger value).
pub fn select_tau_for_budget(points: &[FrontierPoint], budget: Budget) -> Result<FrontierPoint> {
    let chosen = match budget {
        Budget::Fraction(f) => points.iter().rfind(|p| p.flops_fraction <= f),
        Budget::Max => points
            .iter()
            .fold(None, |best: Option<&FrontierPoint>, p| match best {
                Some(b) if b.accuracy > p.accuracy => Some(b),
                _ => Some(p),
            }),
    };
    chosen.cloned().ok_or_else(|| Error::Infeasible {
        budget: budget.label(),
    })
}

/// Table with one column per budget: chosen threshold and accuracy, `-`
/// where infeasible.
pub fn render_budget_table(points: &[FrontierPoint], budgets: &[Budget]) -> String {
    let mut header = vec![String::new()];
    let mut taus = vec!["tau".to_string()];
    let mut accs = vec!["accuracy".to_string()];
    for &b in budgets {
        header.push(b.label());
        match select_tau_for_budget(points, b) {
            Ok(p) => {
                taus.push(format!("{}", p.tau));
                accs.push(format!("{:.4}", p.accuracy));
            }
            Err(_) => {
                taus.push("-".into());
                accs.push("-".into());
            }
        }
    }
    let width = header
        .iter()
        .chain(&taus)
        .chain(&accs)
        .map(String::len)
        .max()
        .unwrap_or(0)
        + 2;
    let row = |cells: &[String]| -> String {
        let mut s: String = cells.iter().map(|c| format!("{c:<width$}")).collect();
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    format!("{}{}{}", row(&header), row(&taus), row(&accs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[bool]]) -> CorrectnessMatrix {
        CorrectnessMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn hi_example() {
        // samples a, b, c: head 1 right on {a, b}, head 2 wrong on {b, c}
        let m = cm(&[&[true, true], &[true, false], &[false, false]]);
        let hi = hindsight_improvability(&m);
        assert_eq!(hi, vec![Some(0.0), Some(0.5)]);
    }

    #[test]
    fn all_correct_is_undefined() {
        let m = cm(&[&[true, true, true], &[true, true, true]]);
        assert_eq!(hindsight_improvability(&m), vec![None, None, None]);
        let mut buf = Vec::new();
        write_hi_csv(&mut buf, &[Some(0.0), None]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "head,hi,undefined_flag\n1,0,0\n2,NA,1\n"
        );
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0:1:0.01,1.01").unwrap();
        assert_eq!(g.len(), 102);
        assert_eq!(g[37], 0.37);
        assert_eq!(*g.last().unwrap(), 1.01);
        assert_eq!(parse_grid("0.5").unwrap(), vec![0.5]);
        assert!(parse_grid("0.5,0.4").is_err());
        assert!(parse_grid("a:b").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
    }

    fn pt(tau: f64, frac: f64, acc: f64) -> FrontierPoint {
        FrontierPoint {
            tau,
            mean_flops: frac * 100.0,
            flops_fraction: frac,
            accuracy: acc,
        }
    }

    #[test]
    fn budget_picks_largest_feasible_tau() {
        let pts = vec![
            pt(0.2, 0.3, 0.7),
            pt(0.4, 0.45, 0.8),
            pt(0.6, 0.7, 0.9),
            pt(1.01, 1.1, 0.95),
        ];
        assert_eq!(
            select_tau_for_budget(&pts, Budget::Fraction(0.5))
                .unwrap()
                .tau,
            0.4
        );
        assert_eq!(
            select_tau_for_budget(&pts, Budget::Fraction(1.0))
                .unwrap()
                .tau,
            0.6
        );
        assert_eq!(select_tau_for_budget(&pts, Budget::Max).unwrap().tau, 1.01);
        assert!(matches!(
            select_tau_for_budget(&pts, Budget::Fraction(0.25)),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn budget_parsing() {
        assert_eq!(Budget::parse("0.25").unwrap(), Budget::Fraction(0.25));
        assert_eq!(Budget::parse("50%").unwrap(), Budget::Fraction(0.5));
        assert_eq!(Budget::parse("max").unwrap(), Budget::Max);
        assert!(Budget::parse("1.5").is_err());
        assert!(Budget::parse("0").is_err());
        assert_eq!(Budget::Fraction(0.25).label(), "25%");
    }

    #[test]
    fn budget_table_layout() {
        let pts = vec![pt(0.5, 0.4, 0.8), pt(1.01, 1.05, 0.9)];
        let budgets: Vec<Budget> = ["0.25", "0.5", "0.75", "1.0", "max"]
            .iter()
            .map(|b| Budget::parse(b).unwrap())
            .collect();
        let t = render_budget_table(&pts, &budgets);
        let lines: Vec<&str> = t.lines().collect();
        let head: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(head, ["25%", "50%", "75%", "100%", "Max"]);
        let acc: Vec<&str> = lines[2].split_whitespace().collect();
        assert_eq!(
            acc,
            ["accuracy", "-", "0.8000", "0.8000", "0.8000", "0.9000"]
        );
    }

    #[test]
    fn frontier_csv_round_trips() {
        let pts = vec![pt(0.1, 0.2, 0.3), pt(0.5, 0.25, 0.75)];
        let mut buf = Vec::new();
        write_frontier_csv(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("tau,mean_flops,flops_fraction,accuracy\n"));
        assert_eq!(read_frontier_csv(&text).unwrap(), pts);
    }
}
