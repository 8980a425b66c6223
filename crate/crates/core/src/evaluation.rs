//! Target accuracy, curve stability, ablation summaries and a 2-D feature
//! projection, plus their file formats.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::datasets::DomainDataset;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::networks::{predict, ParamSet};
use crate::tensor::Tensor;
use crate::trainer::Variant;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy_from_scores(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    if scores.rows() != labels.len() {
        return Err(Error::Shape {
            op: "accuracy",
            left: scores.shape(),
            right: (labels.len(), 1),
        });
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(scores.row(r)) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn accuracy(f: &ParamSet, c: &ParamSet, x: &Tensor, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let (_, probs) = predict(f, c, x)?;
    accuracy_from_scores(&probs, y)
}

pub fn target_accuracy(f: &ParamSet, c: &ParamSet, ds: &DomainDataset) -> Result<f64> {
    accuracy(f, c, &ds.target_x, ds.target_labels())
}

pub fn source_accuracy(f: &ParamSet, c: &ParamSet, ds: &DomainDataset) -> Result<f64> {
    accuracy(f, c, &ds.source_x, &ds.source_y)
}

/// Unbiased sample standard deviation; zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation of the last `window_fraction` of `series`
/// (at least two points).
pub fn stability(series: &[f64], window_fraction: f64) -> Result<f64> {
    if series.len() < 4 {
        return Err(Error::Contract(format!(
            "stability needs at least 4 evaluation points, got {}",
            series.len()
        )));
    }
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "window fraction must be in (0, 1], got {window_fraction}"
        )));
    }
    let window = ((series.len() as f64 * window_fraction).ceil() as usize).clamp(2, series.len());
    Ok(sample_std(&series[series.len() - window..]))
}

/// One evaluation point of a training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub acc_student_target: f64,
    /// `None` for variants without a teacher.
    pub acc_teacher_target: Option<f64>,
    pub acc_student_source: f64,
}

impl MetricsRecord {
    /// Teacher accuracy when there is a teacher, student accuracy otherwise.
    pub fn reported_accuracy(&self) -> f64 {
        self.acc_teacher_target.unwrap_or(self.acc_student_target)
    }
}

pub const METRICS_HEADER: &str =
    "step,lr,l_c,l_d_stu,l_d_tea,l_con,total,acc_student_target,acc_teacher_target,acc_student_source";

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        let l = &r.losses;
        let teacher = r.acc_teacher_target.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.lr,
            l.l_c,
            l.l_d_stu,
            l.l_d_tea,
            l.l_con,
            l.total,
            r.acc_student_target,
            teacher,
            r.acc_student_source
        )
        .unwrap();
    }
    out
}

pub fn metrics_from_csv(text: &str, path: &str) -> Result<Vec<MetricsRecord>> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(perr(1, "unexpected metrics header".into())),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(perr(n + 1, format!("expected 10 fields, got {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> { f[i].parse().map_err(|_| perr(n + 1, format!("bad number `{}`", f[i]))) };
        out.push(MetricsRecord {
            step: f[0].parse().map_err(|_| perr(n + 1, format!("bad step `{}`", f[0])))?,
            lr: num(1)?,
            losses: LossBreakdown {
                l_c: num(2)?,
                l_d_stu: num(3)?,
                l_d_tea: num(4)?,
                l_con: num(5)?,
                total: num(6)?,
            },
            acc_student_target: num(7)?,
            acc_teacher_target: if f[8].is_empty() { None } else { Some(num(8)?) },
            acc_student_source: num(9)?,
        });
    }
    Ok(out)
}

/// Final accuracy of one `(variant, seed)` run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<(u64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub lower: Variant,
    pub upper: Variant,
    /// `mean(upper) - mean(lower)`.
    pub delta: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub variants: Vec<VariantSummary>,
    pub tolerance: f64,
    pub checks: Vec<OrderingCheck>,
    pub ordering_holds: bool,
}

/// Accuracy slack (as a fraction) allowed between adjacent variants.
pub const ORDERING_TOLERANCE: f64 = 0.005;

/// Seeds per variant required for a trustworthy ordering verdict.
pub const DEFAULT_MIN_SEEDS: usize = 3;

/// Per-variant mean and std of final accuracy, and the non-strict ordering
/// `cdan <= cdan_m <= cdan_m_d <= ren` over the requested variants that
/// appear in that chain. Runs are reduced in seed order.
pub fn ablation_report(results: &[RunResult], variants: &[Variant], min_seeds: usize) -> Result<AblationReport> {
    let mut summaries = Vec::new();
    for &v in variants {
        let mut runs: Vec<(u64, f64)> = results
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| (r.seed, r.accuracy))
            .collect();
        if runs.is_empty() {
            return Err(Error::Contract(format!("no runs for variant {}", v.name())));
        }
        if runs.len() < min_seeds {
            return Err(Error::Contract(format!(
                "variant {} has {} seeds, need at least {min_seeds}",
                v.name(),
                runs.len()
            )));
        }
        runs.sort_by_key(|r| r.0);
        let accs: Vec<f64> = runs.iter().map(|r| r.1).collect();
        summaries.push(VariantSummary {
            variant: v,
            mean: mean(&accs),
            std: sample_std(&accs),
            runs,
        });
    }
    let chain: Vec<&VariantSummary> = Variant::ABLATION_CHAIN
        .iter()
        .filter_map(|v| summaries.iter().find(|s| s.variant == *v))
        .collect();
    let checks: Vec<OrderingCheck> = chain
        .windows(2)
        .map(|w| {
            let delta = w[1].mean - w[0].mean;
            OrderingCheck {
                lower: w[0].variant,
                upper: w[1].variant,
                delta,
                holds: delta >= -ORDERING_TOLERANCE,
            }
        })
        .collect();
    let ordering_holds = checks.iter().all(|c| c.holds);
    Ok(AblationReport {
        variants: summaries,
        tolerance: ORDERING_TOLERANCE,
        checks,
        ordering_holds,
    })
}

/// Centres `features` and projects onto the two leading principal
/// directions. Each direction's largest-magnitude loading is made positive.
pub fn project_2d(features: &Tensor) -> Result<Tensor> {
    let (m, d) = features.shape();
    if d < 2 {
        return Err(Error::Contract(format!(
            "projection needs at least 2 feature dims, got {d}"
        )));
    }
    if m < 2 {
        return Err(Error::Contract(format!("projection needs at least 2 rows, got {m}")));
    }
    let x = DMatrix::from_row_slice(m, d, features.data());
    let means = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut basis = DMatrix::zeros(d, 2);
    for (out_col, &k) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = (0..d)
            .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap().then(b.cmp(&a)))
            .unwrap();
        if v[lead] < 0.0 {
            v = -v;
        }
        basis.set_column(out_col, &v);
    }
    let projected = centered * basis;
    let mut data = Vec::with_capacity(m * 2);
    for r in 0..m {
        data.push(projected[(r, 0)]);
        data.push(projected[(r, 1)]);
    }
    Tensor::new(m, 2, data)
}

/// Projects `f`'s features of every source and target sample and renders
/// `id,domain,label,pc1,pc2` rows.
pub fn projection_csv(f: &ParamSet, ds: &DomainDataset) -> Result<String> {
    let fs = f.apply(&ds.source_x)?;
    let ft = f.apply(&ds.target_x)?;
    let mut all = fs.data().to_vec();
    all.extend_from_slice(ft.data());
    let stacked = Tensor::new(fs.rows() + ft.rows(), fs.cols(), all)?;
    let proj = project_2d(&stacked)?;
    let mut out = String::from("id,domain,label,pc1,pc2\n");
    let rows = ds
        .source_y
        .iter()
        .enumerate()
        .map(|(i, &y)| (i, "source", y))
        .chain(ds.target_labels().iter().enumerate().map(|(i, &y)| (i, "target", y)));
    for (r, (id, domain, label)) in rows.enumerate() {
        writeln!(out, "{id},{domain},{label},{},{}", proj.get(r, 0), proj.get(r, 1)).unwrap();
    }
    Ok(out)
}
