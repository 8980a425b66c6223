use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use ren::evaluation::{metrics_from_csv, stability, AblationReport};
use serde::Deserialize;

use crate::ablate::SUMMARY_FILE;
use crate::train::METRICS_FILE;
use crate::Status;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// A run directory (with metrics.csv) or an ablation output directory.
    path: PathBuf,
    /// Share of the final evaluations used for the stability figure.
    #[arg(long, default_value_t = 0.5)]
    window: f64,
}

pub fn ablation_table(r: &AblationReport) -> String {
    let value = serde_json::to_value(r).expect("reports serialise");
    table(&serde_json::from_value(value).expect("a report reads back as its own table"))
}

// Only the fields the table needs; the summary is read back loosely.
#[derive(Deserialize)]
struct SummaryFile {
    report: ReportFile,
}

#[derive(Deserialize)]
struct ReportFile {
    variants: Vec<VariantFile>,
    checks: Vec<CheckFile>,
    tolerance: f64,
    ordering_holds: bool,
}

#[derive(Deserialize)]
struct VariantFile {
    variant: String,
    mean: f64,
    std: f64,
    runs: Vec<(u64, f64)>,
}

#[derive(Deserialize)]
struct CheckFile {
    lower: String,
    upper: String,
    delta: f64,
    holds: bool,
}

fn table(r: &ReportFile) -> String {
    let mut out = String::from("variant     seeds  mean    std\n");
    for v in &r.variants {
        writeln!(
            out,
            "{:<11} {:>5}  {:.4}  {:.4}",
            v.variant,
            v.runs.len(),
            v.mean,
            v.std
        )
        .unwrap();
    }
    for c in &r.checks {
        let mark = if c.holds { "ok" } else { "violated" };
        writeln!(out, "{} <= {}: delta {:+.4} {mark}", c.lower, c.upper, c.delta).unwrap();
    }
    let verdict = if r.ordering_holds { "holds" } else { "fails" };
    writeln!(out, "ordering {verdict} (tolerance {})", r.tolerance).unwrap();
    out
}

fn run_summary(path: &std::path::Path, window: f64) -> anyhow::Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records = metrics_from_csv(&text, &path.display().to_string())?;
    let Some(last) = records.last() else {
        bail!("{} has no records", path.display());
    };
    let mut out = String::new();
    writeln!(out, "evaluations {} final step {}", records.len(), last.step).unwrap();
    writeln!(out, "student target accuracy {:.4}", last.acc_student_target).unwrap();
    writeln!(out, "student source accuracy {:.4}", last.acc_student_source).unwrap();
    if let Some(t) = last.acc_teacher_target {
        writeln!(out, "teacher target accuracy {t:.4}").unwrap();
    }
    if records.len() >= 4 {
        let student: Vec<f64> = records.iter().map(|r| r.acc_student_target).collect();
        writeln!(out, "student stability {:.4}", stability(&student, window)?).unwrap();
        let teacher: Option<Vec<f64>> = records.iter().map(|r| r.acc_teacher_target).collect();
        if let Some(t) = teacher {
            writeln!(out, "teacher stability {:.4}", stability(&t, window)?).unwrap();
        }
    } else {
        writeln!(out, "stability needs at least 4 evaluations").unwrap();
    }
    Ok(out)
}

pub fn run(a: Args) -> anyhow::Result<Status> {
    let summary = a.path.join(SUMMARY_FILE);
    let metrics = a.path.join(METRICS_FILE);
    if summary.is_file() {
        let text = fs::read_to_string(&summary).with_context(|| format!("reading {}", summary.display()))?;
        let parsed: SummaryFile =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", summary.display()))?;
        print!("{}", table(&parsed.report));
    } else if metrics.is_file() {
        print!("{}", run_summary(&metrics, a.window)?);
    } else if a.path.is_file() {
        print!("{}", run_summary(&a.path, a.window)?);
    } else {
        bail!("{} holds neither {SUMMARY_FILE} nor {METRICS_FILE}", a.path.display());
    }
    Ok(Status::Ok)
}
