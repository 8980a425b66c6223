use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use anyhow::{bail, Context};
use ren::evaluation::{ablation_report, AblationReport, RunResult};
use ren::trainer::Variant;
use serde::Serialize;

use crate::train::{execute, load_config, parse_options, DataSource};
use crate::Status;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// --seeds 0,1,2,3,4 --variants cdan,cdan_m,cdan_m_d,ren --min-seeds 1
    /// --jobs N, plus every option `train` accepts.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OPTIONS")]
    rest: Vec<String>,
}

pub const SUMMARY_FILE: &str = "ablation.json";

#[derive(Serialize)]
struct RunEntry {
    variant: Variant,
    seed: u64,
    dir: String,
    accuracy: f64,
}

#[derive(Serialize)]
struct Summary {
    report: AblationReport,
    runs: Vec<RunEntry>,
}

fn parse_list<T>(text: &str, what: &str, f: impl Fn(&str) -> anyhow::Result<T>) -> anyhow::Result<Vec<T>> {
    let items: Vec<T> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect::<anyhow::Result<_>>()?;
    if items.is_empty() {
        bail!("--{what} needs at least one entry");
    }
    Ok(items)
}

pub fn run(a: Args) -> anyhow::Result<Status> {
    let opts = parse_options(&a.rest, &["seeds", "variants", "min_seeds", "jobs"])?;
    let mut seeds = vec![0, 1, 2, 3, 4];
    let mut variants = Variant::ABLATION_CHAIN.to_vec();
    let mut min_seeds = 1;
    let mut jobs = thread::available_parallelism().map_or(1, |n| n.get());
    for (k, v) in &opts.extra {
        match k.as_str() {
            "seeds" => seeds = parse_list(v, "seeds", |s| s.parse().with_context(|| format!("bad seed `{s}`")))?,
            "variants" => variants = parse_list(v, "variants", |s| Ok(s.parse::<Variant>()?))?,
            "min_seeds" => min_seeds = v.parse().with_context(|| format!("bad --min-seeds `{v}`"))?,
            "jobs" => jobs = v.parse().with_context(|| format!("bad --jobs `{v}`"))?,
            _ => unreachable!("parse_options only passes declared keys"),
        }
    }
    seeds.sort_unstable();
    seeds.dedup();
    let base = load_config(&opts)?;
    let data = DataSource::from_option(opts.data.as_deref())?;
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut tasks = Vec::new();
    for &variant in &variants {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.seed = seed;
            tasks.push(cfg);
        }
    }
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::new());
    thread::scope(|s| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = tasks.get(i) else { break };
                let r = execute(cfg, &data, &out).map(|(dir, o)| (dir, o.final_accuracy()));
                done.lock()
                    .expect("no worker panics while holding the lock")
                    .push((i, r));
            });
        }
    });
    let mut done = done.into_inner().expect("workers have finished");
    done.sort_by_key(|(i, _)| *i);

    let mut results = Vec::new();
    let mut runs = Vec::new();
    for (i, r) in done {
        let (dir, accuracy) = r?;
        let cfg = &tasks[i];
        results.push(RunResult {
            variant: cfg.variant,
            seed: cfg.seed,
            accuracy,
        });
        runs.push(RunEntry {
            variant: cfg.variant,
            seed: cfg.seed,
            dir: dir.display().to_string(),
            accuracy,
        });
    }
    let report = ablation_report(&results, &variants, min_seeds)?;
    let text = crate::report::ablation_table(&report);
    let summary = Summary { report, runs };
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    println!("summary {}", path.display());
    Ok(Status::Ok)
}
