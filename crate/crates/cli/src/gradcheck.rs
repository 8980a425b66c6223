use ren::verify::{check_losses, CheckSizes};

use crate::Status;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 4)]
    input: usize,
    #[arg(long, default_value_t = 5)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    feature_dim: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Perturb one analytic gradient entry to exercise the failure path.
    #[arg(long, hide = true)]
    corrupt: bool,
}

pub fn run(a: Args) -> anyhow::Result<Status> {
    let sizes = CheckSizes {
        batch: a.batch,
        input: a.input,
        hidden: a.hidden,
        feature_dim: a.feature_dim,
        classes: a.classes,
    };
    let mut failed = 0;
    for seed in a.seed..a.seed + a.seeds.max(1) {
        for c in check_losses(seed, &sizes, a.h, a.tol, a.corrupt)? {
            let r = &c.report;
            let at = match (c.worst_param.as_deref(), r.worst) {
                (Some(name), Some((_, entry))) => format!("{name}[{entry}]"),
                _ => "-".into(),
            };
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            if !r.passed() {
                failed += 1;
            }
            println!(
                "seed {seed} {:<13} max_rel {:.3e} worst {at} analytic {:.6e} numeric {:.6e} {verdict}",
                c.term.name(),
                r.max_rel_error,
                r.worst_analytic,
                r.worst_numeric,
            );
        }
    }
    if failed > 0 {
        println!("{failed} check(s) above tolerance {:e}", a.tol);
        Ok(Status::CheckFailed)
    } else {
        println!("all checks within tolerance {:e}", a.tol);
        Ok(Status::Ok)
    }
}
