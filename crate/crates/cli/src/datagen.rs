use std::f64::consts::TAU;
use std::path::PathBuf;

use anyhow::{bail, Context};
use ren::datasets::{io, BenchmarkSpec, Generator, ShiftSpec};

use crate::Status;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// two_moons or blobs
    #[arg(long = "gen", default_value = "two_moons")]
    generator: String,
    /// Source sample count.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Target sample count; defaults to --n.
    #[arg(long)]
    n_target: Option<usize>,
    /// Target rotation in degrees about the generator centre.
    #[arg(long, default_value_t = 45.0, allow_hyphen_values = true)]
    rot: f64,
    /// Generator noise standard deviation.
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    tx: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    ty: f64,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Extra noise added to the target after the transform.
    #[arg(long, default_value_t = 0.0)]
    shift_noise: f64,
    /// First-to-last class size ratio in the target.
    #[arg(long, default_value_t = 1.0)]
    imbalance: f64,
    /// Embedding dimension; 0 keeps raw 2-D points.
    #[arg(long, default_value_t = 16)]
    lift: usize,
    #[arg(long, default_value_t = 0.05)]
    lift_noise: f64,
    /// Number of blobs, placed evenly on a circle of radius 2.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0.5)]
    blob_sigma: f64,
    /// Output CSV; the sidecar goes next to it with a .meta extension.
    #[arg(long)]
    out: PathBuf,
}

fn generator(a: &Args) -> anyhow::Result<Generator> {
    Ok(match a.generator.as_str() {
        "two_moons" => Generator::TwoMoons,
        "blobs" => {
            if a.classes < 2 {
                bail!("blobs need at least 2 classes, got {}", a.classes);
            }
            let k = a.classes as f64;
            let centers = (0..a.classes)
                .map(|i| {
                    let t = TAU * i as f64 / k;
                    [2.0 * t.cos(), 2.0 * t.sin()]
                })
                .collect();
            Generator::Blobs {
                centers,
                sigma: a.blob_sigma,
            }
        }
        other => bail!("unknown generator `{other}` (expected two_moons or blobs)"),
    })
}

pub fn spec(a: &Args) -> anyhow::Result<BenchmarkSpec> {
    Ok(BenchmarkSpec {
        generator: generator(a)?,
        n_source: a.n,
        n_target: a.n_target.unwrap_or(a.n),
        noise_sigma: a.noise,
        shift: ShiftSpec {
            rotation_deg: a.rot,
            translation: [a.tx, a.ty],
            scale: a.scale,
            noise_sigma: a.shift_noise,
            class_imbalance_ratio: a.imbalance,
        },
        lift_dim: a.lift,
        lift_noise: a.lift_noise,
    })
}

pub fn run(a: Args) -> anyhow::Result<Status> {
    let ds = spec(&a)?.build(a.seed)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    io::save(&ds, &a.out)?;
    println!("{}", a.out.display());
    println!("{}", io::meta_path(&a.out).display());
    Ok(Status::Ok)
}
