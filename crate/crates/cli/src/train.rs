use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ren::datasets::{io, BenchmarkSpec, DomainDataset};
use ren::evaluation::{metrics_to_csv, projection_csv};
use ren::networks::checkpoint;
use ren::trainer::{run as train_run, RunOutput, TrainConfig, CONFIG_KEYS};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Status;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// --config FILE, --data CSV, --out DIR (default `runs`), then
    /// --KEY VALUE or --KEY=VALUE for any config key.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OPTIONS")]
    rest: Vec<String>,
}

/// Options shared by `train` and `ablate` once flags are split out.
#[derive(Debug, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
    /// Flags the caller handles itself, e.g. `seeds` for ablate.
    pub extra: Vec<(String, String)>,
}

fn is_config_key(key: &str) -> bool {
    key == "steps" || CONFIG_KEYS.contains(&key)
}

/// Splits `--key value` / `--key=value` pairs. Keys use `-` or `_`
/// interchangeably. `extra_keys` are passed through untouched.
pub fn parse_options(args: &[String], extra_keys: &[&str]) -> anyhow::Result<Options> {
    let mut opts = Options::default();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            bail!("unexpected argument `{arg}`");
        };
        let (raw, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        let key = raw.replace('-', "_");
        let known = matches!(key.as_str(), "config" | "data" | "out") || extra_keys.contains(&key.as_str());
        if !known && !is_config_key(&key) {
            bail!("unknown config key `{raw}`");
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .cloned()
                .with_context(|| format!("missing value for --{raw}"))?,
        };
        match key.as_str() {
            "config" => opts.config = Some(value.into()),
            "data" => opts.data = Some(value.into()),
            "out" => opts.out = Some(value.into()),
            k if extra_keys.contains(&k) => opts.extra.push((key, value)),
            _ => opts.overrides.push((key, value)),
        }
    }
    Ok(opts)
}

/// Defaults, then the config file, then command-line overrides.
pub fn load_config(opts: &Options) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_text(&text, &path.display().to_string())?
        }
        None => TrainConfig::default(),
    };
    for (k, v) in &opts.overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Where the data of a run comes from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// The standard benchmark drawn with the run's seed.
    Benchmark,
    File {
        path: PathBuf,
        sha256: String,
    },
}

impl DataSource {
    pub fn from_option(path: Option<&Path>) -> anyhow::Result<Self> {
        Ok(match path {
            None => DataSource::Benchmark,
            Some(p) => {
                let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                DataSource::File {
                    path: p.to_path_buf(),
                    sha256: hex_sha256(&bytes),
                }
            }
        })
    }

    pub fn load(&self, seed: u64) -> anyhow::Result<DomainDataset> {
        Ok(match self {
            DataSource::Benchmark => BenchmarkSpec::standard().build(seed)?,
            DataSource::File { path, .. } => io::load(path)?,
        })
    }

    fn identity(&self, seed: u64) -> String {
        match self {
            DataSource::Benchmark => format!("benchmark:standard:{seed}"),
            DataSource::File { sha256, .. } => format!("file:{sha256}"),
        }
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `<first 16 hex digits of sha256(config text, data identity)>-s<seed>`.
pub fn run_dir_name(cfg: &TrainConfig, data: &DataSource) -> String {
    let mut key = cfg.to_text();
    key.push_str(&data.identity(cfg.seed));
    format!("{}-s{}", &hex_sha256(key.as_bytes())[..16], cfg.seed)
}

#[derive(Serialize)]
struct DatasetInfo {
    source: &'static str,
    path: Option<String>,
    sha256: String,
    metadata: Vec<(String, String)>,
}

#[derive(Serialize)]
struct Outputs {
    config: &'static str,
    metrics: &'static str,
    checkpoint: &'static str,
    projection: &'static str,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a TrainConfig,
    config_text: String,
    seeds: Vec<u64>,
    dataset: DatasetInfo,
    replay: String,
    outputs: Outputs,
}

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PROJECTION_FILE: &str = "projection.csv";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Trains one run into `out/<run dir>/` and returns the directory and the
/// run's outputs. The manifest is written before training starts.
pub fn execute(cfg: &TrainConfig, data: &DataSource, out: &Path) -> anyhow::Result<(PathBuf, RunOutput)> {
    let ds = data.load(cfg.seed)?;
    let dir = out.join(run_dir_name(cfg, data));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let config_text = cfg.to_text();
    let (source, path, sha256) = match data {
        DataSource::Benchmark => ("benchmark", None, hex_sha256(io::to_csv(&ds).as_bytes())),
        DataSource::File { path, sha256 } => ("file", Some(path.display().to_string()), sha256.clone()),
    };
    let mut replay = format!("ren train --config {}", dir.join(CONFIG_FILE).display());
    if let Some(p) = &path {
        replay.push_str(&format!(" --data {p}"));
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        config_text: config_text.clone(),
        seeds: vec![cfg.seed],
        dataset: DatasetInfo {
            source,
            path,
            sha256,
            metadata: ds.metadata.clone(),
        },
        replay,
        outputs: Outputs {
            config: CONFIG_FILE,
            metrics: METRICS_FILE,
            checkpoint: CHECKPOINT_FILE,
            projection: PROJECTION_FILE,
        },
    };
    write(&dir.join(CONFIG_FILE), &config_text)?;
    write(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;

    let output = train_run(cfg, &ds)?;

    write(&dir.join(METRICS_FILE), metrics_to_csv(&output.metrics))?;
    let mut entries = checkpoint::dualnet_entries(&output.net);
    entries.extend(output.disc.params.tensors().iter().cloned());
    write(
        &dir.join(CHECKPOINT_FILE),
        checkpoint::encode(entries.iter().map(|(n, t)| (n.as_str(), t))),
    )?;
    let f = output.net.teacher().map_or(&output.net.student_f, |(f, _)| f);
    write(&dir.join(PROJECTION_FILE), projection_csv(f, &ds)?)?;
    Ok((dir, output))
}

pub fn run(a: Args) -> anyhow::Result<Status> {
    let opts = parse_options(&a.rest, &[])?;
    let cfg = load_config(&opts)?;
    let data = DataSource::from_option(opts.data.as_deref())?;
    let out = opts.out.unwrap_or_else(|| PathBuf::from("runs"));
    let (dir, output) = execute(&cfg, &data, &out)?;
    let last = output.metrics.last().expect("a run has at least one record");
    println!("run {}", dir.display());
    println!("variant {} seed {} steps {}", cfg.variant, cfg.seed, last.step);
    println!("student target accuracy {:.4}", last.acc_student_target);
    if let Some(t) = last.acc_teacher_target {
        println!("teacher target accuracy {t:.4}");
    }
    Ok(Status::Ok)
}
