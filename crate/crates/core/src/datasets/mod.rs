//! Seeded synthetic domain-shift benchmarks.
//!
//! A benchmark is a labelled source draw and a target draw of the same
//! generator under a geometric shift, optionally lifted from 2-D into a
//! higher dimension by one fixed random linear embedding shared by both
//! domains.

pub mod io;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::conditioning::SampleId;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    TwoMoons,
    Blobs { centers: Vec<[f64; 2]>, sigma: f64 },
}

impl Generator {
    pub fn name(&self) -> &'static str {
        match self {
            Generator::TwoMoons => "two_moons",
            Generator::Blobs { .. } => "blobs",
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Generator::TwoMoons => 2,
            Generator::Blobs { centers, .. } => centers.len(),
        }
    }

    /// Point the shift rotates and scales about. For two moons this is the
    /// centre of point symmetry, so a half turn swaps the moons.
    pub fn center(&self) -> [f64; 2] {
        match self {
            Generator::TwoMoons => [0.5, 0.25],
            Generator::Blobs { centers, .. } => {
                let n = centers.len() as f64;
                let sx = centers.iter().map(|c| c[0]).sum::<f64>();
                let sy = centers.iter().map(|c| c[1]).sum::<f64>();
                [sx / n, sy / n]
            }
        }
    }
}

/// A labelled 2-D sample together with the process that drew it.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub generator: Generator,
    pub noise_sigma: f64,
    pub imbalance_ratio: f64,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.generator.classes()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &y in &self.y {
            counts[y] += 1;
        }
        counts
    }
}

/// Splits `n` into per-class counts where class `k` is weighted by
/// `ratio^(-k / (c - 1))`, so the first class is `ratio` times the last.
pub fn class_counts(n: usize, classes: usize, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::Config(format!(
            "class imbalance ratio must be positive, got {ratio}"
        )));
    }
    if n < classes {
        return Err(Error::Config(format!("{n} samples cannot cover {classes} classes")));
    }
    let weights: Vec<f64> = (0..classes)
        .map(|k| {
            if classes == 1 {
                1.0
            } else {
                ratio.powf(-(k as f64) / (classes - 1) as f64)
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|w| ((n as f64 * w / total).floor() as usize).max(1))
        .collect();
    let mut assigned: usize = counts.iter().sum();
    let mut k = 0;
    while assigned < n {
        counts[k % classes] += 1;
        assigned += 1;
        k += 1;
    }
    while assigned > n {
        let big = (0..classes).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
        counts[big] -= 1;
        assigned -= 1;
    }
    Ok(counts)
}

fn normal(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma {sigma}: {e}")))
}

fn draw(generator: &Generator, counts: &[usize], noise_sigma: f64, rng: &mut ChaCha8Rng) -> Result<LabeledSet> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let noise = normal(noise_sigma)?;
    let n: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let point = match generator {
                Generator::TwoMoons => {
                    let t = rng.random_range(0.0..=PI);
                    if class == 0 {
                        [t.cos(), t.sin()]
                    } else {
                        [1.0 - t.cos(), 0.5 - t.sin()]
                    }
                }
                Generator::Blobs { centers, sigma } => {
                    let spread = normal(*sigma)?;
                    let c = centers[class];
                    [c[0] + spread.sample(rng), c[1] + spread.sample(rng)]
                }
            };
            data.push(point[0] + noise.sample(rng));
            data.push(point[1] + noise.sample(rng));
            y.push(class);
        }
    }
    Ok(LabeledSet {
        x: Tensor::new(n, 2, data)?,
        y,
        generator: generator.clone(),
        noise_sigma,
        imbalance_ratio: 1.0,
    })
}

/// Two interleaving half circles with Gaussian noise. Class 0 lies on the
/// upper unit half circle, class 1 on the lower one shifted to `(1, 0.5)`.
pub fn make_two_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<LabeledSet> {
    if n < 2 {
        return Err(Error::Config(format!("two moons needs n >= 2, got {n}")));
    }
    let counts = class_counts(n, 2, 1.0)?;
    draw(&Generator::TwoMoons, &counts, noise_sigma, &mut seed::rng(seed, 0x4D00))
}

/// Isotropic Gaussian clusters around `centers`, with an optional ratio
/// between the first and last class sizes.
pub fn make_blobs(
    n: usize,
    classes: usize,
    centers: &[[f64; 2]],
    sigma: f64,
    imbalance_ratio: f64,
    seed: u64,
) -> Result<LabeledSet> {
    if classes < 2 {
        return Err(Error::Config(format!("blobs need at least 2 classes, got {classes}")));
    }
    if centers.len() != classes {
        return Err(Error::Config(format!(
            "got {} centers for {classes} classes",
            centers.len()
        )));
    }
    let generator = Generator::Blobs {
        centers: centers.to_vec(),
        sigma,
    };
    let counts = class_counts(n, classes, imbalance_ratio)?;
    let mut set = draw(&generator, &counts, 0.0, &mut seed::rng(seed, 0xB10B))?;
    set.imbalance_ratio = imbalance_ratio;
    Ok(set)
}

/// Geometric and statistical difference between source and target.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftSpec {
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    pub scale: f64,
    /// Extra isotropic noise added after the transform.
    pub noise_sigma: f64,
    /// Multiplies the source's first-to-last class size ratio.
    pub class_imbalance_ratio: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            rotation_deg: 0.0,
            translation: [0.0, 0.0],
            scale: 1.0,
            noise_sigma: 0.0,
            class_imbalance_ratio: 1.0,
        }
    }
}

impl ShiftSpec {
    pub fn rotation(deg: f64) -> Self {
        ShiftSpec {
            rotation_deg: deg,
            ..ShiftSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "shift scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "shift noise must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.class_imbalance_ratio > 0.0) {
            return Err(Error::Config(format!(
                "class imbalance ratio must be positive, got {}",
                self.class_imbalance_ratio
            )));
        }
        Ok(())
    }
}

/// Draws a fresh sample from `set`'s generator and moves it by `spec`:
/// rotate and scale about the generator centre, translate, then add noise.
pub fn apply_shift(set: &LabeledSet, spec: &ShiftSpec, seed: u64) -> Result<LabeledSet> {
    spec.validate()?;
    let ratio = set.imbalance_ratio * spec.class_imbalance_ratio;
    let counts = class_counts(set.len(), set.classes(), ratio)?;
    let mut rng = seed::rng(seed, 0x5417);
    let mut fresh = draw(&set.generator, &counts, set.noise_sigma, &mut rng)?;
    fresh.imbalance_ratio = ratio;

    let theta = spec.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let [cx, cy] = set.generator.center();
    let extra = normal(spec.noise_sigma)?;
    for p in fresh.x.data_mut().chunks_mut(2) {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        p[0] = cx + spec.scale * (cos * dx - sin * dy) + spec.translation[0];
        p[1] = cy + spec.scale * (sin * dx + cos * dy) + spec.translation[1];
        if spec.noise_sigma > 0.0 {
            p[0] += extra.sample(&mut rng);
            p[1] += extra.sample(&mut rng);
        }
    }
    fresh.x.ensure_finite("apply_shift")?;
    Ok(fresh)
}

/// Fixed random linear map from 2-D into `dim` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub matrix: Tensor,
    pub noise_sigma: f64,
}

impl Embedding {
    pub fn random(input: usize, dim: usize, noise_sigma: f64, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed, 0xE3BE);
        let unit = normal(1.0)?;
        let data = (0..input * dim).map(|_| unit.sample(&mut rng)).collect();
        Ok(Embedding {
            matrix: Tensor::new(input, dim, data)?,
            noise_sigma,
        })
    }

    /// `x · M` plus independent Gaussian noise per entry.
    pub fn lift(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        let mut out = x.matmul(&self.matrix)?;
        if self.noise_sigma > 0.0 {
            let noise = normal(self.noise_sigma)?;
            let mut rng = seed::rng(seed, 0x11F7);
            for v in out.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        Ok(out)
    }
}

/// Ordered key/value description of how a dataset was made.
pub type Metadata = Vec<(String, String)>;

/// Labelled source domain plus target domain whose labels are held out for
/// evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub target_x: Tensor,
    target_y: Vec<usize>,
    classes: usize,
    pub metadata: Metadata,
}

impl DomainDataset {
    pub fn new(
        source_x: Tensor,
        source_y: Vec<usize>,
        target_x: Tensor,
        target_y: Vec<usize>,
        classes: usize,
        metadata: Metadata,
    ) -> Result<Self> {
        if source_x.rows() != source_y.len() || target_x.rows() != target_y.len() {
            return Err(Error::Contract("every sample needs exactly one label".into()));
        }
        if source_x.cols() != target_x.cols() {
            return Err(Error::Shape {
                op: "dataset",
                left: source_x.shape(),
                right: target_x.shape(),
            });
        }
        if let Some(&bad) = source_y.iter().chain(&target_y).find(|&&y| y >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut seen = vec![false; classes];
        for &y in &source_y {
            seen[y] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("class {missing} has no source samples")));
        }
        Ok(DomainDataset {
            source_x,
            source_y,
            target_x,
            target_y,
            classes,
            metadata,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.source_x.cols()
    }

    pub fn n_source(&self) -> usize {
        self.source_y.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_y.len()
    }

    /// What training may see: source inputs and labels, target inputs only.
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            source_x: &self.source_x,
            source_y: &self.source_y,
            target_x: &self.target_x,
        }
    }

    /// Held-out target labels; reached through [`crate::evaluation`].
    pub(crate) fn target_labels(&self) -> &[usize] {
        &self.target_y
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Training-time view of a [`DomainDataset`]; carries no target labels.
#[derive(Clone, Copy, Debug)]
pub struct TrainView<'a> {
    pub source_x: &'a Tensor,
    pub source_y: &'a [usize],
    pub target_x: &'a Tensor,
}

/// Parameters of a generated source/target benchmark.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkSpec {
    pub generator: Generator,
    pub n_source: usize,
    pub n_target: usize,
    pub noise_sigma: f64,
    pub shift: ShiftSpec,
    /// 0 keeps the raw 2-D coordinates.
    pub lift_dim: usize,
    pub lift_noise: f64,
}

impl BenchmarkSpec {
    /// Two moons, 500 source and 500 target samples, noise 0.15, target
    /// rotated by 45 degrees, lifted to 16-D.
    pub fn standard() -> Self {
        BenchmarkSpec {
            generator: Generator::TwoMoons,
            n_source: 500,
            n_target: 500,
            noise_sigma: 0.15,
            shift: ShiftSpec::rotation(45.0),
            lift_dim: 16,
            lift_noise: 0.05,
        }
    }

    fn source(&self, seed: u64) -> Result<LabeledSet> {
        let s = seed::derive_seed(seed, 1);
        match &self.generator {
            Generator::TwoMoons => make_two_moons(self.n_source, self.noise_sigma, s),
            Generator::Blobs { centers, sigma } => {
                let mut set = make_blobs(self.n_source, centers.len(), centers, *sigma, 1.0, s)?;
                if self.noise_sigma > 0.0 {
                    let mut rng = seed::rng(s, 0x0015E);
                    let noise = normal(self.noise_sigma)?;
                    for v in set.x.data_mut() {
                        *v += noise.sample(&mut rng);
                    }
                    set.noise_sigma = self.noise_sigma;
                }
                Ok(set)
            }
        }
    }

    pub fn build(&self, seed: u64) -> Result<DomainDataset> {
        let source = self.source(seed)?;
        let mut template = source.clone();
        if self.n_target != self.n_source {
            let counts = class_counts(self.n_target, source.classes(), source.imbalance_ratio)?;
            template.y = counts
                .iter()
                .enumerate()
                .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
                .collect();
        }
        let target = apply_shift(&template, &self.shift, seed::derive_seed(seed, 2))?;

        let (sx, tx) = if self.lift_dim > 0 {
            let emb = Embedding::random(2, self.lift_dim, self.lift_noise, seed::derive_seed(seed, 3))?;
            (
                emb.lift(&source.x, seed::derive_seed(seed, 4))?,
                emb.lift(&target.x, seed::derive_seed(seed, 5))?,
            )
        } else {
            (source.x.clone(), target.x.clone())
        };
        let metadata = self.metadata(seed, sx.cols());
        DomainDataset::new(sx, source.y, tx, target.y, source.generator.classes(), metadata)
    }

    pub fn metadata(&self, seed: u64, input_dim: usize) -> Metadata {
        let mut m: Metadata = vec![
            ("generator".into(), self.generator.name().into()),
            ("classes".into(), self.generator.classes().to_string()),
            ("input_dim".into(), input_dim.to_string()),
            ("n_source".into(), self.n_source.to_string()),
            ("n_target".into(), self.n_target.to_string()),
            ("noise".into(), self.noise_sigma.to_string()),
            ("rotation_deg".into(), self.shift.rotation_deg.to_string()),
            ("translation_x".into(), self.shift.translation[0].to_string()),
            ("translation_y".into(), self.shift.translation[1].to_string()),
            ("scale".into(), self.shift.scale.to_string()),
            ("shift_noise".into(), self.shift.noise_sigma.to_string()),
            (
                "class_imbalance_ratio".into(),
                self.shift.class_imbalance_ratio.to_string(),
            ),
            ("lift_dim".into(), self.lift_dim.to_string()),
            ("lift_noise".into(), self.lift_noise.to_string()),
            ("seed".into(), seed.to_string()),
        ];
        if let Generator::Blobs { centers, sigma } = &self.generator {
            let list: Vec<String> = centers.iter().map(|c| format!("{}:{}", c[0], c[1])).collect();
            m.push(("centers".into(), list.join(";")));
            m.push(("blob_sigma".into(), sigma.to_string()));
        }
        m
    }
}

/// Indices of one training step: a source batch and a target batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Batch {
    pub fn source_ids(&self) -> Vec<SampleId> {
        self.source.iter().map(|&i| SampleId::Source(i)).collect()
    }

    pub fn target_ids(&self) -> Vec<SampleId> {
        self.target.iter().map(|&i| SampleId::Target(i)).collect()
    }
}

/// One epoch of paired batches. Each domain is shuffled independently with
/// a stream derived from `(seed, epoch, domain)`; trailing short batches are
/// dropped.
pub fn batches(n_source: usize, n_target: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 || batch_size > n_source.min(n_target) {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be in 1..={}",
            n_source.min(n_target)
        )));
    }
    let shuffled = |n: usize, domain: u64| {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = seed::rng(seed, (epoch << 1) | domain);
        idx.shuffle(&mut rng);
        idx
    };
    let src = shuffled(n_source, 0);
    let tgt = shuffled(n_target, 1);
    Ok(src
        .chunks_exact(batch_size)
        .zip(tgt.chunks_exact(batch_size))
        .map(|(s, t)| Batch {
            source: s.to_vec(),
            target: t.to_vec(),
        })
        .collect())
}
