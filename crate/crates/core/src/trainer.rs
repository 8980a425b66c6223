//! Training loop, schedules, optimizer and run configuration.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::conditioning::{Branch, PredEmaState};
use crate::datasets::{batches, io::parse_key_values, Batch, DomainDataset, TrainView};
use crate::error::{Error, Result};
use crate::evaluation::{source_accuracy, target_accuracy, MetricsRecord};
use crate::losses::{
    adv_student, adv_teacher, consistency, cross_entropy, total_loss, ConsistencyNorm, LossBreakdown, LossTerms,
    LossWeights,
};
use crate::networks::{forward_fc, BoundNet, Discriminator, DualNet, EmaRate, NetworkShape, ParamSet};
use crate::seed::{derive_seed, rng};
use crate::tensor::{Graph, Tensor, Var};

/// Training configurations compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cross-entropy on source only.
    SourceOnly,
    /// Student conditioned on its raw predictions; no teacher.
    Cdan,
    /// As `Cdan`, plus a weight-averaged teacher used only for evaluation.
    CdanM,
    /// Student and teacher conditions from ensembled predictions.
    CdanMD,
    /// `CdanMD` plus student/teacher consistency.
    Ren,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SourceOnly,
        Variant::Cdan,
        Variant::CdanM,
        Variant::CdanMD,
        Variant::Ren,
    ];

    /// Variants expected to be non-decreasing in accuracy, in order.
    pub const ABLATION_CHAIN: [Variant; 4] = [Variant::Cdan, Variant::CdanM, Variant::CdanMD, Variant::Ren];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::Cdan => "cdan",
            Variant::CdanM => "cdan_m",
            Variant::CdanMD => "cdan_m_d",
            Variant::Ren => "ren",
        }
    }

    pub fn has_teacher(self) -> bool {
        matches!(self, Variant::CdanM | Variant::CdanMD | Variant::Ren)
    }

    pub fn adversarial(self) -> bool {
        self != Variant::SourceOnly
    }

    /// Conditions come from ensembled predictions of both networks.
    pub fn dual(self) -> bool {
        matches!(self, Variant::CdanMD | Variant::Ren)
    }

    pub fn consistency(self) -> bool {
        self == Variant::Ren
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub eta0: f64,
    pub anneal_alpha: f64,
    pub anneal_beta: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub alpha_theta: EmaRate,
    pub alpha_p: f64,
    pub lambda_stu: f64,
    pub lambda_tea: f64,
    pub gamma: f64,
    /// Fraction of training over which `gamma` ramps up; 0 disables the ramp.
    pub gamma_ramp: f64,
    pub grl_ramp: bool,
    pub seed: u64,
    pub variant: Variant,
    pub eval_every: u64,
    pub consistency_norm: ConsistencyNorm,
    /// Std of Gaussian noise added to training inputs, drawn independently
    /// for the student and the teacher; 0 feeds both the raw batch.
    pub input_noise: f64,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub disc_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta0: 0.01,
            anneal_alpha: 10.0,
            anneal_beta: 0.75,
            momentum: 0.9,
            batch_size: 32,
            total_steps: 2000,
            alpha_theta: EmaRate::Ramp { max: 0.99 },
            alpha_p: 0.6,
            lambda_stu: 1.0,
            lambda_tea: 1.0,
            gamma: 1.0,
            gamma_ramp: 0.2,
            grl_ramp: true,
            seed: 0,
            variant: Variant::Ren,
            eval_every: 50,
            consistency_norm: ConsistencyNorm::Squared,
            input_noise: 0.0,
            hidden: vec![64, 64],
            feature_dim: 16,
            disc_hidden: 64,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in canonical order.
pub const CONFIG_KEYS: [&str; 21] = [
    "eta0",
    "anneal_alpha",
    "anneal_beta",
    "momentum",
    "batch_size",
    "total_steps",
    "alpha_theta",
    "alpha_p",
    "lambda_stu",
    "lambda_tea",
    "gamma",
    "gamma_ramp",
    "grl_ramp",
    "seed",
    "variant",
    "eval_every",
    "consistency_norm",
    "input_noise",
    "hidden",
    "feature_dim",
    "disc_hidden",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Sets one field from its text form. `steps` is accepted for
    /// `total_steps`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "eta0" => self.eta0 = parse(key, v)?,
            "anneal_alpha" => self.anneal_alpha = parse(key, v)?,
            "anneal_beta" => self.anneal_beta = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "total_steps" | "steps" => self.total_steps = parse(key, v)?,
            "alpha_theta" => {
                self.alpha_theta = match v.strip_prefix("ramp") {
                    Some("") => EmaRate::Ramp { max: 0.99 },
                    Some(rest) => match rest.strip_prefix(':') {
                        Some(max) => EmaRate::Ramp { max: parse(key, max)? },
                        None => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                    },
                    None => EmaRate::Fixed(parse(key, v)?),
                }
            }
            "alpha_p" => self.alpha_p = parse(key, v)?,
            "lambda_stu" => self.lambda_stu = parse(key, v)?,
            "lambda_tea" => self.lambda_tea = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "gamma_ramp" => self.gamma_ramp = parse(key, v)?,
            "grl_ramp" => {
                self.grl_ramp = match v {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`; use on|off"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "consistency_norm" => {
                self.consistency_norm = match v {
                    "squared" => ConsistencyNorm::Squared,
                    "l2" => ConsistencyNorm::L2,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "input_noise" => self.input_noise = parse(key, v)?,
            "hidden" => {
                self.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|w| parse(key, w.trim())).collect::<Result<_>>()?
                }
            }
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "disc_hidden" => self.disc_hidden = parse(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "eta0" => self.eta0.to_string(),
            "anneal_alpha" => self.anneal_alpha.to_string(),
            "anneal_beta" => self.anneal_beta.to_string(),
            "momentum" => self.momentum.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "alpha_theta" => match self.alpha_theta {
                EmaRate::Fixed(a) => a.to_string(),
                EmaRate::Ramp { max } => format!("ramp:{max}"),
            },
            "alpha_p" => self.alpha_p.to_string(),
            "lambda_stu" => self.lambda_stu.to_string(),
            "lambda_tea" => self.lambda_tea.to_string(),
            "gamma" => self.gamma.to_string(),
            "gamma_ramp" => self.gamma_ramp.to_string(),
            "grl_ramp" => if self.grl_ramp { "on" } else { "off" }.to_string(),
            "seed" => self.seed.to_string(),
            "variant" => self.variant.name().to_string(),
            "eval_every" => self.eval_every.to_string(),
            "consistency_norm" => match self.consistency_norm {
                ConsistencyNorm::Squared => "squared",
                ConsistencyNorm::L2 => "l2",
            }
            .to_string(),
            "input_noise" => self.input_noise.to_string(),
            "hidden" => self.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
            "feature_dim" => self.feature_dim.to_string(),
            "disc_hidden" => self.disc_hidden.to_string(),
            _ => return Err(Error::UnknownKey(key.to_string())),
        })
    }

    /// Canonical `key = value` text; [`TrainConfig::from_text`] reads it back
    /// exactly.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("canonical key")))
            .collect()
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_key_values(text, path)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta0", self.eta0),
            ("anneal_alpha", self.anneal_alpha),
            ("anneal_beta", self.anneal_beta),
            ("gamma_ramp", self.gamma_ramp),
            ("input_noise", self.input_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.gamma_ramp > 1.0 {
            return Err(Error::Config(format!(
                "gamma_ramp must lie in [0, 1], got {}",
                self.gamma_ramp
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.feature_dim == 0 || self.disc_hidden == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        self.alpha_theta.validate()?;
        PredEmaState::new(self.alpha_p)?;
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_stu: self.lambda_stu,
            lambda_tea: self.lambda_tea,
            gamma: self.gamma,
        }
    }

    pub fn network_shape(&self, input: usize, classes: usize) -> NetworkShape {
        NetworkShape {
            input,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            classes,
            disc_hidden: self.disc_hidden,
        }
    }

    /// `n / total_steps`, or 0 when there are no steps.
    pub fn progress(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            (step as f64 / self.total_steps as f64).min(1.0)
        }
    }
}

/// `η0 (1 + α p)^(-β)`.
pub fn lr_schedule(p: f64, cfg: &TrainConfig) -> f64 {
    cfg.eta0 * (1.0 + cfg.anneal_alpha * p).powf(-cfg.anneal_beta)
}

/// `2 / (1 + e^(-10 p)) - 1`, or 1 when the ramp is off.
pub fn grl_lambda(p: f64, ramp: bool) -> f64 {
    if ramp {
        2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
    } else {
        1.0
    }
}

/// Consistency weight at progress `p`: `gamma * exp(-5 (1 - t)^2)` with
/// `t = p / gamma_ramp` capped at 1.
pub fn gamma_at(p: f64, cfg: &TrainConfig) -> f64 {
    if cfg.gamma_ramp <= 0.0 {
        return cfg.gamma;
    }
    let t = (p / cfg.gamma_ramp).min(1.0);
    cfg.gamma * (-5.0 * (1.0 - t).powi(2)).exp()
}

/// Momentum buffers for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        OptimizerState {
            velocity: params
                .tensors()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
            step: 0,
        }
    }
}

/// `v <- μ v + g; θ <- θ - η v`.
pub fn sgd_momentum_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut OptimizerState,
    eta: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let shape = params.tensors()[i].1.shape();
        if g.shape() != shape || state.velocity[i].shape() != shape {
            return Err(Error::Shape {
                op: "sgd_momentum_step",
                left: shape,
                right: g.shape(),
            });
        }
    }
    for (i, g) in grads.iter().enumerate() {
        let v = &mut state.velocity[i];
        for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
            *vv = momentum * *vv + gv;
        }
        let theta = params.tensor_mut(i);
        for (t, vv) in theta.data_mut().iter_mut().zip(v.data()) {
            *t -= eta * vv;
        }
        theta.ensure_finite("sgd_momentum_step")?;
    }
    state.step += 1;
    Ok(())
}

/// Graph nodes the objective is assembled from. All row-wise nodes hold
/// source rows first, then target rows.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInputs {
    pub features: Var,
    pub probs: Var,
    pub n_source: usize,
    /// Teacher predictions on the same rows; needed for consistency.
    pub teacher_probs: Option<Var>,
    /// Student-side condition for the discriminator.
    pub cond_student: Option<Var>,
    /// Teacher-side condition; needed by the dual variants.
    pub cond_teacher: Option<Var>,
}

/// Builds the per-variant loss terms and their weighted total. `d` must be
/// present for adversarial variants.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    g: &mut Graph,
    variant: Variant,
    inputs: &ObjectiveInputs,
    labels: &[usize],
    d: Option<&BoundNet<'_>>,
    lambda_grl: f64,
    weights: &LossWeights,
    norm: ConsistencyNorm,
) -> Result<(LossTerms, Var)> {
    let rows = g.value(inputs.probs).rows();
    let ns = inputs.n_source;
    if labels.len() != ns || ns > rows {
        return Err(Error::Contract(format!(
            "{} labels for {ns} source rows out of {rows}",
            labels.len()
        )));
    }
    let missing = |what: &str| Error::Contract(format!("variant {variant} needs {what}"));
    let p_s = g.slice_rows(inputs.probs, 0, ns)?;
    let l_c = cross_entropy(g, p_s, labels)?;

    let mut terms = LossTerms {
        l_c,
        l_d_stu: None,
        l_d_tea: None,
        l_con: None,
    };
    if variant.adversarial() {
        let d = d.ok_or_else(|| missing("a discriminator"))?;
        let f_s = g.slice_rows(inputs.features, 0, ns)?;
        let f_t = g.slice_rows(inputs.features, ns, rows)?;
        let cs = inputs.cond_student.ok_or_else(|| missing("a student condition"))?;
        let (cs_s, cs_t) = (g.slice_rows(cs, 0, ns)?, g.slice_rows(cs, ns, rows)?);
        terms.l_d_stu = Some(adv_student(g, d, f_s, f_t, cs_s, cs_t, lambda_grl)?);
        if variant.dual() {
            let ct = inputs.cond_teacher.ok_or_else(|| missing("a teacher condition"))?;
            let (ct_s, ct_t) = (g.slice_rows(ct, 0, ns)?, g.slice_rows(ct, ns, rows)?);
            terms.l_d_tea = Some(adv_teacher(g, d, f_s, f_t, ct_s, ct_t, lambda_grl)?);
        }
    }
    if variant.consistency() {
        let pt = inputs.teacher_probs.ok_or_else(|| missing("teacher predictions"))?;
        terms.l_con = Some(consistency(g, inputs.probs, pt, norm)?);
    }
    let total = total_loss(g, &terms, weights)?;
    Ok((terms, total))
}

/// Result of one [`Trainer::train_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// Weights in effect for this step (`gamma` after its ramp).
    pub weights: LossWeights,
    pub lr: f64,
    pub lambda_grl: f64,
    /// Largest absolute gradient reaching any teacher parameter.
    pub teacher_grad_max: f64,
}

const TAG_F: u64 = 0x46;
const TAG_C: u64 = 0x43;
const TAG_D: u64 = 0x44;
const TAG_BATCH: u64 = 0x42;
const TAG_NOISE: u64 = 0x4E;

/// Student, optional teacher, discriminator and all optimizer state of one
/// run.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    net: DualNet,
    disc: Discriminator,
    opt_f: OptimizerState,
    opt_c: OptimizerState,
    opt_d: OptimizerState,
    pred_ema: PredEmaState,
    step: u64,
}

impl Trainer {
    /// Initial weights depend on the seed only, never on the variant.
    pub fn new(cfg: &TrainConfig, input_dim: usize, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.network_shape(input_dim, classes);
        let f = ParamSet::init("F", &shape.feature_extractor()?, derive_seed(cfg.seed, TAG_F));
        let c = ParamSet::init("C", &shape.classifier()?, derive_seed(cfg.seed, TAG_C));
        let disc = Discriminator::new(&shape.discriminator()?, derive_seed(cfg.seed, TAG_D))?;
        let (opt_f, opt_c, opt_d) = (
            OptimizerState::new(&f),
            OptimizerState::new(&c),
            OptimizerState::new(&disc.params),
        );
        let net = DualNet::new(f, c, cfg.variant.has_teacher(), cfg.alpha_theta)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            net,
            disc,
            opt_f,
            opt_c,
            opt_d,
            pred_ema: PredEmaState::new(cfg.alpha_p)?,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net(&self) -> &DualNet {
        &self.net
    }

    pub fn disc(&self) -> &Discriminator {
        &self.disc
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn pred_ema(&self) -> &PredEmaState {
        &self.pred_ema
    }

    pub fn into_parts(self) -> (DualNet, Discriminator) {
        (self.net, self.disc)
    }

    /// `x` plus this step's input noise for `branch`. Each (step, branch)
    /// has its own stream, so the draw never depends on the variant.
    fn perturb(&self, x: &Tensor, branch: Branch) -> Result<Tensor> {
        if self.cfg.input_noise == 0.0 {
            return Ok(x.clone());
        }
        let lane = match branch {
            Branch::Student => 0,
            Branch::Teacher => 1,
        };
        let mut r = rng(derive_seed(self.cfg.seed, TAG_NOISE), (self.step << 1) | lane);
        let sigma = self.cfg.input_noise;
        let data = x
            .data()
            .iter()
            .map(|v| v + sigma * r.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(x.rows(), x.cols(), data)
    }

    /// One optimisation step on `batch`.
    pub fn train_step(&mut self, view: &TrainView<'_>, batch: &Batch) -> Result<StepOutcome> {
        let variant = self.cfg.variant;
        let p = self.cfg.progress(self.step);
        let lr = lr_schedule(p, &self.cfg);
        let lambda_grl = grl_lambda(p, self.cfg.grl_ramp);
        let weights = LossWeights {
            gamma: gamma_at(p, &self.cfg),
            ..self.cfg.weights()
        };
        let ns = batch.source.len();
        let labels: Vec<usize> = batch.source.iter().map(|&i| view.source_y[i]).collect();
        let xs = view.source_x.select_rows(&batch.source);
        let xt = view.target_x.select_rows(&batch.target);

        let mut g = Graph::new();
        let mut clean = xs.data().to_vec();
        clean.extend_from_slice(xt.data());
        let clean = Tensor::new(xs.rows() + xt.rows(), xs.cols(), clean)?;
        let x = g.constant(self.perturb(&clean, Branch::Student)?);

        // (1) student forward
        let bf = self.net.student_f.bind(&mut g);
        let bc = self.net.student_c.bind(&mut g);
        let student = forward_fc(&mut g, &bf, &bc, x)?;

        // (2) teacher forward; its outputs are cut from the graph
        let needs_teacher = variant.dual() || variant.consistency();
        let teacher = match (needs_teacher, self.net.teacher()) {
            (true, Some((tf, tc))) => {
                let btf = tf.bind(&mut g);
                let btc = tc.bind(&mut g);
                let xt = g.constant(self.perturb(&clean, Branch::Teacher)?);
                let out = forward_fc(&mut g, &btf, &btc, xt)?;
                let probs = g.detach(out.probs);
                Some((btf.vars().to_vec(), btc.vars().to_vec(), probs))
            }
            (true, None) => return Err(Error::Contract(format!("variant {variant} needs a teacher"))),
            _ => None,
        };

        // (3) conditions
        let (cond_student, cond_teacher) = if variant.dual() {
            let ids: Vec<_> = batch.source_ids().into_iter().chain(batch.target_ids()).collect();
            let ps = self.pred_ema.update(Branch::Student, &ids, g.value(student.probs))?;
            let tp = teacher.as_ref().expect("dual variants have a teacher").2;
            let pt = self.pred_ema.update(Branch::Teacher, &ids, g.value(tp))?;
            (Some(g.constant(ps)), Some(g.constant(pt)))
        } else if variant.adversarial() {
            (Some(g.detach(student.probs)), None)
        } else {
            (None, None)
        };

        // (4) loss terms
        let bd = variant.adversarial().then(|| self.disc.params.bind(&mut g));
        let inputs = ObjectiveInputs {
            features: student.features,
            probs: student.probs,
            n_source: ns,
            teacher_probs: teacher.as_ref().map(|t| t.2),
            cond_student,
            cond_teacher,
        };
        let (terms, total) = objective(
            &mut g,
            variant,
            &inputs,
            &labels,
            bd.as_ref(),
            lambda_grl,
            &weights,
            self.cfg.consistency_norm,
        )?;
        let losses = LossBreakdown::from_graph(&g, &terms, total)?;

        // (5) backward
        let grads = g.backward(total)?;
        let teacher_grad_max = teacher.as_ref().map_or(0.0, |(tf, tc, _)| {
            tf.iter()
                .chain(tc)
                .filter_map(|v| grads.get(*v))
                .flat_map(|t| t.data().iter().map(|x| x.abs()))
                .fold(0.0, f64::max)
        });
        let collect = |vars: &[Var], set: &ParamSet| -> Vec<Tensor> {
            vars.iter()
                .zip(set.tensors())
                .map(|(v, (_, t))| grads.get_or_zeros(*v, t))
                .collect()
        };
        let gf = collect(bf.vars(), &self.net.student_f);
        let gc = collect(bc.vars(), &self.net.student_c);
        let gd = bd.as_ref().map(|b| collect(b.vars(), &self.disc.params));

        // (6) parameter updates
        let mu = self.cfg.momentum;
        sgd_momentum_step(&mut self.net.student_f, &gf, &mut self.opt_f, lr, mu)?;
        sgd_momentum_step(&mut self.net.student_c, &gc, &mut self.opt_c, lr, mu)?;
        if let Some(gd) = gd {
            sgd_momentum_step(&mut self.disc.params, &gd, &mut self.opt_d, lr, mu)?;
        }

        // (7) teacher weight average
        self.net.ema_update()?;
        self.step += 1;
        Ok(StepOutcome {
            losses,
            weights,
            lr,
            lambda_grl,
            teacher_grad_max,
        })
    }

    /// Snapshot of accuracies at the current step.
    pub fn evaluate(&self, ds: &DomainDataset, losses: LossBreakdown) -> Result<MetricsRecord> {
        let net = &self.net;
        let acc_teacher_target = match net.teacher() {
            Some((tf, tc)) => Some(target_accuracy(tf, tc, ds)?),
            None => None,
        };
        Ok(MetricsRecord {
            step: self.step,
            lr: lr_schedule(self.cfg.progress(self.step), &self.cfg),
            losses,
            acc_student_target: target_accuracy(&net.student_f, &net.student_c, ds)?,
            acc_teacher_target,
            acc_student_source: source_accuracy(&net.student_f, &net.student_c, ds)?,
        })
    }
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub net: DualNet,
    pub disc: Discriminator,
    pub metrics: Vec<MetricsRecord>,
}

impl RunOutput {
    /// Teacher target accuracy at the last evaluation, or the student's when
    /// there is no teacher.
    pub fn final_accuracy(&self) -> f64 {
        self.metrics
            .last()
            .expect("a run has at least one record")
            .reported_accuracy()
    }
}

/// Trains for `cfg.total_steps` steps, evaluating at step 0, every
/// `cfg.eval_every` steps and at the end.
pub fn run(cfg: &TrainConfig, ds: &DomainDataset) -> Result<RunOutput> {
    let mut trainer = Trainer::new(cfg, ds.input_dim(), ds.classes())?;
    let view = ds.train_view();
    let batch_seed = derive_seed(cfg.seed, TAG_BATCH);
    let mut metrics = vec![trainer.evaluate(ds, LossBreakdown::default())?];
    let mut epoch = 0;
    let mut queue = batches(ds.n_source(), ds.n_target(), cfg.batch_size, batch_seed, epoch)?.into_iter();
    while trainer.step() < cfg.total_steps {
        let batch = match queue.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                queue = batches(ds.n_source(), ds.n_target(), cfg.batch_size, batch_seed, epoch)?.into_iter();
                queue.next().expect("an epoch has at least one batch")
            }
        };
        let out = trainer.train_step(&view, &batch)?;
        let n = trainer.step();
        if n % cfg.eval_every == 0 || n == cfg.total_steps {
            metrics.push(trainer.evaluate(ds, out.losses)?);
        }
    }
    let (net, disc) = trainer.into_parts();
    Ok(RunOutput { net, disc, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::BenchmarkSpec;

    fn small_data() -> DomainDataset {
        let mut spec = BenchmarkSpec::standard();
        spec.n_source = 64;
        spec.n_target = 64;
        spec.lift_dim = 4;
        spec.build(3).unwrap()
    }

    fn small_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            total_steps: 12,
            eval_every: 4,
            batch_size: 8,
            hidden: vec![8],
            feature_dim: 4,
            disc_hidden: 6,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0.0, &cfg), 0.01);
        assert!((lr_schedule(1.0, &cfg) - 0.01 * 11f64.powf(-0.75)).abs() < 1e-12);
        assert!((lr_schedule(1.0, &cfg) - 0.0016556002607617).abs() < 1e-15);
        let flat = TrainConfig {
            anneal_beta: 0.0,
            ..cfg.clone()
        };
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(lr_schedule(p, &flat), 0.01);
        }
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let lr = lr_schedule(i as f64 / 100.0, &cfg);
            assert!(lr > 0.0 && lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn grl_lambda_examples() {
        assert_eq!(grl_lambda(0.0, true), 0.0);
        assert!((grl_lambda(1.0, true) - 0.999909204262595).abs() < 1e-12);
        assert_eq!(grl_lambda(0.4, false), 1.0);
        let mut prev = -1.0;
        for i in 0..100 {
            let l = grl_lambda(i as f64 / 99.0, true);
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn gamma_ramp_reaches_full_weight() {
        let cfg = TrainConfig::default();
        assert!((gamma_at(0.0, &cfg) - (-5f64).exp()).abs() < 1e-15);
        assert_eq!(gamma_at(0.2, &cfg), 1.0);
        assert_eq!(gamma_at(0.9, &cfg), 1.0);
        let off = TrainConfig { gamma_ramp: 0.0, ..cfg };
        assert_eq!(gamma_at(0.0, &off), 1.0);
    }

    fn one_tensor_set(v: &[f64]) -> ParamSet {
        let arch = crate::networks::Architecture::mlp(
            &[1, v.len()],
            crate::networks::Activation::Identity,
            crate::networks::Activation::Identity,
        )
        .unwrap();
        let mut p = ParamSet::zeros("P", &arch);
        p.tensor_mut(0).data_mut().copy_from_slice(v);
        p
    }

    #[test]
    fn sgd_examples() {
        let g = [Tensor::new(1, 2, vec![1.0, -2.0]).unwrap(), Tensor::zeros(1, 2)];
        // plain descent
        let mut p = one_tensor_set(&[0.5, 0.5]);
        let mut s = OptimizerState::new(&p);
        sgd_momentum_step(&mut p, &g, &mut s, 0.1, 0.0).unwrap();
        assert_eq!(p.tensors()[0].1.data(), &[0.4, 0.7]);
        // two steps, mu 0.9, eta 1: 2.9 g
        let mut p = one_tensor_set(&[0.0, 0.0]);
        let mut s = OptimizerState::new(&p);
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &g, &mut s, 1.0, 0.9).unwrap();
        }
        let d = p.tensors()[0].1.data();
        assert!((d[0] + 2.9).abs() < 1e-15 && (d[1] - 5.8).abs() < 1e-15);
        assert_eq!(s.step, 2);
        // zero gradient keeps parameters
        let mut p = one_tensor_set(&[0.3, -0.3]);
        let mut s = OptimizerState::new(&p);
        let zeros = [Tensor::zeros(1, 2), Tensor::zeros(1, 2)];
        for _ in 0..10 {
            sgd_momentum_step(&mut p, &zeros, &mut s, 0.5, 0.9).unwrap();
        }
        assert_eq!(p.tensors()[0].1.data(), &[0.3, -0.3]);
        // shape mismatch
        let bad = [Tensor::zeros(2, 2), Tensor::zeros(1, 2)];
        assert!(sgd_momentum_step(&mut p, &bad, &mut s, 0.5, 0.9).is_err());
    }

    #[test]
    fn config_text_round_trip_and_unknown_keys() {
        let cfg = TrainConfig {
            alpha_theta: EmaRate::Fixed(0.95),
            hidden: vec![32, 16],
            grl_ramp: false,
            variant: Variant::CdanM,
            consistency_norm: ConsistencyNorm::L2,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_text(&cfg.to_text(), "c").unwrap(), cfg);
        let d = TrainConfig::default();
        assert_eq!(TrainConfig::from_text(&d.to_text(), "c").unwrap(), d);
        match TrainConfig::from_text("foo = 1\n", "c") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "foo"),
            other => panic!("{other:?}"),
        }
        let mut c = TrainConfig::default();
        c.set("steps", "7").unwrap();
        assert_eq!(c.total_steps, 7);
        assert!(c.set("momentum", "x").is_err());
        assert!(TrainConfig::from_text("momentum = 1.0\n", "c").is_err());
        assert!(TrainConfig::from_text("alpha_p = 1.5\n", "c").is_err());
        assert!(TrainConfig::from_text("gamma = -1\n", "c").is_err());
        assert!(TrainConfig::from_text("variant = dann\n", "c").is_err());
    }

    #[test]
    fn source_only_leaves_discriminator_alone() {
        let ds = small_data();
        let cfg = small_cfg(Variant::SourceOnly);
        let mut tr = Trainer::new(&cfg, ds.input_dim(), ds.classes()).unwrap();
        let d0 = tr.disc().params.fingerprint();
        assert!(tr.net().teacher().is_none());
        let b = &batches(64, 64, 8, 1, 0).unwrap()[0];
        let out = tr.train_step(&ds.train_view(), b).unwrap();
        assert_eq!(
            (out.losses.l_d_stu, out.losses.l_d_tea, out.losses.l_con),
            (0.0, 0.0, 0.0)
        );
        assert_eq!(out.losses.total, out.losses.l_c);
        assert_eq!(tr.disc().params.fingerprint(), d0);
    }

    #[test]
    fn ren_first_step_has_zero_consistency_and_no_teacher_grad() {
        let ds = small_data();
        let mut tr = Trainer::new(&small_cfg(Variant::Ren), ds.input_dim(), ds.classes()).unwrap();
        let view = ds.train_view();
        for (i, b) in batches(64, 64, 8, 1, 0).unwrap().iter().enumerate() {
            let out = tr.train_step(&view, b).unwrap();
            if i == 0 {
                assert_eq!(out.losses.l_con, 0.0);
            }
            assert!(out.losses.l_d_stu > 0.0 && out.losses.l_d_tea > 0.0);
            assert_eq!(out.teacher_grad_max, 0.0);
            assert!((out.losses.total - out.losses.recompute_total(&out.weights)).abs() <= 1e-10);
        }
    }

    #[test]
    fn teacher_moves_only_through_ema() {
        let ds = small_data();
        let cfg = TrainConfig {
            alpha_theta: EmaRate::Fixed(1.0),
            ..small_cfg(Variant::Ren)
        };
        let mut tr = Trainer::new(&cfg, ds.input_dim(), ds.classes()).unwrap();
        let before = tr.net().teacher().map(|(f, c)| (f.fingerprint(), c.fingerprint()));
        let s0 = tr.net().student_f.fingerprint();
        for b in &batches(64, 64, 8, 1, 0).unwrap() {
            tr.train_step(&ds.train_view(), b).unwrap();
        }
        let after = tr.net().teacher().map(|(f, c)| (f.fingerprint(), c.fingerprint()));
        assert_eq!(before, after);
        assert_ne!(tr.net().student_f.fingerprint(), s0);
    }

    #[test]
    fn teacher_in_cdan_m_is_inert() {
        let ds = small_data();
        let a = run(&small_cfg(Variant::Cdan), &ds).unwrap();
        let b = run(&small_cfg(Variant::CdanM), &ds).unwrap();
        assert!(a.net.teacher().is_none());
        assert!(b.net.teacher().is_some());
        assert_eq!(a.net.student_f, b.net.student_f);
        assert_eq!(a.net.student_c, b.net.student_c);
        assert_eq!(a.disc, b.disc);
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.losses, y.losses);
            assert_eq!(x.acc_student_target, y.acc_student_target);
        }
    }

    #[test]
    fn source_loss_ignores_target_rows() {
        let ds = small_data();
        let cfg = small_cfg(Variant::SourceOnly);
        let tr = Trainer::new(&cfg, ds.input_dim(), ds.classes()).unwrap();
        let (f, c) = (&tr.net().student_f, &tr.net().student_c);
        let idx: Vec<usize> = (0..8).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| ds.source_y[i]).collect();
        let xs = ds.source_x.select_rows(&idx);
        let eval = |target_rows: usize| {
            let mut g = Graph::new();
            let mut x = g.constant(xs.clone());
            if target_rows > 0 {
                let t = g.constant(ds.target_x.select_rows(&idx[..target_rows]));
                x = g.concat_rows(x, t).unwrap();
            }
            let bf = f.bind(&mut g);
            let bc = c.bind(&mut g);
            let out = forward_fc(&mut g, &bf, &bc, x).unwrap();
            let inputs = ObjectiveInputs {
                features: out.features,
                probs: out.probs,
                n_source: 8,
                teacher_probs: None,
                cond_student: None,
                cond_teacher: None,
            };
            let w = cfg.weights();
            let (terms, total) = objective(
                &mut g,
                Variant::SourceOnly,
                &inputs,
                &labels,
                None,
                0.0,
                &w,
                cfg.consistency_norm,
            )
            .unwrap();
            let grads = g.backward(total).unwrap();
            let gs: Vec<Tensor> = bf.vars().iter().map(|v| grads.get(*v).unwrap().clone()).collect();
            (g.scalar(terms.l_c).unwrap(), gs)
        };
        assert_eq!(eval(0), eval(8));
    }

    #[test]
    fn runs_are_reproducible() {
        let ds = small_data();
        let cfg = small_cfg(Variant::Ren);
        let a = run(&cfg, &ds).unwrap();
        let b = run(&cfg, &ds).unwrap();
        assert_eq!(a.metrics, b.metrics);
        let steps: Vec<u64> = a.metrics.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![0, 4, 8, 12]);
        assert!(a.metrics.iter().all(|m| m.acc_teacher_target.is_some()));
    }

    #[test]
    fn zero_steps_gives_one_record() {
        let ds = small_data();
        let cfg = TrainConfig {
            total_steps: 0,
            ..small_cfg(Variant::SourceOnly)
        };
        let out = run(&cfg, &ds).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].step, 0);
        assert_eq!(out.metrics[0].acc_teacher_target, None);
    }

    #[test]
    fn uneven_final_step_is_recorded() {
        let ds = small_data();
        let cfg = TrainConfig {
            total_steps: 10,
            ..small_cfg(Variant::Cdan)
        };
        let steps: Vec<u64> = run(&cfg, &ds).unwrap().metrics.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![0, 4, 8, 10]);
    }
}
