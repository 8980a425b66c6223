//! Feature extractor, classifier and discriminator MLPs, and the
//! student/teacher pair tied together by a weight moving average.

pub mod checkpoint;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

/// Layer widths and activations of a fully connected network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Architecture {
    layers: Vec<Layer>,
}

impl Architecture {
    /// `widths[0]` is the input width; every later width is one layer. Hidden
    /// layers use `hidden`, the final layer uses `last`.
    pub fn mlp(widths: &[usize], hidden: Activation, last: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(
                "an MLP needs at least an input and an output width".into(),
            ));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("layer width {pos} is zero")));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer {
                inputs: w[0],
                outputs: w[1],
                activation: if i + 1 == n { last } else { hidden },
            })
            .collect();
        Ok(Architecture { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.inputs * l.outputs + l.outputs).sum()
    }
}

/// Widths of the three networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NetworkShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub disc_hidden: usize,
}

impl NetworkShape {
    pub fn new(input: usize, classes: usize) -> Self {
        NetworkShape {
            input,
            hidden: vec![64, 64],
            feature_dim: 16,
            classes,
            disc_hidden: 64,
        }
    }

    /// `input -> hidden.. -> feature_dim`, ReLU on every layer.
    pub fn feature_extractor(&self) -> Result<Architecture> {
        let mut widths = vec![self.input];
        widths.extend(&self.hidden);
        widths.push(self.feature_dim);
        Architecture::mlp(&widths, Activation::Relu, Activation::Relu)
    }

    /// Linear map from features to class logits.
    pub fn classifier(&self) -> Result<Architecture> {
        Architecture::mlp(
            &[self.feature_dim, self.classes],
            Activation::Identity,
            Activation::Identity,
        )
    }

    /// `feature_dim * classes -> disc_hidden -> 1`; the sigmoid is applied by
    /// [`Discriminator`].
    pub fn discriminator(&self) -> Result<Architecture> {
        Architecture::mlp(
            &[self.feature_dim * self.classes, self.disc_hidden, 1],
            Activation::Relu,
            Activation::Identity,
        )
    }
}

/// Named weight and bias tensors of one network, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    arch: Architecture,
    tensors: Vec<(String, Tensor)>,
}

impl ParamSet {
    /// Uniform Glorot initialization of weights, zero biases. Fully
    /// determined by `seed`.
    pub fn init(name: &str, arch: &Architecture, seed: u64) -> Self {
        let mut rng = seed::rng(seed, 0x5EED);
        let mut tensors = Vec::with_capacity(arch.layers.len() * 2);
        for (i, layer) in arch.layers.iter().enumerate() {
            let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            let w: Vec<f64> = (0..layer.inputs * layer.outputs)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            let w = Tensor::new(layer.inputs, layer.outputs, w).expect("uniform draws are finite");
            tensors.push((format!("{name}.{i}.weight"), w));
            tensors.push((format!("{name}.{i}.bias"), Tensor::zeros(1, layer.outputs)));
        }
        ParamSet {
            arch: arch.clone(),
            tensors,
        }
    }

    pub fn zeros(name: &str, arch: &Architecture) -> Self {
        let mut set = ParamSet::init(name, arch, 0);
        for (_, t) in &mut set.tensors {
            t.data_mut().fill(0.0);
        }
        set
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i].1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Euclidean distance between two parameter sets of equal architecture.
    pub fn distance(&self, other: &ParamSet) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// FNV-1a over the bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in &self.tensors {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundNet<'_> {
        let vars = self.tensors.iter().map(|(_, t)| g.param(t.clone())).collect();
        BoundNet { params: self, vars }
    }

    /// Registers every tensor as a constant leaf of `g`.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundNet<'_> {
        let vars = self.tensors.iter().map(|(_, t)| g.constant(t.clone())).collect();
        BoundNet { params: self, vars }
    }

    /// Uses existing graph leaves as this network's tensors. `vars` must
    /// follow the order and shapes of [`ParamSet::tensors`].
    pub fn bind_vars(&self, g: &Graph, vars: &[Var]) -> Result<BoundNet<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "{} leaves for {} tensors",
                vars.len(),
                self.tensors.len()
            )));
        }
        for ((_, t), v) in self.tensors.iter().zip(vars) {
            if g.value(*v).shape() != t.shape() {
                return Err(Error::Shape {
                    op: "bind_vars",
                    left: t.shape(),
                    right: g.value(*v).shape(),
                });
            }
        }
        Ok(BoundNet {
            params: self,
            vars: vars.to_vec(),
        })
    }

    /// Graph-free forward pass.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        check_input(&self.arch, x.shape())?;
        let mut h = x.clone();
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let (w, b) = (&self.tensors[2 * i].1, &self.tensors[2 * i + 1].1);
            h = h.matmul(w)?;
            let cols = h.cols();
            if cols > 0 {
                for row in h.data_mut().chunks_mut(cols) {
                    for (v, bv) in row.iter_mut().zip(b.data()) {
                        *v += bv;
                        if layer.activation == Activation::Relu && *v <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
            h.ensure_finite("forward")?;
        }
        Ok(h)
    }
}

fn check_input(arch: &Architecture, shape: (usize, usize)) -> Result<()> {
    if shape.1 != arch.input_width() {
        return Err(Error::Shape {
            op: "forward",
            left: shape,
            right: (arch.input_width(), arch.layers[0].outputs),
        });
    }
    Ok(())
}

/// A [`ParamSet`] whose tensors live as leaves of a graph.
#[derive(Debug)]
pub struct BoundNet<'a> {
    params: &'a ParamSet,
    vars: Vec<Var>,
}

impl BoundNet<'_> {
    /// Graph leaves in the same order as [`ParamSet::tensors`].
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_input(&self.params.arch, g.value(x).shape())?;
        let mut h = x;
        for (i, layer) in self.params.arch.layers.iter().enumerate() {
            h = g.matmul(h, self.vars[2 * i])?;
            h = g.add_bias(h, self.vars[2 * i + 1])?;
            if layer.activation == Activation::Relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Graph nodes of one feature-extractor + classifier pass.
#[derive(Clone, Copy, Debug)]
pub struct FcOutput {
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
}

pub fn forward_fc(g: &mut Graph, f: &BoundNet<'_>, c: &BoundNet<'_>, x: Var) -> Result<FcOutput> {
    let features = f.forward(g, x)?;
    let logits = c.forward(g, features)?;
    let probs = g.softmax_rows(logits)?;
    Ok(FcOutput {
        features,
        logits,
        probs,
    })
}

/// Graph-free `(features, class probabilities)`.
pub fn predict(f: &ParamSet, c: &ParamSet, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let features = f.apply(x)?;
    let probs = crate::tensor::softmax_rows(&c.apply(&features)?);
    Ok((features, probs))
}

/// Clamp applied to discriminator outputs before any logarithm.
pub const DISC_EPS: f64 = 1e-7;

/// Domain classifier over conditioned features; outputs lie in
/// `[DISC_EPS, 1 - DISC_EPS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub params: ParamSet,
}

impl Discriminator {
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.output_width() != 1 {
            return Err(Error::Config("discriminator must have a single output".into()));
        }
        Ok(Discriminator {
            params: ParamSet::init("D", arch, seed),
        })
    }

    pub fn input_width(&self) -> usize {
        self.params.arch.input_width()
    }

    /// Sigmoid probability that each row of `h` is a source sample.
    pub fn discriminate(g: &mut Graph, bound: &BoundNet<'_>, h: Var) -> Result<Var> {
        let logit = bound.forward(g, h)?;
        let p = g.sigmoid(logit)?;
        g.clamp(p, DISC_EPS, 1.0 - DISC_EPS)
    }

    pub fn discriminate_values(&self, h: &Tensor) -> Result<Tensor> {
        let logit = self.params.apply(h)?;
        Ok(logit.map(|z| (1.0 / (1.0 + (-z).exp())).clamp(DISC_EPS, 1.0 - DISC_EPS)))
    }
}

/// Smoothing coefficient of the teacher weight average.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum EmaRate {
    Fixed(f64),
    /// `min(max, 1 - 1/(n + 1))` at update `n`.
    Ramp {
        max: f64,
    },
}

impl EmaRate {
    pub fn at(self, updates_done: u64) -> f64 {
        match self {
            EmaRate::Fixed(a) => a,
            EmaRate::Ramp { max } => max.min(1.0 - 1.0 / (updates_done as f64 + 1.0)),
        }
    }

    pub fn validate(self) -> Result<()> {
        let a = match self {
            EmaRate::Fixed(a) => a,
            EmaRate::Ramp { max } => max,
        };
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("EMA rate must lie in [0, 1], got {a}")));
        }
        Ok(())
    }
}

/// Parameter counts of a [`DualNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub single: usize,
    pub teacher: usize,
    pub total: usize,
}

/// Student feature extractor and classifier, plus an optional teacher copy
/// that only ever moves by [`DualNet::ema_update`].
#[derive(Clone, Debug)]
pub struct DualNet {
    pub student_f: ParamSet,
    pub student_c: ParamSet,
    teacher: Option<(ParamSet, ParamSet)>,
    pub alpha: EmaRate,
    step_count: u64,
}

impl DualNet {
    /// The teacher, when requested, starts as an exact copy of the student.
    pub fn new(student_f: ParamSet, student_c: ParamSet, with_teacher: bool, alpha: EmaRate) -> Result<Self> {
        alpha.validate()?;
        let teacher = with_teacher.then(|| (student_f.clone(), student_c.clone()));
        Ok(DualNet {
            student_f,
            student_c,
            teacher,
            alpha,
            step_count: 0,
        })
    }

    /// A student/teacher pair with an explicit teacher, e.g. restored from
    /// disk. Architectures must match.
    pub fn with_teacher(
        student_f: ParamSet,
        student_c: ParamSet,
        teacher_f: ParamSet,
        teacher_c: ParamSet,
        alpha: EmaRate,
    ) -> Result<Self> {
        alpha.validate()?;
        if teacher_f.arch != student_f.arch || teacher_c.arch != student_c.arch {
            return Err(Error::Config("teacher and student architectures differ".into()));
        }
        Ok(DualNet {
            student_f,
            student_c,
            teacher: Some((teacher_f, teacher_c)),
            alpha,
            step_count: 0,
        })
    }

    pub fn teacher(&self) -> Option<(&ParamSet, &ParamSet)> {
        self.teacher.as_ref().map(|(f, c)| (f, c))
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// `teacher <- a * teacher + (1 - a) * student` for every tensor entry.
    /// Call once per optimizer step, after the student update.
    pub fn ema_update(&mut self) -> Result<()> {
        let a = self.alpha.at(self.step_count);
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("EMA rate must lie in [0, 1], got {a}")));
        }
        if let Some((tf, tc)) = &mut self.teacher {
            for (teacher, student) in [(tf, &self.student_f), (tc, &self.student_c)] {
                for ((_, t), (_, s)) in teacher.tensors.iter_mut().zip(&student.tensors) {
                    for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                        *tv = a * *tv + (1.0 - a) * sv;
                    }
                }
            }
        }
        self.step_count += 1;
        Ok(())
    }

    pub fn param_report(&self) -> ParamReport {
        let single = self.student_f.param_count() + self.student_c.param_count();
        let teacher = self
            .teacher
            .as_ref()
            .map_or(0, |(f, c)| f.param_count() + c.param_count());
        ParamReport {
            single,
            teacher,
            total: single + teacher,
        }
    }

    /// Teacher parameters, mutable. Only for restoring checkpoints.
    pub(crate) fn teacher_mut(&mut self) -> Option<(&mut ParamSet, &mut ParamSet)> {
        self.teacher.as_mut().map(|(f, c)| (f, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> NetworkShape {
        NetworkShape {
            input: 4,
            hidden: vec![8],
            feature_dim: 4,
            classes: 3,
            disc_hidden: 5,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let arch = shape().feature_extractor().unwrap();
        let a = ParamSet::init("F", &arch, 11);
        let b = ParamSet::init("F", &arch, 11);
        assert_eq!(a, b);
        assert_ne!(a, ParamSet::init("F", &arch, 12));
        for (name, t) in a.tensors() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_respects_glorot_bound() {
        let arch = Architecture::mlp(&[4, 8], Activation::Relu, Activation::Relu).unwrap();
        let p = ParamSet::init("L", &arch, 3);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!((bound - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(p.tensors()[0].1.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_width_is_config_error() {
        assert!(matches!(
            Architecture::mlp(&[4, 0, 2], Activation::Relu, Activation::Identity),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn layers_chain() {
        let arch = shape().feature_extractor().unwrap();
        for w in arch.layers().windows(2) {
            assert_eq!(w[0].outputs, w[1].inputs);
        }
        let p = ParamSet::init("F", &arch, 0);
        assert_eq!(p.param_count(), arch.param_count());
    }

    #[test]
    fn forward_fc_handles_empty_batch_and_sums_to_one() {
        let s = shape();
        let f = ParamSet::init("F", &s.feature_extractor().unwrap(), 1);
        let c = ParamSet::init("C", &s.classifier().unwrap(), 2);
        let mut g = Graph::new();
        let (bf, bc) = (f.bind(&mut g), c.bind(&mut g));
        let x = g.constant(Tensor::zeros(0, 4));
        let out = forward_fc(&mut g, &bf, &bc, x).unwrap();
        assert_eq!(g.value(out.features).shape(), (0, 4));
        assert_eq!(g.value(out.probs).shape(), (0, 3));

        let x = g.constant(Tensor::from_rows(&[[0.3, -1.0, 2.0, 0.1], [1.0, 1.0, -1.0, 0.0]]).unwrap());
        let out = forward_fc(&mut g, &bf, &bc, x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(out.probs).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // graph-free path agrees bitwise
        let (feat, probs) = predict(&f, &c, g.value(x)).unwrap();
        assert_eq!(&feat, g.value(out.features));
        assert_eq!(&probs, g.value(out.probs));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let s = shape();
        let f = ParamSet::init("F", &s.feature_extractor().unwrap(), 1);
        assert!(matches!(f.apply(&Tensor::zeros(2, 5)), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_discriminator_outputs_half() {
        let arch = shape().discriminator().unwrap();
        let d = Discriminator {
            params: ParamSet::zeros("D", &arch),
        };
        let h = Tensor::from_rows(&[vec![3.0; 12]]).unwrap();
        let out = d.discriminate_values(&h).unwrap();
        assert_eq!(out.shape(), (1, 1));
        assert_eq!(out.data(), &[0.5]);
    }

    #[test]
    fn discriminator_output_is_clamped() {
        let arch = Architecture::mlp(&[1, 1], Activation::Identity, Activation::Identity).unwrap();
        let mut d = Discriminator::new(&arch, 0).unwrap();
        d.params.tensor_mut(0).data_mut()[0] = 1.0;
        let h = Tensor::from_rows(&[[1e4], [-1e4]]).unwrap();
        let mut g = Graph::new();
        let b = d.params.bind(&mut g);
        let hv = g.constant(h);
        let out = Discriminator::discriminate(&mut g, &b, hv).unwrap();
        assert_eq!(g.value(out).data(), &[1.0 - DISC_EPS, DISC_EPS]);
    }

    fn dual(alpha: EmaRate) -> DualNet {
        let s = shape();
        let f = ParamSet::init("F", &s.feature_extractor().unwrap(), 1);
        let c = ParamSet::init("C", &s.classifier().unwrap(), 2);
        DualNet::new(f, c, true, alpha).unwrap()
    }

    #[test]
    fn ema_direct_arithmetic() {
        let arch = Architecture::mlp(&[1, 1], Activation::Identity, Activation::Identity).unwrap();
        let mut student = ParamSet::zeros("S", &arch);
        student.tensor_mut(0).data_mut()[0] = 3.0;
        student.tensor_mut(1).data_mut()[0] = 3.0;
        let c = ParamSet::zeros("C", &arch);
        let mut net = DualNet::new(student.clone(), c, true, EmaRate::Fixed(0.5)).unwrap();
        {
            let (tf, _) = net.teacher_mut().unwrap();
            tf.tensor_mut(0).data_mut()[0] = 1.0;
            tf.tensor_mut(1).data_mut()[0] = 1.0;
        }
        net.ema_update().unwrap();
        let (tf, _) = net.teacher().unwrap();
        assert_eq!(tf.tensors()[0].1.data(), &[2.0]);
        assert_eq!(tf.tensors()[1].1.data(), &[2.0]);
        assert_eq!(net.student_f, student);
        assert_eq!(net.step_count(), 1);
    }

    #[test]
    fn ema_boundaries() {
        let mut net = dual(EmaRate::Fixed(1.0));
        let before = net.teacher().unwrap().0.clone();
        net.student_f.tensor_mut(0).data_mut()[0] += 5.0;
        net.ema_update().unwrap();
        assert_eq!(net.teacher().unwrap().0, &before);

        let mut net = dual(EmaRate::Fixed(0.0));
        net.student_f.tensor_mut(0).data_mut()[0] += 5.0;
        net.ema_update().unwrap();
        assert_eq!(net.teacher().unwrap().0, &net.student_f);
    }

    #[test]
    fn ema_rate_out_of_range_is_config_error() {
        let s = shape();
        let f = ParamSet::init("F", &s.feature_extractor().unwrap(), 1);
        let c = ParamSet::init("C", &s.classifier().unwrap(), 2);
        assert!(DualNet::new(f.clone(), c.clone(), true, EmaRate::Fixed(1.5)).is_err());
        assert!(DualNet::new(f, c, true, EmaRate::Fixed(-0.1)).is_err());
    }

    #[test]
    fn ramp_schedule() {
        let r = EmaRate::Ramp { max: 0.99 };
        assert_eq!(r.at(0), 0.0);
        assert_eq!(r.at(1), 0.5);
        assert_eq!(r.at(1000), 0.99);
    }

    #[test]
    fn param_report_doubles_with_teacher() {
        let net = dual(EmaRate::Fixed(0.9));
        let r = net.param_report();
        assert_eq!(r.total, 2 * r.single);
        let s = shape();
        let f = ParamSet::init("F", &s.feature_extractor().unwrap(), 1);
        let c = ParamSet::init("C", &s.classifier().unwrap(), 2);
        let solo = DualNet::new(f, c, false, EmaRate::Fixed(0.9)).unwrap();
        assert!(solo.teacher().is_none());
        assert_eq!(solo.param_report().total, solo.param_report().single);
    }
}
