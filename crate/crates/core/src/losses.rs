//! Loss terms: source classification, conditional adversarial losses for the
//! student and teacher conditions, student/teacher consistency, and their
//! weighted total.

use serde::{Deserialize, Serialize};

use crate::conditioning::multilinear_map;
use crate::error::{Error, Result};
use crate::networks::{BoundNet, Discriminator};
use crate::tensor::{Graph, Var};

/// Lower clamp on class probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over the batch of `-ln p[i, label_i]`.
pub fn cross_entropy(g: &mut Graph, p: Var, labels: &[usize]) -> Result<Var> {
    let picked = g.pick(p, labels)?;
    let clamped = g.clamp(picked, PROB_FLOOR, 1.0)?;
    let logs = g.log(clamped)?;
    let mean = g.mean(logs)?;
    g.scale(mean, -1.0)
}

/// `-mean ln D(h_s) - mean ln(1 - D(h_t))`, with both inputs passed through
/// gradient reversal first. Source is labelled 1, target 0.
pub fn domain_adv_loss(g: &mut Graph, d: &BoundNet<'_>, h_source: Var, h_target: Var, lambda_grl: f64) -> Result<Var> {
    let (hs, ht) = (g.value(h_source).shape(), g.value(h_target).shape());
    if hs.0 == 0 || ht.0 == 0 {
        return Err(Error::Contract(
            "adversarial loss needs non-empty source and target batches".into(),
        ));
    }
    if hs.1 != ht.1 {
        return Err(Error::Shape {
            op: "domain_adv_loss",
            left: hs,
            right: ht,
        });
    }
    let rs = g.grad_reverse(h_source, lambda_grl)?;
    let rt = g.grad_reverse(h_target, lambda_grl)?;
    let ds = Discriminator::discriminate(g, d, rs)?;
    let dt = Discriminator::discriminate(g, d, rt)?;
    let log_s = g.log(ds)?;
    let not_t = g.affine(dt, -1.0, 1.0)?;
    let log_t = g.log(not_t)?;
    let ms = g.mean(log_s)?;
    let mt = g.mean(log_t)?;
    let sum = g.add(ms, mt)?;
    g.scale(sum, -1.0)
}

/// Conditional adversarial loss on student features conditioned by the
/// student's (ensembled) predictions. Conditions are expected detached.
pub fn adv_student(
    g: &mut Graph,
    d: &BoundNet<'_>,
    f_source: Var,
    f_target: Var,
    cond_source: Var,
    cond_target: Var,
    lambda_grl: f64,
) -> Result<Var> {
    let hs = multilinear_map(g, f_source, cond_source)?;
    let ht = multilinear_map(g, f_target, cond_target)?;
    domain_adv_loss(g, d, hs, ht, lambda_grl)
}

/// Same as [`adv_student`] but the condition comes from the teacher's
/// ensembled predictions. Features are still the student's.
pub fn adv_teacher(
    g: &mut Graph,
    d: &BoundNet<'_>,
    f_source: Var,
    f_target: Var,
    cond_source: Var,
    cond_target: Var,
    lambda_grl: f64,
) -> Result<Var> {
    adv_student(g, d, f_source, f_target, cond_source, cond_target, lambda_grl)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyNorm {
    /// Mean of `||p_stu - p_tea||²` over rows.
    Squared,
    /// Mean of `||p_stu - p_tea||` over rows.
    L2,
}

/// Distance between student and teacher predictions. The teacher side is
/// detached, so only `p_student` receives gradient.
pub fn consistency(g: &mut Graph, p_student: Var, p_teacher: Var, norm: ConsistencyNorm) -> Result<Var> {
    let teacher = g.detach(p_teacher);
    let diff = g.sub(p_student, teacher)?;
    let sq = g.square(diff)?;
    let per_row = g.row_sum(sq)?;
    let per_row = match norm {
        ConsistencyNorm::Squared => per_row,
        ConsistencyNorm::L2 => g.sqrt(per_row)?,
    };
    g.mean(per_row)
}

/// Weights of the adversarial and consistency terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossWeights {
    pub lambda_stu: f64,
    pub lambda_tea: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_stu", self.lambda_stu),
            ("lambda_tea", self.lambda_tea),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Graph nodes of the individual loss terms; inactive terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_c: Var,
    pub l_d_stu: Option<Var>,
    pub l_d_tea: Option<Var>,
    pub l_con: Option<Var>,
}

/// `l_c + λ_stu l_d_stu + λ_tea l_d_tea + γ l_con`.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let mut total = terms.l_c;
    for (term, weight) in [
        (terms.l_d_stu, w.lambda_stu),
        (terms.l_d_tea, w.lambda_tea),
        (terms.l_con, w.gamma),
    ] {
        if let Some(t) = term {
            let scaled = g.scale(t, weight)?;
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Scalar values of each loss term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_d_stu: f64,
    pub l_d_tea: f64,
    pub l_con: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_graph(g: &Graph, terms: &LossTerms, total: Var) -> Result<Self> {
        let val = |v: Option<Var>| v.map_or(Ok(0.0), |v| g.scalar(v));
        Ok(LossBreakdown {
            l_c: g.scalar(terms.l_c)?,
            l_d_stu: val(terms.l_d_stu)?,
            l_d_tea: val(terms.l_d_tea)?,
            l_con: val(terms.l_con)?,
            total: g.scalar(total)?,
        })
    }

    /// Weighted sum of the stored parts.
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        self.l_c + w.lambda_stu * self.l_d_stu + w.lambda_tea * self.l_d_tea + w.gamma * self.l_con
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Activation, Architecture, ParamSet};
    use crate::tensor::Tensor;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let p = g.constant(t(&[&[0.0, 1.0, 0.0]]));
        let l = cross_entropy(&mut g, p, &[1]).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);

        let p = g.constant(t(&[&[0.25; 4]]));
        let l = cross_entropy(&mut g, p, &[2]).unwrap();
        assert!((g.scalar(l).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((4f64.ln() - 1.3863).abs() < 1e-4);

        let p = g.constant(t(&[&[1.0, 0.0, 0.0, 0.0], &[0.25; 4]]));
        let l = cross_entropy(&mut g, p, &[0, 3]).unwrap();
        assert!((g.scalar(l).unwrap() - 0.5 * 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let p = g.constant(t(&[&[0.5, 0.5]]));
        assert!(cross_entropy(&mut g, p, &[2]).is_err());
    }

    fn zero_disc(width: usize) -> ParamSet {
        let arch = Architecture::mlp(&[width, 3, 1], Activation::Relu, Activation::Identity).unwrap();
        ParamSet::zeros("D", &arch)
    }

    #[test]
    fn half_discriminator_gives_two_ln_two() {
        let d = zero_disc(4);
        let mut g = Graph::new();
        let bd = d.bind(&mut g);
        let hs = g.constant(t(&[&[1.0, 2.0, 3.0, 4.0]]));
        let ht = g.constant(t(&[&[0.0, -1.0, 5.0, 0.5], &[1.0; 4]]));
        let l = domain_adv_loss(&mut g, &bd, hs, ht, 1.0).unwrap();
        assert!((g.scalar(l).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_discriminator_loss_is_tiny() {
        // Single linear unit with a huge weight separates +1 from -1.
        let arch = Architecture::mlp(&[1, 1], Activation::Identity, Activation::Identity).unwrap();
        let mut d = ParamSet::zeros("D", &arch);
        d.tensor_mut(0).data_mut()[0] = 1e3;
        let mut g = Graph::new();
        let bd = d.bind(&mut g);
        let hs = g.constant(t(&[&[1.0]]));
        let ht = g.constant(t(&[&[-1.0]]));
        let l = domain_adv_loss(&mut g, &bd, hs, ht, 1.0).unwrap();
        let v = g.scalar(l).unwrap();
        assert!((0.0..3e-7).contains(&v), "{v}");
    }

    #[test]
    fn zero_reversal_cuts_feature_gradient_only() {
        let arch = Architecture::mlp(&[2, 3, 1], Activation::Relu, Activation::Identity).unwrap();
        let d = ParamSet::init("D", &arch, 4);
        let run = |lambda: f64| {
            let mut g = Graph::new();
            let bd = d.bind(&mut g);
            let hs = g.param(t(&[&[0.4, -0.3], &[1.0, 0.2]]));
            let ht = g.param(t(&[&[-0.7, 0.9]]));
            let l = domain_adv_loss(&mut g, &bd, hs, ht, lambda).unwrap();
            let grads = g.backward(l).unwrap();
            let dgrads: Vec<Tensor> = bd.vars().iter().map(|&v| grads.get_or_zeros(v, g.value(v))).collect();
            (grads.get_or_zeros(hs, g.value(hs)), dgrads)
        };
        let (h0, d0) = run(0.0);
        let (h1, d1) = run(1.0);
        assert!(h0.data().iter().all(|&v| v == 0.0));
        assert!(h1.data().iter().any(|&v| v != 0.0));
        assert_eq!(d0, d1);
    }

    #[test]
    fn adversarial_loss_rejects_empty_batch() {
        let d = zero_disc(2);
        let mut g = Graph::new();
        let bd = d.bind(&mut g);
        let hs = g.constant(Tensor::zeros(0, 2));
        let ht = g.constant(Tensor::zeros(1, 2));
        assert!(matches!(
            domain_adv_loss(&mut g, &bd, hs, ht, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn single_class_condition_reduces_to_plain_features() {
        let d = ParamSet::init(
            "D",
            &Architecture::mlp(&[3, 4, 1], Activation::Relu, Activation::Identity).unwrap(),
            9,
        );
        let mut g = Graph::new();
        let bd = d.bind(&mut g);
        let fs = g.constant(t(&[&[0.1, 0.5, -0.2], &[1.0, 0.0, 0.3]]));
        let ft = g.constant(t(&[&[0.6, -0.4, 0.0]]));
        let ones_s = g.constant(Tensor::filled(2, 1, 1.0));
        let ones_t = g.constant(Tensor::filled(1, 1, 1.0));
        let cond = adv_student(&mut g, &bd, fs, ft, ones_s, ones_t, 1.0).unwrap();
        let plain = domain_adv_loss(&mut g, &bd, fs, ft, 1.0).unwrap();
        assert_eq!(g.scalar(cond).unwrap(), g.scalar(plain).unwrap());
        let tea = adv_teacher(&mut g, &bd, fs, ft, ones_s, ones_t, 1.0).unwrap();
        assert_eq!(g.scalar(tea).unwrap(), g.scalar(plain).unwrap());
    }

    #[test]
    fn consistency_examples() {
        let mut g = Graph::new();
        let a = g.param(t(&[&[1.0, 0.0]]));
        let b = g.param(t(&[&[0.0, 1.0]]));
        let l = consistency(&mut g, a, b, ConsistencyNorm::Squared).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 2.0);
        let r = consistency(&mut g, b, a, ConsistencyNorm::Squared).unwrap();
        assert_eq!(g.scalar(r).unwrap(), 2.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, -2.0]);
        assert!(grads.get(b).is_none());

        let same = consistency(&mut g, a, a, ConsistencyNorm::Squared).unwrap();
        assert_eq!(g.scalar(same).unwrap(), 0.0);
        let l2 = consistency(&mut g, a, b, ConsistencyNorm::L2).unwrap();
        assert!((g.scalar(l2).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn consistency_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 2));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(consistency(&mut g, a, b, ConsistencyNorm::Squared).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::new();
        let parts = [1.0, 0.5, 0.5, 0.2].map(|v| g.constant(Tensor::scalar(v)));
        let terms = LossTerms {
            l_c: parts[0],
            l_d_stu: Some(parts[1]),
            l_d_tea: Some(parts[2]),
            l_con: Some(parts[3]),
        };
        let ones = LossWeights {
            lambda_stu: 1.0,
            lambda_tea: 1.0,
            gamma: 1.0,
        };
        let total = total_loss(&mut g, &terms, &ones).unwrap();
        assert!((g.scalar(total).unwrap() - 2.2).abs() < 1e-15);
        let b = LossBreakdown::from_graph(&g, &terms, total).unwrap();
        assert!((b.total - b.recompute_total(&ones)).abs() <= 1e-10);

        let zeros = LossWeights {
            lambda_stu: 0.0,
            lambda_tea: 0.0,
            gamma: 0.0,
        };
        let total = total_loss(&mut g, &terms, &zeros).unwrap();
        assert_eq!(g.scalar(total).unwrap(), 1.0);

        let bad = LossWeights {
            lambda_stu: -1.0,
            ..ones
        };
        assert!(matches!(total_loss(&mut g, &terms, &bad), Err(Error::Config(_))));
    }
}
