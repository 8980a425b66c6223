//! Finite-difference checks of every loss term on a tiny random problem.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{ConsistencyNorm, LossWeights};
use crate::networks::{forward_fc, Discriminator, NetworkShape, ParamSet};
use crate::seed::{derive_seed, rng};
use crate::tensor::{finite_diff_check_with, softmax_rows, GradCheckReport, Graph, Tensor, Var};
use crate::trainer::{objective, ObjectiveInputs, Variant};

/// Problem size of one gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CheckSizes {
    pub batch: usize,
    pub input: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Default for CheckSizes {
    fn default() -> Self {
        CheckSizes {
            batch: 4,
            input: 4,
            hidden: 5,
            feature_dim: 4,
            classes: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    CrossEntropy,
    AdvStudent,
    AdvTeacher,
    Consistency,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::CrossEntropy,
        LossTerm::AdvStudent,
        LossTerm::AdvTeacher,
        LossTerm::Consistency,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::CrossEntropy => "cross_entropy",
            LossTerm::AdvStudent => "adv_student",
            LossTerm::AdvTeacher => "adv_teacher",
            LossTerm::Consistency => "consistency",
            LossTerm::Total => "total",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermCheck {
    pub term: LossTerm,
    pub report: GradCheckReport,
    /// Name of the parameter tensor holding the worst entry, e.g. `F.0.weight`.
    pub worst_param: Option<String>,
}

/// Student, discriminator and fixed inputs of one check.
struct Fixture {
    f: ParamSet,
    c: ParamSet,
    d: ParamSet,
    x: Tensor,
    labels: Vec<usize>,
    teacher_probs: Tensor,
    cond_student: Tensor,
    cond_teacher: Tensor,
}

fn random_tensor(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(rows, cols, data).expect("normal draws are finite")
}

fn fixture(seed: u64, s: &CheckSizes) -> Result<Fixture> {
    let shape = NetworkShape {
        input: s.input,
        hidden: vec![s.hidden],
        feature_dim: s.feature_dim,
        classes: s.classes,
        disc_hidden: s.hidden,
    };
    let mut f = ParamSet::init("F", &shape.feature_extractor()?, derive_seed(seed, 1));
    let mut c = ParamSet::init("C", &shape.classifier()?, derive_seed(seed, 2));
    let mut d = Discriminator::new(&shape.discriminator()?, derive_seed(seed, 3))?.params;
    let mut r = rng(seed, 4);
    // Zero biases put ReLU units fed by all-zero rows exactly on the kink.
    for set in [&mut f, &mut c, &mut d] {
        for i in 0..set.len() {
            for v in set.tensor_mut(i).data_mut() {
                *v += 0.1 * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let rows = 2 * s.batch;
    let x = random_tensor(&mut r, rows, s.input);
    let labels = (0..s.batch).map(|_| r.random_range(0..s.classes)).collect();
    let teacher_probs = softmax_rows(&random_tensor(&mut r, rows, s.classes));
    let cond_student = softmax_rows(&random_tensor(&mut r, rows, s.classes));
    let cond_teacher = softmax_rows(&random_tensor(&mut r, rows, s.classes));
    Ok(Fixture {
        f,
        c,
        d,
        x,
        labels,
        teacher_probs,
        cond_student,
        cond_teacher,
    })
}

/// Runs the central-difference check on each loss term with respect to every
/// student and discriminator parameter. `corrupt` perturbs one analytic
/// entry so callers can confirm a failure is reported.
pub fn check_losses(seed: u64, sizes: &CheckSizes, h: f64, tol: f64, corrupt: bool) -> Result<Vec<TermCheck>> {
    let fx = fixture(seed, sizes)?;
    let sets = [&fx.f, &fx.c, &fx.d];
    let names: Vec<String> = sets
        .iter()
        .flat_map(|s| s.tensors().iter().map(|(n, _)| n.clone()))
        .collect();
    let params: Vec<Tensor> = sets
        .iter()
        .flat_map(|s| s.tensors().iter().map(|(_, t)| t.clone()))
        .collect();
    let (nf, nc) = (fx.f.len(), fx.c.len());
    let weights = LossWeights {
        lambda_stu: 0.7,
        lambda_tea: 0.4,
        gamma: 1.3,
    };

    let mut out = Vec::new();
    for term in LossTerm::ALL {
        let loss_fn = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
            let bf = fx.f.bind_vars(g, &vars[..nf])?;
            let bc = fx.c.bind_vars(g, &vars[nf..nf + nc])?;
            let bd = fx.d.bind_vars(g, &vars[nf + nc..])?;
            let x = g.constant(fx.x.clone());
            let student = forward_fc(g, &bf, &bc, x)?;
            let inputs = ObjectiveInputs {
                features: student.features,
                probs: student.probs,
                n_source: sizes.batch,
                teacher_probs: Some(g.constant(fx.teacher_probs.clone())),
                cond_student: Some(g.constant(fx.cond_student.clone())),
                cond_teacher: Some(g.constant(fx.cond_teacher.clone())),
            };
            let (terms, total) = objective(
                g,
                Variant::Ren,
                &inputs,
                &fx.labels,
                Some(&bd),
                0.6,
                &weights,
                ConsistencyNorm::Squared,
            )?;
            Ok(match term {
                LossTerm::CrossEntropy => terms.l_c,
                LossTerm::AdvStudent => terms.l_d_stu.expect("ren has a student adversary"),
                LossTerm::AdvTeacher => terms.l_d_tea.expect("ren has a teacher adversary"),
                LossTerm::Consistency => terms.l_con.expect("ren has consistency"),
                LossTerm::Total => total,
            })
        };
        let report = finite_diff_check_with(loss_fn, &params, h, tol, |grads| {
            if corrupt {
                grads[0].data_mut()[0] += 1.0;
            }
        })?;
        let worst_param = report.worst.map(|(i, _)| names[i].clone());
        out.push(TermCheck {
            term,
            report,
            worst_param,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_match_finite_differences() {
        for seed in 0..3 {
            for c in check_losses(seed, &CheckSizes::default(), 1e-5, 1e-4, false).unwrap() {
                assert!(c.report.passed(), "{} seed {seed}: {:?}", c.term.name(), c.report);
                assert!(c.report.entries_checked > 0);
            }
        }
    }

    #[test]
    fn corruption_is_reported() {
        let checks = check_losses(0, &CheckSizes::default(), 1e-5, 1e-4, true).unwrap();
        for c in checks {
            assert!(!c.report.passed());
            assert_eq!(c.worst_param.as_deref(), Some("F.0.weight"));
        }
    }
}
