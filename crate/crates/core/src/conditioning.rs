//! Conditioning signals for the discriminator: the feature/prediction outer
//! product and per-sample moving averages of class predictions.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Stable identity of a training sample across epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SampleId {
    Source(usize),
    Target(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Student,
    Teacher,
}

/// Row `i` of the result is `f_i ⊗ p_i` flattened so that `(j, k)` lands at
/// column `j * c + k`. Differentiable in both arguments.
pub fn multilinear_map(g: &mut Graph, f: Var, p: Var) -> Result<Var> {
    g.outer_rows(f, p)
}

/// Tolerance on the row sums of incoming prediction vectors.
const PROB_TOL: f64 = 1e-9;

/// Per-sample ensembled predictions, one table per branch.
///
/// Each update applies `p̂_n = (1 - α_p) p̂_{n-1} + α_p p_n`; the first visit
/// to a sample stores `p_n` as is. Note that `α_p` weights the *new*
/// prediction here, unlike the weight average in [`crate::networks`].
#[derive(Clone, Debug)]
pub struct PredEmaState {
    alpha_p: f64,
    student: HashMap<SampleId, Vec<f64>>,
    teacher: HashMap<SampleId, Vec<f64>>,
}

impl PredEmaState {
    pub fn new(alpha_p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha_p) {
            return Err(Error::Config(format!("alpha_p must lie in [0, 1], got {alpha_p}")));
        }
        Ok(PredEmaState {
            alpha_p,
            student: HashMap::new(),
            teacher: HashMap::new(),
        })
    }

    pub fn alpha_p(&self) -> f64 {
        self.alpha_p
    }

    fn table(&self, which: Branch) -> &HashMap<SampleId, Vec<f64>> {
        match which {
            Branch::Student => &self.student,
            Branch::Teacher => &self.teacher,
        }
    }

    pub fn get(&self, which: Branch, id: SampleId) -> Option<&[f64]> {
        self.table(which).get(&id).map(Vec::as_slice)
    }

    pub fn len(&self, which: Branch) -> usize {
        self.table(which).len()
    }

    /// Folds `p_n` (one probability row per id) into the stored averages and
    /// returns the updated rows. The result is a plain tensor: no gradient
    /// flows through it.
    pub fn update(&mut self, which: Branch, ids: &[SampleId], p_n: &Tensor) -> Result<Tensor> {
        if ids.len() != p_n.rows() {
            return Err(Error::Shape {
                op: "pred_ema",
                left: p_n.shape(),
                right: (ids.len(), p_n.cols()),
            });
        }
        for r in 0..p_n.rows() {
            let row = p_n.row(r);
            let total: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > PROB_TOL {
                return Err(Error::Contract(format!("row {r} is not a probability vector")));
            }
        }
        let a = self.alpha_p;
        let table = match which {
            Branch::Student => &mut self.student,
            Branch::Teacher => &mut self.teacher,
        };
        let mut out = Vec::with_capacity(p_n.len());
        for (r, id) in ids.iter().enumerate() {
            let current = p_n.row(r);
            let stored = table
                .entry(*id)
                .and_modify(|prev| {
                    for (h, &p) in prev.iter_mut().zip(current) {
                        *h = (1.0 - a) * *h + a * p;
                    }
                })
                .or_insert_with(|| current.to_vec());
            out.extend_from_slice(stored);
        }
        Tensor::new(ids.len(), p_n.cols(), out)
    }
}
