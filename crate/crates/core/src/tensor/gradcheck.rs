use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Magnitude below which gradient comparisons become absolute rather than
/// relative.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn evaluate<F>(loss_fn: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    g.scalar(loss)
}

/// Compares the gradient from [`Graph::backward`] with
/// `(L(θ + h) - L(θ - h)) / 2h` for every entry of every parameter.
///
/// `loss_fn` receives a fresh graph and one parameter leaf per tensor in
/// `params`, and must return a scalar loss node. Gradient reversal acts as
/// the identity during the check, since central differences only see the
/// loss value.
pub fn finite_diff_check<F>(loss_fn: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(loss_fn, params, h, tol, |_| {})
}

/// As [`finite_diff_check`], with a hook that may edit the analytic
/// gradients before comparison. Used to prove the harness catches errors.
pub fn finite_diff_check_with<F, H>(
    loss_fn: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
    tamper: H,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    H: FnOnce(&mut [Tensor]),
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut g = Graph::without_reversal();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    tamper(&mut analytic);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: 0,
        tolerance: tol,
    };
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            let original = probe[pi].data()[ei];
            probe[pi].data_mut()[ei] = original + h;
            let plus = evaluate(&loss_fn, &probe)?;
            probe[pi].data_mut()[ei] = original - h;
            let minus = evaluate(&loss_fn, &probe)?;
            probe[pi].data_mut()[ei] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[ei];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ei));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
