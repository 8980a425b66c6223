use super::{softmax_rows, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    GradReverse(Var, f64),
    Detach,
    Outer(Var, Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Pick(Var, Vec<usize>),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run computation record.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and [`Graph::backward`] walks the exact reverse of construction order.
/// Build a fresh graph for every step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    reversal_disabled: bool,
}

/// Gradients of a scalar loss with respect to the parameter leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf. `None` for non-parameter nodes and for
    /// parameters the loss does not depend on.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor {
        rows: a.rows(),
        cols: a.cols(),
        data,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph in which [`Graph::grad_reverse`] passes gradients through
    /// unchanged, so `backward` yields the plain derivative of the loss value.
    pub fn without_reversal() -> Self {
        Graph {
            nodes: Vec::new(),
            reversal_disabled: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, var: Var) -> Result<f64> {
        self.value(var).item()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; [`Graph::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Param,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", Op::MatMul(a, b), value, &[a, b])
    }

    /// Adds a `1 x n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut value = xv.clone();
        let cols = value.cols();
        if cols > 0 {
            for row in value.data_mut().chunks_mut(cols) {
                for (v, b) in row.iter_mut().zip(bv.data()) {
                    *v += b;
                }
            }
        }
        self.push("add_bias", Op::AddBias(x, bias), value, &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", Op::Add(a, b), value, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub(a, b), value, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", Op::Mul(a, b), value, &[a, b])
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push("affine", Op::Affine(x, scale), value, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", Op::Relu(x), value, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", Op::Sigmoid(x), value, &[x])
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", Op::Clamp(x, lo, hi), value, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::ln);
        self.push("log", Op::Log(x), value, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push("square", Op::Square(x), value, &[x])
    }

    /// Elementwise square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::sqrt);
        self.push("sqrt", Op::Sqrt(x), value, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = softmax_rows(self.value(x));
        self.push("softmax_rows", Op::SoftmaxRows(x), value, &[x])
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!(
                "gradient reversal factor must be a finite value >= 0, got {lambda}"
            )));
        }
        let value = self.value(x).clone();
        self.push("grad_reverse", Op::GradReverse(x, lambda), value, &[x])
    }

    /// Copies `x` into a node that blocks all gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            op: Op::Detach,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Row-wise flattened outer product: row `i` of the result holds
    /// `f[i, j] * p[i, k]` at column `j * c + k`.
    pub fn outer_rows(&mut self, f: Var, p: Var) -> Result<Var> {
        let (fv, pv) = (self.value(f), self.value(p));
        if fv.rows() != pv.rows() {
            return Err(Error::Shape {
                op: "outer_rows",
                left: fv.shape(),
                right: pv.shape(),
            });
        }
        let (m, d, c) = (fv.rows(), fv.cols(), pv.cols());
        let mut data = Vec::with_capacity(m * d * c);
        for i in 0..m {
            let pr = pv.row(i);
            for &fj in fv.row(i) {
                data.extend(pr.iter().map(|&pk| fj * pk));
            }
        }
        let value = Tensor {
            rows: m,
            cols: d * c,
            data,
        };
        self.push("outer_rows", Op::Outer(f, p), value, &[f, p])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", Op::Sum(x), value, &[x])
    }

    /// Mean over all entries. Fails on an empty tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push("mean", Op::Mean(x), value, &[x])
    }

    /// Per-row sum, `m x n -> m x 1`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let value = Tensor {
            rows: xv.rows(),
            cols: 1,
            data,
        };
        self.push("row_sum", Op::RowSum(x), value, &[x])
    }

    /// Gathers `x[i, index[i]]` into an `m x 1` column.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if index.len() != xv.rows() {
            return Err(Error::Shape {
                op: "pick",
                left: xv.shape(),
                right: (index.len(), 1),
            });
        }
        if let Some(&bad) = index.iter().find(|&&k| k >= xv.cols()) {
            return Err(Error::Contract(format!(
                "index {bad} out of range for {} columns",
                xv.cols()
            )));
        }
        let data = index.iter().enumerate().map(|(i, &k)| xv.get(i, k)).collect();
        let value = Tensor {
            rows: index.len(),
            cols: 1,
            data,
        };
        self.push("pick", Op::Pick(x, index.to_vec()), value, &[x])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Shape {
                op: "concat_rows",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let value = Tensor {
            rows: av.rows() + bv.rows(),
            cols: av.cols(),
            data,
        };
        self.push("concat_rows", Op::ConcatRows(a, b), value, &[a, b])
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::Contract(format!(
                "row range {start}..{end} out of bounds for {} rows",
                xv.rows()
            )));
        }
        let cols = xv.cols();
        let value = Tensor {
            rows: end - start,
            cols,
            data: xv.data()[start * cols..end * cols].to_vec(),
        };
        self.push("slice_rows", Op::SliceRows(x, start), value, &[x])
    }

    /// Reverse-mode sweep from a `1 x 1` loss node.
    ///
    /// Nodes are visited in exact reverse construction order, so repeated
    /// evaluation of the same graph yields bitwise identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }

        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Param) {
                *slot = None;
            } else if let Some(t) = slot {
                t.ensure_finite("backward")?;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Param | Op::Detach => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[b.0].requires_grad {
                    let cols = g.cols();
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_map(g, bv, |x, y| x * y));
                self.accumulate(grads, *b, zip_map(g, av, |x, y| x * y));
            }
            Op::Affine(x, scale) => {
                let s = *scale;
                self.accumulate(grads, *x, g.map(|v| s * v));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, zip_map(g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, zip_map(g, out, |gv, s| gv * s * (1.0 - s)));
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let xv = self.value(*x);
                let d = zip_map(g, xv, |gv, v| if v >= lo && v <= hi { gv } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, zip_map(g, xv, |gv, v| gv / v));
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, zip_map(g, xv, |gv, v| 2.0 * v * gv));
            }
            Op::Sqrt(x) => {
                let d = zip_map(g, out, |gv, s| if s > 0.0 { 0.5 * gv / s } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::SoftmaxRows(x) => {
                let mut d = Tensor::zeros(out.rows(), out.cols());
                let cols = out.cols();
                for r in 0..out.rows() {
                    let (p, gr) = (out.row(r), g.row(r));
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (k, dv) in d.data_mut()[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                        *dv = p[k] * (gr[k] - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::GradReverse(x, lambda) => {
                if self.reversal_disabled {
                    self.accumulate(grads, *x, g.clone());
                } else {
                    let l = *lambda;
                    self.accumulate(grads, *x, g.map(|v| -l * v));
                }
            }
            Op::Outer(f, p) => {
                let (fv, pv) = (self.value(*f), self.value(*p));
                let (m, d, c) = (fv.rows(), fv.cols(), pv.cols());
                if self.nodes[f.0].requires_grad {
                    let mut df = Tensor::zeros(m, d);
                    for i in 0..m {
                        let (pr, gr) = (pv.row(i), g.row(i));
                        for j in 0..d {
                            df.data_mut()[i * d + j] = pr.iter().zip(&gr[j * c..(j + 1) * c]).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, *f, df);
                }
                if self.nodes[p.0].requires_grad {
                    let mut dp = Tensor::zeros(m, c);
                    for i in 0..m {
                        let (fr, gr) = (fv.row(i), g.row(i));
                        for (j, &fj) in fr.iter().enumerate() {
                            for k in 0..c {
                                dp.data_mut()[i * c + k] += fj * gr[j * c + k];
                            }
                        }
                    }
                    self.accumulate(grads, *p, dp);
                }
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), gv));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.data()[0] / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), gv));
            }
            Op::RowSum(x) => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                let cols = xv.cols();
                for r in 0..xv.rows() {
                    let gv = g.data()[r];
                    d.data_mut()[r * cols..(r + 1) * cols].fill(gv);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Pick(x, index) => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                for (i, &k) in index.iter().enumerate() {
                    d.data_mut()[i * xv.cols() + k] = g.data()[i];
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                let (top, bottom) = g.data().split_at(split);
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        rows: av.rows(),
                        cols: av.cols(),
                        data: top.to_vec(),
                    },
                );
                self.accumulate(
                    grads,
                    *b,
                    Tensor {
                        rows: bv.rows(),
                        cols: bv.cols(),
                        data: bottom.to_vec(),
                    },
                );
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                let offset = start * xv.cols();
                d.data_mut()[offset..offset + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_gradient_example() {
        let mut g = Graph::new();
        let a = g.param(t(&[&[1.0, 2.0]]));
        let b = g.constant(t(&[&[3.0], &[4.0]]));
        let y = g.matmul(a, b).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[&[-1.0, 0.0, 2.0]]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        // subgradient at zero is zero
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.constant(t(&[&[-3.0, -0.5], &[-1e-9, -7.0]]));
        let y = g.relu(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_reverse_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[&[1.0, 2.0, 3.0]]));
        let y = g.grad_reverse(x, 0.5).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[&[0.3, -0.1]]));
        let y = g.grad_reverse(x, 0.5).unwrap();
        let y2 = g.scale(y, 2.0).unwrap(); // upstream gradient [2, 2]
        let loss = g.sum(y2).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, -1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[&[0.3, -0.1]]));
        let y = g.grad_reverse(x, 0.0).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let x = g.param(t(&[&[1.0]]));
        assert!(g.grad_reverse(x, -1.0).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let w = g.param(t(&[&[1.0, 2.0]]));
        let loss = g.sum(w).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(w).unwrap().data(), &[1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.param(t(&[&[3.0, -4.0]]));
        let sq = g.square(w).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(w).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(t(&[&[1.0, 2.0]]));
        assert!(matches!(g.backward(w), Err(Error::NotScalar { rows: 1, cols: 2 })));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let w = g.param(t(&[&[1.0, 2.0]]));
        let d = g.detach(w);
        let y = g.mul(w, d).unwrap();
        let loss = g.sum(y).unwrap();
        // d/dw sum(w * stop(w)) = stop(w)
        assert_eq!(g.backward(loss).unwrap().get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0]]));
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
        let e = g.constant(Tensor::zeros(0, 3));
        assert!(g.mean(e).is_err());
    }

    #[test]
    fn inputs_precede_outputs() {
        let mut g = Graph::new();
        let a = g.param(t(&[&[1.0]]));
        let b = g.affine(a, 2.0, 1.0).unwrap();
        let c = g.mul(a, b).unwrap();
        assert!(a < b && b < c);
    }
}
